//! Scratch harness for benchmark calibration: trains the synthetic
//! benchmark variants and prints final metrics.

use ccod_core::data::{generate_synthetic_ccod, n_max_for_target_total, SynthConfig};
use ccod_core::trainer::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mu: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let sigma: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let lambda1: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let delta: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let alpha: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let rotation: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(15.0);
    let translation: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lambda3: f64 = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let lambda2: f64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let warmup: usize = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f64 = args.get(13).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let only: String = args.get(14).cloned().unwrap_or_else(|| "all".into());
    let repel: bool = args.get(15).map(|s| s == "repel").unwrap_or(false);

    let n_max = n_max_for_target_total(2000, 8, mu);
    println!("n_max for mu={mu}: {n_max}");

    let variants: Vec<(&str, Box<dyn Fn(&mut TrainConfig)>)> = vec![
        ("full", Box::new(|_c: &mut TrainConfig| {})),
        ("wo_lpb", Box::new(|c: &mut TrainConfig| c.enable_lpb = false)),
        ("wo_pda", Box::new(|c: &mut TrainConfig| c.enable_pda = false)),
        ("wo_atg", Box::new(|c: &mut TrainConfig| c.enable_atg = false)),
        ("wo_uc", Box::new(|c: &mut TrainConfig| c.enable_uc = false)),
        (
            "fixed",
            Box::new(|c: &mut TrainConfig| {
                c.threshold_mode = ccod_core::thresholds::ThresholdMode::Fixed
            }),
        ),
    ];

    for (name, tweak) in &variants {
        if only != "all" && !only.split(',').any(|f| name == &f) {
            continue;
        }
        let mut hos_sum = 0.0;
        let mut os_sum = 0.0;
        let mut unk_sum = 0.0;
        let start = Instant::now();
        for s in 0..seeds {
            let seed = 100 + s;
            let synth = SynthConfig {
                n_max,
                mu,
                seed,
                rotation_deg: rotation,
                translation,
                ..SynthConfig::default()
            };
            let (src, tgt) = generate_synthetic_ccod(&synth).unwrap();
            let mut cfg = TrainConfig {
                epochs,
                seed,
                sigma,
                lambda1,
                delta,
                alpha,
                lambda3,
                lambda2,
                warmup_epochs: warmup,
                learning_rate: lr,
                separation_mode: if repel {
                    ccod_core::thresholds::SeparationMode::Repel
                } else {
                    ccod_core::thresholds::SeparationMode::Literal
                },
                ..TrainConfig::default()
            };
            tweak(&mut cfg);
            let out = train(&cfg, &src, &tgt).unwrap();
            let last = out.metrics.last().unwrap();
            hos_sum += last.hos;
            os_sum += last.os_star;
            unk_sum += last.unk;
            if s == 0 {
                for m in out.metrics.iter().step_by(5).filter(|_| name == &"full") {
                    println!(
                        "  epoch {:3}: lpb {:.4} pda {:.4} atg {:.4} uc {:.4} os* {:.3} unk {:.3} hos {:.3}",
                        m.epoch, m.loss_lpb, m.loss_pda, m.loss_atg, m.loss_uc, m.os_star, m.unk, m.hos
                    );
                }
                // Entropy diagnostics on the final state.
                let state = &out.state;
                let gt = tgt.ground_truth().unwrap();
                let k = src.k_source() as u32;
                let mut id_h = Vec::new();
                let mut ood_h = Vec::new();
                for i in 0..tgt.len() {
                    let p = state
                        .model
                        .prototypes
                        .source_posterior(state.bank.row(i))
                        .unwrap();
                    let h = ccod_core::numeric::entropy(&p);
                    if gt[i] <= k {
                        id_h.push(h);
                    } else {
                        ood_h.push(h);
                    }
                }
                // Split the OS* loss between argmax errors and threshold
                // rejections.
                let mut id_total = 0usize;
                let mut id_argmax_ok = 0usize;
                let mut id_kept = 0usize;
                let mut id_ok_and_kept = 0usize;
                for i in 0..tgt.len() {
                    if gt[i] > k {
                        continue;
                    }
                    id_total += 1;
                    let p = state
                        .model
                        .prototypes
                        .source_posterior(state.bank.row(i))
                        .unwrap();
                    let am = ccod_core::numeric::argmax_tiebreak(&p).unwrap() as u32 + 1;
                    let ex = out.extras.last().unwrap();
                    let q = ccod_core::numeric::entropy(&p);
                    let kept = ex
                        .thresholds
                        .get(am as usize - 1)
                        .map(|o| q <= o)
                        .unwrap_or(false);
                    if am == gt[i] {
                        id_argmax_ok += 1;
                        if kept {
                            id_ok_and_kept += 1;
                        }
                    }
                    if kept {
                        id_kept += 1;
                    }
                }
                println!(
                    "  ID diag: argmax-ok {:.3} kept {:.3} both {:.3}",
                    id_argmax_ok as f64 / id_total as f64,
                    id_kept as f64 / id_total as f64,
                    id_ok_and_kept as f64 / id_total as f64
                );
                let stats = |v: &mut Vec<f64>| {
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let n = v.len();
                    (v[n / 10], v[n / 2], v[9 * n / 10])
                };
                let (a, b, c) = stats(&mut id_h);
                println!("  ID entropy  p10/p50/p90: {a:.3} {b:.3} {c:.3}");
                let (a2, b2, c2) = stats(&mut ood_h);
                println!("  OOD entropy p10/p50/p90: {a2:.3} {b2:.3} {c2:.3}");
                let ex = out.extras.last().unwrap();
                println!(
                    "  thresholds: {:?}",
                    ex.thresholds
                        .threshold
                        .iter()
                        .map(|t| (t * 1000.0).round() / 1000.0)
                        .collect::<Vec<_>>()
                );
                println!(
                    "  mean T:     {:?}",
                    ex.thresholds
                        .mean_entropy
                        .iter()
                        .map(|t| (t * 1000.0).round() / 1000.0)
                        .collect::<Vec<_>>()
                );
            }
        }
        let k = seeds as f64;
        println!(
            "{name:8} mean over {seeds} seed(s): os* {:.4} unk {:.4} hos {:.4}   ({:.1?}/run)",
            os_sum / k,
            unk_sum / k,
            hos_sum / k,
            start.elapsed() / seeds as u32
        );
    }
}

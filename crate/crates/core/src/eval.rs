//! Evaluation: per-class accuracy, OS*, UNK and their harmonic mean HOS,
//! plus the ablation runner.

use crate::data::{generate_synthetic_ccod, SynthConfig};
use crate::error::{Error, Result};
use crate::thresholds::{TargetDecision, Verdict};
use crate::trainer::{train, TrainConfig};
use rayon::prelude::*;

/// Harmonic mean of OS* and UNK; zero when the denominator vanishes.
pub fn hos(os_star: f64, unk: f64) -> f64 {
    let denom = os_star + unk;
    if denom > 0.0 {
        2.0 * os_star * unk / denom
    } else {
        0.0
    }
}

/// Evaluation summary over a target set with ground truth.
#[derive(Debug, Clone)]
pub struct MetricsSummary {
    /// Accuracy per 1-based ID class; `None` where the class has no
    /// ground-truth samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean per-class accuracy over ID classes present in the ground truth.
    pub os_star: f64,
    /// Recall of ground-truth-OOD samples; `None` when the target carries
    /// no OOD samples (HOS is then 0 and `unk_defined` is false).
    pub unk: Option<f64>,
    pub hos: f64,
    pub unk_defined: bool,
    /// (K_s + 1) x (K_s + 1) counts; row = true class (last row OOD),
    /// column = predicted class (last column OOD).
    pub confusion: Vec<Vec<usize>>,
}

/// Score decisions against ground truth. ID ground-truth labels are
/// 1..=k_source; anything larger is OOD. OOD verdicts on ID samples count
/// as misclassifications.
pub fn evaluate(
    decisions: &[TargetDecision],
    ground_truth: &[u32],
    k_source: usize,
) -> Result<MetricsSummary> {
    if decisions.len() != ground_truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} decisions but {} ground-truth labels",
            decisions.len(),
            ground_truth.len()
        )));
    }
    if let Some((i, &l)) = ground_truth.iter().enumerate().find(|(_, &l)| l < 1) {
        return Err(Error::InvalidInput(format!(
            "ground-truth label {l} at sample {i}; labels are 1-based"
        )));
    }
    let k = k_source;
    let mut confusion = vec![vec![0usize; k + 1]; k + 1];
    for (d, &gt) in decisions.iter().zip(ground_truth.iter()) {
        let row = if (gt as usize) <= k { gt as usize - 1 } else { k };
        let col = match d.verdict {
            Verdict::Id(c) => {
                if c < 1 || c as usize > k {
                    return Err(Error::InvalidInput(format!(
                        "decision class {c} out of range 1..={k}"
                    )));
                }
                c as usize - 1
            }
            Verdict::Ood => k,
        };
        confusion[row][col] += 1;
    }

    let mut per_class = Vec::with_capacity(k);
    let mut os_sum = 0.0;
    let mut os_n = 0usize;
    for c in 0..k {
        let total: usize = confusion[c].iter().sum();
        if total == 0 {
            per_class.push(None);
        } else {
            let acc = confusion[c][c] as f64 / total as f64;
            per_class.push(Some(acc));
            os_sum += acc;
            os_n += 1;
        }
    }
    let os_star = if os_n > 0 { os_sum / os_n as f64 } else { 0.0 };

    let ood_total: usize = confusion[k].iter().sum();
    let (unk, unk_defined) = if ood_total > 0 {
        (Some(confusion[k][k] as f64 / ood_total as f64), true)
    } else {
        (None, false)
    };
    let hos_value = match unk {
        Some(u) => hos(os_star, u),
        None => 0.0,
    };
    Ok(MetricsSummary {
        per_class_accuracy: per_class,
        os_star,
        unk,
        hos: hos_value,
        unk_defined,
        confusion,
    })
}

// ---------------------------------------------------------------------------
// Ablation suites.
// ---------------------------------------------------------------------------

/// Ablation protocols: each suite trains a family of config variants on
/// identical data and seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    /// full, wo_lpb, wo_pda, wo_atg, wo_uc.
    LossRemoval,
    /// fixed vs adaptive thresholds.
    ThresholdMode,
    /// Temperature sweep 0.8..1.2.
    SigmaSweep,
    /// Separation gate sweep 0.3..0.7.
    DeltaSweep,
    /// Cluster-count factor sweep 2.3..2.7.
    ClusterFactorSweep,
}

impl AblationSuite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "loss-removal" => Ok(AblationSuite::LossRemoval),
            "threshold-mode" => Ok(AblationSuite::ThresholdMode),
            "sigma-sweep" => Ok(AblationSuite::SigmaSweep),
            "delta-sweep" => Ok(AblationSuite::DeltaSweep),
            "A-sweep" | "a-sweep" => Ok(AblationSuite::ClusterFactorSweep),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation suite `{other}`; expected one of \
                 loss-removal, threshold-mode, sigma-sweep, delta-sweep, A-sweep"
            ))),
        }
    }

    /// Named config variants for this suite.
    pub fn variants(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            AblationSuite::LossRemoval => {
                let mut out = vec![("full".to_string(), base.clone())];
                for (name, toggle) in [
                    ("wo_lpb", 0usize),
                    ("wo_pda", 1),
                    ("wo_atg", 2),
                    ("wo_uc", 3),
                ] {
                    let mut cfg = base.clone();
                    match toggle {
                        0 => cfg.enable_lpb = false,
                        1 => cfg.enable_pda = false,
                        2 => cfg.enable_atg = false,
                        _ => cfg.enable_uc = false,
                    }
                    out.push((name.to_string(), cfg));
                }
                out
            }
            AblationSuite::ThresholdMode => {
                let mut fixed = base.clone();
                fixed.threshold_mode = crate::thresholds::ThresholdMode::Fixed;
                vec![
                    ("fixed".to_string(), fixed),
                    ("adaptive".to_string(), base.clone()),
                ]
            }
            AblationSuite::SigmaSweep => [0.8, 0.9, 1.0, 1.1, 1.2]
                .iter()
                .map(|&s| {
                    let mut cfg = base.clone();
                    cfg.sigma = s;
                    (format!("sigma={s}"), cfg)
                })
                .collect(),
            AblationSuite::DeltaSweep => [0.3, 0.4, 0.5, 0.6, 0.7]
                .iter()
                .map(|&d| {
                    let mut cfg = base.clone();
                    cfg.delta = d;
                    (format!("delta={d}"), cfg)
                })
                .collect(),
            AblationSuite::ClusterFactorSweep => [2.3, 2.4, 2.5, 2.6, 2.7]
                .iter()
                .map(|&f| {
                    let mut cfg = base.clone();
                    cfg.cluster_factor = f;
                    (format!("A={f}K"), cfg)
                })
                .collect(),
        }
    }
}

/// One trained variant's final metrics.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub os_star: f64,
    pub unk: f64,
    pub hos: f64,
}

/// Per-variant mean and standard deviation of HOS across seeds.
#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub variant: String,
    pub mean_hos: f64,
    pub std_hos: f64,
}

/// Train every variant of a suite with identical seeds and data; seeds are
/// `base_seed..base_seed + n_seeds`. Runs are independent, so they fan out
/// over available cores; results come back in (variant, seed) order.
pub fn run_ablation(
    suite: AblationSuite,
    base_config: &TrainConfig,
    synth: &SynthConfig,
    n_seeds: u64,
) -> Result<(Vec<AblationRow>, Vec<AblationSummary>)> {
    if n_seeds == 0 {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let variants = suite.variants(base_config);
    let jobs: Vec<(String, TrainConfig, u64)> = variants
        .iter()
        .flat_map(|(name, cfg)| {
            (0..n_seeds).map(move |s| (name.clone(), cfg.clone(), base_config.seed + s))
        })
        .collect();

    let rows: Result<Vec<AblationRow>> = jobs
        .into_par_iter()
        .map(|(variant, mut cfg, seed)| {
            cfg.seed = seed;
            let mut data_cfg = synth.clone();
            data_cfg.seed = seed;
            let (source, target) = generate_synthetic_ccod(&data_cfg)?;
            let outcome = train(&cfg, &source, &target)?;
            let last = outcome.metrics.last().ok_or_else(|| {
                Error::InvalidState("training produced no metrics rows".into())
            })?;
            Ok(AblationRow {
                variant,
                seed,
                os_star: last.os_star,
                unk: last.unk,
                hos: last.hos,
            })
        })
        .collect();
    let rows = rows?;

    let summaries = variants
        .iter()
        .map(|(name, _)| {
            let hs: Vec<f64> = rows
                .iter()
                .filter(|r| &r.variant == name)
                .map(|r| r.hos)
                .collect();
            let mean = hs.iter().sum::<f64>() / hs.len() as f64;
            let var = hs.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / hs.len() as f64;
            AblationSummary {
                variant: name.clone(),
                mean_hos: mean,
                std_hos: var.sqrt(),
            }
        })
        .collect();
    Ok((rows, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thresholds::TargetDecision;

    fn id(c: u32) -> TargetDecision {
        TargetDecision {
            verdict: Verdict::Id(c),
            entropy: 0.1,
            confidence: 0.9,
            flagged: false,
        }
    }

    fn ood() -> TargetDecision {
        TargetDecision {
            verdict: Verdict::Ood,
            entropy: 1.0,
            confidence: 0.8,
            flagged: false,
        }
    }

    #[test]
    fn hos_examples() {
        assert!((hos(0.8, 0.6) - 0.6857).abs() < 1e-4);
        for x in [0.1, 0.4, 0.9, 1.0] {
            assert!((hos(x, x) - x).abs() < 1e-12);
        }
        assert_eq!(hos(0.0, 0.0), 0.0);
    }

    #[test]
    fn perfect_decisions() {
        let decisions = vec![id(1), id(2), ood(), ood()];
        let gt = vec![1, 2, 3, 4];
        let m = evaluate(&decisions, &gt, 2).unwrap();
        assert_eq!(m.os_star, 1.0);
        assert_eq!(m.unk, Some(1.0));
        assert_eq!(m.hos, 1.0);
        let total: usize = m.confusion.iter().flatten().sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn ood_verdict_on_id_sample_counts_against_class() {
        let decisions = vec![id(1), ood(), id(2), id(2)];
        let gt = vec![1, 1, 2, 3];
        let m = evaluate(&decisions, &gt, 2).unwrap();
        assert_eq!(m.per_class_accuracy[0], Some(0.5));
        assert_eq!(m.per_class_accuracy[1], Some(1.0));
        assert!((m.os_star - 0.75).abs() < 1e-12);
        // The single OOD sample was claimed as ID(2): UNK = 0.
        assert_eq!(m.unk, Some(0.0));
        assert_eq!(m.hos, 0.0);
    }

    #[test]
    fn unk_undefined_without_ood_ground_truth() {
        let decisions = vec![id(1), id(2)];
        let gt = vec![1, 2];
        let m = evaluate(&decisions, &gt, 2).unwrap();
        assert!(!m.unk_defined);
        assert_eq!(m.unk, None);
        assert_eq!(m.hos, 0.0);
    }

    #[test]
    fn absent_id_classes_excluded_from_os_star() {
        let decisions = vec![id(1), ood()];
        let gt = vec![1, 4];
        let m = evaluate(&decisions, &gt, 3).unwrap();
        assert_eq!(m.per_class_accuracy[1], None);
        assert_eq!(m.per_class_accuracy[2], None);
        assert_eq!(m.os_star, 1.0);
    }

    #[test]
    fn permutation_invariant() {
        let decisions = vec![id(1), ood(), id(2), ood(), id(1)];
        let gt = vec![1, 3, 2, 2, 1];
        let a = evaluate(&decisions, &gt, 2).unwrap();
        let perm = [4, 2, 0, 3, 1];
        let d2: Vec<TargetDecision> = perm.iter().map(|&i| decisions[i].clone()).collect();
        let g2: Vec<u32> = perm.iter().map(|&i| gt[i]).collect();
        let b = evaluate(&d2, &g2, 2).unwrap();
        assert_eq!(a.os_star, b.os_star);
        assert_eq!(a.unk, b.unk);
        assert_eq!(a.hos, b.hos);
        assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn hos_bounds() {
        let mut rng = crate::rng::stream_rng(2, "hos-bounds");
        use rand::Rng;
        for _ in 0..200 {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            let h = hos(a, b);
            assert!(h <= 2.0 * a.min(b) + 1e-12);
            assert!(h <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn suite_variant_counts() {
        let base = TrainConfig::default();
        assert_eq!(AblationSuite::LossRemoval.variants(&base).len(), 5);
        assert_eq!(AblationSuite::ThresholdMode.variants(&base).len(), 2);
        assert_eq!(AblationSuite::SigmaSweep.variants(&base).len(), 5);
        assert_eq!(AblationSuite::DeltaSweep.variants(&base).len(), 5);
        assert_eq!(AblationSuite::ClusterFactorSweep.variants(&base).len(), 5);
        assert!(AblationSuite::parse("nope").is_err());
    }
}

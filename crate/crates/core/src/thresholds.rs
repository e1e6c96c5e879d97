//! Adaptive threshold generation: pseudo-class partitioning, class-wise
//! mean entropies, per-class entropy thresholds, the ID/OOD decision rule
//! and the entropy separation loss.

use crate::error::{Error, Result};
use crate::numeric::{argmax_tiebreak, entropy, entropy_grad_wrt_p};
use crate::prototypes::{LossGrads, PrototypeBank};
use serde::{Deserialize, Serialize};

/// How per-class thresholds are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Per-class thresholds from class mean entropies.
    Adaptive,
    /// One constant ln(K)/2 for every class.
    Fixed,
}

/// Reading of the threshold formula. The literal form is nonpositive over
/// the whole entropy range, which flags every sample OOD; the corrected
/// form negates it, giving positive thresholds that decrease with class
/// mean entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdFormula {
    Corrected,
    Literal,
}

/// Direction of the separation penalty outside the confidence gate:
/// `Literal` pulls a sample's entropy toward its class threshold,
/// `Repel` pushes it away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparationMode {
    Literal,
    Repel,
}

/// Per-target pseudo-class assignment: each sample goes to the argmax of
/// its K_s-way posterior. The member sets partition all target indices.
#[derive(Debug, Clone)]
pub struct PseudoClassTable {
    /// 1-based class per target index.
    assignment: Vec<u32>,
    members: Vec<Vec<usize>>,
}

impl PseudoClassTable {
    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn members(&self, class_index: usize) -> &[usize] {
        &self.members[class_index]
    }

    pub fn k_source(&self) -> usize {
        self.members.len()
    }
}

pub fn assign_pseudo_classes(posteriors: &[Vec<f64>], k_source: usize) -> Result<PseudoClassTable> {
    let mut assignment = Vec::with_capacity(posteriors.len());
    let mut members = vec![Vec::new(); k_source];
    for (i, p) in posteriors.iter().enumerate() {
        if p.len() != k_source {
            return Err(Error::InvalidInput(format!(
                "posterior {i} has {} entries, expected {k_source}",
                p.len()
            )));
        }
        let c = argmax_tiebreak(p)?;
        assignment.push(c as u32 + 1);
        members[c].push(i);
    }
    Ok(PseudoClassTable {
        assignment,
        members,
    })
}

/// Mean posterior entropy per pseudo-class. Empty classes come back as
/// `None` and are skipped by the threshold formula's min/max.
pub fn class_mean_entropy(table: &PseudoClassTable, posteriors: &[Vec<f64>]) -> Vec<Option<f64>> {
    (0..table.k_source())
        .map(|c| {
            let members = table.members(c);
            if members.is_empty() {
                None
            } else {
                Some(
                    members.iter().map(|&i| entropy(&posteriors[i])).sum::<f64>()
                        / members.len() as f64,
                )
            }
        })
        .collect()
}

/// Per-class adaptive entropy thresholds.
#[derive(Debug, Clone)]
pub struct ThresholdTable {
    pub mean_entropy: Vec<f64>,
    pub threshold: Vec<f64>,
    pub defined: Vec<bool>,
    pub alpha: f64,
}

impl ThresholdTable {
    /// Thresholds o_c = alpha * (max T + min T - T_c) / (max T - min T) * ln K
    /// (corrected form), or its negation (literal form). When every defined
    /// mean entropy is equal the table degenerates to alpha * ln K.
    pub fn adaptive(
        mean_entropy: &[Option<f64>],
        alpha: f64,
        k_source: usize,
        formula: ThresholdFormula,
    ) -> Result<Self> {
        if mean_entropy.len() != k_source {
            return Err(Error::InvalidInput(format!(
                "{} mean entropies for {k_source} classes",
                mean_entropy.len()
            )));
        }
        let defined_vals: Vec<f64> = mean_entropy.iter().filter_map(|&t| t).collect();
        if defined_vals.is_empty() {
            return Err(Error::InvalidState(
                "no pseudo-class has any member; thresholds undefined".into(),
            ));
        }
        let max = defined_vals.iter().cloned().fold(f64::MIN, f64::max);
        let min = defined_vals.iter().cloned().fold(f64::MAX, f64::min);
        let ln_k = (k_source as f64).ln();
        let sign = match formula {
            ThresholdFormula::Corrected => 1.0,
            ThresholdFormula::Literal => -1.0,
        };
        let mut threshold = vec![0.0; k_source];
        let mut defined = vec![false; k_source];
        let mut means = vec![f64::NAN; k_source];
        for c in 0..k_source {
            if let Some(t) = mean_entropy[c] {
                means[c] = t;
                defined[c] = true;
                threshold[c] = if max > min {
                    sign * alpha * (max + min - t) / (max - min) * ln_k
                } else {
                    sign * alpha * ln_k
                };
            }
        }
        Ok(ThresholdTable {
            mean_entropy: means,
            threshold,
            defined,
            alpha,
        })
    }

    /// Constant threshold ln(K)/2 for every class.
    pub fn fixed(k_source: usize) -> Self {
        let o = (k_source as f64).ln() / 2.0;
        ThresholdTable {
            mean_entropy: vec![f64::NAN; k_source],
            threshold: vec![o; k_source],
            defined: vec![true; k_source],
            alpha: f64::NAN,
        }
    }

    pub fn k_source(&self) -> usize {
        self.threshold.len()
    }

    /// Threshold for a 0-based class index, if that class had members.
    pub fn get(&self, class_index: usize) -> Option<f64> {
        if self.defined[class_index] {
            Some(self.threshold[class_index])
        } else {
            None
        }
    }
}

/// Verdict for one target sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    /// In-distribution with a 1-based source class.
    Id(u32),
    Ood,
}

/// Per-sample decision: verdict, posterior entropy and a confidence score
/// in [0,1] (max posterior probability for ID; entropy / ln K for OOD).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDecision {
    pub verdict: Verdict,
    pub entropy: f64,
    pub confidence: f64,
    /// Set when the argmax class had no threshold (empty pseudo-class);
    /// such samples default to OOD.
    pub flagged: bool,
}

impl TargetDecision {
    pub fn is_ood(&self) -> bool {
        matches!(self.verdict, Verdict::Ood)
    }
}

/// Shared confidence rule: ID samples score their top posterior
/// probability, OOD samples their normalized entropy.
pub fn confidence_for(is_ood: bool, max_posterior: f64, entropy: f64, k_source: usize) -> f64 {
    if is_ood {
        (entropy / (k_source as f64).ln()).clamp(0.0, 1.0)
    } else {
        max_posterior
    }
}

/// Apply the decision rule: ID with the argmax class when the posterior
/// entropy is at or below that class's threshold, OOD otherwise.
pub fn decide(posterior: &[f64], table: &ThresholdTable) -> Result<TargetDecision> {
    let k = table.k_source();
    if posterior.len() != k {
        return Err(Error::InvalidInput(format!(
            "posterior has {} entries, threshold table has {k}",
            posterior.len()
        )));
    }
    let c = argmax_tiebreak(posterior)?;
    let q = entropy(posterior);
    match table.get(c) {
        Some(o) => {
            let id = q <= o;
            Ok(TargetDecision {
                verdict: if id {
                    Verdict::Id(c as u32 + 1)
                } else {
                    Verdict::Ood
                },
                entropy: q,
                confidence: confidence_for(!id, posterior[c], q, k),
                flagged: false,
            })
        }
        None => Ok(TargetDecision {
            verdict: Verdict::Ood,
            entropy: q,
            confidence: confidence_for(true, posterior[c], q, k),
            flagged: true,
        }),
    }
}

/// Per-sample separation penalty: with e = (threshold - entropy)^2, gated
/// to zero when e < delta; beyond the gate the literal mode contributes e
/// (pulling entropy toward the threshold) and the repel mode -e.
pub fn atg_penalty(q: f64, threshold: f64, delta: f64, mode: SeparationMode) -> f64 {
    let e = (threshold - q) * (threshold - q);
    if e < delta {
        0.0
    } else {
        match mode {
            SeparationMode::Literal => e,
            SeparationMode::Repel => -e,
        }
    }
}

/// Entropy separation loss over a target batch, averaged over the batch.
/// Thresholds are constants with respect to gradients; samples whose
/// argmax class has no threshold contribute zero.
pub fn atg_loss(
    protos: &PrototypeBank,
    features: &[Vec<f64>],
    table: &ThresholdTable,
    delta: f64,
    mode: SeparationMode,
) -> Result<LossGrads> {
    if features.is_empty() {
        return Err(Error::InvalidInput("empty target batch".into()));
    }
    let k = protos.k_source();
    if table.k_source() != k {
        return Err(Error::InvalidInput(format!(
            "threshold table for {} classes, prototypes for {k}",
            table.k_source()
        )));
    }
    let dim = protos.dim();
    let scale = 1.0 / features.len() as f64;
    let mut out = LossGrads::zeros(features.len(), dim, k);
    for (i, x) in features.iter().enumerate() {
        let p = protos.source_posterior(x)?;
        let c = argmax_tiebreak(&p)?;
        let Some(o) = table.get(c) else {
            continue;
        };
        let q = entropy(&p);
        let e = (o - q) * (o - q);
        if e < delta {
            continue;
        }
        let sign = match mode {
            SeparationMode::Literal => 1.0,
            SeparationMode::Repel => -1.0,
        };
        out.loss += sign * scale * e;
        // d(e)/dq = 2 (q - o); chain through the entropy and the softmax.
        let dq = sign * scale * 2.0 * (q - o);
        let mut inner = 0.0;
        for &pm in &p {
            if pm > 0.0 {
                inner += pm * entropy_grad_wrt_p(pm);
            }
        }
        for (ci, &pc) in p.iter().enumerate() {
            if pc <= 0.0 {
                continue;
            }
            let dz = dq * pc * (entropy_grad_wrt_p(pc) - inner) / protos.sigma;
            if dz == 0.0 {
                continue;
            }
            let proto = protos.prototype(ci);
            let fg = &mut out.feature_grads[i];
            for j in 0..dim {
                fg[j] += dz * proto[j];
            }
            let pg = &mut out.prototype_grads[ci * dim..(ci + 1) * dim];
            for j in 0..dim {
                pg[j] += dz * x[j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::grad_check;
    use crate::numeric::l2_normalize;
    use rand::Rng;

    #[test]
    fn pseudo_class_assignment() {
        let posts = vec![
            vec![0.0, 1.0, 0.0],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.2, 0.3, 0.5],
        ];
        let t = assign_pseudo_classes(&posts, 3).unwrap();
        assert_eq!(t.assignment(), &[2, 1, 3]);
        let total: usize = (0..3).map(|c| t.members(c).len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn mean_entropy_handles_empty_classes() {
        // All samples argmax to class 1; classes 2 and 3 stay empty.
        let posts = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.4, 0.3, 0.3],
            vec![0.9, 0.05, 0.05],
        ];
        let t = assign_pseudo_classes(&posts, 3).unwrap();
        let means = class_mean_entropy(&t, &posts);
        assert!(means[1].is_none());
        assert!(means[2].is_none());
        let expect = (entropy(&posts[0]) + entropy(&posts[1]) + entropy(&posts[2])) / 3.0;
        assert!((means[0].unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mean_entropy_is_arithmetic_mean() {
        // Two members with entropies 0.2 and 0.6 -> 0.4. Two-class
        // posteriors with those entropies are found by bisection.
        let p_for = |target: f64| -> Vec<f64> {
            let mut lo = 0.5;
            let mut hi = 1.0 - 1e-12;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if entropy(&[mid, 1.0 - mid]) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            vec![lo, 1.0 - lo]
        };
        let posts = vec![p_for(0.2), p_for(0.6)];
        let t = assign_pseudo_classes(&posts, 2).unwrap();
        let means = class_mean_entropy(&t, &posts);
        assert!((means[0].unwrap() - 0.4).abs() < 1e-9);
    }

    #[test]
    fn adaptive_threshold_example() {
        let means = vec![Some(0.3), Some(0.9), Some(0.6)];
        let t = ThresholdTable::adaptive(&means, 0.15, 3, ThresholdFormula::Corrected).unwrap();
        assert!((t.threshold[0] - 0.2472).abs() < 1e-4);
        assert!((t.threshold[1] - 0.0824).abs() < 1e-4);
        assert!((t.threshold[2] - 0.1648).abs() < 1e-4);
    }

    #[test]
    fn degenerate_equal_means() {
        let means = vec![Some(0.4), Some(0.4)];
        let t = ThresholdTable::adaptive(&means, 0.15, 2, ThresholdFormula::Corrected).unwrap();
        for c in 0..2 {
            assert!((t.threshold[c] - 0.15 * 2.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholds_decrease_with_mean_entropy() {
        let means = vec![Some(0.2), Some(0.5), Some(0.8), Some(0.35)];
        let t = ThresholdTable::adaptive(&means, 0.15, 4, ThresholdFormula::Corrected).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if means[i].unwrap() < means[j].unwrap() {
                    assert!(t.threshold[i] > t.threshold[j]);
                }
            }
        }
    }

    #[test]
    fn literal_formula_is_negated() {
        let means = vec![Some(0.3), Some(0.9)];
        let c = ThresholdTable::adaptive(&means, 0.15, 2, ThresholdFormula::Corrected).unwrap();
        let l = ThresholdTable::adaptive(&means, 0.15, 2, ThresholdFormula::Literal).unwrap();
        for i in 0..2 {
            assert!((c.threshold[i] + l.threshold[i]).abs() < 1e-12);
            assert!(l.threshold[i] <= 0.0);
        }
    }

    #[test]
    fn all_undefined_errors() {
        assert!(
            ThresholdTable::adaptive(&[None, None], 0.15, 2, ThresholdFormula::Corrected).is_err()
        );
    }

    #[test]
    fn decide_id_case() {
        let means = vec![Some(0.3), Some(0.9), Some(0.6)];
        let t = ThresholdTable::adaptive(&means, 0.15, 3, ThresholdFormula::Corrected).unwrap();
        let d = decide(&[0.98, 0.01, 0.01], &t).unwrap();
        assert_eq!(d.verdict, Verdict::Id(1));
        assert!((d.entropy - 0.1119).abs() < 1e-3);
        assert!((d.confidence - 0.98).abs() < 1e-12);
        assert!(!d.flagged);
    }

    #[test]
    fn decide_ood_case() {
        let means = vec![Some(0.3), Some(0.9), Some(0.6)];
        let t = ThresholdTable::adaptive(&means, 0.15, 3, ThresholdFormula::Corrected).unwrap();
        let u = 1.0 / 3.0;
        let d = decide(&[u, u, u], &t).unwrap();
        assert_eq!(d.verdict, Verdict::Ood);
        assert!((d.confidence - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decide_boundary_is_id() {
        // Entropy exactly at the threshold stays ID.
        let t = ThresholdTable {
            mean_entropy: vec![0.0, 0.0],
            threshold: vec![entropy(&[0.9, 0.1]), 0.5],
            defined: vec![true, true],
            alpha: 0.15,
        };
        let d = decide(&[0.9, 0.1], &t).unwrap();
        assert_eq!(d.verdict, Verdict::Id(1));
    }

    #[test]
    fn decide_undefined_threshold_flags_ood() {
        let t = ThresholdTable {
            mean_entropy: vec![0.2, f64::NAN],
            threshold: vec![0.3, 0.0],
            defined: vec![true, false],
            alpha: 0.15,
        };
        let d = decide(&[0.1, 0.9], &t).unwrap();
        assert_eq!(d.verdict, Verdict::Ood);
        assert!(d.flagged);
    }

    #[test]
    fn fixed_table_constant() {
        let t = ThresholdTable::fixed(5);
        for c in 0..5 {
            assert!((t.get(c).unwrap() - 5.0f64.ln() / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_gate_examples() {
        assert_eq!(atg_penalty(0.7, 0.7, 0.5, SeparationMode::Literal), 0.0);
        assert!((atg_penalty(1.2, 0.2, 0.5, SeparationMode::Literal) - 1.0).abs() < 1e-12);
        assert_eq!(atg_penalty(0.9, 0.2, 0.5, SeparationMode::Literal), 0.0);
        assert!((atg_penalty(1.2, 0.2, 0.5, SeparationMode::Repel) + 1.0).abs() < 1e-12);
    }

    fn toy_protos(sigma: f64) -> PrototypeBank {
        let rows = [
            l2_normalize(&[1.0, 0.2, -0.1, 0.4]).0,
            l2_normalize(&[-0.3, 1.0, 0.2, -0.2]).0,
            l2_normalize(&[0.1, -0.4, 1.0, 0.3]).0,
        ];
        let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
        PrototypeBank::from_rows(flat, 4, 3, sigma).unwrap()
    }

    #[test]
    fn atg_loss_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream_rng(13, "atg-fd");
        let protos = toy_protos(0.6);
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                l2_normalize(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).0
            })
            .collect();
        // Tight thresholds so most samples clear the gate.
        let table = ThresholdTable {
            mean_entropy: vec![0.1, 0.2, 0.3],
            threshold: vec![0.05, 0.06, 0.04],
            defined: vec![true, true, true],
            alpha: 0.15,
        };
        let delta = 0.05;
        let out = atg_loss(&protos, &feats, &table, delta, SeparationMode::Literal).unwrap();
        assert!(out.loss > 0.0, "gate never active; pick another seed");

        let mut flat = protos.as_flat().to_vec();
        let feats2 = feats.clone();
        let table2 = table.clone();
        let loss_of = |m: &[f64]| {
            let b = PrototypeBank::from_rows(m.to_vec(), 4, 3, 0.6).unwrap();
            atg_loss(&b, &feats2, &table2, delta, SeparationMode::Literal)
                .unwrap()
                .loss
        };
        let report = grad_check(loss_of, &mut flat, &out.prototype_grads, 1e-5, 12, 6);
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);

        let mut f0 = feats[0].clone();
        let protos3 = protos.clone();
        let feats3 = feats.clone();
        let table3 = table.clone();
        let loss_of_f = |f: &[f64]| {
            let mut fs = feats3.clone();
            fs[0] = f.to_vec();
            atg_loss(&protos3, &fs, &table3, delta, SeparationMode::Literal)
                .unwrap()
                .loss
        };
        let report = grad_check(loss_of_f, &mut f0, &out.feature_grads[0], 1e-5, 4, 7);
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn recomputing_thresholds_keeps_decisions() {
        let means = vec![Some(0.25), Some(0.65), Some(0.45)];
        let a = ThresholdTable::adaptive(&means, 0.15, 3, ThresholdFormula::Corrected).unwrap();
        let b = ThresholdTable::adaptive(&means, 0.15, 3, ThresholdFormula::Corrected).unwrap();
        let mut rng = crate::rng::stream_rng(1, "decide-pure");
        for _ in 0..50 {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            assert_eq!(decide(&p, &a).unwrap(), decide(&p, &b).unwrap());
        }
    }
}

//! Uncertainty-aware target clustering: seeded k-means over the memory
//! bank, cosine cluster assignment, confidence-weighted pair weights and
//! the weighted symmetric-KL alignment loss.

use crate::alignment::MemoryBank;
use crate::error::{Error, Result};
use crate::numeric::{
    argmax_tiebreak, cosine_similarity, l2_normalize, safe_ln, softmax_backward_into,
    symmetric_kl, symmetric_kl_grads, PROB_EPSILON,
};
use crate::prototypes::{LossGrads, PrototypeBank};
use crate::rng::stream_rng;
use crate::thresholds::{TargetDecision, Verdict};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Pairwise loss used between matched samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLoss {
    /// Symmetric KL divergence between the two posteriors.
    Kl,
    /// Cross-entropy of each posterior against the argmax one-hot of the
    /// other, symmetrized.
    Ce,
}

/// Unit-norm cluster centers, rows of an `a x dim` matrix.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    centers: Vec<f64>,
    a: usize,
    dim: usize,
}

impl ClusterSet {
    pub fn from_rows(centers: Vec<f64>, a: usize, dim: usize) -> Result<Self> {
        if centers.len() != a * dim {
            return Err(Error::InvalidInput(format!(
                "cluster matrix has {} entries, expected {}",
                centers.len(),
                a * dim
            )));
        }
        Ok(ClusterSet { centers, a, dim })
    }

    pub fn count(&self) -> usize {
        self.a
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.centers
    }

    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.a)
            .map(|i| {
                let n: f64 = self.center(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Seeded k-means over the initialized bank rows: k-means++ start, Lloyd
/// iterations on Euclidean distance, centers renormalized to unit length
/// after every refit, empty clusters re-seeded to the farthest point.
/// Stops when no center moves more than 1e-6, or after 100 iterations.
pub fn kmeans(bank: &MemoryBank, a: usize, seed: u64) -> Result<ClusterSet> {
    let rows: Vec<usize> = (0..bank.len()).filter(|&j| bank.is_initialized(j)).collect();
    let n = rows.len();
    let dim = bank.dim();
    if n < a {
        return Err(Error::InvalidConfig(format!(
            "k-means needs at least as many points ({n}) as clusters ({a})"
        )));
    }
    if a == 0 {
        return Err(Error::InvalidConfig("cluster count must be positive".into()));
    }
    let mut rng = stream_rng(seed, "kmeans");

    // k-means++ seeding.
    let mut centers: Vec<f64> = Vec::with_capacity(a * dim);
    let first = rows[rng.gen_range(0..n)];
    centers.extend_from_slice(bank.row(first));
    let mut min_d2: Vec<f64> = rows.iter().map(|&j| sq_dist(bank.row(j), &centers[0..dim])).collect();
    while centers.len() < a * dim {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            // All remaining points coincide with a center.
            rng.gen_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(bank.row(rows[pick]));
        let new_center = centers[start..start + dim].to_vec();
        for (i, &j) in rows.iter().enumerate() {
            let d = sq_dist(bank.row(j), &new_center);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..100 {
        // Assignment step: nearest center, smallest index on ties.
        for (i, &j) in rows.iter().enumerate() {
            let x = bank.row(j);
            let mut best = 0;
            let mut best_d = sq_dist(x, &centers[0..dim]);
            for c in 1..a {
                let d = sq_dist(x, &centers[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }

        // Refit step: means, then empty-cluster reseeding, then unit norm.
        let mut sums = vec![0.0; a * dim];
        let mut counts = vec![0usize; a];
        for (i, &j) in rows.iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            let x = bank.row(j);
            let s = &mut sums[c * dim..(c + 1) * dim];
            for (si, xi) in s.iter_mut().zip(x.iter()) {
                *si += xi;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..a {
            let target = &mut sums[c * dim..(c + 1) * dim];
            if counts[c] == 0 {
                // Re-seed to the farthest unclaimed point from its center.
                let mut far = None;
                let mut far_d = -1.0;
                for (i, &j) in rows.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    let cur = assignment[i];
                    let d = sq_dist(bank.row(j), &centers[cur * dim..(cur + 1) * dim]);
                    if d > far_d {
                        far_d = d;
                        far = Some(i);
                    }
                }
                let i = far.expect("n >= a leaves a point to reseed with");
                taken[i] = true;
                target.copy_from_slice(bank.row(rows[i]));
            } else {
                for s in target.iter_mut() {
                    *s /= counts[c] as f64;
                }
            }
            let (unit, zero) = l2_normalize(target);
            if zero {
                // Mean cancelled exactly; fall back to the first member.
                let i = assignment.iter().position(|&x| x == c).unwrap();
                target.copy_from_slice(bank.row(rows[i]));
            } else {
                target.copy_from_slice(&unit);
            }
        }

        let movement = centers
            .chunks(dim)
            .zip(sums.chunks(dim))
            .map(|(old, new)| sq_dist(old, new).sqrt())
            .fold(0.0, f64::max);
        centers.copy_from_slice(&sums);
        if movement < 1e-6 {
            break;
        }
    }

    ClusterSet::from_rows(centers, a, dim)
}

/// Index of the center with the highest cosine similarity to the feature;
/// ties break to the smallest index.
pub fn assign_cluster(clusters: &ClusterSet, feature: &[f64]) -> Result<usize> {
    let sims: Vec<f64> = (0..clusters.count())
        .map(|i| cosine_similarity(clusters.center(i), feature))
        .collect::<Result<_>>()?;
    argmax_tiebreak(&sims)
}

/// Weight of a sample pair: zero unless both are ID with the same class or
/// both OOD in the same cluster; otherwise the mean of the two confidence
/// scores.
pub fn pair_weight(
    dec_i: &TargetDecision,
    dec_j: &TargetDecision,
    cluster_i: usize,
    cluster_j: usize,
) -> f64 {
    let matched = match (dec_i.verdict, dec_j.verdict) {
        (Verdict::Id(a), Verdict::Id(b)) => a == b,
        (Verdict::Ood, Verdict::Ood) => cluster_i == cluster_j,
        _ => false,
    };
    if matched {
        0.5 * (dec_i.confidence + dec_j.confidence)
    } else {
        0.0
    }
}

/// Pairwise clustering loss over a target batch:
/// (1/|B|) * sum over unordered pairs of m_ij * L(p_i, p_j), with the pair
/// weights held constant and gradients flowing through both posteriors.
pub fn uc_loss(
    protos: &PrototypeBank,
    features: &[Vec<f64>],
    weights: &[Vec<f64>],
    variant: PairLoss,
) -> Result<LossGrads> {
    let nb = features.len();
    if weights.len() != nb || weights.iter().any(|r| r.len() != nb) {
        return Err(Error::InvalidInput(format!(
            "pair weight matrix must be {nb} x {nb}"
        )));
    }
    let dim = protos.dim();
    let k = protos.k_source();
    let scale = 1.0 / nb as f64;
    let mut out = LossGrads::zeros(nb, dim, k);
    if nb < 2 {
        return Ok(out);
    }
    let posteriors: Vec<Vec<f64>> = features
        .iter()
        .map(|x| protos.source_posterior(x))
        .collect::<Result<_>>()?;

    // dL/d(logit) accumulated per sample, then mapped back onto features
    // and prototypes once.
    let mut dz = vec![vec![0.0; k]; nb];
    let mut dp = vec![0.0; k];
    let mut dq = vec![0.0; k];

    for i in 0..nb {
        for j in (i + 1)..nb {
            let w = weights[i][j];
            if w == 0.0 {
                continue;
            }
            let (p, q) = (&posteriors[i], &posteriors[j]);
            match variant {
                PairLoss::Kl => {
                    out.loss += scale * w * symmetric_kl(p, q)?;
                    symmetric_kl_grads(p, q, &mut dp, &mut dq);
                }
                PairLoss::Ce => {
                    let ti = argmax_tiebreak(q)?;
                    let tj = argmax_tiebreak(p)?;
                    out.loss += scale * w * 0.5 * (-safe_ln(p[ti]) - safe_ln(q[tj]));
                    for m in 0..k {
                        dp[m] = 0.0;
                        dq[m] = 0.0;
                    }
                    if p[ti] >= PROB_EPSILON {
                        dp[ti] = -0.5 / p[ti];
                    }
                    if q[tj] >= PROB_EPSILON {
                        dq[tj] = -0.5 / q[tj];
                    }
                }
            }
            let sw = scale * w;
            for m in 0..k {
                dp[m] *= sw;
                dq[m] *= sw;
            }
            softmax_backward_into(p, &dp, &mut dz[i]);
            softmax_backward_into(q, &dq, &mut dz[j]);
        }
    }

    for (i, x) in features.iter().enumerate() {
        for c in 0..k {
            let g = dz[i][c] / protos.sigma;
            if g == 0.0 {
                continue;
            }
            let proto = protos.prototype(c);
            let fg = &mut out.feature_grads[i];
            for d in 0..dim {
                fg[d] += g * proto[d];
            }
            let pg = &mut out.prototype_grads[c * dim..(c + 1) * dim];
            for d in 0..dim {
                pg[d] += g * x[d];
            }
        }
    }
    Ok(out)
}

/// Build the symmetric pair-weight matrix for a batch from per-sample
/// decisions and cluster assignments.
pub fn pair_weight_matrix(
    decisions: &[&TargetDecision],
    clusters: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let n = decisions.len();
    if clusters.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} decisions but {} cluster assignments",
            clusters.len()
        )));
    }
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = pair_weight(decisions[i], decisions[j], clusters[i], clusters[j]);
            w[i][j] = v;
            w[j][i] = v;
        }
    }
    Ok(w)
}

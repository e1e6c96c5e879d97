//! Prototype-guided domain alignment: a memory bank of cached unit-norm
//! target features, the cross-domain representation [bank rows, prototypes],
//! and the neighborhood entropy loss over it.

use crate::error::{Error, Result};
use crate::numeric::{dot, entropy_grad_wrt_p, safe_ln};
use crate::prototypes::{LossGrads, PrototypeBank};

/// Row store of unit-norm target features. Row `j` permanently corresponds
/// to target sample `j`. Rows are uninitialized until first written and are
/// excluded from posterior supports while uninitialized.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    data: Vec<f64>, // row-major, n x dim
    n: usize,
    dim: usize,
    initialized: Vec<bool>,
    staleness: Vec<u32>,
}

impl MemoryBank {
    pub fn new(n: usize, dim: usize) -> Self {
        MemoryBank {
            data: vec![0.0; n * dim],
            n,
            dim,
            initialized: vec![false; n],
            staleness: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn is_initialized(&self, j: usize) -> bool {
        self.initialized[j]
    }

    pub fn initialized_count(&self) -> usize {
        self.initialized.iter().filter(|&&b| b).count()
    }

    pub fn staleness(&self, j: usize) -> u32 {
        self.staleness[j]
    }

    /// Age every row by one refresh period.
    pub fn tick(&mut self) {
        for s in &mut self.staleness {
            *s = s.saturating_add(1);
        }
    }

    /// Replace row `j` with a new unit-norm feature (direct replacement,
    /// no momentum) and reset its staleness.
    pub fn update(&mut self, j: usize, feature: &[f64]) -> Result<()> {
        if j >= self.n {
            return Err(Error::InvalidInput(format!(
                "bank index {j} out of range 0..{}",
                self.n
            )));
        }
        if feature.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "bank row dim {} != expected {}",
                feature.len(),
                self.dim
            )));
        }
        let norm: f64 = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "bank rows must be unit-norm; got norm {norm}"
            )));
        }
        self.data[j * self.dim..(j + 1) * self.dim].copy_from_slice(feature);
        self.initialized[j] = true;
        self.staleness[j] = 0;
        Ok(())
    }

    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.n)
            .filter(|&j| self.initialized[j])
            .map(|j| {
                let n: f64 = self.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn rows_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    /// Restore the full bank from checkpoint tensors.
    pub fn restore(&mut self, rows: &[f64], initialized: &[f64], staleness: &[f64]) -> Result<()> {
        if rows.len() != self.data.len()
            || initialized.len() != self.n
            || staleness.len() != self.n
        {
            return Err(Error::InvalidInput(format!(
                "bank restore shape mismatch for {} rows of dim {}",
                self.n, self.dim
            )));
        }
        self.data.copy_from_slice(rows);
        for j in 0..self.n {
            self.initialized[j] = initialized[j] != 0.0;
            self.staleness[j] = staleness[j] as u32;
        }
        Ok(())
    }
}

/// Posterior of one target sample over the cross-domain support: all bank
/// rows except the sample's own slot, then every prototype. Uninitialized
/// rows are excluded (zero probability) and counted.
#[derive(Debug, Clone)]
pub struct PdaPosterior {
    /// Length `bank.len() - 1 + prototypes.k_source()`; bank rows first
    /// (own slot removed), prototypes after.
    pub probs: Vec<f64>,
    pub excluded_rows: usize,
}

fn support_logits(
    bank: &MemoryBank,
    protos: &PrototypeBank,
    sample_index: usize,
    feature: &[f64],
    logits: &mut Vec<f64>,
) -> Result<usize> {
    if sample_index >= bank.len() {
        return Err(Error::InvalidInput(format!(
            "sample index {sample_index} out of range for bank of {}",
            bank.len()
        )));
    }
    let dim = bank.dim();
    logits.clear();
    let mut excluded = 0;
    for j in 0..bank.len() {
        if j == sample_index {
            continue;
        }
        if bank.is_initialized(j) {
            logits.push(dot(bank.row(j), feature));
        } else {
            excluded += 1;
            logits.push(f64::NEG_INFINITY);
        }
    }
    for c in 0..protos.k_source() {
        logits.push(dot(protos.prototype(c), feature));
    }
    debug_assert_eq!(logits.len(), bank.len() - 1 + protos.k_source());
    debug_assert_eq!(feature.len(), dim);
    Ok(excluded)
}

/// Softmax with temperature over logits that may contain -inf markers.
fn masked_softmax(logits: &[f64], sigma: f64, out: &mut Vec<f64>) -> Result<()> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidState(
            "posterior support is empty: every bank row is uninitialized".into(),
        ));
    }
    out.clear();
    let mut sum = 0.0;
    for &z in logits {
        let e = if z == f64::NEG_INFINITY {
            0.0
        } else {
            ((z - max) / sigma).exp()
        };
        out.push(e);
        sum += e;
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
    Ok(())
}

pub fn pda_posterior(
    bank: &MemoryBank,
    protos: &PrototypeBank,
    sample_index: usize,
    feature: &[f64],
) -> Result<PdaPosterior> {
    let mut logits = Vec::new();
    let excluded = support_logits(bank, protos, sample_index, feature, &mut logits)?;
    let mut probs = Vec::new();
    masked_softmax(&logits, protos.sigma, &mut probs)?;
    Ok(PdaPosterior {
        probs,
        excluded_rows: excluded,
    })
}

/// Neighborhood entropy loss over the cross-domain support, averaged with
/// the 1/(|B|(N + K)) factor. Gradients flow to the batch features and the
/// prototype columns; cached bank rows are constants.
pub fn pda_loss(
    bank: &MemoryBank,
    protos: &PrototypeBank,
    indices: &[usize],
    features: &[Vec<f64>],
) -> Result<LossGrads> {
    if indices.len() != features.len() {
        return Err(Error::InvalidInput(format!(
            "{} indices but {} features",
            indices.len(),
            features.len()
        )));
    }
    let dim = protos.dim();
    let k = protos.k_source();
    let n_bank = bank.len();
    let scale = 1.0 / (indices.len() as f64 * (n_bank + k) as f64);
    let sigma = protos.sigma;
    let mut out = LossGrads::zeros(features.len(), dim, k);
    let mut logits: Vec<f64> = Vec::new();
    let mut probs: Vec<f64> = Vec::new();
    let mut dz: Vec<f64> = Vec::new();

    for (bi, (&idx, x)) in indices.iter().zip(features.iter()).enumerate() {
        support_logits(bank, protos, idx, x, &mut logits)?;
        masked_softmax(&logits, sigma, &mut probs)?;

        // Entropy of the posterior and d(entropy)/d(logit) in one pass:
        // dH/dz_k = p_k (dH/dp_k - sum_m p_m dH/dp_m).
        let mut h = 0.0;
        let mut inner = 0.0;
        for &p in &probs {
            if p > 0.0 {
                h -= p * safe_ln(p);
                inner += p * entropy_grad_wrt_p(p);
            }
        }
        out.loss += scale * h;

        dz.clear();
        for &p in &probs {
            let g = if p > 0.0 {
                p * (entropy_grad_wrt_p(p) - inner)
            } else {
                0.0
            };
            dz.push(scale * g / sigma);
        }

        // dz/dx = support column; accumulate into the feature gradient.
        let fg = &mut out.feature_grads[bi];
        let mut pos = 0;
        for j in 0..n_bank {
            if j == idx {
                continue;
            }
            let c = dz[pos];
            if c != 0.0 {
                let row = bank.row(j);
                for (g, r) in fg.iter_mut().zip(row.iter()) {
                    *g += c * r;
                }
            }
            pos += 1;
        }
        for c_idx in 0..k {
            let c = dz[pos];
            if c != 0.0 {
                let proto = protos.prototype(c_idx);
                for (g, r) in fg.iter_mut().zip(proto.iter()) {
                    *g += c * r;
                }
                // Prototype columns also feed the logits: dz/dm = x.
                let pg = &mut out.prototype_grads[c_idx * dim..(c_idx + 1) * dim];
                for (g, xi) in pg.iter_mut().zip(x.iter()) {
                    *g += c * xi;
                }
            }
            pos += 1;
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

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize(v).0
    }

    fn filled_bank(rows: &[Vec<f64>]) -> MemoryBank {
        let mut bank = MemoryBank::new(rows.len(), rows[0].len());
        for (j, r) in rows.iter().enumerate() {
            bank.update(j, r).unwrap();
        }
        bank
    }

    fn proto_bank(rows: &[Vec<f64>], sigma: f64) -> PrototypeBank {
        let dim = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().cloned()).collect();
        PrototypeBank::from_rows(flat, dim, rows.len(), sigma).unwrap()
    }

    #[test]
    fn update_replaces_row_bitwise() {
        let mut bank = MemoryBank::new(3, 2);
        let f = unit(&[0.6, 0.8]);
        bank.update(1, &f).unwrap();
        assert_eq!(bank.row(1), &f[..]);
        assert!(bank.is_initialized(1));
        assert!(!bank.is_initialized(0));
        // Idempotent.
        bank.update(1, &f).unwrap();
        assert_eq!(bank.row(1), &f[..]);
    }

    #[test]
    fn update_rejects_out_of_range_and_non_unit() {
        let mut bank = MemoryBank::new(2, 2);
        assert!(bank.update(2, &[1.0, 0.0]).is_err());
        assert!(bank.update(0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn full_update_reads_back() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| unit(&[(i + 1) as f64, 1.0, -0.5 * i as f64]))
            .collect();
        let bank = filled_bank(&rows);
        for (j, r) in rows.iter().enumerate() {
            assert_eq!(bank.row(j), &r[..]);
        }
        assert_eq!(bank.initialized_count(), 5);
    }

    #[test]
    fn staleness_resets_on_update() {
        let mut bank = MemoryBank::new(2, 2);
        bank.update(0, &[1.0, 0.0]).unwrap();
        bank.tick();
        bank.tick();
        assert_eq!(bank.staleness(0), 2);
        bank.update(0, &[0.0, 1.0]).unwrap();
        assert_eq!(bank.staleness(0), 0);
    }

    #[test]
    fn posterior_excludes_own_slot_and_uninitialized() {
        let rows = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        let mut bank = MemoryBank::new(3, 2);
        bank.update(0, &rows[0]).unwrap();
        bank.update(1, &rows[1]).unwrap();
        // Row 2 stays uninitialized.
        let protos = proto_bank(&[unit(&[-1.0, 0.2])], 0.5);
        let post = pda_posterior(&bank, &protos, 0, &rows[0]).unwrap();
        assert_eq!(post.probs.len(), 3); // 3 - 1 bank slots + 1 prototype
        assert_eq!(post.excluded_rows, 1);
        assert_eq!(post.probs[1], 0.0); // uninitialized row 2 at support pos 1
        let sum: f64 = post.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_uniform_when_logits_equal() {
        // All support columns identical: probabilities uniform over
        // n - 1 + k entries.
        let r = unit(&[1.0, 1.0]);
        let rows = vec![r.clone(), r.clone(), r.clone()];
        let bank = filled_bank(&rows);
        let protos = proto_bank(&[r.clone(), r.clone()], 1.0);
        let post = pda_posterior(&bank, &protos, 1, &unit(&[0.3, -0.9])).unwrap();
        assert_eq!(post.probs.len(), 4);
        for p in &post.probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_concentrates_at_matching_row() {
        let rows = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        let bank = filled_bank(&rows);
        let protos = proto_bank(&[unit(&[0.0, 0.0, 1.0])], 0.01);
        let post = pda_posterior(&bank, &protos, 0, &rows[1]).unwrap();
        // Support: row 1, prototype. Row 1 matches exactly.
        assert!(post.probs[0] > 0.999999);
    }

    #[test]
    fn hand_built_posterior_matches_direct_softmax() {
        let rows = vec![
            unit(&[1.0, 0.0]),
            unit(&[0.6, 0.8]),
            unit(&[0.0, 1.0]),
        ];
        let bank = filled_bank(&rows);
        let protos = proto_bank(&[unit(&[1.0, 1.0]), unit(&[-1.0, 0.5])], 0.7);
        let x = unit(&[0.9, -0.2]);
        let post = pda_posterior(&bank, &protos, 1, &x).unwrap();
        // Brute force over all support entries.
        let mut logits = vec![
            dot(&rows[0], &x),
            dot(&rows[2], &x),
            dot(protos.prototype(0), &x),
            dot(protos.prototype(1), &x),
        ];
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        for z in &mut logits {
            *z = ((*z - max) / 0.7).exp();
        }
        let s: f64 = logits.iter().sum();
        for (a, b) in post.probs.iter().zip(logits.iter()) {
            assert!((a - b / s).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_posterior_gives_near_zero_loss() {
        let rows = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        let bank = filled_bank(&rows);
        let protos = proto_bank(&[unit(&[0.0, 0.0, 1.0])], 0.005);
        let out = pda_loss(&bank, &protos, &[0], &[rows[1].clone()]).unwrap();
        assert!(out.loss < 1e-9, "loss {}", out.loss);
    }

    #[test]
    fn uniform_posterior_loss_value() {
        // All logits equal: H = ln(m) with m = n - 1 + k; loss = ln m / (n + k).
        let r = unit(&[1.0, 1.0]);
        let rows = vec![r.clone(), r.clone(), r.clone(), r.clone()];
        let bank = filled_bank(&rows);
        let protos = proto_bank(&[r.clone(), r.clone()], 1.0);
        let x = unit(&[-0.3, 0.8]);
        let out = pda_loss(&bank, &protos, &[2], &[x]).unwrap();
        let m: f64 = 4.0 - 1.0 + 2.0;
        let expected = m.ln() / (4.0 + 2.0);
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_on_random_instances() {
        let mut rng = crate::rng::stream_rng(3, "pda-prop");
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let dim = rng.gen_range(2..5);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| unit(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            let bank = filled_bank(&rows);
            let protos = PrototypeBank::new_seeded(dim, 2, 0.3, rng.gen()).unwrap();
            let x = unit(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let out = pda_loss(&bank, &protos, &[0], &[x]).unwrap();
            assert!(out.loss >= 0.0);
        }
    }

    #[test]
    fn minimizing_loss_sharpens_posterior() {
        // Frozen bank, ten samples; gradient steps on the features must
        // raise each sample's max posterior entry.
        let mut rng = crate::rng::stream_rng(11, "pda-sharpen");
        let dim = 4;
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| unit(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let bank = filled_bank(&rows);
        let protos = PrototypeBank::new_seeded(dim, 3, 0.5, 5).unwrap();
        let mut raw: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let max_post = |raw: &[Vec<f64>]| -> Vec<f64> {
            raw.iter()
                .enumerate()
                .map(|(i, r)| {
                    let x = unit(r);
                    pda_posterior(&bank, &protos, i, &x)
                        .unwrap()
                        .probs
                        .iter()
                        .cloned()
                        .fold(f64::MIN, f64::max)
                })
                .collect()
        };
        let before = max_post(&raw);
        for _ in 0..50 {
            let feats: Vec<Vec<f64>> = raw.iter().map(|r| unit(r)).collect();
            let indices: Vec<usize> = (0..10).collect();
            let out = pda_loss(&bank, &protos, &indices, &feats).unwrap();
            for (i, r) in raw.iter_mut().enumerate() {
                let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                let g = crate::encoder::l2_normalize_backward(&feats[i], norm, &out.feature_grads[i]);
                for (ri, gi) in r.iter_mut().zip(g.iter()) {
                    *ri -= 2.0 * gi;
                }
            }
        }
        let after = max_post(&raw);
        for (b, a) in before.iter().zip(after.iter()) {
            assert!(a > b, "max posterior did not increase: {b} -> {a}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream_rng(6, "pda-fd");
        let dim = 4;
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| unit(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let bank = filled_bank(&rows);
        let protos = PrototypeBank::new_seeded(dim, 3, 0.4, 2).unwrap();
        let feats: Vec<Vec<f64>> = (0..3)
            .map(|_| unit(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let indices = vec![0, 2, 4];
        let out = pda_loss(&bank, &protos, &indices, &feats).unwrap();

        let mut flat = protos.as_flat().to_vec();
        let feats2 = feats.clone();
        let indices2 = indices.clone();
        let bank2 = bank.clone();
        let loss_of = |m: &[f64]| {
            let b = PrototypeBank::from_rows(m.to_vec(), dim, 3, 0.4).unwrap();
            pda_loss(&bank2, &b, &indices2, &feats2).unwrap().loss
        };
        let report = grad_check(loss_of, &mut flat, &out.prototype_grads, 1e-5, 12, 3);
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);

        let mut f1 = feats[1].clone();
        let bank3 = bank.clone();
        let protos3 = protos.clone();
        let feats3 = feats.clone();
        let loss_of_f = |f: &[f64]| {
            let mut fs = feats3.clone();
            fs[1] = f.to_vec();
            pda_loss(&bank3, &protos3, &indices, &fs).unwrap().loss
        };
        let report = grad_check(loss_of_f, &mut f1, &out.feature_grads[1], 1e-5, dim, 4);
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }
}

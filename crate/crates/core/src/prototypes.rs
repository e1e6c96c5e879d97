//! Label-driven prototype building: a unit-norm cosine classifier over
//! source features and its cross-entropy loss.
//!
//! The classifier weight matrix holds one unit-norm prototype per source
//! class. Logits are cosine similarities against a unit-norm feature,
//! scaled by 1/sigma before the softmax.

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_normalize, safe_ln, softmax_temperature, PROB_EPSILON};
use crate::rng::stream_rng;
use rand::Rng;

/// The classifier weight matrix: `k_source` unit-norm prototypes of
/// dimension `dim`, plus the softmax temperature. Prototype `c` (0-based)
/// represents class `c + 1`.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    m: Vec<f64>, // row-major, k_source x dim
    dim: usize,
    k_source: usize,
    pub sigma: f64,
}

impl PrototypeBank {
    /// Seeded random unit-norm prototypes.
    pub fn new_seeded(dim: usize, k_source: usize, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {sigma}"
            )));
        }
        if dim == 0 || k_source == 0 {
            return Err(Error::InvalidConfig(
                "prototype bank needs positive dim and class count".into(),
            ));
        }
        let mut rng = stream_rng(seed, "init/prototypes");
        let mut m = vec![0.0; dim * k_source];
        for c in 0..k_source {
            let row = &mut m[c * dim..(c + 1) * dim];
            loop {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..=1.0);
                }
                let (unit, zero) = l2_normalize(row);
                if !zero {
                    row.copy_from_slice(&unit);
                    break;
                }
            }
        }
        Ok(PrototypeBank {
            m,
            dim,
            k_source,
            sigma,
        })
    }

    pub fn from_rows(rows: Vec<f64>, dim: usize, k_source: usize, sigma: f64) -> Result<Self> {
        if rows.len() != dim * k_source {
            return Err(Error::InvalidInput(format!(
                "prototype matrix has {} entries, expected {}",
                rows.len(),
                dim * k_source
            )));
        }
        Ok(PrototypeBank {
            m: rows,
            dim,
            k_source,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k_source(&self) -> usize {
        self.k_source
    }

    /// Prototype of 0-based class index `c`.
    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.m[c * self.dim..(c + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.m
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.m
    }

    /// Cosine logits (before temperature) of a unit-norm feature against
    /// every prototype.
    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.k_source)
            .map(|c| dot(self.prototype(c), feature))
            .collect()
    }

    /// K_s-way posterior: temperature softmax over prototype cosines.
    pub fn source_posterior(&self, feature: &[f64]) -> Result<Vec<f64>> {
        softmax_temperature(&self.logits(feature), self.sigma)
    }

    /// Rescale every prototype to unit norm. Called after each optimizer
    /// step.
    pub fn renormalize(&mut self) -> Result<()> {
        for c in 0..self.k_source {
            let row = &mut self.m[c * self.dim..(c + 1) * self.dim];
            let (unit, zero) = l2_normalize(row);
            if zero {
                return Err(Error::InvalidState(format!(
                    "prototype {c} collapsed to the zero vector"
                )));
            }
            row.copy_from_slice(&unit);
        }
        Ok(())
    }

    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.k_source)
            .map(|c| {
                let n: f64 = self.prototype(c).iter().map(|x| x * x).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Loss value plus gradients with respect to the batch features and the
/// prototype matrix.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    /// One gradient per batch feature, in batch order.
    pub feature_grads: Vec<Vec<f64>>,
    /// Flat gradient matching [`PrototypeBank::as_flat`].
    pub prototype_grads: Vec<f64>,
}

impl LossGrads {
    pub fn zeros(n_features: usize, dim: usize, k_source: usize) -> Self {
        LossGrads {
            loss: 0.0,
            feature_grads: vec![vec![0.0; dim]; n_features],
            prototype_grads: vec![0.0; dim * k_source],
        }
    }
}

/// Cross-entropy over prototype cosines, averaged with the 1/(N K) factor
/// where N is the batch size and K the class count. Labels are 1-based.
///
/// Returns the scalar plus gradients with respect to the (unit-norm) batch
/// features and the prototype matrix.
pub fn lpb_loss(bank: &PrototypeBank, features: &[Vec<f64>], labels: &[u32]) -> Result<LossGrads> {
    if features.is_empty() {
        return Err(Error::InvalidInput("empty source batch".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let k = bank.k_source();
    let dim = bank.dim();
    let scale = 1.0 / (features.len() as f64 * k as f64);
    let mut out = LossGrads::zeros(features.len(), dim, k);
    for (i, (x, &label)) in features.iter().zip(labels.iter()).enumerate() {
        if label < 1 || label as usize > k {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range 1..={k}"
            )));
        }
        let y = label as usize - 1;
        let p = bank.source_posterior(x)?;
        out.loss -= scale * safe_ln(p[y]);
        // d(-ln p_y)/dz_k = p_k - [k == y], zero when p_y sits below the
        // clamp (the clamped log is flat there).
        if p[y] >= PROB_EPSILON {
            for c in 0..k {
                let dz = scale * (p[c] - if c == y { 1.0 } else { 0.0 }) / bank.sigma;
                let proto = bank.prototype(c);
                let fg = &mut out.feature_grads[i];
                for j in 0..dim {
                    fg[j] += dz * proto[j];
                }
                let pg = &mut out.prototype_grads[c * dim..(c + 1) * dim];
                for j in 0..dim {
                    pg[j] += dz * x[j];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::grad_check;

    fn orthonormal_bank(k: usize, dim: usize, sigma: f64) -> PrototypeBank {
        let mut m = vec![0.0; k * dim];
        for c in 0..k {
            m[c * dim + c] = 1.0;
        }
        PrototypeBank::from_rows(m, dim, k, sigma).unwrap()
    }

    #[test]
    fn posterior_at_own_prototype() {
        let bank = orthonormal_bank(2, 4, 1.0);
        let p = bank.source_posterior(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-9);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn posterior_sharpens_at_low_temperature() {
        let bank = orthonormal_bank(2, 4, 0.05);
        let p = bank.source_posterior(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(p[0] > 0.999999);
    }

    #[test]
    fn posterior_uniform_when_equidistant() {
        let bank = orthonormal_bank(3, 3, 0.5);
        let x = crate::numeric::l2_normalize(&[1.0, 1.0, 1.0]).0;
        let p = bank.source_posterior(&x).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_of_uniform_posterior() {
        // Feature orthogonal to both prototypes: logits (0,0), posterior
        // uniform, loss = ln 2 / (1*2).
        let bank = orthonormal_bank(2, 3, 1.0);
        let out = lpb_loss(&bank, &[vec![0.0, 0.0, 1.0]], &[1]).unwrap();
        assert!((out.loss - 2.0_f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_for_confident_correct() {
        let bank = orthonormal_bank(2, 2, 0.01);
        let out = lpb_loss(&bank, &[vec![1.0, 0.0]], &[1]).unwrap();
        assert!(out.loss < 1e-12, "loss {}", out.loss);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let bank = orthonormal_bank(2, 2, 1.0);
        assert!(lpb_loss(&bank, &[vec![1.0, 0.0]], &[3]).is_err());
        assert!(lpb_loss(&bank, &[vec![1.0, 0.0]], &[0]).is_err());
    }

    #[test]
    fn renormalize_columns() {
        let mut bank = PrototypeBank::from_rows(vec![3.0, 4.0, 0.0, 2.0], 2, 2, 1.0).unwrap();
        bank.renormalize().unwrap();
        assert!((bank.prototype(0)[0] - 0.6).abs() < 1e-12);
        assert!((bank.prototype(0)[1] - 0.8).abs() < 1e-12);
        assert!(bank.max_norm_deviation() < 1e-12);
        // Idempotent.
        let before = bank.as_flat().to_vec();
        bank.renormalize().unwrap();
        for (a, b) in before.iter().zip(bank.as_flat().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sharper_temperature_raises_max_probability() {
        let bank_soft = orthonormal_bank(3, 3, 1.0);
        let bank_sharp = orthonormal_bank(3, 3, 0.2);
        let x = crate::numeric::l2_normalize(&[0.9, 0.3, 0.1]).0;
        let soft = bank_soft.source_posterior(&x).unwrap();
        let sharp = bank_sharp.source_posterior(&x).unwrap();
        let max = |p: &[f64]| p.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max(&sharp) > max(&soft));
    }

    #[test]
    fn training_prototypes_alone_fits_separable_toy() {
        // 3 classes, 30 samples, features = class corners with small jitter.
        let mut rng = crate::rng::stream_rng(2, "toy");
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let c = i % 3;
            let mut x = vec![0.0; 3];
            x[c] = 1.0;
            for v in x.iter_mut() {
                *v += 0.05 * (rng.gen_range(-1.0..1.0));
            }
            feats.push(crate::numeric::l2_normalize(&x).0);
            labels.push(c as u32 + 1);
        }
        let mut bank = PrototypeBank::new_seeded(3, 3, 0.05, 7).unwrap();
        let mut opt = crate::encoder::SgdMomentum::new(0.5, 0.9, &[bank.as_flat().len()]).unwrap();
        for _ in 0..200 {
            let out = lpb_loss(&bank, &feats, &labels).unwrap();
            opt.step(0, bank.as_flat_mut(), &out.prototype_grads).unwrap();
            bank.renormalize().unwrap();
        }
        let mean_true: f64 = feats
            .iter()
            .zip(labels.iter())
            .map(|(x, &l)| bank.source_posterior(x).unwrap()[l as usize - 1])
            .sum::<f64>()
            / feats.len() as f64;
        assert!(mean_true > 0.9, "mean posterior at true class {mean_true}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream_rng(4, "lpb-fd");
        let dim = 5;
        let k = 3;
        let n = 5;
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                crate::numeric::l2_normalize(&v).0
            })
            .collect();
        let labels: Vec<u32> = (0..n).map(|i| (i % k) as u32 + 1).collect();
        let bank = PrototypeBank::new_seeded(dim, k, 0.5, 8).unwrap();
        let out = lpb_loss(&bank, &feats, &labels).unwrap();

        // Check prototype gradients.
        let mut flat = bank.as_flat().to_vec();
        let sigma = bank.sigma;
        let loss_of = |m: &[f64]| {
            let b = PrototypeBank::from_rows(m.to_vec(), dim, k, sigma).unwrap();
            lpb_loss(&b, &feats, &labels).unwrap().loss
        };
        let report = grad_check(loss_of, &mut flat, &out.prototype_grads, 1e-5, 20, 1);
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);

        // Check gradients w.r.t. one feature.
        let mut f0 = feats[0].clone();
        let feats2 = feats.clone();
        let bank2 = bank.clone();
        let labels2 = labels.clone();
        let loss_of_f = |f: &[f64]| {
            let mut fs = feats2.clone();
            fs[0] = f.to_vec();
            lpb_loss(&bank2, &fs, &labels2).unwrap().loss
        };
        let report = grad_check(loss_of_f, &mut f0, &out.feature_grads[0], 1e-5, dim, 2);
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }
}

//! Class-imbalanced, domain-shifted synthetic data.
//!
//! Class means sit on a circle of radius 5 in the first two raw
//! coordinates (seeded assignment of classes to positions), with isotropic
//! unit within-class noise. Source samples come from the first `k_source`
//! classes with a geometric size profile whose max/min ratio is `mu`;
//! target samples come from all classes through an affine domain shift
//! (rotation in the circle plane, translation along a random direction,
//! additive noise) with an independently ordered geometric profile.

use super::{SourceDataset, TargetDataset};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const CLASS_CIRCLE_RADIUS: f64 = 5.0;
const CLASS_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of classes shared with the source domain.
    pub k_source: usize,
    /// Number of target-only (OOD) classes.
    pub k_target: usize,
    /// Raw input dimension (at least 2).
    pub d_raw: usize,
    /// Largest class size in each domain's profile.
    pub n_max: usize,
    /// Imbalance factor: largest class size over smallest.
    pub mu: f64,
    /// Domain-shift rotation in the circle plane, degrees.
    pub rotation_deg: f64,
    /// Domain-shift translation magnitude along a seeded random direction.
    pub translation: f64,
    /// Additive isotropic noise applied to target samples.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k_source: 5,
            k_target: 3,
            d_raw: 8,
            n_max: 604,
            mu: 10.0,
            rotation_deg: 15.0,
            translation: 1.0,
            noise_sigma: 0.2,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_source < 2 {
            return Err(Error::InvalidConfig(format!(
                "k_source must be at least 2 (geometric imbalance profile undefined for {} class)",
                self.k_source
            )));
        }
        if self.k_target == 0 {
            return Err(Error::InvalidConfig("k_target must be positive".into()));
        }
        if self.d_raw < 2 {
            return Err(Error::InvalidConfig(
                "d_raw must be at least 2 (class means live on a circle)".into(),
            ));
        }
        if self.n_max == 0 {
            return Err(Error::InvalidConfig("n_max must be positive".into()));
        }
        if !(self.mu >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "imbalance factor mu must be >= 1, got {}",
                self.mu
            )));
        }
        if self.noise_sigma < 0.0 || self.translation < 0.0 {
            return Err(Error::InvalidConfig(
                "noise_sigma and translation must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Geometric class sizes O_i = round(n_max * mu^(-(i-1)/(k-1))).
pub fn geometric_profile(n_max: usize, mu: f64, k: usize) -> Vec<usize> {
    if k == 1 {
        return vec![n_max];
    }
    (0..k)
        .map(|i| {
            let f = mu.powf(-(i as f64) / (k as f64 - 1.0));
            ((n_max as f64) * f).round().max(1.0) as usize
        })
        .collect()
}

/// Largest class size that makes a geometric profile over `k` classes sum
/// closest to `total`. Lets callers hold the target-set size steady while
/// sweeping `mu`.
pub fn n_max_for_target_total(total: usize, k: usize, mu: f64) -> usize {
    let factor_sum: f64 = (0..k)
        .map(|i| mu.powf(-(i as f64) / (k as f64 - 1.0).max(1.0)))
        .sum();
    let mut best = 1usize;
    let mut best_err = usize::MAX;
    let center = (total as f64 / factor_sum).round() as i64;
    for cand in (center - 3)..=(center + 3) {
        if cand < 1 {
            continue;
        }
        let sum: usize = geometric_profile(cand as usize, mu, k).iter().sum();
        let err = sum.abs_diff(total);
        if err < best_err {
            best_err = err;
            best = cand as usize;
        }
    }
    best
}

fn sample_gaussian(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter()
        .map(|&m| m + sigma * gaussian(rng))
        .collect()
}

/// Box-Muller; two uniforms per draw, one output kept. Deterministic given
/// the stream.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let (u, zero) = crate::numeric::l2_normalize(&v);
        if !zero {
            return u;
        }
    }
}

/// Quantize through f32 so that both file formats round-trip generated
/// data bit-exactly.
fn quantize(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

pub fn generate_synthetic_ccod(cfg: &SynthConfig) -> Result<(SourceDataset, TargetDataset)> {
    cfg.validate()?;
    let k_total = cfg.k_source + cfg.k_target;

    // Evenly spaced positions on the circle, assigned to classes in a
    // seeded random order so OOD classes interleave with source classes.
    let mut positions: Vec<usize> = (0..k_total).collect();
    positions.shuffle(&mut stream_rng(cfg.seed, "data/means"));
    let means: Vec<Vec<f64>> = (0..k_total)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * positions[c] as f64 / k_total as f64;
            let mut m = vec![0.0; cfg.d_raw];
            m[0] = CLASS_CIRCLE_RADIUS * angle.cos();
            m[1] = CLASS_CIRCLE_RADIUS * angle.sin();
            m
        })
        .collect();

    // Source: first k_source classes, profile tied to class index.
    let source_sizes = geometric_profile(cfg.n_max, cfg.mu, cfg.k_source);
    let mut src_rng = stream_rng(cfg.seed, "data/source");
    let mut src_feats = Vec::new();
    let mut src_labels = Vec::new();
    for (c, &n) in source_sizes.iter().enumerate() {
        for _ in 0..n {
            let mut x = sample_gaussian(&mut src_rng, &means[c], CLASS_SIGMA);
            quantize(&mut x);
            src_feats.push(x);
            src_labels.push(c as u32 + 1);
        }
    }

    // Target: all classes, independently ordered profile, then the domain
    // shift x -> R x + t + noise.
    let mut profile_rng = stream_rng(cfg.seed, "data/target-profile");
    let mut class_order: Vec<usize> = (0..k_total).collect();
    class_order.shuffle(&mut profile_rng);
    let ranked_sizes = geometric_profile(cfg.n_max, cfg.mu, k_total);
    let mut target_sizes = vec![0usize; k_total];
    for (rank, &class) in class_order.iter().enumerate() {
        target_sizes[class] = ranked_sizes[rank];
    }

    let mut shift_rng = stream_rng(cfg.seed, "data/shift");
    let direction = random_unit_vector(&mut shift_rng, cfg.d_raw);
    let theta = cfg.rotation_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();

    let mut tgt_rng = stream_rng(cfg.seed, "data/target");
    let mut tgt_feats = Vec::new();
    let mut tgt_labels = Vec::new();
    for (c, &n) in target_sizes.iter().enumerate() {
        for _ in 0..n {
            let mut x = sample_gaussian(&mut tgt_rng, &means[c], CLASS_SIGMA);
            let (x0, x1) = (x[0], x[1]);
            x[0] = cos_t * x0 - sin_t * x1;
            x[1] = sin_t * x0 + cos_t * x1;
            for (xi, di) in x.iter_mut().zip(direction.iter()) {
                *xi += cfg.translation * di + cfg.noise_sigma * gaussian(&mut tgt_rng);
            }
            quantize(&mut x);
            tgt_feats.push(x);
            tgt_labels.push(c as u32 + 1);
        }
    }

    // Seeded shuffles so class blocks do not survive into batch order.
    let mut order: Vec<usize> = (0..src_feats.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, "data/shuffle-source"));
    let src_feats: Vec<_> = order.iter().map(|&i| src_feats[i].clone()).collect();
    let src_labels: Vec<_> = order.iter().map(|&i| src_labels[i]).collect();

    let mut order: Vec<usize> = (0..tgt_feats.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, "data/shuffle-target"));
    let tgt_feats: Vec<_> = order.iter().map(|&i| tgt_feats[i].clone()).collect();
    let tgt_labels: Vec<_> = order.iter().map(|&i| tgt_labels[i]).collect();

    Ok((
        SourceDataset::new(src_feats, src_labels)?,
        TargetDataset::new(tgt_feats, Some(tgt_labels))?,
    ))
}

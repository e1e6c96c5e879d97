//! Small fully-connected feature encoder with exact analytic gradients,
//! plus the SGD-with-momentum optimizer used for all trainable tensors.
//!
//! Hidden layers use one activation (relu or tanh); the output layer is
//! linear. An identity configuration (no layers) passes inputs through
//! unchanged for precomputed-feature runs.

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activated output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// One dense layer. Weights are row-major with shape (out_dim, in_dim).
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Layer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.out_dim {
            let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
            out.push(crate::numeric::dot(row, x) + self.b[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    input_dim: usize,
    output_dim: usize,
}

/// Per-layer activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// inputs[l] is the input to layer l; the final entry is the output.
    inputs: Vec<Vec<f64>>,
}

/// Gradients shaped exactly like the encoder parameters.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        EncoderGrads {
            layers: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &EncoderGrads, scale: f64) {
        for (dst, src) in self.layers.iter_mut().zip(other.layers.iter()) {
            for (d, s) in dst.0.iter_mut().zip(src.0.iter()) {
                *d += scale * s;
            }
            for (d, s) in dst.1.iter_mut().zip(src.1.iter()) {
                *d += scale * s;
            }
        }
    }
}

impl EncoderParams {
    /// Identity encoder: forward returns the input unchanged.
    pub fn identity(dim: usize) -> Self {
        EncoderParams {
            layers: Vec::new(),
            activation: Activation::Relu,
            input_dim: dim,
            output_dim: dim,
        }
    }

    /// Build a seeded encoder for the given layer sizes (input, hidden...,
    /// output). Weights are uniform in [-s, s] with s = sqrt(6/(fan_in +
    /// fan_out)); biases start at zero.
    pub fn new_seeded(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "encoder needs at least input and output sizes; use identity() for pass-through"
                    .into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("zero-width encoder layer".into()));
        }
        let mut rng = stream_rng(seed, "init/encoder");
        let mut layers = Vec::new();
        for win in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-s..=s))
                .collect();
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        Ok(EncoderParams {
            layers,
            activation,
            input_dim: layer_sizes[0],
            output_dim: *layer_sizes.last().unwrap(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation, dim_if_empty: usize) -> Self {
        let input_dim = layers.first().map(|l| l.in_dim).unwrap_or(dim_if_empty);
        let output_dim = layers.last().map(|l| l.out_dim).unwrap_or(dim_if_empty);
        EncoderParams {
            layers,
            activation,
            input_dim,
            output_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Forward pass that retains per-layer inputs for [`Self::backward`].
    pub fn forward_cached(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim {
            return Err(Error::InvalidInput(format!(
                "encoder input dim {} != expected {}",
                input.len(),
                self.input_dim
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        inputs.push(input.to_vec());
        let mut buf = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            layer.apply(inputs.last().unwrap(), &mut buf);
            let last = li + 1 == self.layers.len();
            if !last {
                for v in &mut buf {
                    *v = self.activation.apply(*v);
                }
            }
            inputs.push(buf.clone());
        }
        let out = inputs.last().unwrap().clone();
        Ok((out, ForwardCache { inputs }))
    }

    /// Exact gradients of (output . output_grad) with respect to every
    /// parameter and the input, given the cache of the matching forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut EncoderGrads,
    ) -> Result<Vec<f64>> {
        if output_grad.len() != self.output_dim {
            return Err(Error::InvalidInput(format!(
                "output grad dim {} != expected {}",
                output_grad.len(),
                self.output_dim
            )));
        }
        let mut delta = output_grad.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[li];
            let last = li + 1 == self.layers.len();
            if !last {
                // Derivative through the activation, expressed via the
                // activated output stored in the cache.
                let y = &cache.inputs[li + 1];
                for (d, &yi) in delta.iter_mut().zip(y.iter()) {
                    *d *= self.activation.derivative_from_output(yi);
                }
            }
            let (gw, gb) = &mut grads.layers[li];
            let mut prev = vec![0.0; layer.in_dim];
            for i in 0..layer.out_dim {
                let di = delta[i];
                gb[i] += di;
                let row = &layer.w[i * layer.in_dim..(i + 1) * layer.in_dim];
                let grow = &mut gw[i * layer.in_dim..(i + 1) * layer.in_dim];
                for j in 0..layer.in_dim {
                    grow[j] += di * x[j];
                    prev[j] += di * row[j];
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

/// Velocity buffers and hyperparameters for SGD with momentum:
/// v <- momentum*v + g, theta <- theta - lr*v.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocities: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, shapes: &[usize]) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        Ok(SgdMomentum {
            learning_rate,
            momentum,
            velocities: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn velocity(&self, slot: usize) -> &[f64] {
        &self.velocities[slot]
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    pub fn velocities_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.velocities
    }

    /// Update one parameter tensor in place. `slot` selects its velocity
    /// buffer.
    pub fn step(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let v = self
            .velocities
            .get_mut(slot)
            .ok_or_else(|| Error::InvalidInput(format!("optimizer slot {slot} out of range")))?;
        if v.len() != params.len() || params.len() != grads.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer shape mismatch: velocity {}, params {}, grads {}",
                v.len(),
                params.len(),
                grads.len()
            )));
        }
        for i in 0..params.len() {
            v[i] = self.momentum * v[i] + grads[i];
            params[i] -= self.learning_rate * v[i];
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Flat index of the worst coordinate.
    pub worst_coord: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compare an analytic gradient against central finite differences on
/// `n_coords` randomly chosen coordinates of a flat parameter vector.
///
/// `loss_fn` must be a pure function of `params`. Failures are reported in
/// the returned struct, never thrown.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &mut [f64],
    analytic: &[f64],
    step: f64,
    n_coords: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut rng = stream_rng(seed, "gradcheck");
    let total = params.len();
    let coords: Vec<usize> = if total <= n_coords {
        (0..total).collect()
    } else {
        (0..n_coords).map(|_| rng.gen_range(0..total)).collect()
    };
    let mut max_rel = 0.0;
    let mut worst = 0;
    for &c in &coords {
        let saved = params[c];
        params[c] = saved + step;
        let up = loss_fn(params);
        params[c] = saved - step;
        let down = loss_fn(params);
        params[c] = saved;
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[c].abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic[c] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = c;
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: coords.len(),
        worst_coord: worst,
    }
}

/// Backpropagate through L2 normalization: given the pre-normalization
/// vector's norm and the normalized vector, convert d(loss)/d(normalized)
/// to d(loss)/d(raw).
pub fn l2_normalize_backward(normalized: &[f64], norm: f64, grad_out: &[f64]) -> Vec<f64> {
    let inner = crate::numeric::dot(normalized, grad_out);
    normalized
        .iter()
        .zip(grad_out.iter())
        .map(|(&u, &g)| (g - inner * u) / norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mode_passes_through() {
        let enc = EncoderParams::identity(3);
        assert_eq!(enc.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn identity_weights_pass_through() {
        let layer = Layer {
            w: vec![1.0, 0.0, 0.0, 1.0],
            b: vec![0.0, 0.0],
            in_dim: 2,
            out_dim: 2,
        };
        let enc = EncoderParams::from_layers(vec![layer], Activation::Relu, 2);
        assert_eq!(enc.forward(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn hand_computed_two_layer() {
        // relu([2,-2]) . [1,1] = 2
        let l1 = Layer {
            w: vec![1.0, -1.0],
            b: vec![0.0, 0.0],
            in_dim: 1,
            out_dim: 2,
        };
        let l2 = Layer {
            w: vec![1.0, 1.0],
            b: vec![0.0],
            in_dim: 2,
            out_dim: 1,
        };
        let enc = EncoderParams::from_layers(vec![l1, l2], Activation::Relu, 1);
        assert_eq!(enc.forward(&[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let enc = EncoderParams::new_seeded(&[3, 4, 2], Activation::Tanh, 0).unwrap();
        assert!(enc.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let enc = EncoderParams::new_seeded(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let (_, cache) = enc.forward_cached(&[0.1, -0.2, 0.4]).unwrap();
        let mut grads = EncoderGrads::zeros_like(&enc);
        let gin = enc.backward(&cache, &[0.0, 0.0], &mut grads).unwrap();
        assert!(gin.iter().all(|&g| g == 0.0));
        for (gw, gb) in &grads.layers {
            assert!(gw.iter().all(|&g| g == 0.0));
            assert!(gb.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn identity_backward_passes_grad() {
        let enc = EncoderParams::identity(2);
        let (_, cache) = enc.forward_cached(&[1.0, 2.0]).unwrap();
        let mut grads = EncoderGrads::zeros_like(&enc);
        let gin = enc.backward(&cache, &[0.5, -0.25], &mut grads).unwrap();
        assert_eq!(gin, vec![0.5, -0.25]);
    }

    #[test]
    fn forward_deterministic() {
        let enc = EncoderParams::new_seeded(&[4, 8, 3], Activation::Relu, 42).unwrap();
        let x = [0.3, -1.1, 0.0, 2.2];
        assert_eq!(enc.forward(&x).unwrap(), enc.forward(&x).unwrap());
        let enc2 = EncoderParams::new_seeded(&[4, 8, 3], Activation::Relu, 42).unwrap();
        assert_eq!(enc.forward(&x).unwrap(), enc2.forward(&x).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let enc = EncoderParams::new_seeded(&[3, 5, 2], Activation::Tanh, 9).unwrap();
        let input = [0.4, -0.3, 0.9];
        let ograd: Vec<f64> = vec![0.7, -1.2];
        let (_, cache) = enc.forward_cached(&input).unwrap();
        let mut grads = EncoderGrads::zeros_like(&enc);
        enc.backward(&cache, &ograd, &mut grads).unwrap();

        // Flatten params and analytic grads in the same order.
        let mut flat: Vec<f64> = Vec::new();
        let mut flat_grads: Vec<f64> = Vec::new();
        for (l, (gw, gb)) in enc.layers.iter().zip(grads.layers.iter()) {
            flat.extend_from_slice(&l.w);
            flat.extend_from_slice(&l.b);
            flat_grads.extend_from_slice(gw);
            flat_grads.extend_from_slice(gb);
        }
        let activation = enc.activation;
        let sizes: Vec<(usize, usize)> = enc.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
        let loss = |p: &[f64]| {
            let mut layers = Vec::new();
            let mut off = 0;
            for &(i, o) in &sizes {
                let w = p[off..off + i * o].to_vec();
                off += i * o;
                let b = p[off..off + o].to_vec();
                off += o;
                layers.push(Layer {
                    w,
                    b,
                    in_dim: i,
                    out_dim: o,
                });
            }
            let e = EncoderParams::from_layers(layers, activation, 3);
            let out = e.forward(&input).unwrap();
            crate::numeric::dot(&out, &ograd)
        };
        let report = grad_check(loss, &mut flat, &flat_grads, 1e-5, 40, 3);
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let mut theta: Vec<f64> = vec![0.7, -1.3, 2.1, 0.05];
        let analytic = theta.clone();
        let report = grad_check(
            |p| 0.5 * p.iter().map(|x| x * x).sum::<f64>(),
            &mut theta,
            &analytic,
            1e-5,
            20,
            0,
        );
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn sgd_plain_step() {
        let mut opt = SgdMomentum::new(0.1, 0.0, &[1]).unwrap();
        let mut theta = [1.0];
        opt.step(0, &mut theta, &[2.0]).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_keeps_params() {
        let mut opt = SgdMomentum::new(0.1, 0.9, &[2]).unwrap();
        let mut theta = [1.0, -2.0];
        for _ in 0..5 {
            opt.step(0, &mut theta, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(theta, [1.0, -2.0]);
    }

    #[test]
    fn sgd_momentum_hand_iteration() {
        let mut opt = SgdMomentum::new(0.01, 0.9, &[1]).unwrap();
        let mut theta = [0.0];
        opt.step(0, &mut theta, &[1.0]).unwrap();
        assert!((theta[0] + 0.01).abs() < 1e-15);
        assert!((opt.velocity(0)[0] - 1.0).abs() < 1e-15);
        opt.step(0, &mut theta, &[1.0]).unwrap();
        assert!((theta[0] + 0.029).abs() < 1e-15);
        assert!((opt.velocity(0)[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch_errors() {
        let mut opt = SgdMomentum::new(0.1, 0.0, &[2]).unwrap();
        let mut theta = [1.0];
        assert!(opt.step(0, &mut theta, &[1.0]).is_err());
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let raw = [0.8, -0.5, 1.7];
        let gout = [0.3, 0.9, -0.4];
        let loss = |v: &[f64]| {
            let (n, _) = crate::numeric::l2_normalize(v);
            crate::numeric::dot(&n, &gout)
        };
        let (normalized, _) = crate::numeric::l2_normalize(&raw);
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let analytic = l2_normalize_backward(&normalized, norm, &gout);
        let mut p = raw.to_vec();
        let report = grad_check(loss, &mut p, &analytic, 1e-6, 3, 5);
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }
}

//! The training loop: per-iteration composition of the four losses,
//! per-epoch schedules (bank refresh, thresholds, k-means) and the
//! end-of-epoch evaluation pass.

use crate::alignment::{pda_loss, MemoryBank};
use crate::clustering::{
    assign_cluster, kmeans, pair_weight_matrix, uc_loss, ClusterSet, PairLoss,
};
use crate::data::{minibatch_iterator, SourceDataset, TargetDataset};
use crate::encoder::{
    l2_normalize_backward, Activation, EncoderGrads, EncoderParams, ForwardCache, SgdMomentum,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::numeric::l2_normalize;
use crate::prototypes::{lpb_loss, LossGrads, PrototypeBank};
use crate::rng::derive_seed;
use crate::thresholds::{
    assign_pseudo_classes, atg_loss, class_mean_entropy, decide, SeparationMode, TargetDecision,
    ThresholdFormula, ThresholdMode, ThresholdTable,
};
use serde::{Deserialize, Serialize};

/// Everything the optimization needs to know, with the defaults used by
/// the synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weights of the alignment, separation and clustering losses.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Independent loss toggles; a disabled loss contributes exactly zero.
    pub enable_lpb: bool,
    pub enable_pda: bool,
    pub enable_atg: bool,
    pub enable_uc: bool,
    /// Softmax temperature shared by every cosine posterior.
    pub sigma: f64,
    /// Threshold scale.
    pub alpha: f64,
    /// Separation gate width.
    pub delta: f64,
    /// Cluster count as a multiple of the source class count (rounded up).
    pub cluster_factor: f64,
    pub threshold_mode: ThresholdMode,
    pub threshold_formula: ThresholdFormula,
    pub separation_mode: SeparationMode,
    pub uc_pair_loss: PairLoss,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub epochs: usize,
    /// Epochs trained with only the source and alignment losses before the
    /// threshold and clustering terms switch on. Zero disables the warm-up.
    pub warmup_epochs: usize,
    /// Hidden layer widths of the encoder; empty plus `identity_encoder`
    /// gives a pass-through.
    pub hidden_layers: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub identity_encoder: bool,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.05,
            lambda2: 0.1,
            lambda3: 0.1,
            enable_lpb: true,
            enable_pda: true,
            enable_atg: true,
            enable_uc: true,
            sigma: 0.05,
            alpha: 0.15,
            delta: 0.5,
            cluster_factor: 2.5,
            threshold_mode: ThresholdMode::Adaptive,
            threshold_formula: ThresholdFormula::Corrected,
            separation_mode: SeparationMode::Literal,
            uc_pair_loss: PairLoss::Kl,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_source: 32,
            batch_target: 32,
            epochs: 50,
            warmup_epochs: 2,
            hidden_layers: vec![32],
            feature_dim: 16,
            activation: Activation::Relu,
            identity_encoder: false,
            freeze_encoder: false,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if self.delta < 0.0 {
            return Err(Error::InvalidConfig("delta must be nonnegative".into()));
        }
        if !(self.cluster_factor > 0.0) {
            return Err(Error::InvalidConfig("cluster_factor must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        Ok(())
    }

    /// Cluster count: cluster_factor * K, rounded up.
    pub fn cluster_count(&self, k_source: usize) -> usize {
        (self.cluster_factor * k_source as f64).ceil() as usize
    }
}

/// Encoder plus classifier: the trainable parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: EncoderParams,
    pub prototypes: PrototypeBank,
}

/// Per-epoch constants derived from a full pass over the bank: the
/// threshold table, per-target decisions, clusters and cluster
/// assignments. Losses treat all of it as fixed.
#[derive(Debug, Clone)]
pub struct EpochState {
    pub thresholds: ThresholdTable,
    pub decisions: Vec<TargetDecision>,
    pub clusters: ClusterSet,
    /// Per target sample; uninitialized bank rows get unique sentinel
    /// values above the cluster count so they never pair up.
    pub cluster_assignments: Vec<usize>,
}

/// Scalar components plus combined gradients of one iteration.
#[derive(Debug)]
pub struct TotalLoss {
    pub lpb: f64,
    pub pda: f64,
    pub atg: f64,
    pub uc: f64,
    pub total: f64,
    pub encoder_grads: EncoderGrads,
    pub prototype_grads: Vec<f64>,
}

/// One metrics-log row: mean losses over an epoch's iterations and the
/// evaluation of the end-of-epoch state.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss_lpb: f64,
    pub loss_pda: f64,
    pub loss_atg: f64,
    pub loss_uc: f64,
    pub loss_total: f64,
    pub os_star: f64,
    /// NaN when the ground truth carries no OOD samples (or no ground
    /// truth at all).
    pub unk: f64,
    pub hos: f64,
}

/// Per-epoch exports next to the metrics log.
#[derive(Debug, Clone)]
pub struct EpochExtras {
    pub epoch: usize,
    pub thresholds: ThresholdTable,
    pub cluster_assignments: Vec<usize>,
}

/// Final trained state.
#[derive(Debug, Clone)]
pub struct TrainedState {
    pub model: Model,
    pub bank: MemoryBank,
    pub clusters: Option<ClusterSet>,
    pub optimizer: SgdMomentum,
    pub epochs_done: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainedState,
    pub metrics: Vec<MetricsRow>,
    pub extras: Vec<EpochExtras>,
}

/// Observer hook called after every optimizer step.
pub struct StepSnapshot<'a> {
    pub epoch: usize,
    pub iteration: usize,
    pub model: &'a Model,
    pub bank: &'a MemoryBank,
}

struct NormalizedBatch {
    indices: Vec<usize>,
    features: Vec<Vec<f64>>,
    caches: Vec<ForwardCache>,
    norms: Vec<f64>,
    labels: Vec<u32>,
}

fn encode_batch(
    model: &Model,
    raw: &[Vec<f64>],
    indices: &[usize],
    labels: Option<&[u32]>,
) -> Result<NormalizedBatch> {
    let mut out = NormalizedBatch {
        indices: Vec::with_capacity(indices.len()),
        features: Vec::with_capacity(indices.len()),
        caches: Vec::with_capacity(indices.len()),
        norms: Vec::with_capacity(indices.len()),
        labels: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let (h, cache) = model.encoder.forward_cached(&raw[i])?;
        let (x, zero) = l2_normalize(&h);
        if zero {
            // Degenerate feature: the sample drops out of this iteration.
            continue;
        }
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.indices.push(i);
        out.features.push(x);
        out.caches.push(cache);
        out.norms.push(norm);
        if let Some(ls) = labels {
            out.labels.push(ls[i]);
        }
    }
    Ok(out)
}

fn check_finite(value: f64, component: &str, epoch: usize, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            component: component.to_string(),
            epoch,
            iteration,
        })
    }
}

/// Whether each loss participates in the given epoch under this config.
fn active_losses(cfg: &TrainConfig, epoch: usize) -> (bool, bool, bool, bool) {
    let warm = epoch <= cfg.warmup_epochs;
    (
        cfg.enable_lpb,
        cfg.enable_pda && cfg.lambda1 > 0.0,
        cfg.enable_atg && cfg.lambda2 > 0.0 && !warm,
        cfg.enable_uc && cfg.lambda3 > 0.0 && !warm,
    )
}

/// The combined loss of one paired batch against frozen epoch state:
/// lpb + lambda1 * pda + lambda2 * atg + lambda3 * uc, with inactive
/// components contributing exactly zero. Returns gradients for the encoder
/// and the prototype matrix.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    cfg: &TrainConfig,
    model: &Model,
    bank: &MemoryBank,
    state: &EpochState,
    source: &SourceDataset,
    src_indices: &[usize],
    target: &TargetDataset,
    tgt_indices: &[usize],
    epoch: usize,
) -> Result<TotalLoss> {
    let dim = model.prototypes.dim();
    let k = model.prototypes.k_source();
    let (use_lpb, use_pda, use_atg, use_uc) = active_losses(cfg, epoch);

    let src = encode_batch(model, source.features(), src_indices, Some(source.labels()))?;
    let tgt = encode_batch(model, target.features(), tgt_indices, None)?;

    let mut encoder_grads = EncoderGrads::zeros_like(&model.encoder);
    let mut prototype_grads = vec![0.0; dim * k];
    let mut src_feature_grads = vec![vec![0.0; dim]; src.features.len()];
    let mut tgt_feature_grads = vec![vec![0.0; dim]; tgt.features.len()];

    let accumulate = |dst_feat: &mut [Vec<f64>], protos: &mut [f64], part: &LossGrads, w: f64| {
        for (d, s) in dst_feat.iter_mut().zip(part.feature_grads.iter()) {
            for (a, b) in d.iter_mut().zip(s.iter()) {
                *a += w * b;
            }
        }
        for (a, b) in protos.iter_mut().zip(part.prototype_grads.iter()) {
            *a += w * b;
        }
    };

    let mut lpb = 0.0;
    if use_lpb && !src.features.is_empty() {
        let part = lpb_loss(&model.prototypes, &src.features, &src.labels)?;
        lpb = part.loss;
        accumulate(&mut src_feature_grads, &mut prototype_grads, &part, 1.0);
    }

    let mut pda = 0.0;
    if use_pda && !tgt.features.is_empty() {
        let part = pda_loss(bank, &model.prototypes, &tgt.indices, &tgt.features)?;
        pda = part.loss;
        accumulate(
            &mut tgt_feature_grads,
            &mut prototype_grads,
            &part,
            cfg.lambda1,
        );
    }

    let mut atg = 0.0;
    if use_atg && !tgt.features.is_empty() {
        let part = atg_loss(
            &model.prototypes,
            &tgt.features,
            &state.thresholds,
            cfg.delta,
            cfg.separation_mode,
        )?;
        atg = part.loss;
        accumulate(
            &mut tgt_feature_grads,
            &mut prototype_grads,
            &part,
            cfg.lambda2,
        );
    }

    let mut uc = 0.0;
    if use_uc && tgt.features.len() >= 2 {
        let decisions: Vec<&TargetDecision> =
            tgt.indices.iter().map(|&i| &state.decisions[i]).collect();
        let clusters: Vec<usize> = tgt
            .indices
            .iter()
            .map(|&i| state.cluster_assignments[i])
            .collect();
        let weights = pair_weight_matrix(&decisions, &clusters)?;
        let part = uc_loss(&model.prototypes, &tgt.features, &weights, cfg.uc_pair_loss)?;
        uc = part.loss;
        accumulate(
            &mut tgt_feature_grads,
            &mut prototype_grads,
            &part,
            cfg.lambda3,
        );
    }

    let total = lpb + cfg.lambda1 * pda + cfg.lambda2 * atg + cfg.lambda3 * uc;

    // Through the normalization and the encoder.
    if !model.encoder.is_identity() {
        for (b, g) in [(&src, &src_feature_grads), (&tgt, &tgt_feature_grads)] {
            for i in 0..b.features.len() {
                let gh = l2_normalize_backward(&b.features[i], b.norms[i], &g[i]);
                model.encoder.backward(&b.caches[i], &gh, &mut encoder_grads)?;
            }
        }
    }

    Ok(TotalLoss {
        lpb,
        pda,
        atg,
        uc,
        total,
        encoder_grads,
        prototype_grads,
    })
}

/// Cycling mini-batch stream: one full seeded pass per cycle, reshuffled
/// whenever it runs dry.
struct CyclingBatches {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cycle: u64,
    batches: Vec<Vec<usize>>,
    pos: usize,
}

impl CyclingBatches {
    fn new(n: usize, batch_size: usize, seed: u64, name: &str, epoch: u64) -> Self {
        let seed = derive_seed(seed, name, 0);
        let mut s = CyclingBatches {
            n,
            batch_size,
            seed,
            epoch,
            cycle: 0,
            batches: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let index = self.epoch.wrapping_mul(1 << 20) | self.cycle;
        self.batches = minibatch_iterator(self.n, self.batch_size, self.seed, index);
        self.pos = 0;
    }

    fn batches_per_cycle(&self) -> usize {
        self.batches.len()
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.batches.len() {
            self.cycle += 1;
            self.reshuffle();
        }
        let b = self.batches[self.pos].clone();
        self.pos += 1;
        b
    }
}

/// Refresh every bank row from the current encoder.
fn refresh_bank(model: &Model, target: &TargetDataset, bank: &mut MemoryBank) -> Result<()> {
    bank.tick();
    for i in 0..target.len() {
        let h = model.encoder.forward(target.feature(i))?;
        let (x, zero) = l2_normalize(&h);
        if !zero {
            bank.update(i, &x)?;
        }
    }
    Ok(())
}

/// Full-population pass: posteriors from bank rows, pseudo-classes, mean
/// entropies, thresholds, decisions, k-means clusters and assignments.
pub fn compute_epoch_state(
    cfg: &TrainConfig,
    model: &Model,
    bank: &MemoryBank,
    epoch: usize,
) -> Result<EpochState> {
    let k = model.prototypes.k_source();
    let n = bank.len();
    let mut posteriors = Vec::with_capacity(n);
    for i in 0..n {
        if bank.is_initialized(i) {
            posteriors.push(model.prototypes.source_posterior(bank.row(i))?);
        } else {
            posteriors.push(vec![1.0 / k as f64; k]);
        }
    }
    let thresholds = match cfg.threshold_mode {
        ThresholdMode::Fixed => ThresholdTable::fixed(k),
        ThresholdMode::Adaptive => {
            let table = assign_pseudo_classes(&posteriors, k)?;
            let means = class_mean_entropy(&table, &posteriors);
            ThresholdTable::adaptive(&means, cfg.alpha, k, cfg.threshold_formula)?
        }
    };
    let decisions: Vec<TargetDecision> = posteriors
        .iter()
        .map(|p| decide(p, &thresholds))
        .collect::<Result<_>>()?;

    let a = cfg.cluster_count(k);
    let clusters = kmeans(bank, a, derive_seed(cfg.seed, "kmeans", epoch as u64))?;
    let mut cluster_assignments = Vec::with_capacity(n);
    for i in 0..n {
        if bank.is_initialized(i) {
            cluster_assignments.push(assign_cluster(&clusters, bank.row(i))?);
        } else {
            // Unique sentinel: never matches another sample's cluster.
            cluster_assignments.push(a + i);
        }
    }
    Ok(EpochState {
        thresholds,
        decisions,
        clusters,
        cluster_assignments,
    })
}

fn evaluate_state(
    state: &EpochState,
    target: &TargetDataset,
    k: usize,
) -> Result<(f64, f64, f64)> {
    match target.ground_truth() {
        Some(gt) => {
            let m = evaluate(&state.decisions, gt, k)?;
            Ok((m.os_star, m.unk.unwrap_or(f64::NAN), m.hos))
        }
        None => Ok((f64::NAN, f64::NAN, f64::NAN)),
    }
}

pub fn train(
    cfg: &TrainConfig,
    source: &SourceDataset,
    target: &TargetDataset,
) -> Result<TrainOutcome> {
    train_with_observer(cfg, source, target, |_| {})
}

pub fn train_with_observer<F>(
    cfg: &TrainConfig,
    source: &SourceDataset,
    target: &TargetDataset,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&StepSnapshot),
{
    cfg.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::InvalidInput(format!(
            "source dim {} != target dim {}",
            source.dim(),
            target.dim()
        )));
    }
    let k = source.k_source();
    let d_raw = source.dim();

    let encoder = if cfg.identity_encoder {
        EncoderParams::identity(d_raw)
    } else {
        let mut sizes = vec![d_raw];
        sizes.extend_from_slice(&cfg.hidden_layers);
        sizes.push(cfg.feature_dim);
        EncoderParams::new_seeded(&sizes, cfg.activation, derive_seed(cfg.seed, "init", 0))?
    };
    let feature_dim = encoder.output_dim();
    let prototypes = PrototypeBank::new_seeded(
        feature_dim,
        k,
        cfg.sigma,
        derive_seed(cfg.seed, "init", 1),
    )?;
    let mut model = Model {
        encoder,
        prototypes,
    };

    // Optimizer slots: per-layer weights and biases, prototypes last.
    let mut shapes: Vec<usize> = Vec::new();
    for l in &model.encoder.layers {
        shapes.push(l.w.len());
        shapes.push(l.b.len());
    }
    shapes.push(model.prototypes.as_flat().len());
    let proto_slot = shapes.len() - 1;
    let mut optimizer = SgdMomentum::new(cfg.learning_rate, cfg.momentum, &shapes)?;

    let mut bank = MemoryBank::new(target.len(), feature_dim);
    refresh_bank(&model, target, &mut bank)?;
    let mut epoch_state = compute_epoch_state(cfg, &model, &bank, 0)?;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut extras = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut src_stream = CyclingBatches::new(
            source.len(),
            cfg.batch_source,
            cfg.seed,
            "shuffle/source",
            epoch as u64,
        );
        let mut tgt_stream = CyclingBatches::new(
            target.len(),
            cfg.batch_target,
            cfg.seed,
            "shuffle/target",
            epoch as u64,
        );
        let iterations = src_stream
            .batches_per_cycle()
            .max(tgt_stream.batches_per_cycle());

        let mut sums = [0.0f64; 5];
        for iter in 0..iterations {
            let src_idx = src_stream.next_batch();
            let tgt_idx = tgt_stream.next_batch();
            let result = total_loss(
                cfg,
                &model,
                &bank,
                &epoch_state,
                source,
                &src_idx,
                target,
                &tgt_idx,
                epoch,
            )?;
            check_finite(result.lpb, "lpb", epoch, iter)?;
            check_finite(result.pda, "pda", epoch, iter)?;
            check_finite(result.atg, "atg", epoch, iter)?;
            check_finite(result.uc, "uc", epoch, iter)?;
            check_finite(result.total, "total", epoch, iter)?;
            sums[0] += result.lpb;
            sums[1] += result.pda;
            sums[2] += result.atg;
            sums[3] += result.uc;
            sums[4] += result.total;

            if !cfg.freeze_encoder {
                for (li, layer) in model.encoder.layers.iter_mut().enumerate() {
                    let (gw, gb) = &result.encoder_grads.layers[li];
                    optimizer.step(2 * li, &mut layer.w, gw)?;
                    optimizer.step(2 * li + 1, &mut layer.b, gb)?;
                }
            }
            optimizer.step(
                proto_slot,
                model.prototypes.as_flat_mut(),
                &result.prototype_grads,
            )?;
            model.prototypes.renormalize()?;

            // Cache the batch's fresh features back into the bank.
            for &i in &tgt_idx {
                let h = model.encoder.forward(target.feature(i))?;
                let (x, zero) = l2_normalize(&h);
                if !zero {
                    bank.update(i, &x)?;
                }
            }

            observer(&StepSnapshot {
                epoch,
                iteration: iter,
                model: &model,
                bank: &bank,
            });
        }

        refresh_bank(&model, target, &mut bank)?;
        epoch_state = compute_epoch_state(cfg, &model, &bank, epoch)?;
        let (os_star, unk, hos) = evaluate_state(&epoch_state, target, k)?;
        let denom = iterations as f64;
        metrics.push(MetricsRow {
            epoch,
            loss_lpb: sums[0] / denom,
            loss_pda: sums[1] / denom,
            loss_atg: sums[2] / denom,
            loss_uc: sums[3] / denom,
            loss_total: sums[4] / denom,
            os_star,
            unk,
            hos,
        });
        extras.push(EpochExtras {
            epoch,
            thresholds: epoch_state.thresholds.clone(),
            cluster_assignments: epoch_state.cluster_assignments.clone(),
        });
    }

    Ok(TrainOutcome {
        state: TrainedState {
            model,
            bank,
            clusters: Some(epoch_state.clusters),
            optimizer,
            epochs_done: cfg.epochs,
            seed: cfg.seed,
        },
        metrics,
        extras,
    })
}

/// Flatten encoder parameters and prototypes into one vector (layer
/// weights, layer biases, prototype matrix), for finite-difference checks.
pub fn flatten_model(model: &Model) -> Vec<f64> {
    let mut flat = Vec::new();
    for l in &model.encoder.layers {
        flat.extend_from_slice(&l.w);
        flat.extend_from_slice(&l.b);
    }
    flat.extend_from_slice(model.prototypes.as_flat());
    flat
}

/// Flatten the gradients of a [`TotalLoss`] in the same order as
/// [`flatten_model`].
pub fn flatten_grads(result: &TotalLoss) -> Vec<f64> {
    let mut flat = Vec::new();
    for (gw, gb) in &result.encoder_grads.layers {
        flat.extend_from_slice(gw);
        flat.extend_from_slice(gb);
    }
    flat.extend_from_slice(&result.prototype_grads);
    flat
}

/// Rebuild a model from a flat vector laid out by [`flatten_model`].
pub fn unflatten_model(template: &Model, flat: &[f64]) -> Result<Model> {
    let mut model = template.clone();
    let mut off = 0;
    for l in &mut model.encoder.layers {
        let (wn, bn) = (l.w.len(), l.b.len());
        l.w.copy_from_slice(&flat[off..off + wn]);
        off += wn;
        l.b.copy_from_slice(&flat[off..off + bn]);
        off += bn;
    }
    let m = model.prototypes.as_flat_mut();
    if flat.len() - off != m.len() {
        return Err(Error::InvalidInput(format!(
            "flat vector has {} entries, model needs {}",
            flat.len(),
            off + m.len()
        )));
    }
    m.copy_from_slice(&flat[off..]);
    Ok(model)
}

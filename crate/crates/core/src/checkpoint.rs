//! Binary checkpoint container: magic `CKPT`, a small fixed header, then
//! named f64 tensors with the same little-endian shape conventions as the
//! feature format. Round-trips the full trained state bit-exactly.

use crate::alignment::MemoryBank;
use crate::clustering::ClusterSet;
use crate::encoder::{Activation, EncoderParams, Layer, SgdMomentum};
use crate::error::{Error, Result};
use crate::prototypes::PrototypeBank;
use crate::trainer::{Model, TrainedState};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) {
    assert_eq!(rows * cols, data.len(), "tensor {name} shape mismatch");
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainedState) -> Result<()> {
    let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    for (i, l) in state.model.encoder.layers.iter().enumerate() {
        tensors.push((format!("encoder.layer{i}.w"), l.out_dim, l.in_dim, l.w.clone()));
        tensors.push((format!("encoder.layer{i}.b"), 1, l.out_dim, l.b.clone()));
    }
    let protos = &state.model.prototypes;
    tensors.push((
        "prototypes.m".into(),
        protos.k_source(),
        protos.dim(),
        protos.as_flat().to_vec(),
    ));
    tensors.push(("prototypes.sigma".into(), 1, 1, vec![protos.sigma]));
    tensors.push((
        "optimizer.hyper".into(),
        1,
        2,
        vec![state.optimizer.learning_rate, state.optimizer.momentum],
    ));
    for (slot, v) in state.optimizer.velocities().iter().enumerate() {
        tensors.push((format!("optimizer.velocity{slot}"), 1, v.len(), v.clone()));
    }
    let bank = &state.bank;
    tensors.push((
        "bank.rows".into(),
        bank.len(),
        bank.dim(),
        bank.rows_flat().to_vec(),
    ));
    tensors.push((
        "bank.initialized".into(),
        1,
        bank.len(),
        bank.initialized_flags()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect(),
    ));
    tensors.push((
        "bank.staleness".into(),
        1,
        bank.len(),
        (0..bank.len()).map(|j| bank.staleness(j) as f64).collect(),
    ));
    if let Some(cs) = &state.clusters {
        tensors.push((
            "clusters.centers".into(),
            cs.count(),
            cs.dim(),
            cs.as_flat().to_vec(),
        ));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.extend_from_slice(&(state.epochs_done as u32).to_le_bytes());
    out.push(match state.model.encoder.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.push(state.model.encoder.is_identity() as u8);
    out.extend_from_slice(&(state.model.encoder.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, rows, cols, data) in &tensors {
        push_tensor(&mut out, name, *rows, *cols, data);
    }
    crate::data::write_all_checkpoint_bytes(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedState> {
    let bytes = crate::data::read_checkpoint_bytes(path)?;
    let bad = |pos: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row: 0,
        col: pos,
        message,
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad(*pos, "truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(0, format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(4, format!("unsupported checkpoint version {version}")));
    }
    let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let epochs_done = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let activation = match take(&mut pos, 1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(bad(pos, format!("unknown activation code {other}"))),
    };
    let is_identity = take(&mut pos, 1)?[0] != 0;
    let input_dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let n_tensors = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| bad(pos, "tensor name is not UTF-8".into()))?
            .to_string();
        let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor { rows, cols, data });
    }
    let get = |name: &str| -> Result<&Tensor> {
        tensors
            .get(name)
            .ok_or_else(|| bad(0, format!("checkpoint missing tensor `{name}`")))
    };

    let mut layers = Vec::new();
    let mut li = 0usize;
    while tensors.contains_key(&format!("encoder.layer{li}.w")) {
        let w = get(&format!("encoder.layer{li}.w"))?;
        let b = get(&format!("encoder.layer{li}.b"))?;
        layers.push(Layer {
            w: w.data.clone(),
            b: b.data.clone(),
            in_dim: w.cols,
            out_dim: w.rows,
        });
        li += 1;
    }
    let encoder = if is_identity {
        EncoderParams::identity(input_dim)
    } else {
        EncoderParams::from_layers(layers, activation, input_dim)
    };

    let m = get("prototypes.m")?;
    let sigma = get("prototypes.sigma")?.data[0];
    let prototypes = PrototypeBank::from_rows(m.data.clone(), m.cols, m.rows, sigma)?;

    let hyper = get("optimizer.hyper")?;
    let mut velocities = Vec::new();
    let mut slot = 0usize;
    while let Some(v) = tensors.get(&format!("optimizer.velocity{slot}")) {
        velocities.push(v.data.clone());
        slot += 1;
    }
    let shapes: Vec<usize> = velocities.iter().map(|v| v.len()).collect();
    let mut optimizer = SgdMomentum::new(hyper.data[0], hyper.data[1], &shapes)?;
    *optimizer.velocities_mut() = velocities;

    let rows = get("bank.rows")?;
    let init = get("bank.initialized")?;
    let stale = get("bank.staleness")?;
    let mut bank = MemoryBank::new(rows.rows, rows.cols);
    bank.restore(&rows.data, &init.data, &stale.data)?;

    let clusters = match tensors.get("clusters.centers") {
        Some(t) => Some(ClusterSet::from_rows(t.data.clone(), t.rows, t.cols)?),
        None => None,
    };

    Ok(TrainedState {
        model: Model {
            encoder,
            prototypes,
        },
        bank,
        clusters,
        optimizer,
        epochs_done,
        seed,
    })
}

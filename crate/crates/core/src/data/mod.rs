//! Dataset model, synthetic generator, feature-file ingestion and seeded
//! mini-batch iteration.

mod batch;
mod formats;
mod synth;

pub use batch::minibatch_iterator;
pub use formats::{load_features, save_features, FileFormat};
pub(crate) use formats::{read_exact_bytes as read_checkpoint_bytes, write_all_bytes as write_all_checkpoint_bytes};
pub use synth::{generate_synthetic_ccod, n_max_for_target_total, SynthConfig};

use crate::error::{Error, Result};

/// Label value marking an unlabeled row in feature files.
pub const UNLABELED: i32 = -1;

/// Features plus raw labels as read from a file, before interpretation as
/// source or target data.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub features: Vec<Vec<f64>>,
    /// One per row; [`UNLABELED`] where absent.
    pub labels: Vec<i32>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }

    /// Interpret as a labeled source set. Labels must cover 1..=K with no
    /// gaps; K is taken from the largest label.
    pub fn into_source(self) -> Result<SourceDataset> {
        let labels: Vec<u32> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l < 1 {
                    Err(Error::InvalidInput(format!(
                        "source row {i} has label {l}; source rows must be labeled 1..K"
                    )))
                } else {
                    Ok(l as u32)
                }
            })
            .collect::<Result<_>>()?;
        SourceDataset::new(self.features, labels)
    }

    /// Interpret as a target set; labels, when present on every row, are
    /// kept as evaluation ground truth.
    pub fn into_target(self) -> Result<TargetDataset> {
        let all_labeled = !self.labels.is_empty() && self.labels.iter().all(|&l| l >= 1);
        let gt = if all_labeled {
            Some(self.labels.iter().map(|&l| l as u32).collect())
        } else {
            None
        };
        TargetDataset::new(self.features, gt)
    }
}

/// Labeled source-domain samples. Labels are 1-based class indices.
#[derive(Debug, Clone)]
pub struct SourceDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<u32>,
    k_source: usize,
}

impl SourceDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.is_empty() {
            return Err(Error::InvalidInput("empty source dataset".into()));
        }
        check_rectangular(&features)?;
        let k_source = *labels.iter().max().unwrap() as usize;
        let mut counts = vec![0usize; k_source];
        for (i, &l) in labels.iter().enumerate() {
            if l < 1 || l as usize > k_source {
                return Err(Error::InvalidInput(format!(
                    "source row {i} has out-of-range label {l}"
                )));
            }
            counts[l as usize - 1] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidInput(format!(
                "source class {} has no samples",
                c + 1
            )));
        }
        Ok(SourceDataset {
            features,
            labels,
            k_source,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn k_source(&self) -> usize {
        self.k_source
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k_source];
        for &l in &self.labels {
            counts[l as usize - 1] += 1;
        }
        counts
    }
}

/// Unlabeled target-domain samples. Ground-truth labels, when carried, are
/// reachable only through [`TargetDataset::ground_truth`]; training code
/// paths never call it.
#[derive(Debug, Clone)]
pub struct TargetDataset {
    features: Vec<Vec<f64>>,
    eval_labels: Option<Vec<u32>>,
}

impl TargetDataset {
    pub fn new(features: Vec<Vec<f64>>, eval_labels: Option<Vec<u32>>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidInput("empty target dataset".into()));
        }
        check_rectangular(&features)?;
        if let Some(gt) = &eval_labels {
            if gt.len() != features.len() {
                return Err(Error::InvalidInput(format!(
                    "{} target rows but {} ground-truth labels",
                    features.len(),
                    gt.len()
                )));
            }
        }
        Ok(TargetDataset {
            features,
            eval_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    /// Evaluation-only ground truth. Labels above the source class count
    /// mark OOD samples.
    pub fn ground_truth(&self) -> Option<&[u32]> {
        self.eval_labels.as_deref()
    }
}

fn check_rectangular(features: &[Vec<f64>]) -> Result<()> {
    let d = features[0].len();
    for (i, row) in features.iter().enumerate() {
        if row.len() != d {
            return Err(Error::InvalidInput(format!(
                "row {i} has dimension {} but row 0 has {d}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at row {i}, column {j}"
            )));
        }
    }
    Ok(())
}

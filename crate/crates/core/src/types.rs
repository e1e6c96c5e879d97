//! Validated domain vectors shared across modules.

use crate::error::{Error, Result};

/// A d-dimensional real feature. Entries must be finite; the dimension is
/// fixed per experiment and identical across samples and prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "feature entry {i} is not finite"
            )));
        }
        Ok(FeatureVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// A point on the probability simplex: entries in [0,1] summing to 1
/// within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    values: Vec<f64>,
}

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "probability entry {i} = {v} outside [0,1]"
                )));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbabilityVector { values })
    }

    pub fn uniform(k: usize) -> Self {
        ProbabilityVector {
            values: vec![1.0 / k as f64; k],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_features() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![f64::INFINITY]).is_err());
        assert!(FeatureVector::new(vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn probability_vector_invariants() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![1.2, -0.2]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
        let u = ProbabilityVector::uniform(4);
        assert_eq!(u.values(), &[0.25; 4]);
    }
}

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

pub const INPUT_WEIGHT: &str = "input_projection.weight";
pub const INPUT_BIAS: &str = "input_projection.bias";
pub const OUTPUT_WEIGHT: &str = "output_projection.weight";
pub const OUTPUT_BIAS: &str = "output_projection.bias";

/// One named tensor; matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// An ordered collection of named tensors. The same structure holds model
/// parameters, their gradients, and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSets {
    pub sets: Vec<ParamTensor>,
}

pub type ModelParams = ParamSets;
pub type GradientSet = ParamSets;

impl ParamSets {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (h, d, c) = (config.hidden, config.input_dim(), config.layout.n_channels());
        let t = |name: &str, shape: Vec<usize>| ParamTensor {
            name: name.into(),
            values: vec![0.0; shape.iter().product()],
            shape,
        };
        Self {
            sets: vec![
                t(INPUT_WEIGHT, vec![h, d]),
                t(INPUT_BIAS, vec![h]),
                t(OUTPUT_WEIGHT, vec![c, h]),
                t(OUTPUT_BIAS, vec![c]),
            ],
        }
    }

    /// Scaled-normal initialization: input weights with variance `1/D`,
    /// output weights with variance `(0.1)²/H`, zero biases.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let d = config.input_dim() as f64;
        let h = config.hidden as f64;
        let w1 = Normal::new(0.0, 1.0 / d.sqrt()).unwrap();
        let w2 = Normal::new(0.0, 0.1 / h.sqrt()).unwrap();
        for v in &mut p.get_mut(INPUT_WEIGHT).unwrap().values {
            *v = w1.sample(rng);
        }
        for v in &mut p.get_mut(OUTPUT_WEIGHT).unwrap().values {
            *v = w2.sample(rng);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            sets: self
                .sets
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: vec![0.0; t.values.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.sets.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.sets.iter_mut().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.sets.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.sets.iter().map(|t| t.values.len()).sum()
    }

    pub fn check_congruent(&self, other: &ParamSets) -> Result<()> {
        let same = self.sets.len() == other.sets.len()
            && self
                .sets
                .iter()
                .zip(&other.sets)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.values.len() == b.values.len());
        if same {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameter sets are not congruent".into()))
        }
    }

    /// Validate against a model configuration.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        self.check_congruent(&Self::zeros(config))?;
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameter".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.sets.iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.sets.iter().flat_map(|t| t.values.iter().copied()).collect()
    }

    pub fn scale(&mut self, a: f64) {
        for t in &mut self.sets {
            t.values.iter_mut().for_each(|v| *v *= a);
        }
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &ParamSets) {
        for (s, o) in self.sets.iter_mut().zip(&other.sets) {
            for (x, y) in s.values.iter_mut().zip(&o.values) {
                *x += a * y;
            }
        }
    }

    /// Coordinate `index` of the flattened tensor list.
    pub fn locate(&self, set: usize, index: usize) -> Result<f64> {
        let t = self.sets.get(set).ok_or(Error::IndexOutOfRange {
            index: set,
            len: self.sets.len(),
        })?;
        t.values.get(index).copied().ok_or(Error::IndexOutOfRange {
            index,
            len: t.values.len(),
        })
    }
}

use serde::{Deserialize, Serialize};

use crate::data::LevelSet;
use crate::error::{Error, Result};
use crate::loss::{pressure_level_weights, LevelWeights};

/// One fine-tuning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Forecast length in six-hour steps.
    pub n_steps: usize,
    pub peak_lr: f64,
    /// Number of training windows drawn over the stage.
    pub samples: usize,
    pub batch_size: usize,
    pub level_weights: LevelWeights,
    /// Segment lengths for split-horizon training; empty means unsplit.
    #[serde(default)]
    pub split_points: Vec<usize>,
    /// Identifier of the normalization statistics the stage trains with.
    pub stats_id: String,
    /// Hold the learning rate at `peak_lr` instead of warmup + cosine decay.
    #[serde(default)]
    pub constant_lr: bool,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter(format!("stage {}: n_steps must be ≥ 1", self.name)));
        }
        if self.batch_size == 0 || !self.samples.is_multiple_of(self.batch_size) {
            return Err(Error::InvalidParameter(format!(
                "stage {}: sample budget {} is not a multiple of batch size {}",
                self.name, self.samples, self.batch_size
            )));
        }
        if !self.split_points.is_empty() && self.split_points.iter().sum::<usize>() != self.n_steps {
            return Err(Error::SplitMismatch {
                points: self.split_points.clone(),
                n_steps: self.n_steps,
            });
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::InvalidParameter(format!("stage {}: bad peak learning rate", self.name)));
        }
        Ok(())
    }

    pub fn n_batches(&self) -> usize {
        self.samples / self.batch_size
    }

    /// Segment lengths, with the unsplit case as a single segment.
    pub fn segments(&self) -> Vec<usize> {
        if self.split_points.is_empty() {
            vec![self.n_steps]
        } else {
            self.split_points.clone()
        }
    }
}

/// Seeded choice of validation dates shared by every validation evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSpec {
    pub n_dates: usize,
    pub seed: u64,
    /// Validation records are emitted every `interval_fraction` of a stage's batches.
    pub interval_fraction: f64,
    /// Horizon of the fixed cross-stage validation metric, in steps.
    pub fixed_horizon: usize,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self {
            n_dates: 64,
            seed: 0,
            interval_fraction: 1.0 / 16.0,
            fixed_horizon: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSpec {
    pub stages: Vec<StageSpec>,
    pub validation: ValidationSpec,
}

impl CurriculumSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen_multi = 0usize;
        for s in &self.stages {
            s.validate()?;
            if s.n_steps > 1 || seen_multi > 0 {
                if s.n_steps < seen_multi {
                    return Err(Error::InvalidParameter(format!(
                        "stage {} shortens the forecast after multi-step training began",
                        s.name
                    )));
                }
                seen_multi = s.n_steps;
            }
        }
        Ok(())
    }
}

/// Rows of the reference curriculum: (name, steps, peak LR, samples).
pub const TABLE2: [(&str, usize, f64, usize); 6] = [
    ("1a", 1, 1.25e-4, 10240),
    ("1b", 1, 3.75e-7, 81920),
    ("2step", 2, 1.25e-6, 20480),
    ("4step", 4, 1.25e-6, 10240),
    ("8step", 8, 1.25e-7, 10240),
    ("12step", 12, 3.75e-7, 10240),
];

/// The reference curriculum shape, with sample budgets divided by `divisor`
/// (rounded to whole batches, at least one) and learning rates multiplied by
/// `lr_scale`. Stage 1a uses pressure weights; later stages use
/// `later_weights`. The 12-step stage is split into segments of 4 and 8.
pub fn table2_curriculum(
    levels: &LevelSet,
    divisor: usize,
    lr_scale: f64,
    batch_size: usize,
    later_weights: &LevelWeights,
    stats_id: &str,
) -> Vec<StageSpec> {
    TABLE2
        .iter()
        .map(|&(name, n_steps, lr, samples)| {
            let batches = (samples / divisor.max(1) / batch_size).max(1);
            StageSpec {
                name: name.into(),
                n_steps,
                peak_lr: lr * lr_scale,
                samples: batches * batch_size,
                batch_size,
                level_weights: if name == "1a" {
                    pressure_level_weights(levels)
                } else {
                    later_weights.clone()
                },
                split_points: if n_steps == 12 { vec![4, 8] } else { Vec::new() },
                stats_id: stats_id.into(),
                constant_lr: false,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{LevelWeights, WeightScheme};

    #[test]
    fn reference_shape() {
        let levels = LevelSet::toy();
        let later = LevelWeights::from_levels(&[0.125; 8], WeightScheme::Sensitivity).unwrap();
        let stages = table2_curriculum(&levels, 1, 1.0, 4, &later, "b");
        let c = CurriculumSpec {
            stages: stages.clone(),
            validation: ValidationSpec::default(),
        };
        c.validate().unwrap();
        assert_eq!(stages[0].samples, 10240);
        assert_eq!(stages[1].peak_lr, 3.75e-7);
        assert_eq!(stages[0].level_weights.scheme, WeightScheme::Pressure);
        assert_eq!(stages[1].level_weights.scheme, WeightScheme::Sensitivity);
        assert_eq!(stages[5].split_points, vec![4, 8]);
        let small = table2_curriculum(&levels, 64, 8.0, 4, &later, "b");
        assert_eq!(small[1].samples, 1280);
        assert_eq!(small[4].samples, 160);
        assert!((small[0].peak_lr - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn stage_validation() {
        let levels = LevelSet::toy();
        let mut s = table2_curriculum(&levels, 1, 1.0, 4, &LevelWeights::uniform(8), "b")[5].clone();
        s.split_points = vec![4, 7];
        assert!(matches!(s.validate(), Err(Error::SplitMismatch { .. })));
        s.split_points = vec![];
        s.samples = 10;
        assert!(s.validate().is_err());
        let mut stages = table2_curriculum(&levels, 1, 1.0, 4, &LevelWeights::uniform(8), "b");
        stages.swap(3, 4);
        let c = CurriculumSpec { stages, validation: ValidationSpec::default() };
        assert!(c.validate().is_err());
    }
}

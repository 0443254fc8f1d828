use rayon::prelude::*;

use crate::data::{AnalysisArchive, FieldState};
use crate::emulator::{Checkpoint, Emulator};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::time::{self, Instant};

use super::metrics::mse_slices;

/// Forecasts from a set of initializations at selected lead steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub label: String,
    pub inits: Vec<Instant>,
    pub lead_steps: Vec<usize>,
    /// `[init][lead]`.
    fields: Vec<FieldState>,
}

impl ForecastSet {
    pub fn new(label: &str, inits: Vec<Instant>, lead_steps: Vec<usize>, fields: Vec<FieldState>) -> Result<Self> {
        if fields.len() != inits.len() * lead_steps.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} fields for {} initializations × {} leads",
                fields.len(),
                inits.len(),
                lead_steps.len()
            )));
        }
        for (i, &t0) in inits.iter().enumerate() {
            for (l, &s) in lead_steps.iter().enumerate() {
                if fields[i * lead_steps.len() + l].time != t0 + time::step() * s as i32 {
                    return Err(Error::Alignment(format!("field for {t0} + {s} steps has the wrong valid time")));
                }
            }
        }
        Ok(Self {
            label: label.into(),
            inits,
            lead_steps,
            fields,
        })
    }

    pub fn get(&self, init: usize, lead: usize) -> &FieldState {
        &self.fields[init * self.lead_steps.len() + lead]
    }

    /// The analyses themselves, arranged as a "forecast".
    pub fn from_archive(label: &str, archive: &AnalysisArchive, inits: &[Instant], lead_steps: &[usize]) -> Result<Self> {
        let mut fields = Vec::with_capacity(inits.len() * lead_steps.len());
        for &t0 in inits {
            for &s in lead_steps {
                fields.push(archive.state_at(t0 + time::step() * s as i32)?);
            }
        }
        Self::new(label, inits.to_vec(), lead_steps.to_vec(), fields)
    }

    /// Check that `other` has the same initializations and leads.
    pub fn check_aligned(&self, other: &ForecastSet) -> Result<()> {
        if self.lead_steps != other.lead_steps {
            return Err(Error::Alignment(format!(
                "lead steps {:?} vs {:?}",
                self.lead_steps, other.lead_steps
            )));
        }
        let missing: Vec<String> = self
            .inits
            .iter()
            .filter(|t| !other.inits.contains(t))
            .chain(other.inits.iter().filter(|t| !self.inits.contains(t)))
            .map(|t| t.to_string())
            .collect();
        if !missing.is_empty() || self.inits != other.inits {
            return Err(Error::Alignment(format!(
                "{} and {} differ in initialization dates: {}",
                self.label,
                other.label,
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// Mean squared error per (init, lead, channel) against the analyses.
    pub fn squared_errors(&self, truth: &AnalysisArchive, grid: &Grid) -> Result<Vec<f64>> {
        let nc = truth.n_channels();
        let mut out = Vec::with_capacity(self.fields.len() * nc);
        for f in &self.fields {
            let t = truth.state_at(f.time)?;
            f.check_same_shape(&t)?;
            for c in 0..nc {
                out.push(mse_slices(f.channel(c), t.channel(c), grid));
            }
        }
        Ok(out)
    }
}

/// Roll the model out from every initialization and keep the requested leads.
pub fn make_forecasts(
    label: &str,
    ckpt: &Checkpoint,
    archive: &AnalysisArchive,
    inits: &[Instant],
    lead_steps: &[usize],
    workers: usize,
) -> Result<ForecastSet> {
    let max = *lead_steps
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidParameter("no lead times requested".into()))?;
    if lead_steps.contains(&0) {
        return Err(Error::InvalidParameter("lead steps start at 1".into()));
    }
    let model = Emulator::<f64>::new(&ckpt.config, &ckpt.params, &ckpt.stats)?;
    let pool = crate::trainer::thread_pool(workers)?;
    let per_init: Vec<Vec<FieldState>> = pool.install(|| {
        inits
            .par_iter()
            .map(|&t0| {
                let prev = archive.state_at(t0 - time::step())?;
                let cur = archive.state_at(t0)?;
                let traj = model.forecast(&prev, &cur, max)?;
                Ok(lead_steps.iter().map(|&s| traj[s - 1].clone()).collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    ForecastSet::new(label, inits.to_vec(), lead_steps.to_vec(), per_init.into_iter().flatten().collect())
}

use super::archive::AnalysisArchive;
use super::state::FieldState;
use crate::error::{Error, Result};
use crate::time::{self, Instant};

/// Two input states ending at `valid` and `n_steps` six-hourly targets after it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub valid: Instant,
    pub inputs: [FieldState; 2],
    pub targets: Vec<FieldState>,
}

impl TrainingWindow {
    pub fn n_steps(&self) -> usize {
        self.targets.len()
    }
}

pub fn sample_window(archive: &AnalysisArchive, valid: Instant, n_steps: usize) -> Result<TrainingWindow> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("window needs at least one target".into()));
    }
    let prev = archive.state_at(valid - time::step())?;
    let cur = archive.state_at(valid)?;
    let targets = (1..=n_steps)
        .map(|s| archive.state_at(valid + time::step() * s as i32))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingWindow {
        valid,
        inputs: [prev, cur],
        targets,
    })
}

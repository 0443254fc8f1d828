//! Gradient agreement between split-horizon and unsplit backpropagation.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_window, AnalysisArchive};
use crate::emulator::{Checkpoint, Emulator};
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::optim::gradient_cosine_similarity;
use crate::sensitivity::{bootstrap_band, median};
use crate::time::{DateRange, Instant};

use super::stage::{thread_pool, validation_dates};

const RESAMPLES: usize = 2000;

/// One split on one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSweepRow {
    pub split: Vec<usize>,
    pub valid: Instant,
    /// |split loss − unsplit loss| / |unsplit loss|.
    pub loss_rel_diff: f64,
    /// Cosine similarity with the unsplit gradient per parameter set.
    pub per_set: Vec<(String, Option<f64>)>,
    pub min_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Vec<usize>,
    pub median_min_cosine: f64,
    /// Bootstrap 90% band of the median.
    pub band: (f64, f64),
    pub max_loss_rel_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSweepReport {
    pub n_steps: usize,
    pub windows: Vec<Instant>,
    pub rows: Vec<SplitSweepRow>,
    pub summaries: Vec<SplitSummary>,
}

impl SplitSweepReport {
    pub fn summary(&self, split: &[usize]) -> Option<&SplitSummary> {
        self.summaries.iter().find(|s| s.split == split)
    }
}

fn split_label(split: &[usize]) -> String {
    split.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+")
}

/// Compare split-horizon gradients with the unsplit gradient on `n_windows`
/// seeded windows of `period`, for every split in `splits`.
#[allow(clippy::too_many_arguments)]
pub fn split_horizon_sweep(
    ckpt: &Checkpoint,
    archive: &AnalysisArchive,
    period: DateRange,
    loss: &LossSpec,
    splits: &[Vec<usize>],
    n_windows: usize,
    seed: u64,
    workers: usize,
) -> Result<SplitSweepReport> {
    if splits.is_empty() {
        return Err(Error::InvalidParameter("split sweep needs at least one split".into()));
    }
    for s in splits {
        if s.iter().sum::<usize>() != loss.n_steps || s.contains(&0) {
            return Err(Error::SplitMismatch {
                points: s.clone(),
                n_steps: loss.n_steps,
            });
        }
    }
    let windows = validation_dates(archive, period, n_windows, loss.n_steps, seed)?;
    let model = Emulator::<f64>::new(&ckpt.config, &ckpt.params, &ckpt.stats)?;
    let per_window: Vec<Vec<SplitSweepRow>> = thread_pool(workers)?.install(|| {
        windows
            .par_iter()
            .map(|&valid| {
                let window = sample_window(archive, valid, loss.n_steps)?;
                let (l0, g0) = model.backprop_rollout(&window, loss)?;
                splits
                    .iter()
                    .map(|split| {
                        let (l, g) = model.backprop_segments(&window, loss, split)?;
                        let cos = gradient_cosine_similarity(&g, &g0)?;
                        Ok(SplitSweepRow {
                            split: split.clone(),
                            valid,
                            loss_rel_diff: (l - l0).abs() / l0.abs().max(f64::MIN_POSITIVE),
                            per_set: cos.per_set,
                            min_cosine: cos.min,
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()
    })?;
    let rows: Vec<SplitSweepRow> = per_window.into_iter().flatten().collect();
    let summaries = splits
        .iter()
        .enumerate()
        .map(|(k, split)| {
            let mine = rows.iter().filter(|r| &r.split == split);
            let cos: Vec<f64> = mine.clone().filter_map(|r| r.min_cosine).collect();
            if cos.len() < 2 {
                return Err(Error::InsufficientSamples(format!(
                    "split {}: fewer than two windows with defined gradients",
                    split_label(split)
                )));
            }
            Ok(SplitSummary {
                split: split.clone(),
                median_min_cosine: median(&cos),
                band: bootstrap_band(&cos, median, (0.05, 0.95), RESAMPLES, crate::rng::substream_seed(seed, &format!("split/{k}")))?,
                max_loss_rel_diff: mine.map(|r| r.loss_rel_diff).fold(0.0, f64::max),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SplitSweepReport {
        n_steps: loss.n_steps,
        windows,
        rows,
        summaries,
    })
}

impl SplitSweepReport {
    /// One line per split and window.
    pub fn write_rows_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let sets: Vec<String> = self.rows.first().map(|r| r.per_set.iter().map(|(n, _)| n.clone()).collect()).unwrap_or_default();
        let mut header = vec!["split".to_string(), "valid".into(), "loss_rel_diff".into(), "min_cosine".into()];
        header.extend(sets.iter().map(|s| format!("cos_{s}")));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9e}"));
        for r in &self.rows {
            let mut rec = vec![
                split_label(&r.split),
                r.valid.format("%Y-%m-%dT%H:%MZ").to_string(),
                format!("{:.3e}", r.loss_rel_diff),
                opt(r.min_cosine),
            ];
            rec.extend(r.per_set.iter().map(|(_, c)| opt(*c)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// One line per split: median minimum cosine and its band.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "median_min_cosine", "band_lo", "band_hi", "max_loss_rel_diff"])?;
        for s in &self.summaries {
            w.write_record([
                split_label(&s.split),
                format!("{:.9e}", s.median_min_cosine),
                format!("{:.9e}", s.band.0),
                format!("{:.9e}", s.band.1),
                format!("{:.3e}", s.max_loss_rel_diff),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_window, AnalysisArchive, NormalizationStats, TrainingWindow};
use crate::emulator::{Checkpoint, Emulator, GradientSet};
use crate::error::{Error, Result};
use crate::loss::{LevelWeights, LossSpec, VariableWeights};
use crate::optim::{adamw_step, aggregate_gradients, AdamWConfig, LrSchedule, OptimizerState, PAPER_TERMINAL_LR};
use crate::rng::{substream, substream_seed};
use crate::time::{self, DateRange, Instant};

use super::curriculum::{StageSpec, ValidationSpec};
use super::metrics::{MetricsLog, MetricsRecord};

/// Validation dates always leave room for this many steps, so the native and
/// fixed-horizon metrics are evaluated on the same initializations.
pub const VALIDATION_MAX_STEPS: usize = 12;

/// The archive a stage trains on, with its disjoint train/validation periods.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub archive: &'a AnalysisArchive,
    pub train: DateRange,
    pub validation: DateRange,
}

impl<'a> TrainingData<'a> {
    pub fn new(archive: &'a AnalysisArchive, train: DateRange, validation: DateRange) -> Result<Self> {
        if train.overlaps(&validation) {
            return Err(Error::Config("training and validation periods overlap".into()));
        }
        Ok(Self {
            archive,
            train,
            validation,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub workers: usize,
    pub adamw: AdamWConfig,
    /// Learning rate at the last batch of a stage (capped at the stage peak).
    pub terminal_lr: f64,
    pub warmup_fraction: f64,
    /// Per-variable weights; `None` uses the layout default.
    pub variable_weights: Option<VariableWeights>,
    pub validation: ValidationSpec,
    /// Level weights of the fixed-horizon validation metric; `None` uses the
    /// stage's own weights.
    pub fixed_horizon_weights: Option<LevelWeights>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            adamw: AdamWConfig::default(),
            terminal_lr: PAPER_TERMINAL_LR,
            warmup_fraction: 0.1,
            variable_weights: None,
            validation: ValidationSpec::default(),
            fixed_horizon_weights: None,
        }
    }
}

impl TrainOptions {
    fn variable_weights(&self, ckpt: &Checkpoint) -> VariableWeights {
        self.variable_weights
            .clone()
            .unwrap_or_else(|| VariableWeights::default_for(&ckpt.config.layout))
    }

    /// Loss spec of `stage` under the checkpoint's normalization.
    pub fn stage_loss(&self, ckpt: &Checkpoint, stage: &StageSpec) -> Result<LossSpec> {
        LossSpec::new(
            stage.level_weights.clone(),
            self.variable_weights(ckpt),
            ckpt.stats.clone(),
            stage.n_steps,
        )
    }

    fn fixed_loss(&self, ckpt: &Checkpoint, stage: &StageSpec) -> Result<Option<LossSpec>> {
        if self.validation.fixed_horizon == 0 {
            return Ok(None);
        }
        let weights = self.fixed_horizon_weights.clone().unwrap_or_else(|| stage.level_weights.clone());
        LossSpec::new(weights, self.variable_weights(ckpt), ckpt.stats.clone(), self.validation.fixed_horizon).map(Some)
    }
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Valid dates `t` in `period` whose window (t − 6 h … t + n·6 h) lies inside
/// both the period and the archive.
fn candidate_dates(archive: &AnalysisArchive, period: DateRange, n_steps: usize) -> Vec<Instant> {
    let range = archive.range();
    let lo = period.start.max(range.start) + time::step();
    let hi = period.end.min(range.end);
    let mut out = Vec::new();
    let mut t = lo;
    while t + time::step() * (n_steps as i32) < hi {
        out.push(t);
        t += time::step();
    }
    out
}

/// Seeded sample (without replacement) of validation initializations.
pub fn validation_dates(archive: &AnalysisArchive, period: DateRange, n_dates: usize, n_steps: usize, seed: u64) -> Result<Vec<Instant>> {
    let horizon = n_steps.max(VALIDATION_MAX_STEPS);
    let candidates = candidate_dates(archive, period, horizon);
    if n_dates == 0 || candidates.len() < n_dates {
        return Err(Error::InsufficientSamples(format!(
            "validation period {} .. {} offers {} dates for {horizon}-step windows, {n_dates} requested",
            period.start,
            period.end,
            candidates.len()
        )));
    }
    let mut rng = substream(seed, "validation-dates");
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), n_dates).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i]).collect())
}

/// Mean loss over the given initializations.
pub fn loss_on_dates(
    ckpt: &Checkpoint,
    archive: &AnalysisArchive,
    dates: &[Instant],
    loss: &LossSpec,
    pool: &rayon::ThreadPool,
) -> Result<f64> {
    let model = Emulator::<f64>::new(&ckpt.config, &ckpt.params, &ckpt.stats)?;
    let losses: Vec<f64> = pool.install(|| {
        dates
            .par_iter()
            .map(|&d| model.rollout_loss(&sample_window(archive, d, loss.n_steps)?, loss))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean weighted loss over `n_dates` seeded validation initializations.
pub fn validation_loss(
    ckpt: &Checkpoint,
    archive: &AnalysisArchive,
    period: DateRange,
    n_dates: usize,
    loss: &LossSpec,
    seed: u64,
) -> Result<f64> {
    let dates = validation_dates(archive, period, n_dates, loss.n_steps, seed)?;
    loss_on_dates(ckpt, archive, &dates, loss, &thread_pool(1)?)
}

/// Loss and gradient with the rollout split into segments; the loss equals
/// the unsplit value, the gradient omits paths across segment boundaries.
pub fn split_horizon_backprop(
    model: &Emulator<f64>,
    window: &TrainingWindow,
    split_points: &[usize],
    loss: &LossSpec,
) -> Result<(f64, GradientSet)> {
    model.backprop_segments(window, loss, split_points)
}

struct Validator<'a> {
    archive: &'a AnalysisArchive,
    dates: Vec<Instant>,
    native: LossSpec,
    fixed: Option<LossSpec>,
}

impl Validator<'_> {
    fn record(&self, stage: &str, batch: usize, ckpt: &Checkpoint, pool: &rayon::ThreadPool) -> Result<MetricsRecord> {
        let native = loss_on_dates(ckpt, self.archive, &self.dates, &self.native, pool)?;
        let fixed = match &self.fixed {
            Some(l) => Some(loss_on_dates(ckpt, self.archive, &self.dates, l, pool)?),
            None => None,
        };
        Ok(MetricsRecord {
            stage: stage.into(),
            batch,
            lr: None,
            train_loss: None,
            val_native_loss: Some(native),
            val_72h_loss: fixed,
        })
    }
}

/// Train `ckpt_in` through one stage. The optimizer state starts fresh.
pub fn run_stage(
    ckpt_in: &Checkpoint,
    stage: &StageSpec,
    data: &TrainingData,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(Checkpoint, MetricsLog)> {
    stage.validate()?;
    ckpt_in.stats.validate()?;
    if stage.level_weights.n_levels() != ckpt_in.config.layout.n_levels() {
        return Err(Error::ShapeMismatch(format!(
            "stage {} has {} level weights, model has {} levels",
            stage.name,
            stage.level_weights.n_levels(),
            ckpt_in.config.layout.n_levels()
        )));
    }
    let mut log = MetricsLog::new();
    if stage.samples == 0 {
        return Ok((ckpt_in.clone(), log));
    }
    let loss = opts.stage_loss(ckpt_in, stage)?;
    let segments = stage.segments();
    let n_batches = stage.n_batches();
    let schedule = if stage.constant_lr || stage.peak_lr == 0.0 {
        None
    } else {
        Some(LrSchedule::new(
            stage.peak_lr,
            opts.terminal_lr.min(stage.peak_lr),
            opts.warmup_fraction,
            n_batches,
        )?)
    };
    let candidates = candidate_dates(data.archive, data.train, stage.n_steps);
    if candidates.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "training period offers no {}-step windows",
            stage.n_steps
        )));
    }
    let pool = thread_pool(opts.workers)?;
    let validator = if opts.validation.interval_fraction > 0.0 && opts.validation.n_dates > 0 {
        Some(Validator {
            archive: data.archive,
            dates: validation_dates(data.archive, data.validation, opts.validation.n_dates, stage.n_steps, opts.validation.seed)?,
            native: loss.clone(),
            fixed: opts.fixed_loss(ckpt_in, stage)?,
        })
    } else {
        None
    };
    let interval = ((n_batches as f64 * opts.validation.interval_fraction).round() as usize).max(1);

    let mut ckpt = ckpt_in.clone();
    let mut state = OptimizerState::new(&ckpt.params, opts.adamw);
    let mut rng = substream(seed, &format!("stage-sampling/{}", stage.name));
    if let Some(v) = &validator {
        log.push(v.record(&stage.name, 0, &ckpt, &pool)?);
    }
    for b in 0..n_batches {
        let dates: Vec<Instant> = (0..stage.batch_size)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect();
        let model = Emulator::<f64>::new(&ckpt.config, &ckpt.params, &ckpt.stats)?;
        let results: Result<Vec<(f64, GradientSet)>> = pool.install(|| {
            dates
                .par_iter()
                .map(|&d| {
                    let w = sample_window(data.archive, d, stage.n_steps)?;
                    split_horizon_backprop(&model, &w, &segments, &loss)
                })
                .collect::<Result<Vec<_>>>()
        });
        let results = match results {
            Err(Error::NonFinite(_)) => {
                return Err(Error::NonFiniteLoss {
                    stage: stage.name.clone(),
                    batch: b,
                    last_good: Box::new(ckpt),
                })
            }
            other => other?,
        };
        let train_loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !train_loss.is_finite() || results.iter().any(|r| !r.1.is_finite()) {
            return Err(Error::NonFiniteLoss {
                stage: stage.name.clone(),
                batch: b,
                last_good: Box::new(ckpt),
            });
        }
        let grads: Vec<GradientSet> = results.into_iter().map(|r| r.1).collect();
        let agg = aggregate_gradients(&grads)?;
        if !agg.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: stage.name.clone(),
                batch: b,
                last_good: Box::new(ckpt),
            });
        }
        let lr = match &schedule {
            Some(s) => s.lr_at(b)?,
            None => stage.peak_lr,
        };
        let previous = ckpt.params.clone();
        let stepped = adamw_step(&mut ckpt.params, &agg, &mut state, lr);
        if matches!(stepped, Err(Error::NonFinite(_))) || !ckpt.params.is_finite() {
            ckpt.params = previous;
            return Err(Error::NonFiniteLoss {
                stage: stage.name.clone(),
                batch: b,
                last_good: Box::new(ckpt),
            });
        }
        log.push(MetricsRecord {
            stage: stage.name.clone(),
            batch: b,
            lr: Some(lr),
            train_loss: Some(train_loss),
            val_native_loss: None,
            val_72h_loss: None,
        });
        if let Some(v) = &validator {
            if (b + 1) % interval == 0 || b + 1 == n_batches {
                log.push(v.record(&stage.name, b + 1, &ckpt, &pool)?);
            }
        }
        log::debug!("stage {} batch {b}: lr {lr:.3e} loss {train_loss:.5e}", stage.name);
    }
    ckpt.provenance.push(stage.name.clone());
    Ok((ckpt, log))
}

/// Swap the model onto `new_stats`, then train one stage under them.
pub fn renormalization_stage(
    ckpt_in: &Checkpoint,
    new_stats: &NormalizationStats,
    stage: &StageSpec,
    data: &TrainingData,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(Checkpoint, MetricsLog)> {
    new_stats.validate()?;
    if new_stats.layout != ckpt_in.config.layout {
        return Err(Error::ShapeMismatch("new statistics do not match the model layout".into()));
    }
    log::info!(
        "stage {}: renormalization stage at prescribed peak LR {:.3e}; LR search is inapplicable here",
        stage.name,
        stage.peak_lr
    );
    let mut swapped = ckpt_in.clone();
    swapped.stats = new_stats.clone();
    run_stage(&swapped, stage, data, opts, seed)
}

/// One row of an LR-search table; `loss` is +∞ for diverged probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrProbe {
    pub rate: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSearchResult {
    pub best: f64,
    pub batch_size: usize,
    pub table: Vec<LrProbe>,
}

/// Constant-rate probes from the same checkpoint and the same training
/// windows; the winner has the lowest validation loss, ties to the smaller rate.
#[allow(clippy::too_many_arguments)]
pub fn lr_search(
    ckpt: &Checkpoint,
    candidates: &[f64],
    probe_samples: usize,
    template: &StageSpec,
    data: &TrainingData,
    n_val: usize,
    opts: &TrainOptions,
    seed: u64,
) -> Result<LrSearchResult> {
    if candidates.len() < 2 {
        return Err(Error::InvalidParameter("LR search needs at least two candidates".into()));
    }
    if probe_samples < template.batch_size {
        return Err(Error::InvalidParameter(format!(
            "probe budget {probe_samples} is smaller than the batch size {}",
            template.batch_size
        )));
    }
    let mut probe_opts = opts.clone();
    probe_opts.validation.interval_fraction = 0.0;
    let loss = opts.stage_loss(ckpt, template)?;
    let val_dates = validation_dates(data.archive, data.validation, n_val, template.n_steps, opts.validation.seed)?;
    let pool = thread_pool(opts.workers)?;
    let mut table = Vec::with_capacity(candidates.len());
    for &rate in candidates {
        let stage = StageSpec {
            name: format!("{}-probe", template.name),
            peak_lr: rate,
            samples: probe_samples / template.batch_size * template.batch_size,
            constant_lr: true,
            ..template.clone()
        };
        let value = match run_stage(ckpt, &stage, data, &probe_opts, seed) {
            Ok((trained, _)) => match loss_on_dates(&trained, data.archive, &val_dates, &loss, &pool) {
                Err(Error::NonFinite(_)) => f64::INFINITY,
                other => other?,
            },
            Err(Error::NonFiniteLoss { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let value = if value.is_finite() { value } else { f64::INFINITY };
        log::info!("LR probe {rate:.3e}: validation loss {value:.5e}");
        table.push(LrProbe { rate, loss: value });
    }
    let best = table
        .iter()
        .filter(|p| p.loss.is_finite())
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.rate.total_cmp(&b.rate)))
        .ok_or(Error::AllProbesDiverged)?
        .rate;
    Ok(LrSearchResult {
        best,
        batch_size: template.batch_size,
        table,
    })
}

/// One probe under both batch-size normalizations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub batch_size: usize,
    pub rate: f64,
    pub loss: f64,
    pub lr_times_size: f64,
    pub lr_times_sqrt_size: f64,
}

/// Loss against `lr·size` and `lr·√size` for every probe of every search.
pub fn batch_scaling_report(searches: &[LrSearchResult]) -> Result<Vec<ScalingRow>> {
    let mut sizes: Vec<usize> = searches.iter().map(|s| s.batch_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(Error::InvalidParameter("batch scaling needs at least two batch sizes".into()));
    }
    let bounds = |s: &LrSearchResult| {
        let lo = s.table.iter().map(|p| p.rate).fold(f64::INFINITY, f64::min);
        let hi = s.table.iter().map(|p| p.rate).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let lo = searches.iter().map(|s| bounds(s).0).fold(f64::NEG_INFINITY, f64::max);
    let hi = searches.iter().map(|s| bounds(s).1).fold(f64::INFINITY, f64::min);
    if !(lo <= hi) {
        return Err(Error::InvalidParameter("candidate grids do not overlap".into()));
    }
    Ok(searches
        .iter()
        .flat_map(|s| {
            let n = s.batch_size as f64;
            s.table.iter().map(move |p| ScalingRow {
                batch_size: s.batch_size,
                rate: p.rate,
                loss: p.loss,
                lr_times_size: p.rate * n,
                lr_times_sqrt_size: p.rate * n.sqrt(),
            })
        })
        .collect())
}

pub fn write_scaling_csv<W: std::io::Write>(rows: &[ScalingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["batch_size", "lr", "loss", "lr_times_size", "lr_times_sqrt_size"])?;
    for r in rows {
        w.write_record([
            r.batch_size.to_string(),
            format!("{:e}", r.rate),
            format!("{:e}", r.loss),
            format!("{:e}", r.lr_times_size),
            format!("{:e}", r.lr_times_sqrt_size),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Seed of stage `name` under a run seed.
pub fn stage_seed(root: u64, name: &str) -> u64 {
    substream_seed(root, &format!("stage/{name}"))
}

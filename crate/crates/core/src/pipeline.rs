//! The end-to-end experiment: data generation, pretraining on System A,
//! curriculum fine-tuning on System B, and verification. Each step leaves a
//! marker naming the config digest, seed and output hashes; a rerun skips
//! steps whose markers and outputs are intact.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StagePlan};
use crate::data::norms::write_comparison_csv;
use crate::data::{compare_norm_stats, compute_normalization, generate_archive, AnalysisArchive, NormalizationStats};
use crate::emulator::{load_checkpoint, save_checkpoint, Checkpoint, ModelParams};
use crate::error::{Error, Result};
use crate::loss::{LevelWeights, LossSpec};
use crate::rng::{digest_hex, substream, substream_seed};
use crate::sensitivity::{
    noise_floor_check, run_sensitivity, sensitivity_dates, sensitivity_to_weights, NoiseFloorVerdict, SensitivityOptions,
    SensitivityWeights,
};
use crate::time::{self, Instant, STEP_HOURS};
use crate::trainer::{
    loss_on_dates, lr_search, renormalization_stage, run_stage, stage_seed, validation_dates, LrSearchResult, MetricsLog,
    StageSpec, TrainOptions, TrainingData, VALIDATION_MAX_STEPS,
};
use crate::verify::{
    build_climatology_smoothed, evaluate, make_forecasts, scorecard, spectral_report, top_third_ratio, write_eval_csv,
    write_spectral_csv, ClimatologyStore, EvalRow, ForecastSet,
};

/// Label of the checkpoint that fine-tuning starts from.
pub const PRETRAINED: &str = "pretrained";

#[derive(Debug, Clone, Default)]
pub struct PipelineControl {
    /// Stop cleanly after the named step (for staged runs and resume tests).
    pub stop_after: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OutputFile {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StepMarker {
    step: String,
    config_digest: String,
    seed: u64,
    outputs: Vec<OutputFile>,
}

/// Validation losses of one stage-final checkpoint on System B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageValidation {
    pub checkpoint: String,
    pub n_steps: usize,
    /// Single-step loss under the renormalization stage's loss.
    pub val_1step: f64,
    /// Loss at the stage's own horizon and weights.
    pub val_native: f64,
    /// Loss at the fixed horizon under the final stage's loss.
    pub val_fixed: f64,
    /// Mean spectral variance ratio over the top third of wavenumbers at the
    /// longest evaluated lead.
    pub top_third_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config_digest: String,
    pub seed: u64,
    pub stages: Vec<StageValidation>,
    /// RMSE rows for the pretrained model on both systems and every
    /// stage-final checkpoint on System B, over the test period.
    pub eval: Vec<EvalRow>,
    pub sensitivity: SensitivityWeights,
    pub noise_floor: NoiseFloorVerdict,
    /// LR-search tables by stage name.
    pub lr_searches: Vec<(String, LrSearchResult)>,
    pub spectral_lead_hours: usize,
}

impl PipelineSummary {
    pub fn stage(&self, name: &str) -> Option<&StageValidation> {
        self.stages.iter().find(|s| s.checkpoint == name)
    }

    /// RMSE of `label` for one variable, level label and lead.
    pub fn rmse(&self, label: &str, variable: &str, level: &str, lead_hours: usize) -> Option<f64> {
        self.eval
            .iter()
            .find(|r| r.label == label && r.variable == variable && r.level == level && r.lead_hours == lead_hours)
            .map(|r| r.rmse)
    }
}

/// Output locations of a run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn archive(&self, system: &str) -> PathBuf {
        self.root.join("data").join(format!("{system}.arc"))
    }
    pub fn stats(&self, system: &str) -> PathBuf {
        self.root.join("norms").join(format!("{system}.json"))
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }
    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }
    pub fn sensitivity(&self, file: &str) -> PathBuf {
        self.root.join("sensitivity").join(file)
    }
    pub fn eval(&self, file: &str) -> PathBuf {
        self.root.join("eval").join(file)
    }
    pub fn marker(&self, step: &str) -> PathBuf {
        self.root.join("steps").join(format!("{step}.json"))
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(digest_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Training options shared by every stage of a run.
pub fn train_options(config: &RunConfig) -> TrainOptions {
    TrainOptions {
        workers: config.workers,
        adamw: config.optimizer.adamw,
        terminal_lr: config.optimizer.terminal_lr,
        warmup_fraction: config.optimizer.warmup_fraction,
        variable_weights: None,
        validation: config.validation.clone(),
        fixed_horizon_weights: None,
    }
}

/// Training options for the curriculum stages after renormalization: the
/// fixed-horizon validation metric uses the final stage's level weights.
pub fn curriculum_options(config: &RunConfig, sensitivity: &LevelWeights) -> Result<TrainOptions> {
    let levels = &config.system_b().levels;
    let last = config.curriculum.last().ok_or_else(|| Error::Config("empty curriculum".into()))?;
    let mut opts = train_options(config);
    opts.fixed_horizon_weights = Some(last.resolve(levels, Some(sensitivity), "system_b")?.level_weights);
    Ok(opts)
}

struct Run<'a> {
    config: &'a RunConfig,
    paths: RunPaths,
    digest: String,
    control: &'a PipelineControl,
}

impl Run<'_> {
    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.paths.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    /// True when the step completed under this config and its outputs are intact.
    fn done(&self, step: &str) -> Result<bool> {
        let path = self.paths.marker(step);
        if !path.is_file() {
            return Ok(false);
        }
        let marker: StepMarker = read_json(&path)?;
        if marker.config_digest != self.digest || marker.seed != self.config.seed {
            return Ok(false);
        }
        for out in &marker.outputs {
            let p = self.paths.root.join(&out.path);
            if !p.is_file() || hash_file(&p)? != out.sha256 {
                log::warn!("step {step}: output {} is missing or changed; rerunning", out.path);
                return Ok(false);
            }
        }
        log::info!("step {step}: already complete, skipping");
        Ok(true)
    }

    fn finish(&self, step: &str, outputs: &[PathBuf]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(OutputFile {
                    path: self.rel(p),
                    sha256: hash_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(
            &self.paths.marker(step),
            &StepMarker {
                step: step.into(),
                config_digest: self.digest.clone(),
                seed: self.config.seed,
                outputs,
            },
        )?;
        log::info!("step {step}: complete");
        Ok(())
    }

    /// True when the run should stop after `step`, whether it ran now or earlier.
    fn stops_after(&self, step: &str) -> bool {
        self.control.stop_after.as_deref() == Some(step)
    }

    fn save_stage(&self, name: &str, ckpt: &Checkpoint, log: &MetricsLog) -> Result<Vec<PathBuf>> {
        let (cp, mp) = (self.paths.checkpoint(name), self.paths.metrics(name));
        ensure_parent(&cp)?;
        save_checkpoint(&cp, ckpt)?;
        log.write_csv(create(&mp)?)?;
        Ok(vec![cp, mp])
    }

    /// Run a training step, keeping the last good checkpoint on divergence.
    fn train(&self, name: &str, result: Result<(Checkpoint, MetricsLog)>) -> Result<(Checkpoint, MetricsLog)> {
        match result {
            Err(Error::NonFiniteLoss { stage, batch, last_good }) => {
                let p = self.paths.checkpoint(&format!("{name}.last-good"));
                ensure_parent(&p)?;
                save_checkpoint(&p, &last_good)?;
                log::error!("stage {stage} diverged at batch {batch}; last good checkpoint saved to {}", p.display());
                Err(Error::NonFiniteLoss { stage, batch, last_good })
            }
            other => other,
        }
    }
}

/// Run (or resume) the whole experiment. Returns `None` when stopped early
/// by `control`.
pub fn run_pipeline(config: &RunConfig, control: &PipelineControl) -> Result<Option<PipelineSummary>> {
    config.validate()?;
    let run = Run {
        config,
        paths: RunPaths::new(&config.output_dir),
        digest: config.digest(),
        control,
    };
    std::fs::create_dir_all(&run.paths.root).map_err(|e| Error::io(&run.paths.root, e))?;
    let stored = run.paths.root.join("config.json");
    if stored.is_file() {
        let previous: RunConfig = read_json(&stored)?;
        if previous.digest() != run.digest {
            return Err(Error::Config(format!(
                "{} holds a run of a different configuration (digest {})",
                run.paths.root.display(),
                previous.digest()
            )));
        }
    }
    config.save(&stored)?;
    log::info!("run {} (seed {}) in {}", run.digest, config.seed, run.paths.root.display());

    let seed = config.seed;
    let (spec_a, spec_b) = (config.system_a(), config.system_b());
    let dates = &config.dates;

    // Data.
    let (arc_a, arc_b) = if run.done("gen-data")? {
        (AnalysisArchive::load(&run.paths.archive("system_a"))?, AnalysisArchive::load(&run.paths.archive("system_b"))?)
    } else {
        let a = generate_archive(&spec_a, dates.archive, substream_seed(seed, "data/system_a"))?;
        let b = generate_archive(&spec_b, dates.archive, substream_seed(seed, "data/system_b"))?;
        let (pa, pb) = (run.paths.archive("system_a"), run.paths.archive("system_b"));
        ensure_parent(&pa)?;
        a.save(&pa)?;
        b.save(&pb)?;
        let manifest = run.paths.root.join("data").join("manifest.json");
        write_json(
            &manifest,
            &serde_json::json!({
                "config_digest": run.digest,
                "seed": seed,
                "archives": [
                    {"system": a.system(), "file": "system_a.arc", "spec_digest": a.spec_digest(), "seed": a.seed()},
                    {"system": b.system(), "file": "system_b.arc", "spec_digest": b.spec_digest(), "seed": b.seed()},
                ],
            }),
        )?;
        run.finish("gen-data", &[pa, pb, manifest])?;
        (a, b)
    };

    if run.stops_after("gen-data") {
        return Ok(None);
    }
    // Normalization statistics.
    let whole_years = dates.train.truncated_to_whole_years().is_some();
    let (stats_a, stats_b) = if run.done("norms")? {
        (NormalizationStats::load(&run.paths.stats("system_a"))?, NormalizationStats::load(&run.paths.stats("system_b"))?)
    } else {
        let a = compute_normalization(&arc_a, dates.train, whole_years)?;
        let b = compute_normalization(&arc_b, dates.train, whole_years)?;
        let (pa, pb, pc) = (run.paths.stats("system_a"), run.paths.stats("system_b"), run.paths.stats("comparison"));
        ensure_parent(&pa)?;
        a.save(&pa)?;
        b.save(&pb)?;
        let pc = pc.with_extension("csv");
        write_comparison_csv(&compare_norm_stats(&a, &b)?, create(&pc)?)?;
        run.finish("norms", &[pa, pb, pc])?;
        (a, b)
    };

    if run.stops_after("norms") {
        return Ok(None);
    }
    let levels = &spec_a.levels;
    let opts = train_options(config);
    let data_a = TrainingData::new(&arc_a, dates.train, dates.validation)?;
    let data_b = TrainingData::new(&arc_b, dates.train, dates.validation)?;

    // Pretraining on System A.
    let mut ckpt = match &config.init_checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let model = config.model.model_config(&spec_a);
            let params = ModelParams::init(&model, &mut substream(seed, "init"));
            Checkpoint::new(model, params, stats_a.clone())?
        }
    };
    for plan in &config.pretrain {
        let step = format!("pretrain-{}", plan.name);
        if run.done(&step)? {
            ckpt = load_checkpoint(&run.paths.checkpoint(&plan.name))?;
        } else {
            let stage = plan.resolve(levels, None, "system_a")?;
            let (next, log) = run.train(&plan.name, run_stage(&ckpt, &stage, &data_a, &opts, stage_seed(seed, &plan.name)))?;
            ckpt = next;
            let files = run.save_stage(&plan.name, &ckpt, &log)?;
            run.finish(&step, &files)?;
        }
        if run.stops_after(&step) {
            return Ok(None);
        }
    }
    let pretrained = ckpt.clone();
    if !run.done(PRETRAINED)? {
        let p = run.paths.checkpoint(PRETRAINED);
        ensure_parent(&p)?;
        save_checkpoint(&p, &pretrained)?;
        run.finish(PRETRAINED, &[p])?;
    }
    if run.stops_after(PRETRAINED) {
        return Ok(None);
    }

    // Renormalization stage on System B.
    let first = &config.curriculum[0];
    let stage_1a = first.resolve(levels, None, "system_b")?;
    ckpt = if run.done(&first.name)? {
        load_checkpoint(&run.paths.checkpoint(&first.name))?
    } else {
        let (next, log) = run.train(
            &first.name,
            renormalization_stage(&ckpt, &stats_b, &stage_1a, &data_b, &opts, stage_seed(seed, &first.name)),
        )?;
        let files = run.save_stage(&first.name, &next, &log)?;
        run.finish(&first.name, &files)?;
        next
    };
    if run.stops_after(&first.name) {
        return Ok(None);
    }
    let mut finals = vec![(first.name.clone(), ckpt.clone(), stage_1a.clone())];

    // Sensitivity-derived level weights from the renormalized model.
    let (sens, verdict) = if run.done("sensitivity")? {
        (
            read_json::<SensitivityWeights>(&run.paths.sensitivity("weights.json"))?,
            read_json::<NoiseFloorVerdict>(&run.paths.sensitivity("noise_floor.json"))?,
        )
    } else {
        let s = &config.sensitivity;
        let sd = sensitivity_dates(&arc_b, dates.train, s.n_dates, s.lead_days, substream_seed(seed, "sensitivity-dates"))?;
        let sopts = SensitivityOptions {
            lead_days: s.lead_days,
            epsilon_rule: s.epsilon_rule,
            workers: config.workers,
        };
        let raw = run_sensitivity(&ckpt, &arc_b, &sd, &sopts)?;
        let weights = sensitivity_to_weights(&raw, substream_seed(seed, "bootstrap"))?;
        let verdict = noise_floor_check(&weights);
        if !verdict.pass {
            log::warn!("sensitivity noise-floor check failed: margins {:?}", verdict.margins);
        }
        let files = [
            run.paths.sensitivity("raw.csv"),
            run.paths.sensitivity("weights.csv"),
            run.paths.sensitivity("weights.json"),
            run.paths.sensitivity("noise_floor.json"),
        ];
        raw.write_csv(create(&files[0])?)?;
        weights.write_csv(create(&files[1])?)?;
        write_json(&files[2], &weights)?;
        write_json(&files[3], &verdict)?;
        run.finish("sensitivity", &files)?;
        (weights, verdict)
    };
    if run.stops_after("sensitivity") {
        return Ok(None);
    }
    let sens_weights: LevelWeights = sens.level_weights.clone();

    // Later stages.
    let last = config.curriculum.last().unwrap().resolve(levels, Some(&sens_weights), "system_b")?;
    let opts_b = curriculum_options(config, &sens_weights)?;
    let mut searches = Vec::new();
    for plan in &config.curriculum[1..] {
        let mut plan: StagePlan = plan.clone();
        if let Some(ls) = config.lr_search.as_ref().filter(|ls| ls.stages.contains(&plan.name)) {
            let step = format!("lr-search-{}", plan.name);
            let result: LrSearchResult = if run.done(&step)? {
                read_json(&run.paths.eval(&format!("lr_search_{}.json", plan.name)))?
            } else {
                let template = plan.resolve(levels, Some(&sens_weights), "system_b")?;
                let r = lr_search(
                    &ckpt,
                    &ls.candidates,
                    ls.probe_samples,
                    &template,
                    &data_b,
                    ls.n_val,
                    &opts_b,
                    substream_seed(seed, &format!("lr-search/{}", plan.name)),
                )?;
                let (pj, pc) = (
                    run.paths.eval(&format!("lr_search_{}.json", plan.name)),
                    run.paths.eval(&format!("lr_search_{}.csv", plan.name)),
                );
                write_json(&pj, &r)?;
                write_lr_search_csv(&r, create(&pc)?)?;
                run.finish(&step, &[pj, pc])?;
                r
            };
            if run.stops_after(&step) {
                return Ok(None);
            }
            if ls.apply {
                log::info!("stage {}: peak LR {:.3e} from search (configured {:.3e})", plan.name, result.best, plan.peak_lr);
                plan.peak_lr = result.best;
            }
            searches.push((plan.name.clone(), result));
        }
        let stage = plan.resolve(levels, Some(&sens_weights), "system_b")?;
        ckpt = if run.done(&plan.name)? {
            load_checkpoint(&run.paths.checkpoint(&plan.name))?
        } else {
            let (next, log) = run.train(&plan.name, run_stage(&ckpt, &stage, &data_b, &opts_b, stage_seed(seed, &plan.name)))?;
            let files = run.save_stage(&plan.name, &next, &log)?;
            run.finish(&plan.name, &files)?;
            next
        };
        if run.stops_after(&plan.name) {
            return Ok(None);
        }
        finals.push((plan.name.clone(), ckpt.clone(), stage));
    }

    // Verification.
    if run.done("evaluate")? {
        return read_json(&run.paths.summary()).map(Some);
    }
    let summary = evaluate_run(config, &run, &arc_a, &arc_b, &pretrained, &finals, &stage_1a, &last, sens, verdict, searches)?;
    run.finish("evaluate", &[run.paths.summary()])?;
    Ok(Some(summary))
}

/// The probe table of an LR search, marking the selected rate.
pub fn write_lr_search_csv<W: std::io::Write>(r: &LrSearchResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rate", "validation_loss", "selected"])?;
    for p in &r.table {
        w.write_record([format!("{:e}", p.rate), format!("{:e}", p.loss), (p.rate == r.best).to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Test-period initializations shared by every evaluation of a run.
pub fn test_inits(config: &RunConfig, archive: &AnalysisArchive) -> Result<Vec<Instant>> {
    let ev = &config.evaluation;
    let max_lead = ev.lead_steps.iter().copied().max().unwrap_or(1);
    validation_dates(archive, config.dates.test, ev.n_inits, max_lead, substream_seed(config.seed, "test-dates"))
}

/// Training-period climatology of `archive`, or `None` (with a warning) when
/// it lacks a bucket for some verifying time; ACC is then not reported.
pub fn test_climatology(config: &RunConfig, archive: &AnalysisArchive, inits: &[Instant]) -> Result<Option<ClimatologyStore>> {
    let ev = &config.evaluation;
    let clim = build_climatology_smoothed(archive, config.dates.train, ev.climatology_half_width_days)?;
    let covers = inits
        .iter()
        .all(|&t0| ev.lead_steps.iter().all(|&s| clim.field(t0 + time::step() * s as i32).is_ok()));
    if covers {
        Ok(Some(clim))
    } else {
        log::warn!("training-period climatology of {} misses test dates; ACC not reported", archive.system());
        Ok(None)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_digest: String,
    seed: u64,
    inputs: Vec<OutputFile>,
    outputs: Vec<OutputFile>,
}

/// Record which config, seed and files produced `outputs`, with content hashes.
pub fn write_manifest(path: &Path, command: &str, config: &RunConfig, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let entries = |files: &[PathBuf]| -> Result<Vec<OutputFile>> {
        files
            .iter()
            .map(|p| {
                Ok(OutputFile {
                    path: p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                    sha256: hash_file(p)?,
                })
            })
            .collect()
    };
    write_json(
        path,
        &Manifest {
            command,
            config_digest: config.digest(),
            seed: config.seed,
            inputs: entries(inputs)?,
            outputs: entries(outputs)?,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn evaluate_run(
    config: &RunConfig,
    run: &Run,
    arc_a: &AnalysisArchive,
    arc_b: &AnalysisArchive,
    pretrained: &Checkpoint,
    finals: &[(String, Checkpoint, StageSpec)],
    stage_1a: &StageSpec,
    last: &StageSpec,
    sensitivity: SensitivityWeights,
    noise_floor: NoiseFloorVerdict,
    lr_searches: Vec<(String, LrSearchResult)>,
) -> Result<PipelineSummary> {
    let seed = config.seed;
    let ev = &config.evaluation;
    let dates = &config.dates;
    let opts = train_options(config);
    let pool = crate::trainer::thread_pool(config.workers)?;
    let final_ckpt = &finals.last().unwrap().1;

    // Validation losses of every stage-final checkpoint, all under System-B
    // statistics for the loss's σ_Δ.
    let vs = &config.validation;
    let val_dates = validation_dates(arc_b, dates.validation, vs.n_dates, VALIDATION_MAX_STEPS, vs.seed)?;
    let spec_for = |stage: &StageSpec, steps: usize| -> Result<LossSpec> {
        Ok(opts.stage_loss(final_ckpt, stage)?.with_steps(steps))
    };
    let loss_1 = spec_for(stage_1a, 1)?;
    let loss_fixed = spec_for(last, vs.fixed_horizon.max(1))?;

    let max_lead = *ev.lead_steps.iter().max().unwrap();
    let inits = test_inits(config, arc_b)?;
    let channel = config.system_b().layout().channel_by_name(&ev.spectral_variable, ev.spectral_level)?;
    let spectral_lead_hours = max_lead * STEP_HOURS as usize;

    let clim_a = test_climatology(config, arc_a, &inits)?;
    let clim_b = test_climatology(config, arc_b, &inits)?;
    let mut eval_rows = Vec::new();
    let forecasts = |label: &str, ckpt: &Checkpoint, arc: &AnalysisArchive| -> Result<ForecastSet> {
        make_forecasts(label, ckpt, arc, &inits, &ev.lead_steps, config.workers)
    };
    eval_rows.extend(evaluate(&forecasts(&format!("{PRETRAINED}@system_a"), pretrained, arc_a)?, arc_a, clim_a.as_ref())?);
    let base_b = forecasts(&format!("{PRETRAINED}@system_b"), pretrained, arc_b)?;
    eval_rows.extend(evaluate(&base_b, arc_b, clim_b.as_ref())?);

    let mut stages = Vec::new();
    let mut spectra_files = Vec::new();
    let mut report = |label: &str, set: &ForecastSet| -> Result<Option<f64>> {
        let rows = spectral_report(set, arc_b, channel, ev.lmax, ev.band_fraction)?;
        let p = run.paths.eval(&format!("spectra_{label}.csv"));
        write_spectral_csv(&rows, create(&p)?)?;
        spectra_files.push(p);
        Ok(top_third_ratio(&rows, spectral_lead_hours, ev.lmax))
    };
    let base_ratio = report(PRETRAINED, &base_b)?;
    let native_pre = spec_for(stage_1a, 1)?;
    stages.push(StageValidation {
        checkpoint: PRETRAINED.into(),
        n_steps: 1,
        val_1step: loss_on_dates(pretrained, arc_b, &val_dates, &loss_1, &pool)?,
        val_native: loss_on_dates(pretrained, arc_b, &val_dates, &native_pre, &pool)?,
        val_fixed: loss_on_dates(pretrained, arc_b, &val_dates, &loss_fixed, &pool)?,
        top_third_ratio: base_ratio,
    });
    let mut final_set = None;
    for (name, ckpt, stage) in finals {
        let set = forecasts(&format!("{name}@system_b"), ckpt, arc_b)?;
        eval_rows.extend(evaluate(&set, arc_b, clim_b.as_ref())?);
        let ratio = report(name, &set)?;
        let native = spec_for(stage, stage.n_steps)?;
        stages.push(StageValidation {
            checkpoint: name.clone(),
            n_steps: stage.n_steps,
            val_1step: loss_on_dates(ckpt, arc_b, &val_dates, &loss_1, &pool)?,
            val_native: loss_on_dates(ckpt, arc_b, &val_dates, &native, &pool)?,
            val_fixed: loss_on_dates(ckpt, arc_b, &val_dates, &loss_fixed, &pool)?,
            top_third_ratio: ratio,
        });
        final_set = Some(set);
    }
    let card = scorecard(final_set.as_ref().unwrap(), &base_b, arc_b, &ev.scorecard)?;

    let p_eval = run.paths.eval("rmse_acc.csv");
    write_eval_csv(&eval_rows, create(&p_eval)?)?;
    let p_card = run.paths.eval("scorecard.csv");
    card.write_csv(create(&p_card)?)?;
    let p_stages = run.paths.eval("stage_validation.csv");
    write_stage_csv(&stages, create(&p_stages)?)?;
    let p_metrics = run.paths.root.join("metrics.csv");
    let mut all = MetricsLog::new();
    for plan in config.pretrain.iter().chain(&config.curriculum) {
        all.extend(read_metrics(&run.paths.metrics(&plan.name))?);
    }
    all.write_csv(create(&p_metrics)?)?;

    let summary = PipelineSummary {
        config_digest: run.digest.clone(),
        seed,
        stages,
        eval: eval_rows,
        sensitivity,
        noise_floor,
        lr_searches,
        spectral_lead_hours,
    };
    write_json(&run.paths.summary(), &summary)?;
    Ok(summary)
}

fn read_metrics(path: &Path) -> Result<MetricsLog> {
    MetricsLog::read_csv(File::open(path).map_err(|e| Error::io(path, e))?)
}

fn write_stage_csv<W: std::io::Write>(rows: &[StageValidation], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["checkpoint", "n_steps", "val_1step", "val_native", "val_fixed", "top_third_ratio"])?;
    for r in rows {
        w.write_record([
            r.checkpoint.clone(),
            r.n_steps.to_string(),
            format!("{:e}", r.val_1step),
            format!("{:e}", r.val_native),
            format!("{:e}", r.val_fixed),
            r.top_third_ratio.map_or(String::new(), |v| format!("{v:e}")),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}


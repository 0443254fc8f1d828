use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use emutune_core::config::{RunConfig, StagePlan, WeightChoice};
use emutune_core::data::norms::write_comparison_csv;
use emutune_core::data::{compare_norm_stats, sample_window, AnalysisArchive, NormalizationStats};
use emutune_core::emulator::{grad_check, load_checkpoint, save_checkpoint, Checkpoint, ModelParams};
use emutune_core::loss::LevelWeights;
use emutune_core::pipeline::{
    curriculum_options, run_pipeline, test_climatology, test_inits, train_options, write_lr_search_csv, write_manifest,
    PipelineControl, RunPaths,
};
use emutune_core::rng::{substream, substream_seed};
use emutune_core::sensitivity::{
    noise_floor_check, run_sensitivity, sensitivity_dates, sensitivity_to_weights, SensitivityOptions, SensitivityWeights,
};
use emutune_core::time::STEP_HOURS;
use emutune_core::trainer::{
    lr_search, renormalization_stage, run_stage, split_horizon_sweep, stage_seed, validation_dates, StageSpec, TrainOptions,
    TrainingData,
};
use emutune_core::verify::{
    evaluate, make_forecasts, scorecard, spectral_report, top_third_ratio, write_eval_csv, write_spectral_csv,
};
use emutune_core::Error;

use crate::{Command, Global, Preset, System, UsageError};

/// Relative finite-difference steps; the first is the reported comparison.
const GRAD_CHECK_STEPS: [f64; 4] = [1e-5, 1e-3, 1e-4, 1e-6];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidParameter(msg.into()).into()
}

struct Data {
    arc_a: AnalysisArchive,
    arc_b: AnalysisArchive,
    stats_b: NormalizationStats,
}

impl Data {
    fn archive(&self, system: System) -> &AnalysisArchive {
        match system {
            System::A => &self.arc_a,
            System::B => &self.arc_b,
        }
    }
}

struct Ctx {
    config: RunConfig,
    paths: RunPaths,
}

impl Ctx {
    fn new(global: &Global) -> Result<Self> {
        let path = global
            .config
            .as_ref()
            .ok_or_else(|| UsageError("--config is required for this command".into()))?;
        let mut config = RunConfig::load(path)?;
        if let Some(seed) = global.seed {
            config.seed = seed;
        }
        if let Some(workers) = global.workers {
            config.workers = workers;
        }
        if let Some(dir) = &global.output_dir {
            config.output_dir = dir.clone();
        }
        config.validate()?;
        let paths = RunPaths::new(&config.output_dir);
        Ok(Self { config, paths })
    }

    fn run_to(&self, step: &str) -> Result<()> {
        run_pipeline(
            &self.config,
            &PipelineControl {
                stop_after: Some(step.into()),
            },
        )?;
        Ok(())
    }

    /// Archives and statistics, generated first when missing.
    fn data(&self) -> Result<Data> {
        self.run_to("norms")?;
        Ok(Data {
            arc_a: AnalysisArchive::load(&self.paths.archive("system_a"))?,
            arc_b: AnalysisArchive::load(&self.paths.archive("system_b"))?,
            stats_b: NormalizationStats::load(&self.paths.stats("system_b"))?,
        })
    }

    /// A checkpoint file, or the name of one in the run directory.
    fn checkpoint(&self, arg: &str) -> Result<(PathBuf, Checkpoint)> {
        let direct = PathBuf::from(arg);
        let path = if direct.is_file() { direct } else { self.paths.checkpoint(arg) };
        if !path.is_file() {
            return Err(invalid(format!("no checkpoint file {arg} and none named {arg} in {}", self.paths.root.display())));
        }
        let ckpt = load_checkpoint(&path)?;
        Ok((path, ckpt))
    }

    /// Sensitivity weights computed earlier in this run, if any.
    fn sensitivity(&self) -> Result<Option<(PathBuf, LevelWeights)>> {
        let path = self.paths.sensitivity("weights.json");
        if !path.is_file() {
            return Ok(None);
        }
        let w: SensitivityWeights = serde_json::from_slice(&std::fs::read(&path)?)
            .map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        Ok(Some((path, w.level_weights)))
    }

    fn plan(&self, name: &str) -> Result<(StagePlan, bool)> {
        let plan = self
            .config
            .stage_plan(name)
            .ok_or_else(|| Error::Config(format!("no stage named {name} in the configuration")))?;
        let pretrain = self.config.pretrain.iter().any(|p| p.name == name);
        Ok((plan.clone(), pretrain))
    }

    /// Resolved stage, its options, and the weights file it depends on.
    fn stage(&self, plan: &StagePlan, pretrain: bool) -> Result<(StageSpec, TrainOptions, Option<PathBuf>)> {
        let levels = &self.config.system_a().levels;
        if pretrain {
            return Ok((plan.resolve(levels, None, "system_a")?, train_options(&self.config), None));
        }
        let sens = self.sensitivity()?;
        if plan.weights == WeightChoice::Sensitivity && sens.is_none() {
            return Err(Error::Config(format!("stage {} needs sensitivity weights; run sensitivity-weights first", plan.name)).into());
        }
        let spec = plan.resolve(levels, sens.as_ref().map(|s| &s.1), "system_b")?;
        let first = plan.name == self.config.curriculum[0].name;
        let opts = match (&sens, first) {
            (Some((_, w)), false) => curriculum_options(&self.config, w)?,
            _ => train_options(&self.config),
        };
        Ok((spec, opts, sens.map(|s| s.0)))
    }

    fn out_dir(&self, out: Option<PathBuf>, command: &str) -> PathBuf {
        out.unwrap_or_else(|| self.paths.root.join("cli").join(command))
    }

    fn finish(&self, dir: &Path, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        write_manifest(&dir.join("manifest.json"), command, &self.config, inputs, outputs)?;
        for p in outputs {
            println!("{}", p.display());
        }
        Ok(())
    }
}

fn parse_split(s: &str) -> Result<Vec<usize>> {
    s.split('+')
        .map(|p| p.trim().parse::<usize>().map_err(|_| invalid(format!("bad split {s:?}; expected lengths like 4+8"))))
        .collect()
}

fn parse_labelled(arg: &str) -> (String, String) {
    match arg.split_once('=') {
        Some((label, path)) => (label.to_string(), path.to_string()),
        None => (arg.to_string(), arg.to_string()),
    }
}

fn system_name(system: System) -> &'static str {
    match system {
        System::A => "system_a",
        System::B => "system_b",
    }
}

pub fn run(global: &Global, command: Command) -> Result<()> {
    if let Command::InitConfig { preset, out } = command {
        let mut config = match preset {
            Preset::Smoke => RunConfig::smoke(),
            Preset::Reference => RunConfig::reference(),
        };
        if let Some(seed) = global.seed {
            config.seed = seed;
        }
        if let Some(dir) = &global.output_dir {
            config.output_dir = dir.clone();
        }
        let text = serde_json::to_string_pretty(&config)?;
        match out {
            Some(p) => {
                let mut w = create(&p)?;
                writeln!(w, "{text}")?;
                w.flush()?;
            }
            None => println!("{text}"),
        }
        return Ok(());
    }
    let ctx = Ctx::new(global)?;
    let config = &ctx.config;
    let seed = config.seed;
    match command {
        Command::InitConfig { .. } => unreachable!(),
        Command::GenData => {
            ctx.run_to("gen-data")?;
            for s in ["system_a", "system_b"] {
                println!("{}", ctx.paths.archive(s).display());
            }
        }
        Command::ComputeNorms => {
            ctx.run_to("norms")?;
            for s in ["system_a", "system_b"] {
                println!("{}", ctx.paths.stats(s).display());
            }
        }
        Command::CompareNorms { a, b, out } => {
            if a.is_none() || b.is_none() {
                ctx.run_to("norms")?;
            }
            let pa = a.unwrap_or_else(|| ctx.paths.stats("system_a"));
            let pb = b.unwrap_or_else(|| ctx.paths.stats("system_b"));
            let rows = compare_norm_stats(&NormalizationStats::load(&pa)?, &NormalizationStats::load(&pb)?)?;
            let dir = ctx.out_dir(out, "compare-norms");
            let p = dir.join("comparison.csv");
            write_comparison_csv(&rows, create(&p)?)?;
            ctx.finish(&dir, "compare-norms", &[pa, pb], &[p])?;
        }
        Command::LrSearch {
            stage,
            checkpoint,
            candidates,
            out,
        } => {
            let ls = config
                .lr_search
                .as_ref()
                .ok_or_else(|| Error::Config("the configuration has no lr_search section".into()))?;
            let candidates = if candidates.is_empty() { ls.candidates.clone() } else { candidates };
            let data = ctx.data()?;
            let (plan, pretrain) = ctx.plan(&stage)?;
            let (template, opts, weights) = ctx.stage(&plan, pretrain)?;
            let (cp, ckpt) = ctx.checkpoint(&checkpoint)?;
            let arc = if pretrain { &data.arc_a } else { &data.arc_b };
            let td = TrainingData::new(arc, config.dates.train, config.dates.validation)?;
            let result = lr_search(
                &ckpt,
                &candidates,
                ls.probe_samples,
                &template,
                &td,
                ls.n_val,
                &opts,
                substream_seed(seed, &format!("lr-search/{stage}")),
            )?;
            let dir = ctx.out_dir(out, "lr-search");
            let (pj, pc) = (dir.join(format!("lr_search_{stage}.json")), dir.join(format!("lr_search_{stage}.csv")));
            write_json(&pj, &result)?;
            write_lr_search_csv(&result, create(&pc)?)?;
            let inputs: Vec<PathBuf> = std::iter::once(cp).chain(weights).collect();
            ctx.finish(&dir, "lr-search", &inputs, &[pj, pc])?;
            eprintln!("selected peak LR {:e}", result.best);
        }
        Command::TrainStage {
            stage,
            checkpoint,
            peak_lr,
            out,
        } => {
            let data = ctx.data()?;
            let (mut plan, pretrain) = ctx.plan(&stage)?;
            if let Some(lr) = peak_lr {
                plan.peak_lr = lr;
            }
            let (spec, opts, weights) = ctx.stage(&plan, pretrain)?;
            let (cp, ckpt) = ctx.checkpoint(&checkpoint)?;
            let arc = if pretrain { &data.arc_a } else { &data.arc_b };
            let td = TrainingData::new(arc, config.dates.train, config.dates.validation)?;
            let stage_rng = stage_seed(seed, &stage);
            let (next, log) = if !pretrain && stage == config.curriculum[0].name {
                renormalization_stage(&ckpt, &data.stats_b, &spec, &td, &opts, stage_rng)?
            } else {
                run_stage(&ckpt, &spec, &td, &opts, stage_rng)?
            };
            let dir = ctx.out_dir(out, "train-stage");
            let (pk, pm) = (dir.join(format!("{stage}.ckpt")), dir.join(format!("{stage}_metrics.csv")));
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&pk, &next)?;
            log.write_csv(create(&pm)?)?;
            let inputs: Vec<PathBuf> = std::iter::once(cp).chain(weights).collect();
            ctx.finish(&dir, "train-stage", &inputs, &[pk, pm])?;
        }
        Command::SensitivityWeights { checkpoint, out } => {
            let data = ctx.data()?;
            let (cp, ckpt) = ctx.checkpoint(&checkpoint)?;
            let s = &config.sensitivity;
            let dates = sensitivity_dates(&data.arc_b, config.dates.train, s.n_dates, s.lead_days, substream_seed(seed, "sensitivity-dates"))?;
            let opts = SensitivityOptions {
                lead_days: s.lead_days,
                epsilon_rule: s.epsilon_rule,
                workers: config.workers,
            };
            let raw = run_sensitivity(&ckpt, &data.arc_b, &dates, &opts)?;
            let weights = sensitivity_to_weights(&raw, substream_seed(seed, "bootstrap"))?;
            let verdict = noise_floor_check(&weights);
            let dir = ctx.out_dir(out, "sensitivity-weights");
            let files = ["raw.csv", "weights.csv", "weights.json", "noise_floor.json"].map(|f| dir.join(f));
            raw.write_csv(create(&files[0])?)?;
            weights.write_csv(create(&files[1])?)?;
            write_json(&files[2], &weights)?;
            write_json(&files[3], &verdict)?;
            ctx.finish(&dir, "sensitivity-weights", &[cp], &files)?;
            if !verdict.pass {
                log::warn!("noise-floor check failed: margins {:?}", verdict.margins);
            }
        }
        Command::GradCheck {
            checkpoint,
            steps,
            probes,
            out,
        } => {
            let data = ctx.data()?;
            let (inputs, ckpt) = match &checkpoint {
                Some(c) => {
                    let (p, k) = ctx.checkpoint(c)?;
                    (vec![p], k)
                }
                None => {
                    let model = config.model.model_config(&config.system_b());
                    let params = ModelParams::init(&model, &mut substream(seed, "init"));
                    (Vec::new(), Checkpoint::new(model, params, data.stats_b.clone())?)
                }
            };
            let plan = StagePlan {
                name: "grad-check".into(),
                n_steps: steps,
                peak_lr: 0.0,
                samples: 0,
                batch_size: 1,
                weights: WeightChoice::Pressure,
                split_points: Vec::new(),
            };
            let spec = plan.resolve(&config.system_b().levels, None, "system_b")?;
            let loss = train_options(config).stage_loss(&ckpt, &spec)?;
            let valid = validation_dates(&data.arc_b, config.dates.train, 1, steps, substream_seed(seed, "grad-check"))?[0];
            let window = sample_window(&data.arc_b, valid, steps)?;
            let report = grad_check(
                &ckpt.config,
                &ckpt.params,
                &ckpt.stats,
                &window,
                &loss,
                probes,
                &GRAD_CHECK_STEPS,
                &mut substream(seed, "grad-check/probes"),
            )?;
            let dir = ctx.out_dir(out, "grad-check");
            let (pj, pc) = (dir.join("grad_check.json"), dir.join("grad_check.csv"));
            write_json(&pj, &report)?;
            let mut w = create(&pc)?;
            writeln!(w, "set,probes,max_rel_error")?;
            for e in &report.entries {
                writeln!(w, "{},{},{:.6e}", e.set, e.probes, e.max_rel_error)?;
            }
            w.flush()?;
            ctx.finish(&dir, "grad-check", &inputs, &[pj, pc])?;
            eprintln!("max relative error {:.3e} at step {:e}", report.max_rel_error(), report.step);
        }
        Command::SplitHorizonDiag {
            checkpoint,
            stage,
            windows,
            splits,
            out,
        } => {
            let data = ctx.data()?;
            let name = stage.unwrap_or_else(|| config.curriculum.last().unwrap().name.clone());
            let (plan, pretrain) = ctx.plan(&name)?;
            let (spec, opts, weights) = ctx.stage(&plan, pretrain)?;
            let (cp, ckpt) = ctx.checkpoint(&checkpoint)?;
            let n = spec.n_steps;
            let splits = if splits.is_empty() {
                let mut s = vec![vec![n]];
                s.extend((1..n).map(|k| vec![k, n - k]));
                if n > 2 {
                    s.push(vec![1; n]);
                }
                s
            } else {
                splits.iter().map(|s| parse_split(s)).collect::<Result<_>>()?
            };
            let loss = opts.stage_loss(&ckpt, &spec)?;
            let arc = if pretrain { &data.arc_a } else { &data.arc_b };
            let report = split_horizon_sweep(
                &ckpt,
                arc,
                config.dates.validation,
                &loss,
                &splits,
                windows,
                substream_seed(seed, "split-horizon"),
                config.workers,
            )?;
            let dir = ctx.out_dir(out, "split-horizon-diag");
            let (pr, ps) = (dir.join("windows.csv"), dir.join("summary.csv"));
            report.write_rows_csv(create(&pr)?)?;
            report.write_summary_csv(create(&ps)?)?;
            let inputs: Vec<PathBuf> = std::iter::once(cp).chain(weights).collect();
            ctx.finish(&dir, "split-horizon-diag", &inputs, &[pr, ps])?;
        }
        Command::Evaluate { checkpoints, system, out } => {
            let data = ctx.data()?;
            let arc = data.archive(system);
            let inits = test_inits(config, &data.arc_b)?;
            let clim = test_climatology(config, arc, &inits)?;
            let mut rows = Vec::new();
            let mut inputs = Vec::new();
            for arg in &checkpoints {
                let (label, path) = parse_labelled(arg);
                let (cp, ckpt) = ctx.checkpoint(&path)?;
                let label = format!("{label}@{}", system_name(system));
                let set = make_forecasts(&label, &ckpt, arc, &inits, &config.evaluation.lead_steps, config.workers)?;
                rows.extend(evaluate(&set, arc, clim.as_ref())?);
                inputs.push(cp);
            }
            let dir = ctx.out_dir(out, "evaluate");
            let p = dir.join("rmse_acc.csv");
            write_eval_csv(&rows, create(&p)?)?;
            ctx.finish(&dir, "evaluate", &inputs, &[p])?;
        }
        Command::Spectra { checkpoints, system, out } => {
            let data = ctx.data()?;
            let arc = data.archive(system);
            let ev = &config.evaluation;
            let inits = test_inits(config, &data.arc_b)?;
            let channel = arc.layout().channel_by_name(&ev.spectral_variable, ev.spectral_level)?;
            let lead_hours = ev.lead_steps.iter().max().unwrap() * STEP_HOURS as usize;
            let dir = ctx.out_dir(out, "spectra");
            let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
            for arg in &checkpoints {
                let (label, path) = parse_labelled(arg);
                let (cp, ckpt) = ctx.checkpoint(&path)?;
                let set = make_forecasts(&label, &ckpt, arc, &inits, &ev.lead_steps, config.workers)?;
                let rows = spectral_report(&set, arc, channel, ev.lmax, ev.band_fraction)?;
                let p = dir.join(format!("spectra_{label}.csv"));
                write_spectral_csv(&rows, create(&p)?)?;
                if let Some(r) = top_third_ratio(&rows, lead_hours, ev.lmax) {
                    eprintln!("{label}: top-third variance ratio {r:.4} at {lead_hours} h");
                }
                inputs.push(cp);
                outputs.push(p);
            }
            ctx.finish(&dir, "spectra", &inputs, &outputs)?;
        }
        Command::Scorecard {
            candidate,
            reference,
            system,
            out,
        } => {
            let data = ctx.data()?;
            let arc = data.archive(system);
            let inits = test_inits(config, &data.arc_b)?;
            let (lc, pc) = parse_labelled(&candidate);
            let (lr, pr) = parse_labelled(&reference);
            let (fc, kc) = ctx.checkpoint(&pc)?;
            let (fr, kr) = ctx.checkpoint(&pr)?;
            let ev = &config.evaluation;
            let sc = make_forecasts(&lc, &kc, arc, &inits, &ev.lead_steps, config.workers)?;
            let sr = make_forecasts(&lr, &kr, arc, &inits, &ev.lead_steps, config.workers)?;
            let card = scorecard(&sc, &sr, arc, &ev.scorecard)?;
            let dir = ctx.out_dir(out, "scorecard");
            let p = dir.join("scorecard.csv");
            card.write_csv(create(&p)?)?;
            ctx.finish(&dir, "scorecard", &[fc, fr], &[p])?;
        }
        Command::Pipeline { stop_after } => {
            let control = PipelineControl { stop_after };
            match run_pipeline(config, &control)? {
                None => eprintln!("stopped after {}", control.stop_after.unwrap_or_default()),
                Some(summary) => {
                    println!("{:<12} {:>12} {:>12} {:>12} {:>10}", "checkpoint", "val_1step", "val_native", "val_fixed", "top_third");
                    for s in &summary.stages {
                        let ratio = s.top_third_ratio.map_or("-".into(), |r| format!("{r:.4}"));
                        println!(
                            "{:<12} {:>12.5} {:>12.5} {:>12.5} {:>10}",
                            s.checkpoint, s.val_1step, s.val_native, s.val_fixed, ratio
                        );
                    }
                    println!("{}", ctx.paths.summary().display());
                }
            }
        }
    }
    Ok(())
}

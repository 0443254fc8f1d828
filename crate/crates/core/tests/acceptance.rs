//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use chrono::{TimeZone, Utc};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emutune_core::config::RunConfig;
use emutune_core::data::{
    compute_normalization, generate_archive, sample_window, AnalysisArchive, FieldState, Layout, LevelSet,
    NormalizationStats, Space, SystemSpec,
};
use emutune_core::emulator::{grad_check, load_checkpoint, Activation, Checkpoint, ModelConfig, ModelParams, ParamSets, ParamTensor};
use emutune_core::grid::{Grid, GridDims};
use emutune_core::loss::{pressure_level_weights, weighted_mse, LevelWeights, LossSpec, VariableWeights, WeightScheme};
use emutune_core::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState, PAPER_TERMINAL_LR};
use emutune_core::pipeline::{curriculum_options, run_pipeline, PipelineControl, PipelineSummary, RunPaths};
use emutune_core::sensitivity::{noise_floor_check, sensitivity_to_weights, EpsilonRule, OutputPoint, SensitivityRawOutput};
use emutune_core::spectral::{sht_forward, sht_inverse, spectral_variance, HarmonicCoefficients};
use emutune_core::time::{step, DateRange, Instant};
use emutune_core::trainer::{split_horizon_sweep, validation_dates};
use emutune_core::verify::{
    acc, build_climatology, make_forecasts, rmse, scorecard, skill, spectral_pair, BandAggregation, ScorecardSpec,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn t0() -> Instant {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
}

/// A small System B archive for the synthetic checks.
fn small_archive(nlat: usize, nlon: usize, days: i64, seed: u64) -> AnalysisArchive {
    let spec = SystemSpec::system_b(GridDims { nlat, nlon });
    let range = DateRange::new(t0(), t0() + chrono::Duration::days(days)).unwrap();
    generate_archive(&spec, range, seed).unwrap()
}

// ---------------------------------------------------------------- 1

fn pressure_anchor() -> Outcome {
    let w = pressure_level_weights(&LevelSet::standard37());
    let top = w.level(1);
    let percent = format!("{:.1e}", 100.0 * top);
    ensure(percent == "6.4e-3", || format!("w(1 hPa) = {top:e} is {percent}%"))?;
    let sum: f64 = w.weights[1..].iter().sum();
    ensure((sum - 1.0).abs() < 1e-12, || format!("3D weights sum to {sum}"))?;
    Ok(format!("w(1 hPa) = {top:.4e} ({percent}%)"))
}

// ---------------------------------------------------------------- 2

fn loss_oracle(pred: &[FieldState], target: &[FieldState], layout: &Layout, lw: &[f64], vw: &[f64], dstd: &[f64]) -> f64 {
    let (nlat, nlon) = (pred[0].nlat, pred[0].nlon);
    let dlat = PI / nlat as f64;
    let nt = pred.len() as f64;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for (v, var) in layout.variables.iter().enumerate() {
            let levels: Vec<usize> = match var.kind {
                emutune_core::data::VarKind::Surface => vec![0],
                emutune_core::data::VarKind::Atmospheric => (1..=layout.n_levels()).collect(),
            };
            for k in levels {
                let c = layout.channel_index(v, k).unwrap();
                for i in 0..nlat {
                    let north = PI / 2.0 - i as f64 * dlat;
                    let south = north - dlat;
                    let area = (north.sin() - south.sin()) / (2.0 * nlon as f64);
                    for j in 0..nlon {
                        let idx = c * nlat * nlon + i * nlon + j;
                        let e = (p.values[idx] - t.values[idx]) / dstd[c];
                        total += lw[k] * vw[v] * area * e * e / nt;
                    }
                }
            }
        }
    }
    total
}

fn weighted_mse_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layout = Layout::toy();
    let nc = layout.n_channels();
    let mut worst = 0.0f64;
    for _ in 0..120 {
        let (nlat, nlon) = (rng.random_range(2..9), rng.random_range(4..13));
        let nt = rng.random_range(1..5);
        let grid = Grid::new(nlat, nlon).map_err(e2s)?;
        let lw: Vec<f64> = std::iter::once(1.0)
            .chain((0..layout.n_levels()).map(|_| rng.random_range(0.0..1.0)))
            .collect();
        let vw: Vec<f64> = layout.variables.iter().map(|_| rng.random_range(0.05..2.0)).collect();
        let dstd: Vec<f64> = (0..nc).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
        let mut field = |k: usize| {
            let values = (0..nc * nlat * nlon).map(|_| rng.random_range(-5.0..5.0)).collect();
            FieldState::new(values, nc, nlat, nlon, t0() + step() * k as i32, Space::Physical).unwrap()
        };
        let pred: Vec<FieldState> = (0..nt).map(&mut field).collect();
        let target: Vec<FieldState> = (0..nt).map(&mut field).collect();
        let stats = NormalizationStats {
            layout: layout.clone(),
            mean: vec![0.0; nc],
            std: vec![1.0; nc],
            dstd: dstd.clone(),
            period: DateRange::new(t0(), t0() + step()).unwrap(),
            source: "random".into(),
        };
        let spec = LossSpec::new(
            LevelWeights::from_levels(&lw[1..], WeightScheme::Custom).map_err(e2s)?,
            VariableWeights { weights: vw.clone() },
            stats,
            nt,
        )
        .map_err(e2s)?;
        let got = weighted_mse(&pred, &target, &spec, &grid).map_err(e2s)?;
        let want = loss_oracle(&pred, &target, &layout, &lw, &vw, &dstd);
        worst = worst.max(rel(got, want));
    }
    ensure(worst < 1e-12, || format!("max relative error {worst:e}"))?;
    Ok(format!("120 cases, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn backprop_vs_fd() -> Outcome {
    let arc = small_archive(6, 12, 20, 3);
    let stats = compute_normalization(&arc, arc.range(), false).map_err(e2s)?;
    let layout = arc.layout().clone();
    let config = ModelConfig::new(layout.clone(), arc.grid(), 1, 4, Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::init(&config, &mut rng);
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for n in [1usize, 4, 12] {
        let valid = validation_dates(&arc, arc.range(), 1, n, 17 + n as u64).map_err(e2s)?[0];
        let window = sample_window(&arc, valid, n).map_err(e2s)?;
        let loss = LossSpec::new(
            pressure_level_weights(&layout.levels),
            VariableWeights::default_for(&layout),
            stats.clone(),
            n,
        )
        .map_err(e2s)?;
        let report = grad_check(&config, &params, &stats, &window, &loss, 32, &[1e-5], &mut rng).map_err(e2s)?;
        ensure(report.entries.iter().all(|e| e.probes >= 32), || "too few probes".into())?;
        worst = worst.max(report.max_rel_error());
        lines.push(format!("{n}-step {:.2e}", report.max_rel_error()));
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:e} ({})", lines.join(", ")))?;
    Ok(format!("32 probes per set; {}", lines.join(", ")))
}

// ---------------------------------------------------------------- 4

fn split_horizon(run: &ReferenceRun) -> Outcome {
    let config = &run.config;
    let paths = RunPaths::new(&config.output_dir);
    let ckpt = load_checkpoint(&paths.checkpoint("12step")).map_err(e2s)?;
    let arc = AnalysisArchive::load(&paths.archive("system_b")).map_err(e2s)?;
    let sens = &run.summary.sensitivity.level_weights;
    let plan = config.stage_plan("12step").ok_or("no 12step stage")?;
    let spec = plan.resolve(&config.system_b().levels, Some(sens), "system_b").map_err(e2s)?;
    let loss = curriculum_options(config, sens).map_err(e2s)?.stage_loss(&ckpt, &spec).map_err(e2s)?;
    let n = spec.n_steps;
    let mut splits = vec![vec![n]];
    splits.extend((1..n).map(|k| vec![k, n - k]));
    splits.push(vec![1; n]);
    let report = split_horizon_sweep(&ckpt, &arc, config.dates.validation, &loss, &splits, 40, 4040, config.workers)
        .map_err(e2s)?;
    ensure(report.windows.len() >= 40, || format!("{} windows", report.windows.len()))?;
    let loss_diff = report.summaries.iter().map(|s| s.max_loss_rel_diff).fold(0.0, f64::max);
    ensure(loss_diff < 1e-10, || format!("(a) split loss differs by {loss_diff:e}"))?;
    let whole: Vec<f64> = report.rows.iter().filter(|r| r.split == [n]).map(|r| r.min_cosine.unwrap_or(f64::NAN)).collect();
    ensure(whole.iter().all(|c| *c == 1.0), || format!("(b) unsplit cosines {whole:?}"))?;
    let singles = report.summary(&vec![1; n]).ok_or("no single-step summary")?;
    let mut lowest = (f64::INFINITY, String::new());
    for k in 1..n {
        let s = report.summary(&[k, n - k]).ok_or("missing split")?;
        ensure(s.median_min_cosine > singles.median_min_cosine && s.band.0 > singles.band.1, || {
            format!(
                "(c) split {k}+{}: median {:.6} band {:?} vs all singles median {:.6} band {:?}",
                n - k,
                s.median_min_cosine,
                s.band,
                singles.median_min_cosine,
                singles.band
            )
        })?;
        if s.band.0 < lowest.0 {
            lowest = (s.band.0, format!("{k}+{}", n - k));
        }
    }
    let four_eight = report.summary(&[4, 8]).ok_or("missing 4+8")?;
    Ok(format!(
        "{} windows; loss rel diff ≤ {loss_diff:.1e}; median min cosine 4+8 {:.5} vs singles {:.5} (band {:.5}–{:.5}); lowest two-segment band floor {:.5} ({})",
        report.windows.len(),
        four_eight.median_min_cosine,
        singles.median_min_cosine,
        singles.band.0,
        singles.band.1,
        lowest.0,
        lowest.1
    ))
}

// ---------------------------------------------------------------- 5

fn schedule_endpoints() -> Outcome {
    let mut checked = 0;
    for total in [10usize, 100, 1000, 4097, 12345] {
        for peak in [3e-4, 1e-3, 0.37] {
            let s = LrSchedule::new(peak, PAPER_TERMINAL_LR, 0.1, total).map_err(e2s)?;
            let w = s.warmup_batches();
            ensure(w == total / 10, || format!("warmup of {total} is {w}"))?;
            let at_w = s.lr_at(w).map_err(e2s)?;
            ensure(at_w == peak, || format!("lr_at({w}) = {at_w:e}, peak {peak:e}"))?;
            let last = s.lr_at(total - 1).map_err(e2s)?;
            ensure(last == PAPER_TERMINAL_LR, || format!("final lr {last:e}"))?;
            // The warmup ramp continued to the junction meets the decay.
            let ramp_end = s.lr_at(w - 1).map_err(e2s)? * w as f64 / (w - 1).max(1) as f64;
            let ramp_end = if w == 1 { peak } else { ramp_end };
            ensure((ramp_end - at_w).abs() <= 1e-12 * peak, || format!("junction gap {:e}", ramp_end - at_w))?;
            ensure(s.lr_at(0).map_err(e2s)? == 0.0, || "warmup must start at zero".into())?;
            checked += 1;
        }
    }
    Ok(format!("{checked} schedules: peak at end of warmup, {PAPER_TERMINAL_LR:e} at the final batch"))
}

// ---------------------------------------------------------------- 6

fn scalar_params(x: f64) -> ParamSets {
    ParamSets {
        sets: vec![ParamTensor {
            name: "theta".into(),
            shape: vec![1],
            values: vec![x],
        }],
    }
}

fn adamw_oracle() -> Outcome {
    let hyper = AdamWConfig::default();
    for (theta, lr) in [(1.7, 1e-3), (-0.3, 0.25), (42.0, 3.75e-8)] {
        let mut p = scalar_params(theta);
        let mut state = OptimizerState::new(&p, hyper);
        let zero = p.zeros_like();
        adamw_step(&mut p, &zero, &mut state, lr).map_err(e2s)?;
        let want = theta * (1.0 - lr * 0.1);
        ensure(p.sets[0].values[0] == want, || format!("decay-only step gave {:e}, want {want:e}", p.sets[0].values[0]))?;
    }

    // Minimize ½a(θ − c)² with a 100-batch schedule; the oracle is a plain
    // scalar transcription of bias-corrected decoupled AdamW.
    let (a, c) = (3.0, 0.7);
    let sched = LrSchedule::new(5e-2, PAPER_TERMINAL_LR, 0.1, 100).map_err(e2s)?;
    let mut p = scalar_params(-1.2);
    let mut state = OptimizerState::new(&p, hyper);
    let (mut th, mut m, mut v) = (-1.2f64, 0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for b in 0..100 {
        let lr = sched.lr_at(b).map_err(e2s)?;
        let g = scalar_params(a * (p.sets[0].values[0] - c));
        adamw_step(&mut p, &g, &mut state, lr).map_err(e2s)?;
        let grad = a * (th - c);
        let t = (b + 1) as i32;
        m = 0.9 * m + 0.1 * grad;
        v = 0.95 * v + 0.05 * grad * grad;
        let mhat = m / (1.0 - 0.9f64.powi(t));
        let vhat = v / (1.0 - 0.95f64.powi(t));
        th = th - lr * (mhat / (vhat.sqrt() + 1e-8) + 0.1 * th);
        worst = worst.max(rel(p.sets[0].values[0], th));
    }
    ensure(worst < 1e-12, || format!("trajectory differs by {worst:e}"))?;
    Ok(format!("decay-only steps exact; 100-step quadratic trajectory within {worst:.1e}"))
}

// ---------------------------------------------------------------- 7

fn synthetic_raw(rng: &mut ChaCha8Rng) -> SensitivityRawOutput {
    let (nd, nk, np) = (12, 8, 10);
    let gain: Vec<f64> = (0..nk).map(|k| 1.0 + k as f64).collect();
    let mut values = Vec::new();
    for _ in 0..nd {
        values.extend(std::iter::repeat_n(0.0, np));
        for g in &gain {
            values.extend((0..np).map(|o| g * (1.0 + o as f64) * rng.random_range(0.5..1.5)));
        }
    }
    SensitivityRawOutput {
        dates: (0..nd).map(|d| t0() + chrono::Duration::days(d as i64)).collect(),
        levels_hpa: LevelSet::toy().pressures().to_vec(),
        points: (0..np)
            .map(|o| OutputPoint {
                lead_day: 5,
                channel: o,
                variable: "mass".into(),
                level_hpa: Some(500.0),
            })
            .collect(),
        values,
        err: vec![1.0; nd * nk],
        epsilon: vec![1.0; nd * nk],
        epsilon_rule: EpsilonRule::Reciprocal,
    }
}

fn sensitivity_checks(run: &ReferenceRun) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let raw = synthetic_raw(&mut rng);
    let base = sensitivity_to_weights(&raw, 1).map_err(e2s)?;
    let mut worst = 0.0f64;
    for factor in [1000.0, 1024.0] {
        let mut scaled = raw.clone();
        scaled.values.iter_mut().for_each(|v| *v *= factor);
        let w = sensitivity_to_weights(&scaled, 1).map_err(e2s)?;
        let pairs = w.relative.iter().zip(&base.relative).chain(w.level_weights.weights.iter().zip(&base.level_weights.weights));
        for (x, y) in pairs {
            if factor == 1024.0 {
                ensure(x == y, || format!("×1024 changed {y:e} to {x:e}"))?;
            }
            worst = worst.max(rel(*x, *y));
        }
    }
    ensure(worst < 1e-12, || format!("×1000 changed weights by {worst:e}"))?;

    let s = &run.summary.sensitivity;
    let sum: f64 = s.level_weights.weights[1..].iter().sum();
    ensure((sum - 1.0).abs() < 1e-12, || format!("3D weights sum to {sum}"))?;
    ensure(s.control == 0.0 && s.control_band == (0.0, 0.0), || format!("control row {} {:?}", s.control, s.control_band))?;
    let verdict = noise_floor_check(s);
    ensure(verdict.pass, || format!("noise floor margins {:?}", verdict.margins))?;
    let min_margin = verdict.margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "scale invariance {worst:.1e} (×1024 bitwise); Σw = {sum}; control 0; noise floor min margin {min_margin:.3}"
    ))
}

// ---------------------------------------------------------------- 8

/// A real field with random coefficients up to `lmax`.
fn band_limited(grid: &Grid, lmax: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let mut c = HarmonicCoefficients::zeros(lmax);
    let mut energy = 0.0;
    for l in 0..=lmax {
        let a0 = rng.random_range(-1.0..1.0);
        c.set(l, 0, Complex64::new(a0, 0.0)).unwrap();
        energy += a0 * a0;
        for m in 1..=l as i64 {
            let a = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            c.set(l, m, a).unwrap();
            c.set(l, -m, a.conj() * sign).unwrap();
            energy += 2.0 * a.norm_sqr();
        }
    }
    (sht_inverse(&c, grid).unwrap(), energy)
}

fn spectral_checks() -> Outcome {
    let grid = Grid::new(32, 64).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut parseval = 0.0f64;
    for lmax in [4, 10, 15] {
        let (f, energy) = band_limited(&grid, lmax, &mut rng);
        let sq: Vec<f64> = f.iter().map(|x| x * x).collect();
        let integral = 4.0 * PI * grid.area_weighted_mean(&sq).map_err(e2s)?;
        parseval = parseval.max(rel(integral, energy));
        let svar_total: f64 = spectral_variance(&sht_forward(&f, &grid, lmax).map_err(e2s)?).iter().sum();
        parseval = parseval.max(rel(svar_total, energy));
    }
    ensure(parseval < 0.01, || format!("Parseval off by {parseval:e}"))?;

    let lmax = 15;
    let x: Vec<f64> = (0..grid.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let mut defined = 0;
    for (a, b) in [(&x, &x), (&doubled, &x)] {
        let (_, coh) = spectral_pair(a, b, &grid, lmax, 0.1).map_err(e2s)?;
        for c in coh.iter().flatten() {
            ensure(*c == 1.0, || format!("coherence {c:.17}"))?;
            defined += 1;
        }
    }
    let (ratio, _) = spectral_pair(&doubled, &x, &grid, lmax, 0.1).map_err(e2s)?;
    ensure(ratio.iter().flatten().all(|r| *r == 4.0), || format!("variance ratios {ratio:?}"))?;

    let mut c = HarmonicCoefficients::zeros(lmax);
    c.set(7, 3, Complex64::new(0.6, -0.2)).map_err(e2s)?;
    c.set(7, -3, Complex64::new(-0.6, -0.2)).map_err(e2s)?;
    let single = sht_inverse(&c, &grid).map_err(e2s)?;
    let svar = spectral_variance(&sht_forward(&single, &grid, lmax).map_err(e2s)?);
    let share = svar[7] / svar.iter().sum::<f64>();
    ensure(share > 0.999, || format!("single harmonic holds {share}"))?;
    Ok(format!(
        "Parseval within {parseval:.1e}; {defined} coherences exactly 1; ratio 4 exact; harmonic share {share:.6}"
    ))
}

// ---------------------------------------------------------------- 9

fn verification_checks() -> Outcome {
    // Three years, so every climatology bucket averages several analyses.
    let arc = small_archive(6, 12, 3 * 365 + 1, 21);
    let grid = Grid::from_dims(arc.grid()).map_err(e2s)?;
    let nc = arc.n_channels();
    let clim = build_climatology(&arc, arc.range()).map_err(e2s)?;
    let mut worst_acc = 0.0f64;
    for idx in [2, 500, 1501] {
        let s = arc.state(idx);
        for c in 0..nc {
            ensure(rmse(&s, &s, &grid, c).map_err(e2s)? == 0.0, || "rmse(x, x) ≠ 0".into())?;
            let a = acc(&s, &s, &clim, &grid, c).map_err(e2s)?;
            worst_acc = worst_acc.max((a - 1.0).abs());
        }
    }
    ensure(worst_acc < 1e-10, || format!("acc(x, x) off by {worst_acc:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut recip = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (10f64.powf(rng.random_range(-3.0..3.0)), 10f64.powf(rng.random_range(-3.0..3.0)));
        let prod = (1.0 - skill(a, b).map_err(e2s)?) * (1.0 - skill(b, a).map_err(e2s)?);
        // 1 − s recovers a/b only up to rounding of s, which is relative to 1.
        let bound = 8.0 * f64::EPSILON * (a / b).max(b / a);
        recip = recip.max((prod - 1.0).abs() / bound);
    }
    ensure(recip <= 1.0, || format!("reciprocity error {recip:.2} × its rounding bound"))?;

    let stats = compute_normalization(&arc, arc.range(), false).map_err(e2s)?;
    let config = ModelConfig::new(arc.layout().clone(), arc.grid(), 1, 4, Activation::Tanh);
    let ckpt = |seed| {
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Checkpoint::new(config.clone(), params, stats.clone()).unwrap()
    };
    let inits: Vec<Instant> = (0..6).map(|k| t0() + chrono::Duration::days(2 + 4 * k)).collect();
    let leads = [1, 4, 8, 12];
    let fa = make_forecasts("a", &ckpt(1), &arc, &inits, &leads, 1).map_err(e2s)?;
    let fb = make_forecasts("b", &ckpt(2), &arc, &inits, &leads, 1).map_err(e2s)?;
    let mut rows = 0;
    for aggregation in [BandAggregation::RmseThenSkill, BandAggregation::SkillThenAverage] {
        let spec = ScorecardSpec {
            aggregation,
            ..Default::default()
        };
        let ab = scorecard(&fa, &fb, &arc, &spec).map_err(e2s)?;
        let ba = scorecard(&fb, &fa, &arc, &spec).map_err(e2s)?;
        for (x, y) in ab.rows.iter().zip(&ba.rows) {
            ensure(x.marker == -y.marker, || format!("{aggregation:?} {} {} {}h: {} vs {}", x.variable, x.band, x.lead_hours, x.skill, y.skill))?;
            if aggregation == BandAggregation::RmseThenSkill {
                let prod = (1.0 - x.skill) * (1.0 - y.skill);
                ensure((prod - 1.0).abs() < 1e-12, || format!("scorecard reciprocity {prod}"))?;
            }
            rows += 1;
        }
    }
    Ok(format!(
        "rmse(x,x) = 0; |acc(x,x) − 1| ≤ {worst_acc:.1e}; reciprocity error {recip:.2}× its rounding bound; {rows} scorecard rows antisymmetric"
    ))
}

// ---------------------------------------------------------------- 10, 11

struct ReferenceRun {
    config: RunConfig,
    summary: PipelineSummary,
    _dir: tempfile::TempDir,
}

fn reference_run() -> Result<ReferenceRun, String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut config = RunConfig::reference();
    config.output_dir = dir.path().to_path_buf();
    let summary = run_pipeline(&config, &PipelineControl::default()).map_err(e2s)?.ok_or("pipeline stopped early")?;
    Ok(ReferenceRun {
        config,
        summary,
        _dir: dir,
    })
}

fn end_to_end(run: &ReferenceRun) -> Outcome {
    let s = &run.summary;
    let stage = |n: &str| s.stage(n).ok_or(format!("no stage {n}"));
    let (pre, s1a) = (stage("pretrained")?, stage("1a")?);
    ensure(s1a.val_1step < pre.val_1step, || format!("(a) 1a {} vs pretrained {}", s1a.val_1step, pre.val_1step))?;
    let order = ["1a", "1b", "2step", "4step", "8step", "12step"];
    let fixed: Vec<f64> = order.iter().map(|n| stage(n).map(|v| v.val_fixed)).collect::<Result<_, _>>()?;
    ensure(fixed.windows(2).all(|w| w[1] < w[0]), || format!("(b) fixed-horizon losses {fixed:?}"))?;
    let mut notes = Vec::new();
    for lead in [6, 24, 48, 72] {
        let tuned = s.rmse("12step@system_b", "mass", "500", lead).ok_or("missing rmse")?;
        let base = s.rmse("pretrained@system_b", "mass", "500", lead).ok_or("missing rmse")?;
        ensure(tuned < base, || format!("(c) {lead}h: {tuned} vs pretrained {base}"))?;
        notes.push(format!("{lead}h {:+.1}%", 100.0 * (tuned / base - 1.0)));
    }
    let top = |n: &str| stage(n)?.top_third_ratio.ok_or(format!("no spectral ratio for {n}"));
    let (t12, t1b) = (top("12step")?, top("1b")?);
    ensure(t12 < t1b, || format!("(d) top-third variance ratio 12step {t12} vs 1b {t1b}"))?;
    let degradation: Vec<String> = [6, 24, 72]
        .iter()
        .filter_map(|&h| {
            let a = s.rmse("pretrained@system_a", "mass", "500", h)?;
            let b = s.rmse("pretrained@system_b", "mass", "500", h)?;
            Some(format!("{h}h ×{:.2}", b / a))
        })
        .collect();
    println!("info: pretrained mass 500 hPa RMSE, System B over System A: {}", degradation.join(", "));
    Ok(format!(
        "1-step {:.4} < {:.4}; fixed-horizon {:.4} → {:.4}; mass 500 RMSE vs pretrained {}; top-third ratio {t12:.3} < {t1b:.3}",
        s1a.val_1step,
        pre.val_1step,
        fixed[0],
        fixed[5],
        notes.join(", ")
    ))
}

fn lr_search(run: &ReferenceRun) -> Outcome {
    let (_, r) = run.summary.lr_searches.iter().find(|(n, _)| n == "1b").ok_or("no 1b search")?;
    let mut table = r.table.clone();
    table.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    let span = (table.last().ok_or("empty table")?.rate / table[0].rate).log10();
    ensure(span >= 3.0 - 1e-9, || format!("grid spans {span:.2} decades"))?;
    let i = table.iter().position(|p| p.rate == r.best).ok_or("winner not in table")?;
    ensure(i > 0 && i + 1 < table.len(), || format!("winner {:e} on the grid edge", r.best))?;
    let (lo, win, hi) = (table[i - 1].loss, table[i].loss, table[i + 1].loss);
    ensure(win < lo && win < hi, || format!("winner {win} vs neighbours {lo}, {hi}"))?;
    Ok(format!(
        "winner {:e} ({win:.5}) beats {:e} ({lo:.5}) and {:e} ({hi:.5}); grid spans {span:.1} decades",
        r.best,
        table[i - 1].rate,
        table[i + 1].rate
    ))
}

// ----------------------------------------------------------------

fn report(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS {id:>2} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {id:>2} {name}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report("1", "pressure weight anchor", pressure_anchor);
    ok &= report("2", "weighted MSE oracle", weighted_mse_oracle);
    ok &= report("3", "backprop vs finite differences", backprop_vs_fd);
    ok &= report("5", "learning-rate schedule", schedule_endpoints);
    ok &= report("6", "AdamW oracle", adamw_oracle);
    ok &= report("8", "spectral diagnostics", spectral_checks);
    ok &= report("9", "verification metrics", verification_checks);

    match reference_run() {
        Ok(run) => {
            ok &= report("4", "split-horizon gradients", || split_horizon(&run));
            ok &= report("7", "sensitivity weights", || sensitivity_checks(&run));
            ok &= report("10", "end-to-end curriculum", || end_to_end(&run));
            ok &= report("11", "learning-rate search", || lr_search(&run));
        }
        Err(e) => {
            for (id, name) in [
                ("4", "split-horizon gradients"),
                ("7", "sensitivity weights"),
                ("10", "end-to-end curriculum"),
                ("11", "learning-rate search"),
            ] {
                println!("FAIL {id:>2} {name}: reference run failed: {e}");
            }
            ok = false;
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

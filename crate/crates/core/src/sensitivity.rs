//! Per-level perturbation sensitivity of medium-range forecasts, its
//! reduction to loss level weights, the unperturbed noise-floor control and
//! bootstrap bands.
//!
//! Each initialization date `d` gets a control forecast from
//! `(x(d−6h), x(d))`, and a one-step "perturbation forecast" `p'` from
//! `(x(d−12h), x(d−6h))` valid at `d`. For every level `k`, the initial
//! state at `k` alone is blended toward `p'` with weight `ε = 1/ERR_k`, and
//! the squared difference between trial and control is recorded at every
//! output point (lead day × channel). Row `k = 0` reruns the control.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnalysisArchive, FieldState, Layout, VarKind};
use crate::emulator::{Checkpoint, Emulator};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::{LevelWeights, WeightScheme};
use crate::rng::substream;
use crate::time::{self, DateRange, Instant};

const STEPS_PER_DAY: usize = 4;

/// How the blend weight follows from the perturbation error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    /// `ε = 1/ERR`.
    #[default]
    Reciprocal,
    /// `ε = 1/√ERR`, which makes the blended level's error exactly 1.
    ReciprocalSqrt,
}

impl EpsilonRule {
    pub fn epsilon(self, err: f64) -> Result<f64> {
        if !(err > 0.0) || !err.is_finite() {
            return Err(Error::ZeroReference(format!("perturbation error {err}")));
        }
        Ok(match self {
            EpsilonRule::Reciprocal => 1.0 / err,
            EpsilonRule::ReciprocalSqrt => 1.0 / err.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOptions {
    pub lead_days: usize,
    pub epsilon_rule: EpsilonRule,
    pub workers: usize,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            lead_days: 5,
            epsilon_rule: EpsilonRule::Reciprocal,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPoint {
    pub lead_day: usize,
    pub channel: usize,
    pub variable: String,
    /// `None` for surface variables.
    pub level_hpa: Option<f64>,
}

/// Squared trial−control differences per (date, perturbed level, output
/// point); perturbed level 0 is the unperturbed control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRawOutput {
    pub dates: Vec<Instant>,
    /// Pressure of each perturbable level `1..=N_k`.
    pub levels_hpa: Vec<f64>,
    pub points: Vec<OutputPoint>,
    /// `[date][level 0..=N_k][point]`.
    pub values: Vec<f64>,
    /// `[date][level 1..=N_k]`.
    pub err: Vec<f64>,
    /// `[date][level 1..=N_k]`.
    pub epsilon: Vec<f64>,
    pub epsilon_rule: EpsilonRule,
}

impl SensitivityRawOutput {
    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_levels(&self) -> usize {
        self.levels_hpa.len()
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn value(&self, date: usize, level: usize, point: usize) -> f64 {
        self.values[(date * (self.n_levels() + 1) + level) * self.n_points() + point]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.n_dates() * (self.n_levels() + 1) * self.n_points();
        if self.values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} raw values, expected {expected}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("raw sensitivity values must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Long-format CSV: date, perturbed level, lead day, variable, level, value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "perturbed_level_hPa", "lead_day", "variable", "level_hPa", "value"])?;
        for (d, date) in self.dates.iter().enumerate() {
            for k in 0..=self.n_levels() {
                let pert = if k == 0 {
                    "control".to_string()
                } else {
                    format!("{}", self.levels_hpa[k - 1])
                };
                for (o, p) in self.points.iter().enumerate() {
                    w.write_record([
                        date.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                        pert.clone(),
                        p.lead_day.to_string(),
                        p.variable.clone(),
                        p.level_hpa.map_or("surface".to_string(), |x| format!("{x}")),
                        format!("{:e}", self.value(d, k, o)),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Seeded sample of initialization dates whose windows (d − 12 h through
/// d + lead_days) lie inside `period` and the archive.
pub fn sensitivity_dates(archive: &AnalysisArchive, period: DateRange, n_dates: usize, lead_days: usize, seed: u64) -> Result<Vec<Instant>> {
    let range = archive.range();
    let lo = period.start.max(range.start) + time::step() * 2;
    let hi = period.end.min(range.end);
    let span = time::step() * (lead_days * STEPS_PER_DAY) as i32;
    let mut candidates = Vec::new();
    let mut t = lo;
    while t + span < hi {
        candidates.push(t);
        t += time::step();
    }
    if n_dates == 0 || candidates.len() < n_dates {
        return Err(Error::InsufficientSamples(format!(
            "{} candidate sensitivity dates, {n_dates} requested",
            candidates.len()
        )));
    }
    let mut picked = index::sample(&mut substream(seed, "sensitivity-dates"), candidates.len(), n_dates).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i]).collect())
}

fn output_points(layout: &Layout, lead_days: usize) -> Vec<OutputPoint> {
    let channels = layout.channels();
    (1..=lead_days)
        .flat_map(|day| {
            channels.iter().enumerate().map(move |(c, ch)| OutputPoint {
                lead_day: day,
                channel: c,
                variable: layout.variables[ch.var].name.clone(),
                level_hpa: layout.levels.pressure(ch.level),
            })
        })
        .collect()
}

fn squared_diff_mean(a: &[f64], b: &[f64], grid: &Grid) -> f64 {
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    grid.weighted_sum_unchecked(&sq)
}

struct DateResult {
    values: Vec<f64>,
    err: Vec<f64>,
    epsilon: Vec<f64>,
}

fn one_date(
    model: &Emulator<f64>,
    ckpt: &Checkpoint,
    archive: &AnalysisArchive,
    d: Instant,
    opts: &SensitivityOptions,
    grid: &Grid,
) -> Result<DateResult> {
    let layout = &ckpt.config.layout;
    let channels = layout.channels();
    let n = grid.n_cells();
    let n_steps = opts.lead_days * STEPS_PER_DAY;
    let x_m12 = archive.state_at(d - time::step() * 2)?;
    let x_m6 = archive.state_at(d - time::step())?;
    let x = archive.state_at(d)?;
    let control = model.forecast(&x_m6, &x, n_steps)?;
    let p_prime = model.forecast(&x_m12, &x_m6, 1)?.remove(0);

    let record = |trial: &[FieldState], out: &mut Vec<f64>| {
        for day in 1..=opts.lead_days {
            let (a, b) = (&control[day * STEPS_PER_DAY - 1], &trial[day * STEPS_PER_DAY - 1]);
            for c in 0..channels.len() {
                out.push(squared_diff_mean(a.channel(c), b.channel(c), grid));
            }
        }
    };

    let mut values = Vec::with_capacity((layout.n_levels() + 1) * opts.lead_days * channels.len());
    let mut err = Vec::with_capacity(layout.n_levels());
    let mut epsilon = Vec::with_capacity(layout.n_levels());
    record(&model.forecast(&x_m6, &x, n_steps)?, &mut values);
    for k in 1..=layout.n_levels() {
        let at_level: Vec<usize> = channels
            .iter()
            .enumerate()
            .filter(|(_, ch)| ch.level == k && layout.variables[ch.var].kind == VarKind::Atmospheric)
            .map(|(c, _)| c)
            .collect();
        // Unweighted loss of p' at this level alone, in σ_Δ units.
        let e: f64 = at_level
            .iter()
            .map(|&c| {
                let s = ckpt.stats.dstd[c];
                let sq: Vec<f64> = p_prime
                    .channel(c)
                    .iter()
                    .zip(x.channel(c))
                    .map(|(p, t)| ((p - t) / s).powi(2))
                    .collect();
                grid.weighted_sum_unchecked(&sq)
            })
            .sum();
        let eps = opts.epsilon_rule.epsilon(e).map_err(|_| {
            Error::ZeroReference(format!(
                "perturbation forecast equals the analysis at level {} on {d}",
                layout.level_label(k)
            ))
        })?;
        let mut blended = x.clone();
        for &c in &at_level {
            let (src, dst) = (&p_prime.values[c * n..(c + 1) * n], &mut blended.values[c * n..(c + 1) * n]);
            for (v, p) in dst.iter_mut().zip(src) {
                *v = (1.0 - eps) * *v + eps * p;
            }
        }
        record(&model.forecast(&x_m6, &blended, n_steps)?, &mut values);
        err.push(e);
        epsilon.push(eps);
    }
    Ok(DateResult { values, err, epsilon })
}

/// Run the perturbation experiment on every date.
pub fn run_sensitivity(
    ckpt: &Checkpoint,
    archive: &AnalysisArchive,
    dates: &[Instant],
    opts: &SensitivityOptions,
) -> Result<SensitivityRawOutput> {
    if opts.lead_days == 0 {
        return Err(Error::InvalidParameter("sensitivity needs at least one lead day".into()));
    }
    if archive.layout() != &ckpt.config.layout {
        return Err(Error::ShapeMismatch("archive layout differs from the model's".into()));
    }
    let model = Emulator::<f64>::new(&ckpt.config, &ckpt.params, &ckpt.stats)?;
    let grid = Grid::from_dims(ckpt.config.grid)?;
    let pool = crate::trainer::thread_pool(opts.workers)?;
    let per_date: Vec<DateResult> = pool.install(|| {
        dates
            .par_iter()
            .map(|&d| one_date(&model, ckpt, archive, d, opts, &grid))
            .collect::<Result<Vec<_>>>()
    })?;
    let layout = &ckpt.config.layout;
    let mut raw = SensitivityRawOutput {
        dates: dates.to_vec(),
        levels_hpa: layout.levels.pressures().to_vec(),
        points: output_points(layout, opts.lead_days),
        values: Vec::new(),
        err: Vec::new(),
        epsilon: Vec::new(),
        epsilon_rule: opts.epsilon_rule,
    };
    for r in per_date {
        raw.values.extend(r.values);
        raw.err.extend(r.err);
        raw.epsilon.extend(r.epsilon);
    }
    Ok(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityWeights {
    pub levels_hpa: Vec<f64>,
    /// Relative sensitivity per perturbed level (mean over levels is 1).
    pub relative: Vec<f64>,
    /// Relative sensitivity of the unperturbed control row.
    pub control: f64,
    /// Bootstrap 5th/95th percentile band per level.
    pub bands: Vec<(f64, f64)>,
    pub control_band: (f64, f64),
    pub level_weights: LevelWeights,
    /// Output points skipped because they did not vary.
    pub excluded_points: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Reduce raw outputs to relative sensitivities and normalized level weights.
///
/// Every output point is put on a common scale by dividing by its standard
/// deviation over (date, perturbed level). Averaging the scaled values over
/// output points and dates, then dividing by the mean over levels, gives the
/// relative sensitivity of each level. The control row is scaled the same
/// way but does not enter the standard deviations or the mean.
pub fn sensitivity_to_weights(raw: &SensitivityRawOutput, seed: u64) -> Result<SensitivityWeights> {
    raw.validate()?;
    let (nd, nk, np) = (raw.n_dates(), raw.n_levels(), raw.n_points());
    if nd < 2 || nk < 2 {
        return Err(Error::InsufficientSamples("z-scores need ≥ 2 dates and ≥ 2 levels".into()));
    }
    let mut inv_sd = Vec::with_capacity(np);
    let mut excluded = 0;
    for o in 0..np {
        let vals: Vec<f64> = (0..nd)
            .flat_map(|d| (1..=nk).map(move |k| (d, k)))
            .map(|(d, k)| raw.value(d, k, o))
            .collect();
        let sd = std_dev(&vals);
        if sd > 0.0 {
            inv_sd.push(Some(1.0 / sd));
        } else {
            excluded += 1;
            inv_sd.push(None);
        }
    }
    if excluded == np {
        return Err(Error::DegenerateField("no sensitivity output point varies".into()));
    }
    if excluded > 0 {
        log::warn!("{excluded} of {np} sensitivity output points have zero variance and were excluded");
    }
    let used = (np - excluded) as f64;
    // q[d][k]: mean scaled value over output points.
    let q: Vec<Vec<f64>> = (0..nd)
        .map(|d| {
            (0..=nk)
                .map(|k| {
                    (0..np)
                        .filter_map(|o| inv_sd[o].map(|s| raw.value(d, k, o) * s))
                        .sum::<f64>()
                        / used
                })
                .collect()
        })
        .collect();
    let per_level: Vec<f64> = (0..=nk).map(|k| q.iter().map(|row| row[k]).sum::<f64>() / nd as f64).collect();
    let global = per_level[1..].iter().sum::<f64>() / nk as f64;
    if !(global > 0.0) {
        return Err(Error::DegenerateField("global mean sensitivity is zero".into()));
    }
    let relative: Vec<f64> = per_level[1..].iter().map(|s| s / global).collect();
    let control = per_level[0] / global;
    let band = |k: usize| {
        let samples: Vec<f64> = q.iter().map(|row| row[k] / global).collect();
        bootstrap_ci(&samples, (0.05, 0.95), BOOTSTRAP_RESAMPLES, crate::rng::substream_seed(seed, &format!("level/{k}")))
    };
    let bands = (1..=nk).map(band).collect::<Result<Vec<_>>>()?;
    let control_band = band(0)?;
    let floored: Vec<f64> = relative.iter().map(|r| r.max(0.0)).collect();
    let total: f64 = floored.iter().sum();
    let mut w: Vec<f64> = floored.iter().map(|r| r / total).collect();
    // Close the sum on the last level so that Σw is exactly 1.
    let head: f64 = w[..nk - 1].iter().sum();
    w[nk - 1] = (1.0 - head).max(0.0);
    for _ in 0..16 {
        let total: f64 = w.iter().sum();
        if total == 1.0 {
            break;
        }
        w[nk - 1] = if total > 1.0 { w[nk - 1].next_down() } else { w[nk - 1].next_up() };
    }
    Ok(SensitivityWeights {
        levels_hpa: raw.levels_hpa.clone(),
        relative,
        control,
        bands,
        control_band,
        level_weights: LevelWeights::from_levels(&w, WeightScheme::Sensitivity)?,
        excluded_points: excluded,
    })
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

impl SensitivityWeights {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level_hPa", "relative_sensitivity", "ci_05", "ci_95", "weight"])?;
        w.write_record([
            "control".to_string(),
            format!("{:e}", self.control),
            format!("{:e}", self.control_band.0),
            format!("{:e}", self.control_band.1),
            String::new(),
        ])?;
        for (k, p) in self.levels_hpa.iter().enumerate() {
            w.write_record([
                format!("{p}"),
                format!("{:e}", self.relative[k]),
                format!("{:e}", self.bands[k].0),
                format!("{:e}", self.bands[k].1),
                format!("{:e}", self.level_weights.weights[k + 1]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloorVerdict {
    pub pass: bool,
    pub control_p95: f64,
    /// `relative[k] − control_p95` per level.
    pub margins: Vec<f64>,
}

/// Passes iff every level's relative sensitivity exceeds the control's
/// bootstrap 95th percentile.
pub fn noise_floor_check(w: &SensitivityWeights) -> NoiseFloorVerdict {
    let p95 = w.control_band.1;
    let margins: Vec<f64> = w.relative.iter().map(|r| r - p95).collect();
    NoiseFloorVerdict {
        pass: margins.iter().all(|m| *m > 0.0),
        control_p95: p95,
        margins,
    }
}

/// Percentile bootstrap band of the mean, resampling with replacement.
/// Percentiles use linear interpolation between order statistics.
pub fn bootstrap_ci(samples: &[f64], percentiles: (f64, f64), resamples: usize, seed: u64) -> Result<(f64, f64)> {
    bootstrap_band(samples, |x| x.iter().sum::<f64>() / x.len() as f64, percentiles, resamples, seed)
}

/// Median with linear interpolation between the middle order statistics.
pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Percentile bootstrap band of an arbitrary statistic.
pub fn bootstrap_band(
    samples: &[f64],
    statistic: impl Fn(&[f64]) -> f64,
    percentiles: (f64, f64),
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples("bootstrap needs ≥ 2 samples".into()));
    }
    if resamples < 100 {
        return Err(Error::InvalidParameter("bootstrap needs ≥ 100 resamples".into()));
    }
    let (lo, hi) = percentiles;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidParameter("percentiles must satisfy 0 ≤ lo ≤ hi ≤ 1".into()));
    }
    let mut rng = substream(seed, "bootstrap");
    let n = samples.len();
    let mut draw = vec![0.0; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            draw.iter_mut().for_each(|d| *d = samples[rng.random_range(0..n)]);
            statistic(&draw)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let pos = p * (resamples - 1) as f64;
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        if i + 1 < resamples {
            stats[i] + f * (stats[i + 1] - stats[i])
        } else {
            stats[i]
        }
    };
    // Clamp to the sample range so constant inputs give an exact [c, c].
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((at(lo).clamp(min, max), at(hi).clamp(min, max)))
}

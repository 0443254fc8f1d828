//! Synthetic "toy atmosphere" systems and their analysis archives.
//!
//! Each channel carries a dimensionless anomaly field that is advected
//! zonally, diffused, relaxed toward a seasonal/diurnal forcing, coupled to a
//! partner channel through `tanh`, mixed vertically, and driven by stochastic
//! forcing. Physical values are `mean + amplitude * anomaly`, after which any
//! analysis shift of the system (mean offset and variance inflation) is
//! applied using the archive's own sample statistics.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::archive::AnalysisArchive;
use super::layout::{Layout, LevelSet, VarKind, Variable};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridDims};
use crate::rng::digest_hex;
use crate::time::{self, DateRange, Instant};

/// Per-level dynamics; index 0 is the surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDynamics {
    /// Zonal advection speed at the equator in grid cells per step.
    pub advection: f64,
    pub diffusion: f64,
    pub relaxation: f64,
    pub seasonal_amplitude: f64,
    pub coupling: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VarKind,
    /// Physical mean per level (a single entry for surface variables).
    pub mean: Vec<f64>,
    /// Physical size of one anomaly unit per level.
    pub amplitude: Vec<f64>,
    /// Variable whose anomaly feeds this one through `tanh` coupling. Surface
    /// variables couple to the partner's lowest level.
    pub coupled_to: String,
    /// Sign of the seasonal forcing pattern.
    pub forcing_sign: f64,
}

/// Analysis-system shift applied at selected levels of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub variable: String,
    pub levels: Vec<usize>,
    /// Mean offset in units of the unshifted standard deviation.
    pub mean_offset_sd: f64,
    /// Multiplier on the variance about the unshifted mean.
    pub variance_inflation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub grid: GridDims,
    pub levels: LevelSet,
    pub variables: Vec<VariableSpec>,
    pub dynamics: Vec<LevelDynamics>,
    pub diurnal_amplitude: f64,
    pub vertical_mixing: f64,
    pub spinup_steps: usize,
    #[serde(default)]
    pub shifts: Vec<ShiftSpec>,
}

impl SystemSpec {
    pub fn layout(&self) -> Layout {
        Layout {
            variables: self
                .variables
                .iter()
                .map(|v| Variable {
                    name: v.name.clone(),
                    kind: v.kind,
                })
                .collect(),
            levels: self.levels.clone(),
        }
    }

    pub fn digest(&self) -> String {
        digest_hex(&serde_json::to_vec(self).expect("system spec serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let nk = self.levels.len();
        if self.dynamics.len() != nk + 1 {
            return Err(Error::InvalidParameter(format!(
                "expected {} dynamics entries (surface + levels), found {}",
                nk + 1,
                self.dynamics.len()
            )));
        }
        for (k, d) in self.dynamics.iter().enumerate() {
            if !(d.diffusion >= 0.0) || !(d.relaxation >= 0.0) || !(d.noise >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "level {k}: diffusion, relaxation and noise must be nonnegative"
                )));
            }
        }
        let layout = self.layout();
        Layout::new(layout.variables.clone(), layout.levels.clone())?;
        for v in &self.variables {
            let want = match v.kind {
                VarKind::Surface => 1,
                VarKind::Atmospheric => nk,
            };
            if v.mean.len() != want || v.amplitude.len() != want {
                return Err(Error::InvalidParameter(format!(
                    "variable {} needs {want} mean/amplitude entries",
                    v.name
                )));
            }
            let partner = layout.var_index(&v.coupled_to).ok_or_else(|| {
                Error::InvalidParameter(format!("unknown coupling partner {}", v.coupled_to))
            })?;
            if layout.variables[partner].kind != VarKind::Atmospheric && v.kind == VarKind::Atmospheric
            {
                return Err(Error::InvalidParameter(format!(
                    "atmospheric variable {} cannot couple to a surface variable",
                    v.name
                )));
            }
        }
        for s in &self.shifts {
            if !(s.variance_inflation > 0.0) {
                return Err(Error::InvalidParameter(
                    "variance inflation must be positive".into(),
                ));
            }
            let var = layout
                .var_index(&s.variable)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown variable {}", s.variable)))?;
            for &k in &s.levels {
                layout.channel_index(var, k).ok_or_else(|| {
                    Error::InvalidParameter(format!("shift level {k} not present"))
                })?;
            }
        }
        Ok(())
    }

    /// "System A": the reference analysis system used for pretraining.
    pub fn system_a(grid: GridDims) -> Self {
        let levels = LevelSet::toy();
        let p: Vec<f64> = levels.pressures().to_vec();
        let mass_mean: Vec<f64> = p.iter().map(|p| 7314.0 * (1000.0 / p).ln() + 100.0).collect();
        let mass_amp: Vec<f64> = mass_mean.iter().map(|m| 40.0 + 0.004 * m).collect();
        let temp_mean: Vec<f64> = p.iter().map(|p| 210.0 + 78.0 * (p / 1000.0).powf(0.7)).collect();
        let temp_amp: Vec<f64> = p.iter().map(|p| 2.0 + 3.0 * p / 1000.0).collect();
        let hum_mean: Vec<f64> = p.iter().map(|p| 1.5e-2 * (p / 1000.0).powi(3) + 3e-6).collect();
        let hum_amp: Vec<f64> = hum_mean.iter().map(|m| 0.25 * m).collect();
        let spec = |name: &str, kind, mean, amplitude, partner: &str, sign| VariableSpec {
            name: name.into(),
            kind,
            mean,
            amplitude,
            coupled_to: partner.into(),
            forcing_sign: sign,
        };
        let variables = vec![
            spec("mass", VarKind::Atmospheric, mass_mean, mass_amp, "temperature", 1.0),
            spec("temperature", VarKind::Atmospheric, temp_mean, temp_amp, "humidity", 1.0),
            spec("humidity", VarKind::Atmospheric, hum_mean, hum_amp, "mass", -1.0),
            spec("t2m", VarKind::Surface, vec![288.0], vec![6.0], "temperature", 1.0),
            spec("msl", VarKind::Surface, vec![101_325.0], vec![500.0], "mass", -1.0),
        ];
        let advection = [0.6, 0.7, 0.8, 0.7, 0.5, 0.35, 0.25, 0.15];
        let mut dynamics = vec![LevelDynamics {
            advection: 0.1,
            diffusion: 0.05,
            relaxation: 0.06,
            seasonal_amplitude: 1.5,
            coupling: 0.08,
            noise: 0.12,
        }];
        for (k, &u) in advection.iter().enumerate() {
            let depth = (k + 1) as f64 / advection.len() as f64;
            dynamics.push(LevelDynamics {
                advection: u,
                diffusion: 0.05,
                relaxation: 0.02 + 0.03 * depth,
                seasonal_amplitude: 1.0,
                coupling: 0.05,
                noise: 0.1,
            });
        }
        SystemSpec {
            name: "system_a".into(),
            grid,
            levels,
            variables,
            dynamics,
            diurnal_amplitude: 0.5,
            vertical_mixing: 0.03,
            spinup_steps: 120,
            shifts: Vec::new(),
        }
    }

    /// "System B": faster advection, stronger coupling, and a shifted,
    /// inflated humidity analysis at the two top levels.
    pub fn system_b(grid: GridDims) -> Self {
        let mut spec = Self::system_a(grid);
        spec.name = "system_b".into();
        for d in &mut spec.dynamics {
            d.advection *= 1.2;
            d.coupling *= 1.5;
        }
        spec.shifts.push(ShiftSpec {
            variable: "humidity".into(),
            levels: vec![1, 2],
            mean_offset_sd: 2.0,
            variance_inflation: 6.0,
        });
        spec
    }
}

struct Stepper<'a> {
    spec: &'a SystemSpec,
    grid: Grid,
    layout: Layout,
    /// (variable, level, dynamics index, partner channel, level above, level below)
    channels: Vec<ChannelPlan>,
}

struct ChannelPlan {
    var: usize,
    dyn_index: usize,
    partner: usize,
    above: Option<usize>,
    below: Option<usize>,
    diurnal_weight: f64,
}

impl<'a> Stepper<'a> {
    fn new(spec: &'a SystemSpec) -> Result<Self> {
        spec.validate()?;
        let grid = Grid::from_dims(spec.grid)?;
        let layout = spec.layout();
        let nk = layout.n_levels();
        let mut channels = Vec::new();
        for ch in layout.channels() {
            let v = &spec.variables[ch.var];
            let pvar = layout.var_index(&v.coupled_to).unwrap();
            let partner_level = match (v.kind, layout.variables[pvar].kind) {
                (_, VarKind::Surface) => 0,
                (VarKind::Surface, VarKind::Atmospheric) => nk,
                (VarKind::Atmospheric, VarKind::Atmospheric) => ch.level,
            };
            let partner = layout.channel_index(pvar, partner_level).unwrap();
            let (above, below, diurnal_weight) = match v.kind {
                VarKind::Surface => (None, None, 1.0),
                VarKind::Atmospheric => (
                    (ch.level > 1).then(|| layout.channel_index(ch.var, ch.level - 1).unwrap()),
                    (ch.level < nk).then(|| layout.channel_index(ch.var, ch.level + 1).unwrap()),
                    layout.levels.pressure(ch.level).unwrap() / 1000.0,
                ),
            };
            channels.push(ChannelPlan {
                var: ch.var,
                dyn_index: ch.level,
                partner,
                above,
                below,
                diurnal_weight,
            });
        }
        Ok(Self {
            spec,
            grid,
            layout,
            channels,
        })
    }

    /// Advance anomalies from time `t` to `t + 6h`.
    fn step(&self, a: &[f64], t: Instant, seed: u64, out: &mut [f64]) {
        let (nlat, nlon) = (self.grid.nlat(), self.grid.nlon());
        let n = nlat * nlon;
        let yf = time::year_fraction(t);
        let df = time::day_fraction(t);
        let seasonal = (2.0 * PI * yf).cos();
        let lats = self.grid.lat_centers();
        let lons = self.grid.lon_centers();

        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream((t + time::step()).timestamp() as u64);

        // Advect first, then apply diffusion, mixing and relaxation to the
        // advected field, so each factor of the step is a contraction.
        let mut adv = vec![0.0; a.len()];
        for (c, plan) in self.channels.iter().enumerate() {
            let d = &self.spec.dynamics[plan.dyn_index];
            let src = &a[c * n..(c + 1) * n];
            let dst = &mut adv[c * n..(c + 1) * n];
            for i in 0..nlat {
                let shift = d.advection * lats[i].cos();
                for j in 0..nlon {
                    let pos = j as f64 - shift;
                    let j0 = pos.floor();
                    let frac = pos - j0;
                    let j0 = (j0 as i64).rem_euclid(nlon as i64) as usize;
                    let j1 = (j0 + 1) % nlon;
                    dst[i * nlon + j] = (1.0 - frac) * src[i * nlon + j0] + frac * src[i * nlon + j1];
                }
            }
        }

        for (c, plan) in self.channels.iter().enumerate() {
            let d = &self.spec.dynamics[plan.dyn_index];
            let sign = self.spec.variables[plan.var].forcing_sign;
            let src = &adv[c * n..(c + 1) * n];
            let partner = &a[plan.partner * n..(plan.partner + 1) * n];
            let dst = &mut out[c * n..(c + 1) * n];
            for i in 0..nlat {
                let up = i.saturating_sub(1);
                let down = (i + 1).min(nlat - 1);
                for j in 0..nlon {
                    let k = i * nlon + j;
                    let west = src[i * nlon + (j + nlon - 1) % nlon];
                    let east = src[i * nlon + (j + 1) % nlon];
                    let lap = west + east + src[up * nlon + j] + src[down * nlon + j] - 4.0 * src[k];

                    let forcing = sign * d.seasonal_amplitude * lats[i].sin() * seasonal
                        + self.spec.diurnal_amplitude
                            * plan.diurnal_weight
                            * lats[i].cos()
                            * (lons[j] + 2.0 * PI * df).cos();
                    let mut mix = 0.0;
                    if plan.above.is_some() || plan.below.is_some() {
                        let above = plan.above.map_or(src[k], |o| adv[o * n + k]);
                        let below = plan.below.map_or(src[k], |o| adv[o * n + k]);
                        mix = self.spec.vertical_mixing * (above + below - 2.0 * src[k]);
                    }
                    let xi: f64 = StandardNormal.sample(&mut noise_rng);
                    dst[k] = src[k]
                        + d.diffusion * lap
                        + d.relaxation * (forcing - src[k])
                        + d.coupling * partner[k].tanh()
                        + mix
                        + d.noise * xi;
                }
            }
        }
    }
}

/// Integrate `spec` from a spun-up rest state and record every six-hourly
/// state in `[range.start, range.end)`.
pub fn generate_archive(spec: &SystemSpec, range: DateRange, seed: u64) -> Result<AnalysisArchive> {
    if !time::is_on_cadence(range.start) {
        return Err(Error::InvalidParameter(format!(
            "archive start {} is not on the 6-hour cadence",
            range.start
        )));
    }
    let n_times = range.n_steps();
    if n_times < 3 {
        return Err(Error::InvalidParameter(
            "archive must span at least two steps past its start".into(),
        ));
    }
    let stepper = Stepper::new(spec)?;
    let layout = stepper.layout.clone();
    let n_ch = layout.n_channels();
    let n = stepper.grid.n_cells();
    let state_len = n_ch * n;

    let mut anomaly = vec![0.0; state_len];
    let mut next = vec![0.0; state_len];
    let mut t = range.start - time::step() * spec.spinup_steps as i32;
    for s in 0..spec.spinup_steps {
        stepper.step(&anomaly, t, seed, &mut next);
        std::mem::swap(&mut anomaly, &mut next);
        t += time::step();
        if anomaly.iter().any(|v| !v.is_finite()) {
            return Err(Error::UnstableDynamics { step: s });
        }
    }

    let scales: Vec<(f64, f64)> = layout
        .channels()
        .iter()
        .map(|ch| {
            let v = &spec.variables[ch.var];
            let idx = if ch.level == 0 { 0 } else { ch.level - 1 };
            (v.mean[idx], v.amplitude[idx])
        })
        .collect();

    let mut phys = vec![0.0f64; n_times * state_len];
    for step_index in 0..n_times {
        if step_index > 0 {
            stepper.step(&anomaly, t, seed, &mut next);
            std::mem::swap(&mut anomaly, &mut next);
            t += time::step();
        }
        if anomaly.iter().any(|v| !v.is_finite()) {
            return Err(Error::UnstableDynamics { step: step_index });
        }
        let dst = &mut phys[step_index * state_len..(step_index + 1) * state_len];
        for (c, &(mean, amp)) in scales.iter().enumerate() {
            for k in 0..n {
                dst[c * n + k] = mean + amp * anomaly[c * n + k];
            }
        }
    }

    for shift in &spec.shifts {
        let var = layout.var_index(&shift.variable).unwrap();
        for &level in &shift.levels {
            let c = layout.channel_index(var, level).unwrap();
            apply_shift(&mut phys, state_len, c * n, n, shift);
        }
    }

    let data: Vec<f32> = phys.iter().map(|&v| v as f32).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::UnstableDynamics { step: n_times });
    }
    Ok(AnalysisArchive::from_parts(
        spec.name.clone(),
        layout,
        spec.grid,
        range.start,
        n_times,
        seed,
        spec.digest(),
        data,
    ))
}

fn apply_shift(phys: &mut [f64], state_len: usize, offset: usize, n: usize, shift: &ShiftSpec) {
    let n_times = phys.len() / state_len;
    let count = (n_times * n) as f64;
    let slices = |t: usize| offset + t * state_len..offset + t * state_len + n;
    let mean = (0..n_times)
        .map(|t| phys[slices(t)].iter().sum::<f64>())
        .sum::<f64>()
        / count;
    let var = (0..n_times)
        .map(|t| phys[slices(t)].iter().map(|x| (x - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / count;
    let sd = var.sqrt();
    let gain = shift.variance_inflation.sqrt();
    for t in 0..n_times {
        for x in &mut phys[slices(t)] {
            *x = mean + shift.mean_offset_sd * sd + gain * (*x - mean);
        }
    }
}

//! Forward evaluation of the stencil emulator at either precision.

use std::f64::consts::PI;

use nalgebra::{DMatrix, RealField};
use num_traits::Float;

use super::config::{Activation, ModelConfig};
use super::params::{ModelParams, INPUT_BIAS, INPUT_WEIGHT, OUTPUT_BIAS, OUTPUT_WEIGHT};
use crate::data::{FieldState, NormalizationStats, Space};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::time::{self, Instant};

/// Scalar types the forward pass can run in.
pub trait Scalar: RealField + Float + Copy {}
impl<T: RealField + Float + Copy> Scalar for T {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// Parameters and geometry prepared for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Emulator<T: Scalar> {
    pub(crate) config: ModelConfig,
    pub(crate) grid: Grid,
    pub(crate) w1: DMatrix<T>,
    pub(crate) b1: Vec<T>,
    pub(crate) w2: DMatrix<T>,
    pub(crate) b2: Vec<T>,
    /// `σ_Δ / σ` per channel: maps a normalized increment onto the state.
    pub(crate) gain: Vec<T>,
    /// Stencil neighbor of each cell, `[cell * S + offset]`.
    pub(crate) neighbors: Vec<usize>,
    pub(crate) mean: Vec<f64>,
    pub(crate) std: Vec<f64>,
    sin_lat: Vec<f64>,
}

fn cast<T: Scalar>(v: f64) -> T {
    <T as num_traits::NumCast>::from(v).expect("representable")
}

impl<T: Scalar> Emulator<T> {
    pub fn new(config: &ModelConfig, params: &ModelParams, stats: &NormalizationStats) -> Result<Self> {
        config.validate()?;
        params.check_config(config)?;
        stats.validate()?;
        if stats.layout != config.layout {
            return Err(Error::ShapeMismatch(
                "normalization statistics do not match the model layout".into(),
            ));
        }
        let grid = Grid::from_dims(config.grid)?;
        let (h, d, c) = (config.hidden, config.input_dim(), config.layout.n_channels());
        let conv = |name: &str| -> Vec<T> { params.get(name).unwrap().values.iter().map(|&v| cast(v)).collect() };
        let w1 = DMatrix::from_row_slice(h, d, &conv(INPUT_WEIGHT));
        let w2 = DMatrix::from_row_slice(c, h, &conv(OUTPUT_WEIGHT));
        let gain = (0..c).map(|k| cast(stats.dstd[k] / stats.std[k])).collect();
        let r = config.stencil_radius as i64;
        let (nlat, nlon) = (grid.nlat() as i64, grid.nlon() as i64);
        let mut neighbors = Vec::with_capacity(grid.n_cells() * config.stencil_size());
        for i in 0..nlat {
            for j in 0..nlon {
                for di in -r..=r {
                    for dj in -r..=r {
                        let ii = (i + di).clamp(0, nlat - 1);
                        let jj = (j + dj).rem_euclid(nlon);
                        neighbors.push((ii * nlon + jj) as usize);
                    }
                }
            }
        }
        let sin_lat = grid.lat_centers().iter().map(|l| l.sin()).collect();
        Ok(Self {
            config: config.clone(),
            grid,
            w1,
            b1: conv(INPUT_BIAS),
            w2,
            b2: conv(OUTPUT_BIAS),
            gain,
            neighbors,
            mean: stats.mean.clone(),
            std: stats.std.clone(),
            sin_lat,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    /// Feature matrix (D × cells) for inputs `prev`, `cur` valid at `t`.
    pub(crate) fn features(&self, prev: &[T], cur: &[T], t: Instant) -> DMatrix<T> {
        let n = self.n_cells();
        let nc = self.config.layout.n_channels();
        let s = self.config.stencil_size();
        let d = self.config.input_dim();
        let nlon = self.grid.nlon();
        let mut x = vec![T::zero(); d * n];
        let (df, yf) = (time::day_fraction(t), time::year_fraction(t));
        let (ys, yc) = ((2.0 * PI * yf).sin(), (2.0 * PI * yf).cos());
        for cell in 0..n {
            let col = &mut x[cell * d..(cell + 1) * d];
            let nb = &self.neighbors[cell * s..(cell + 1) * s];
            for (state, src) in [prev, cur].into_iter().enumerate() {
                for c in 0..nc {
                    let base = (state * nc + c) * s;
                    let chan = &src[c * n..(c + 1) * n];
                    for (o, &k) in nb.iter().enumerate() {
                        col[base + o] = chan[k];
                    }
                }
            }
            let mut off = 2 * nc * s;
            if self.config.time_features {
                let lon = self.grid.lon_centers()[cell % nlon];
                let local = 2.0 * PI * df + lon;
                col[off] = cast(local.sin());
                col[off + 1] = cast(local.cos());
                col[off + 2] = cast(ys);
                col[off + 3] = cast(yc);
                off += 4;
            }
            if self.config.position_feature {
                col[off] = cast(self.sin_lat[cell / nlon]);
            }
        }
        DMatrix::from_vec(d, n, x)
    }

    /// Hidden activations (H × cells) for a feature matrix.
    pub(crate) fn hidden(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut pre = &self.w1 * x;
        for (h, mut row) in pre.row_iter_mut().enumerate() {
            let b = self.b1[h];
            for v in row.iter_mut() {
                let z = *v + b;
                *v = match self.config.activation {
                    Activation::Tanh => Float::tanh(z),
                    Activation::Linear => z,
                };
            }
        }
        pre
    }

    /// Apply the output projection and increment to produce the next state.
    pub(crate) fn output(&self, hidden: &DMatrix<T>, cur: &[T]) -> Vec<T> {
        let n = self.n_cells();
        let delta = &self.w2 * hidden;
        let mut next = cur.to_vec();
        for c in 0..self.config.layout.n_channels() {
            let (g, b) = (self.gain[c], self.b2[c]);
            for cell in 0..n {
                next[c * n + cell] = cur[c * n + cell] + g * (delta[(c, cell)] + b);
            }
        }
        next
    }

    /// One step in normalized coordinates; `t` is the valid time of `cur`.
    pub fn step_raw(&self, prev: &[T], cur: &[T], t: Instant) -> Vec<T> {
        let x = self.features(prev, cur, t);
        let h = self.hidden(&x);
        self.output(&h, cur)
    }

    fn check_input(&self, s: &FieldState) -> Result<()> {
        s.expect_space(Space::Normalized)?;
        if s.n_channels != self.config.layout.n_channels() || s.nlat != self.grid.nlat() || s.nlon != self.grid.nlon() {
            return Err(Error::ShapeMismatch("state does not match the model layout".into()));
        }
        Ok(())
    }

    fn to_t(s: &FieldState) -> Vec<T> {
        s.values.iter().map(|&v| cast(v)).collect()
    }

    fn to_state(&self, v: &[T], time: Instant) -> Result<FieldState> {
        let values: Vec<f64> = v.iter().map(|x| num_traits::ToPrimitive::to_f64(x).unwrap()).collect();
        if let Some(k) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("emulator output at index {k}, valid {time}")));
        }
        Ok(FieldState {
            values,
            n_channels: self.config.layout.n_channels(),
            nlat: self.grid.nlat(),
            nlon: self.grid.nlon(),
            time,
            space: Space::Normalized,
        })
    }

    /// Normalized-space single step from states at `t − 6h` and `t`.
    pub fn forward_step(&self, prev: &FieldState, cur: &FieldState) -> Result<FieldState> {
        self.check_input(prev)?;
        self.check_input(cur)?;
        let next = self.step_raw(&Self::to_t(prev), &Self::to_t(cur), cur.time);
        self.to_state(&next, cur.time + time::step())
    }

    /// Autoregressive rollout in normalized space.
    pub fn rollout(&self, prev: &FieldState, cur: &FieldState, n_steps: usize) -> Result<Vec<FieldState>> {
        if n_steps == 0 {
            return Err(Error::InvalidParameter("rollout needs at least one step".into()));
        }
        self.check_input(prev)?;
        self.check_input(cur)?;
        let (mut a, mut b) = (Self::to_t(prev), Self::to_t(cur));
        let mut t = cur.time;
        let mut out = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let next = self.step_raw(&a, &b, t);
            t += time::step();
            out.push(self.to_state(&next, t)?);
            a = std::mem::replace(&mut b, next);
        }
        Ok(out)
    }

    pub fn normalize(&self, s: &FieldState) -> Result<FieldState> {
        s.expect_space(Space::Physical)?;
        let n = s.n_cells();
        let mut out = s.clone();
        for c in 0..s.n_channels {
            for v in &mut out.values[c * n..(c + 1) * n] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out.space = Space::Normalized;
        Ok(out)
    }

    pub fn denormalize(&self, s: &FieldState) -> Result<FieldState> {
        s.expect_space(Space::Normalized)?;
        let n = s.n_cells();
        let mut out = s.clone();
        for c in 0..s.n_channels {
            for v in &mut out.values[c * n..(c + 1) * n] {
                *v = self.mean[c] + self.std[c] * *v;
            }
        }
        out.space = Space::Physical;
        Ok(out)
    }

    /// Rollout from physical-space inputs, returning physical states.
    pub fn forecast(&self, prev: &FieldState, cur: &FieldState, n_steps: usize) -> Result<Vec<FieldState>> {
        let traj = self.rollout(&self.normalize(prev)?, &self.normalize(cur)?, n_steps)?;
        traj.iter().map(|s| self.denormalize(s)).collect()
    }
}

/// Physical-space forecast at the requested precision.
pub fn forecast_with_precision(
    config: &ModelConfig,
    params: &ModelParams,
    stats: &NormalizationStats,
    prev: &FieldState,
    cur: &FieldState,
    n_steps: usize,
    precision: Precision,
) -> Result<Vec<FieldState>> {
    match precision {
        Precision::F64 => Emulator::<f64>::new(config, params, stats)?.forecast(prev, cur, n_steps),
        Precision::F32 => Emulator::<f32>::new(config, params, stats)?.forecast(prev, cur, n_steps),
    }
}

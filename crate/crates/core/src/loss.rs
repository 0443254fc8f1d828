//! The multi-step training objective: lead-time, area, level and variable
//! weighted squared error in units of the six-hour increment spread.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{FieldState, Layout, LevelSet, NormalizationStats, Space, VarKind};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Pressure,
    Sensitivity,
    Uniform,
    Custom,
}

/// `w(k)` for `k = 0..=N_k`; index 0 is the surface and is always 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelWeights {
    pub weights: Vec<f64>,
    pub scheme: WeightScheme,
}

impl LevelWeights {
    /// Build from the 3D-level weights; the surface weight is prepended.
    pub fn from_levels(levels: &[f64], scheme: WeightScheme) -> Result<Self> {
        if levels.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("level weights must be finite and nonnegative".into()));
        }
        let mut weights = Vec::with_capacity(levels.len() + 1);
        weights.push(1.0);
        weights.extend_from_slice(levels);
        Ok(Self { weights, scheme })
    }

    pub fn uniform(n_levels: usize) -> Self {
        Self::from_levels(&vec![1.0 / n_levels as f64; n_levels], WeightScheme::Uniform).unwrap()
    }

    pub fn n_levels(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn level(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let w: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if w.weights.first() != Some(&1.0) {
            return Err(Error::format(path, "surface weight must be 1"));
        }
        Ok(w)
    }
}

/// `w(k) = pressure(k) / Σ pressure`, with `w(0) = 1`.
pub fn pressure_level_weights(levels: &LevelSet) -> LevelWeights {
    let total: f64 = levels.pressures().iter().sum();
    let w: Vec<f64> = levels.pressures().iter().map(|p| p / total).collect();
    LevelWeights::from_levels(&w, WeightScheme::Pressure).unwrap()
}

/// `ω_var` per variable, in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableWeights {
    pub weights: Vec<f64>,
}

impl VariableWeights {
    /// 1 for 3D variables and the 2 m temperature analog, 0.1 for other surface variables.
    pub fn default_for(layout: &Layout) -> Self {
        Self {
            weights: layout
                .variables
                .iter()
                .map(|v| match v.kind {
                    VarKind::Atmospheric => 1.0,
                    VarKind::Surface if v.name == "t2m" => 1.0,
                    VarKind::Surface => 0.1,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub level_weights: LevelWeights,
    pub variable_weights: VariableWeights,
    /// Supplies σ_Δ per channel.
    pub stats: NormalizationStats,
    pub n_steps: usize,
}

impl LossSpec {
    pub fn new(
        level_weights: LevelWeights,
        variable_weights: VariableWeights,
        stats: NormalizationStats,
        n_steps: usize,
    ) -> Result<Self> {
        let spec = Self {
            level_weights,
            variable_weights,
            stats,
            n_steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter("loss needs N_t ≥ 1".into()));
        }
        self.stats.validate()?;
        let layout = &self.stats.layout;
        if self.level_weights.weights.len() != layout.n_levels() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} level weights for {} levels plus surface",
                self.level_weights.weights.len(),
                layout.n_levels()
            )));
        }
        if self.level_weights.weights[0] != 1.0 {
            return Err(Error::InvalidParameter("surface level weight must be 1".into()));
        }
        if self.variable_weights.weights.len() != layout.variables.len() {
            return Err(Error::ShapeMismatch("variable weights do not match layout".into()));
        }
        if self.variable_weights.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidParameter("variable weights must be positive".into()));
        }
        Ok(())
    }

    pub fn with_steps(&self, n_steps: usize) -> Self {
        Self {
            n_steps,
            ..self.clone()
        }
    }

    /// `w(k)·ω_var / σ_Δ²` per channel.
    pub fn channel_factors(&self) -> Vec<f64> {
        let layout = &self.stats.layout;
        layout
            .channels()
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                self.level_weights.weights[ch.level] * self.variable_weights.weights[ch.var]
                    / (self.stats.dstd[c] * self.stats.dstd[c])
            })
            .collect()
    }
}

fn check_pair(pred: &[FieldState], target: &[FieldState], spec: &LossSpec, grid: &Grid) -> Result<()> {
    if pred.len() != target.len() || pred.len() != spec.n_steps {
        return Err(Error::ShapeMismatch(format!(
            "trajectory lengths {} and {} for N_t = {}",
            pred.len(),
            target.len(),
            spec.n_steps
        )));
    }
    for (p, t) in pred.iter().zip(target) {
        p.check_same_shape(t)?;
        p.expect_space(Space::Physical)?;
        t.expect_space(Space::Physical)?;
        if p.nlat != grid.nlat() || p.nlon != grid.nlon() {
            return Err(Error::ShapeMismatch("trajectory grid differs from loss grid".into()));
        }
        if p.n_channels != spec.stats.n_channels() {
            return Err(Error::ShapeMismatch("σ_Δ does not cover every channel".into()));
        }
    }
    Ok(())
}

/// Area-weighted mean of `((pred − target)/σ_Δ)²` for one channel.
fn channel_mse(p: &[f64], t: &[f64], dstd: f64, grid: &Grid) -> f64 {
    let nlon = grid.nlon();
    let mut total = 0.0;
    for i in 0..grid.nlat() {
        let row: f64 = (0..nlon)
            .map(|j| {
                let e = (p[i * nlon + j] - t[i * nlon + j]) / dstd;
                e * e
            })
            .sum();
        total += row * grid.row_weight(i);
    }
    total
}

/// The weighted multi-step MSE over physical-space trajectories.
pub fn weighted_mse(pred: &[FieldState], target: &[FieldState], spec: &LossSpec, grid: &Grid) -> Result<f64> {
    check_pair(pred, target, spec, grid)?;
    let layout = &spec.stats.layout;
    let channels = layout.channels();
    let nt = spec.n_steps as f64;
    let mut loss = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let mut step = 0.0;
        for (c, ch) in channels.iter().enumerate() {
            let w = spec.level_weights.weights[ch.level] * spec.variable_weights.weights[ch.var];
            step += w * channel_mse(p.channel(c), t.channel(c), spec.stats.dstd[c], grid);
        }
        loss += step / nt;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponent {
    pub variable: String,
    pub level_hpa: Option<f64>,
    pub lead_hours: i64,
    /// Area-weighted mean of `((x̂ − x)/σ_Δ)²`.
    pub unweighted_mse: f64,
    /// `w(k)·ω_var·unweighted_mse / N_t`; these sum to [`weighted_mse`].
    pub weighted_contribution: f64,
}

pub fn per_component_loss(
    pred: &[FieldState],
    target: &[FieldState],
    spec: &LossSpec,
    grid: &Grid,
) -> Result<Vec<LossComponent>> {
    check_pair(pred, target, spec, grid)?;
    let layout = &spec.stats.layout;
    let nt = spec.n_steps as f64;
    let mut rows = Vec::new();
    for (s, (p, t)) in pred.iter().zip(target).enumerate() {
        for (c, ch) in layout.channels().iter().enumerate() {
            let mse = channel_mse(p.channel(c), t.channel(c), spec.stats.dstd[c], grid);
            let w = spec.level_weights.weights[ch.level] * spec.variable_weights.weights[ch.var];
            rows.push(LossComponent {
                variable: layout.variables[ch.var].name.clone(),
                level_hpa: layout.levels.pressure(ch.level),
                lead_hours: 6 * (s as i64 + 1),
                unweighted_mse: mse,
                weighted_contribution: w * mse / nt,
            });
        }
    }
    Ok(rows)
}

pub fn write_components_csv<W: Write>(rows: &[LossComponent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variable", "level_hPa", "lead_hours", "unweighted_mse", "weighted_contribution"])?;
    for r in rows {
        w.write_record([
            r.variable.clone(),
            r.level_hpa.map_or("surface".into(), |p| p.to_string()),
            r.lead_hours.to_string(),
            r.unweighted_mse.to_string(),
            r.weighted_contribution.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{LevelSet, Variable};
    use crate::time::{self, DateRange};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_stats(layout: &Layout, dstd: Vec<f64>) -> NormalizationStats {
        let n = layout.n_channels();
        let start = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        NormalizationStats {
            layout: layout.clone(),
            mean: vec![0.0; n],
            std: vec![1.0; n],
            dstd,
            period: DateRange::new(start, start + time::step()).unwrap(),
            source: "test".into(),
        }
    }

    fn small_layout() -> Layout {
        Layout::new(
            vec![
                Variable { name: "u".into(), kind: VarKind::Atmospheric },
                Variable { name: "v".into(), kind: VarKind::Atmospheric },
            ],
            LevelSet::new(vec![250.0, 500.0, 1000.0]).unwrap(),
        )
        .unwrap()
    }

    fn random_traj(rng: &mut ChaCha8Rng, steps: usize, nc: usize, nlat: usize, nlon: usize) -> Vec<FieldState> {
        let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        (0..steps)
            .map(|s| {
                let v = (0..nc * nlat * nlon).map(|_| rng.random_range(-2.0..2.0)).collect();
                FieldState::new(v, nc, nlat, nlon, t0 + time::step() * s as i32, Space::Physical).unwrap()
            })
            .collect()
    }

    #[test]
    fn pressure_weights_examples() {
        let w = pressure_level_weights(&LevelSet::new(vec![1000.0]).unwrap());
        assert_eq!(w.weights, vec![1.0, 1.0]);
        let w = pressure_level_weights(&LevelSet::with_duplicates(vec![500.0, 500.0]).unwrap());
        assert_eq!(w.weights, vec![1.0, 0.5, 0.5]);
        let w = pressure_level_weights(&LevelSet::standard37());
        assert_eq!(LevelSet::standard37().pressures().iter().sum::<f64>(), 15548.0);
        assert!((w.weights[1] - 1.0 / 15548.0).abs() < 1e-18);
        // 0.0064% of the integrated weight, to two significant figures.
        assert_eq!(format!("{:.1e}", w.weights[1] * 100.0), "6.4e-3");
        assert!((w.weights[1..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_variable_weights() {
        let w = VariableWeights::default_for(&Layout::toy());
        assert_eq!(w.weights, vec![1.0, 1.0, 1.0, 1.0, 0.1]);
    }

    #[test]
    fn formula_collapse_single_cell() {
        // A one-variable surface layout on the coarsest grid; every cell holds
        // the same error, which is equivalent to one whole-sphere cell.
        let layout = Layout::new(
            vec![Variable { name: "s".into(), kind: VarKind::Surface }],
            LevelSet::new(vec![1000.0]).unwrap(),
        )
        .unwrap();
        let grid = Grid::new(2, 4).unwrap();
        let spec = LossSpec::new(
            LevelWeights::uniform(1),
            VariableWeights { weights: vec![1.0] },
            toy_stats(&layout, vec![1.0]),
            1,
        )
        .unwrap();
        let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let p = FieldState::new(vec![2.0; 8], 1, 2, 4, t0, Space::Physical).unwrap();
        let t = FieldState::new(vec![0.0; 8], 1, 2, 4, t0, Space::Physical).unwrap();
        let l = weighted_mse(&[p.clone()], &[t], &spec, &grid).unwrap();
        assert!((l - 4.0).abs() < 1e-14);
        assert_eq!(weighted_mse(&[p.clone()], &[p], &spec, &grid).unwrap(), 0.0);
    }

    #[test]
    fn components_partition_and_scale() {
        let layout = small_layout();
        let grid = Grid::new(2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = random_traj(&mut rng, 2, 6, 2, 4);
        let mut target = random_traj(&mut rng, 2, 6, 2, 4);
        let spec = LossSpec::new(
            pressure_level_weights(&layout.levels),
            VariableWeights { weights: vec![1.0, 0.5] },
            toy_stats(&layout, vec![0.5, 1.0, 2.0, 1.5, 0.7, 1.1]),
            2,
        )
        .unwrap();
        let total = weighted_mse(&pred, &target, &spec, &grid).unwrap();
        let rows = per_component_loss(&pred, &target, &spec, &grid).unwrap();
        let sum: f64 = rows.iter().map(|r| r.weighted_contribution).sum();
        assert!((sum - total).abs() <= 1e-12 * total);

        let mut doubled = spec.clone();
        doubled.variable_weights.weights[1] = 1.0;
        let rows2 = per_component_loss(&pred, &target, &doubled, &grid).unwrap();
        for (a, b) in rows.iter().zip(&rows2) {
            let f = if a.variable == "v" { 2.0 } else { 1.0 };
            assert!((b.weighted_contribution - f * a.weighted_contribution).abs() < 1e-15);
        }

        for s in 0..2 {
            for c in 0..3 {
                let p = pred[s].channel(c).to_vec();
                target[s].channel_mut(c).copy_from_slice(&p);
            }
        }
        let rows = per_component_loss(&pred, &target, &spec, &grid).unwrap();
        assert!(rows.iter().filter(|r| r.variable == "u").all(|r| r.weighted_contribution == 0.0));

        let mut buf = Vec::new();
        write_components_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("variable,level_hPa,lead_hours"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let layout = small_layout();
        let grid = Grid::new(2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = random_traj(&mut rng, 2, 6, 2, 4);
        let spec = LossSpec::new(
            LevelWeights::uniform(3),
            VariableWeights { weights: vec![1.0, 1.0] },
            toy_stats(&layout, vec![1.0; 6]),
            2,
        )
        .unwrap();
        assert!(weighted_mse(&pred[..1], &pred[..1], &spec, &grid).is_err());
        let mut bad = spec.clone();
        bad.stats.dstd[3] = 0.0;
        assert!(bad.validate().is_err());
        assert!(LossSpec::new(spec.level_weights.clone(), spec.variable_weights.clone(), spec.stats.clone(), 0).is_err());
    }

    proptest! {
        #[test]
        fn homogeneity_and_argmin(seed in 0u64..1000, c in 0.1f64..5.0, scale in 0.1f64..10.0) {
            let layout = small_layout();
            let grid = Grid::new(2, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = random_traj(&mut rng, 2, 6, 2, 4);
            let a = random_traj(&mut rng, 2, 6, 2, 4);
            let b = random_traj(&mut rng, 2, 6, 2, 4);
            let spec = LossSpec::new(
                pressure_level_weights(&layout.levels),
                VariableWeights { weights: vec![1.0, 0.3] },
                toy_stats(&layout, vec![1.0, 0.5, 2.0, 1.0, 3.0, 0.2]),
                2,
            ).unwrap();
            let la = weighted_mse(&a, &target, &spec, &grid).unwrap();
            prop_assert!(la >= 0.0);
            let scaled: Vec<FieldState> = a.iter().zip(&target).map(|(p, t)| {
                let mut s = t.clone();
                for (v, (pv, tv)) in s.values.iter_mut().zip(p.values.iter().zip(&t.values)) {
                    *v = tv + c * (pv - tv);
                }
                s
            }).collect();
            let ls = weighted_mse(&scaled, &target, &spec, &grid).unwrap();
            prop_assert!((ls - c * c * la).abs() <= 1e-10 * ls.max(1e-300));

            let lb = weighted_mse(&b, &target, &spec, &grid).unwrap();
            let mut big = spec.clone();
            for w in big.level_weights.weights.iter_mut().skip(1) { *w *= scale; }
            big.level_weights.weights[0] = 1.0;
            // Surface terms are absent from this layout, so every weight scales.
            let la2 = weighted_mse(&a, &target, &big, &grid).unwrap();
            let lb2 = weighted_mse(&b, &target, &big, &grid).unwrap();
            prop_assert_eq!(la < lb, la2 < lb2);
        }
    }
}

//! Per-channel normalization statistics: mean, standard deviation, and the
//! standard deviation of six-hour differences.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::archive::AnalysisArchive;
use super::layout::Layout;
use super::state::{FieldState, Space};
use crate::error::{Error, Result};
use crate::rng::digest_hex;
use crate::time::DateRange;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub layout: Layout,
    /// Indexed by channel, in [`Layout::channels`] order.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub dstd: Vec<f64>,
    pub period: DateRange,
    pub source: String,
}

impl NormalizationStats {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    /// Reject statistics that cannot normalize (non-positive or non-finite spreads).
    pub fn validate(&self) -> Result<()> {
        let n = self.layout.n_channels();
        if self.mean.len() != n || self.std.len() != n || self.dstd.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "statistics cover {} channels, layout has {n}",
                self.mean.len()
            )));
        }
        for (c, ch) in self.layout.channels().iter().enumerate() {
            let name = &self.layout.variables[ch.var].name;
            if !(self.std[c] > 0.0 && self.std[c].is_finite()) {
                return Err(Error::DegenerateField(format!("σ of {name} level {}", ch.level)));
            }
            if !(self.dstd[c] > 0.0 && self.dstd[c].is_finite()) {
                return Err(Error::DegenerateField(format!("σ_Δ of {name} level {}", ch.level)));
            }
            if !self.mean[c].is_finite() {
                return Err(Error::NonFinite(format!("mean of {name} level {}", ch.level)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        digest_hex(&serde_json::to_vec(self).expect("stats serialize"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("bad statistics file: {e}")))?;
        Ok(stats)
    }
}

/// Statistics over every cell and timestamp of `period` ("without regard for
/// time of day or day of year"). With `whole_years`, the period is first
/// truncated to a whole number of years to avoid seasonal bias.
pub fn compute_normalization(
    archive: &AnalysisArchive,
    period: DateRange,
    whole_years: bool,
) -> Result<NormalizationStats> {
    let period = if whole_years {
        period.truncated_to_whole_years().ok_or_else(|| {
            Error::InsufficientSamples("period is shorter than one year".into())
        })?
    } else {
        period
    };
    let range = archive.range();
    if period.start < range.start || period.end > range.end {
        return Err(Error::OutOfRange(format!(
            "statistics period {} .. {} is not inside the archive",
            period.start, period.end
        )));
    }
    let t0 = archive.index_of(period.start)?;
    let nt = period.n_steps();
    if nt < 2 {
        return Err(Error::InsufficientSamples(
            "statistics need at least two timestamps".into(),
        ));
    }
    let nc = archive.n_channels();
    let mut mean = vec![0.0; nc];
    let mut std = vec![0.0; nc];
    let mut dstd = vec![0.0; nc];
    for c in 0..nc {
        let values = |t: usize| archive.channel_raw(t0 + t, c).iter().map(|&v| v as f64);
        let count = (nt * archive.channel_raw(0, c).len()) as f64;
        let m = (0..nt).map(|t| values(t).sum::<f64>()).sum::<f64>() / count;
        let var = (0..nt)
            .map(|t| values(t).map(|v| (v - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / count;
        let diffs = |t: usize| values(t + 1).zip(values(t)).map(|(b, a)| b - a);
        let dcount = ((nt - 1) * archive.channel_raw(0, c).len()) as f64;
        let dm = (0..nt - 1).map(|t| diffs(t).sum::<f64>()).sum::<f64>() / dcount;
        let dvar = (0..nt - 1)
            .map(|t| diffs(t).map(|d| (d - dm).powi(2)).sum::<f64>())
            .sum::<f64>()
            / dcount;
        mean[c] = m;
        std[c] = var.sqrt();
        dstd[c] = dvar.sqrt();
    }
    let stats = NormalizationStats {
        layout: archive.layout().clone(),
        mean,
        std,
        dstd,
        period,
        source: archive.system().to_string(),
    };
    stats.validate()?;
    Ok(stats)
}

fn check_cover(state: &FieldState, stats: &NormalizationStats) -> Result<()> {
    if state.n_channels != stats.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "state has {} channels, statistics cover {}",
            state.n_channels,
            stats.n_channels()
        )));
    }
    Ok(())
}

/// `z = (x − μ) / σ` per channel.
pub fn normalize(state: &FieldState, stats: &NormalizationStats) -> Result<FieldState> {
    state.expect_space(Space::Physical)?;
    check_cover(state, stats)?;
    let mut out = state.clone();
    for c in 0..state.n_channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    out.space = Space::Normalized;
    Ok(out)
}

/// `x = μ + σ z` per channel.
pub fn denormalize(state: &FieldState, stats: &NormalizationStats) -> Result<FieldState> {
    state.expect_space(Space::Normalized)?;
    check_cover(state, stats)?;
    let mut out = state.clone();
    for c in 0..state.n_channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v = m + s * *v);
    }
    out.space = Space::Physical;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormComparisonRow {
    pub variable: String,
    /// Pressure in hPa, or `None` for surface variables.
    pub level_hpa: Option<f64>,
    pub mean_zscore: f64,
    pub std_ratio: f64,
    pub dstd_ratio: f64,
}

/// Per-channel `(μ_b − μ_a)/σ_a`, `σ_b/σ_a` and `σ_Δb/σ_Δa`.
pub fn compare_norm_stats(
    a: &NormalizationStats,
    b: &NormalizationStats,
) -> Result<Vec<NormComparisonRow>> {
    if a.layout != b.layout {
        return Err(Error::InvalidParameter(
            "statistics describe different variable/level sets".into(),
        ));
    }
    Ok(a.layout
        .channels()
        .iter()
        .enumerate()
        .map(|(c, ch)| NormComparisonRow {
            variable: a.layout.variables[ch.var].name.clone(),
            level_hpa: a.layout.levels.pressure(ch.level),
            mean_zscore: (b.mean[c] - a.mean[c]) / a.std[c],
            std_ratio: b.std[c] / a.std[c],
            dstd_ratio: b.dstd[c] / a.dstd[c],
        })
        .collect())
}

pub fn write_comparison_csv<W: Write>(rows: &[NormComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variable", "level_hPa", "mean_zscore", "std_ratio", "dstd_ratio"])?;
    for r in rows {
        w.write_record([
            r.variable.clone(),
            r.level_hpa.map_or("surface".into(), |p| p.to_string()),
            r.mean_zscore.to_string(),
            r.std_ratio.to_string(),
            r.dstd_ratio.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

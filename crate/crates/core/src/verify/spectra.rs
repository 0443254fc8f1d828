use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::AnalysisArchive;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spectral::{band_average, cross_spectral_density, sht_forward, spectral_variance};
use crate::time::STEP_HOURS;

use super::forecasts::ForecastSet;

/// Relative variance below which a wavenumber band is treated as empty.
const NEGLIGIBLE: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralRow {
    pub lead_hours: usize,
    pub kappa: usize,
    /// Mean over initializations of SVAR(forecast)/SVAR(truth).
    pub variance_ratio: Option<f64>,
    /// Mean over initializations of the coherence; `None` where undefined.
    pub coherence: Option<f64>,
}

/// Per-wavenumber values; `None` where undefined.
pub type Spectrum = Vec<Option<f64>>;

/// Band-averaged variance ratio and coherence of `forecast` against `truth`
/// for one field pair. Cross spectra and variances are band averaged first.
pub fn spectral_pair(forecast: &[f64], truth: &[f64], grid: &Grid, lmax: usize, fraction: f64) -> Result<(Spectrum, Spectrum)> {
    let f = sht_forward(forecast, grid, lmax)?;
    let t = sht_forward(truth, grid, lmax)?;
    let vf = band_average(&spectral_variance(&f), fraction);
    let vt = band_average(&spectral_variance(&t), fraction);
    let cross = cross_spectral_density(&f, &t)?;
    let re = band_average(&cross.iter().map(|c| c.re).collect::<Vec<_>>(), fraction);
    let im = band_average(&cross.iter().map(|c| c.im).collect::<Vec<_>>(), fraction);
    let ratio = vf
        .iter()
        .zip(&vt)
        .map(|(a, b)| (*b > 0.0).then(|| a / b))
        .collect();
    // Variance at round-off level relative to the whole field counts as
    // zero: coherence there would only measure transform noise.
    let floor_f = NEGLIGIBLE * vf.iter().sum::<f64>();
    let floor_t = NEGLIGIBLE * vt.iter().sum::<f64>();
    let coh = (0..vf.len())
        .map(|k| {
            (vf[k] > floor_f && vt[k] > floor_t).then(|| Complex64::new(re[k], im[k]).norm_sqr() / (vf[k] * vt[k]))
        })
        .collect();
    Ok((ratio, coh))
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per lead time and total wavenumber, the mean over initializations of the
/// spectral variance ratio and coherence of one channel.
pub fn spectral_report(
    forecasts: &ForecastSet,
    truth: &AnalysisArchive,
    channel: usize,
    lmax: usize,
    band_fraction: f64,
) -> Result<Vec<SpectralRow>> {
    let grid = Grid::from_dims(truth.grid())?;
    if channel >= truth.n_channels() {
        return Err(Error::IndexOutOfRange {
            index: channel,
            len: truth.n_channels(),
        });
    }
    if forecasts.inits.is_empty() {
        return Err(Error::InsufficientSamples("spectral report needs initializations".into()));
    }
    let mut rows = Vec::new();
    for (l, &steps) in forecasts.lead_steps.iter().enumerate() {
        let mut ratios = Vec::new();
        let mut cohs = Vec::new();
        for i in 0..forecasts.inits.len() {
            let f = forecasts.get(i, l);
            let t = truth.state_at(f.time)?;
            let (r, c) = spectral_pair(f.channel(channel), t.channel(channel), &grid, lmax, band_fraction)?;
            ratios.push(r);
            cohs.push(c);
        }
        for kappa in 0..=lmax {
            rows.push(SpectralRow {
                lead_hours: steps * STEP_HOURS as usize,
                kappa,
                variance_ratio: mean_defined(ratios.iter().map(|r| r[kappa])),
                coherence: mean_defined(cohs.iter().map(|c| c[kappa])),
            });
        }
    }
    Ok(rows)
}

pub fn write_spectral_csv<W: Write>(rows: &[SpectralRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lead_hours", "kappa", "variance_ratio", "coherence"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6e}"));
    for r in rows {
        w.write_record([
            r.lead_hours.to_string(),
            r.kappa.to_string(),
            opt(r.variance_ratio),
            opt(r.coherence),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Mean variance ratio over the top third of wavenumbers `κ > 2·lmax/3`.
pub fn top_third_ratio(rows: &[SpectralRow], lead_hours: usize, lmax: usize) -> Option<f64> {
    mean_defined(
        rows.iter()
            .filter(|r| r.lead_hours == lead_hours && 3 * r.kappa > 2 * lmax)
            .map(|r| r.variance_ratio),
    )
}

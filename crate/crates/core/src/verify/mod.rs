//! Forecast verification: climatology, RMSE, skill, activity, anomaly
//! correlation, scorecards and spectral reports.

mod climatology;
mod forecasts;
mod metrics;
mod scorecard;
mod spectra;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use climatology::{anomaly, bucket_of, build_climatology, build_climatology_smoothed, ClimatologyStore};
pub use forecasts::{make_forecasts, ForecastSet};
pub use metrics::{acc, activity, rmse, skill};
pub use scorecard::{
    rmse_over_inits, scorecard, scorecard_rows, BandAggregation, LevelBand, Scorecard, ScorecardRow, ScorecardSpec,
    ANNOTATE_ABOVE,
};
pub use spectra::{spectral_pair, spectral_report, top_third_ratio, write_spectral_csv, SpectralRow};

use crate::data::AnalysisArchive;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::time::STEP_HOURS;

/// RMSE (over initializations) and mean ACC per channel and lead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub variable: String,
    pub level: String,
    pub channel: usize,
    pub lead_hours: usize,
    pub rmse: f64,
    pub acc: Option<f64>,
}

pub fn evaluate(set: &ForecastSet, truth: &AnalysisArchive, clim: Option<&ClimatologyStore>) -> Result<Vec<EvalRow>> {
    let grid = Grid::from_dims(truth.grid())?;
    let layout = truth.layout();
    let channels = layout.channels();
    let (ni, nl, nc) = (set.inits.len(), set.lead_steps.len(), truth.n_channels());
    if ni == 0 {
        return Err(Error::InsufficientSamples("evaluation needs initializations".into()));
    }
    let r = rmse_over_inits(&set.squared_errors(truth, &grid)?, ni, nl, nc);
    let mut rows = Vec::with_capacity(nl * nc);
    for (l, &steps) in set.lead_steps.iter().enumerate() {
        for (c, ch) in channels.iter().enumerate() {
            let acc_mean = match clim {
                None => None,
                Some(clim) => {
                    let mut vals = Vec::with_capacity(ni);
                    for i in 0..ni {
                        let f = set.get(i, l);
                        match acc(f, &truth.state_at(f.time)?, clim, &grid, c) {
                            Ok(v) => vals.push(v),
                            Err(Error::ZeroReference(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                }
            };
            rows.push(EvalRow {
                label: set.label.clone(),
                variable: layout.variables[ch.var].name.clone(),
                level: layout.level_label(ch.level),
                channel: c,
                lead_hours: steps * STEP_HOURS as usize,
                rmse: r[l * nc + c],
                acc: acc_mean,
            });
        }
    }
    Ok(rows)
}

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "variable", "level_hPa", "lead_hours", "rmse", "acc"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.variable.clone(),
            r.level.clone(),
            r.lead_hours.to_string(),
            format!("{:.6e}", r.rmse),
            r.acc.map_or(String::new(), |a| format!("{a:.6e}")),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{AnalysisArchive, Layout, VarKind};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::time::STEP_HOURS;

use super::forecasts::ForecastSet;
use super::metrics::skill;

/// A group of levels: the surface, or pressures in `[lo, hi)` hPa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelBand {
    pub name: String,
    pub surface: bool,
    pub lo_hpa: f64,
    pub hi_hpa: f64,
}

impl LevelBand {
    pub fn surface() -> Self {
        Self {
            name: "surface".into(),
            surface: true,
            lo_hpa: 0.0,
            hi_hpa: 0.0,
        }
    }

    pub fn pressure(name: &str, lo_hpa: f64, hi_hpa: f64) -> Self {
        Self {
            name: name.into(),
            surface: false,
            lo_hpa,
            hi_hpa,
        }
    }

    /// Surface; 1000–500 hPa; 500–100 hPa; above 100 hPa.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::surface(),
            Self::pressure("1000-500hPa", 500.0, 1000.0 + 1e-9),
            Self::pressure("500-100hPa", 100.0, 500.0),
            Self::pressure("top", 0.0, 100.0),
        ]
    }

    fn contains(&self, pressure: Option<f64>) -> bool {
        match pressure {
            None => self.surface,
            Some(p) => !self.surface && self.lo_hpa <= p && p < self.hi_hpa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandAggregation {
    /// Skill per level, then averaged over the band.
    #[default]
    SkillThenAverage,
    /// RMSE averaged over the band, then converted to skill.
    RmseThenSkill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorecardSpec {
    /// Variables to score; empty means all.
    pub variables: Vec<String>,
    pub bands: Vec<LevelBand>,
    pub aggregation: BandAggregation,
}

impl Default for ScorecardSpec {
    fn default() -> Self {
        Self {
            variables: Vec::new(),
            bands: LevelBand::defaults(),
            aggregation: BandAggregation::SkillThenAverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorecardRow {
    pub variable: String,
    pub band: String,
    pub lead_hours: usize,
    pub skill: f64,
    /// +1 improvement, −1 degradation, 0 neutral.
    pub marker: i8,
    /// Percentage shown when |skill| exceeds 5%.
    pub annotation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub candidate: String,
    pub reference: String,
    pub rows: Vec<ScorecardRow>,
}

pub const ANNOTATE_ABOVE: f64 = 0.05;

/// RMSE over initializations per (lead, channel): root of the mean squared error.
pub fn rmse_over_inits(squared: &[f64], n_inits: usize, n_leads: usize, n_channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_leads * n_channels];
    for i in 0..n_inits {
        for (k, v) in out.iter_mut().enumerate() {
            *v += squared[i * n_leads * n_channels + k];
        }
    }
    out.iter().map(|s| (s / n_inits as f64).sqrt()).collect()
}

fn row(variable: &str, band: &str, lead_hours: usize, s: f64) -> ScorecardRow {
    ScorecardRow {
        variable: variable.into(),
        band: band.into(),
        lead_hours,
        skill: s,
        marker: if s > 0.0 {
            1
        } else if s < 0.0 {
            -1
        } else {
            0
        },
        annotation: (s.abs() > ANNOTATE_ABOVE).then(|| format!("{:+.1}%", 100.0 * s)),
    }
}

/// Relative skill of `candidate` over `reference`, per variable, level band
/// and lead time.
pub fn scorecard(
    candidate: &ForecastSet,
    reference: &ForecastSet,
    truth: &AnalysisArchive,
    spec: &ScorecardSpec,
) -> Result<Scorecard> {
    candidate.check_aligned(reference)?;
    let grid = Grid::from_dims(truth.grid())?;
    let layout = truth.layout();
    let (ni, nl, nc) = (candidate.inits.len(), candidate.lead_steps.len(), truth.n_channels());
    if ni == 0 {
        return Err(Error::InsufficientSamples("scorecard needs at least one initialization".into()));
    }
    let rc = rmse_over_inits(&candidate.squared_errors(truth, &grid)?, ni, nl, nc);
    let rr = rmse_over_inits(&reference.squared_errors(truth, &grid)?, ni, nl, nc);
    let rows = scorecard_rows(layout, &candidate.lead_steps, &rc, &rr, spec)?;
    Ok(Scorecard {
        candidate: candidate.label.clone(),
        reference: reference.label.clone(),
        rows,
    })
}

/// Scorecard rows from per-(lead, channel) RMSEs of both models.
pub fn scorecard_rows(
    layout: &Layout,
    lead_steps: &[usize],
    rc: &[f64],
    rr: &[f64],
    spec: &ScorecardSpec,
) -> Result<Vec<ScorecardRow>> {
    let channels = layout.channels();
    let nc = channels.len();
    let mut rows = Vec::new();
    for (v, var) in layout.variables.iter().enumerate() {
        if !spec.variables.is_empty() && !spec.variables.contains(&var.name) {
            continue;
        }
        for band in &spec.bands {
            let members: Vec<usize> = channels
                .iter()
                .enumerate()
                .filter(|(_, ch)| {
                    ch.var == v && {
                        let p = match var.kind {
                            VarKind::Surface => None,
                            VarKind::Atmospheric => layout.levels.pressure(ch.level),
                        };
                        band.contains(p)
                    }
                })
                .map(|(c, _)| c)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (l, &steps) in lead_steps.iter().enumerate() {
                let s = match spec.aggregation {
                    BandAggregation::SkillThenAverage => {
                        let mut total = 0.0;
                        for &c in &members {
                            total += skill(rc[l * nc + c], rr[l * nc + c])?;
                        }
                        total / members.len() as f64
                    }
                    BandAggregation::RmseThenSkill => {
                        let a: f64 = members.iter().map(|&c| rc[l * nc + c]).sum();
                        let b: f64 = members.iter().map(|&c| rr[l * nc + c]).sum();
                        skill(a, b)?
                    }
                };
                rows.push(row(&var.name, &band.name, steps * STEP_HOURS as usize, s));
            }
        }
    }
    Ok(rows)
}

impl Scorecard {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variable", "band", "lead_hours", "skill", "marker", "annotated"])?;
        for r in &self.rows {
            w.write_record([
                r.variable.clone(),
                r.band.clone(),
                r.lead_hours.to_string(),
                format!("{:.6e}", r.skill),
                match r.marker {
                    1 => "+".to_string(),
                    -1 => "-".to_string(),
                    _ => "0".to_string(),
                },
                r.annotation.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

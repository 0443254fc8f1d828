use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::data::{AnalysisArchive, FieldState, Layout};
use crate::error::{Error, Result};
use crate::grid::GridDims;
use crate::time::{self, DateRange, Instant};

pub const DAYS: usize = 365;
pub const TIMES_OF_DAY: usize = 4;

/// `(day of year, time of day)` bucket of `t`; 31 December of leap years
/// shares the last bucket with 30 December.
pub fn bucket_of(t: Instant) -> (usize, usize) {
    ((t.ordinal0() as usize).min(DAYS - 1), t.hour() as usize / time::STEP_HOURS as usize)
}

/// Mean state per (day of year, time of day).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimatologyStore {
    pub layout: Layout,
    pub grid: GridDims,
    pub period: DateRange,
    /// Window half-width in days pooled into each bucket.
    pub half_width_days: usize,
    buckets: Vec<Option<Vec<f64>>>,
}

impl ClimatologyStore {
    pub fn is_populated(&self, doy: usize, tod: usize) -> bool {
        self.buckets[doy * TIMES_OF_DAY + tod].is_some()
    }

    pub fn n_missing(&self) -> usize {
        self.buckets.iter().filter(|b| b.is_none()).count()
    }

    /// Climatological field at the bucket of `t`.
    pub fn field(&self, t: Instant) -> Result<&[f64]> {
        let (d, h) = bucket_of(t);
        self.buckets[d * TIMES_OF_DAY + h]
            .as_deref()
            .ok_or_else(|| Error::MissingBucket(format!("day {} hour {:02} (for {t})", d + 1, h * 6)))
    }

    /// One channel of the climatological field at `t`.
    pub fn channel(&self, t: Instant, c: usize) -> Result<&[f64]> {
        let n = self.grid.nlat * self.grid.nlon;
        Ok(&self.field(t)?[c * n..(c + 1) * n])
    }
}

/// Per-bucket mean over every analysis in `period`.
pub fn build_climatology(archive: &AnalysisArchive, period: DateRange) -> Result<ClimatologyStore> {
    build_climatology_smoothed(archive, period, 0)
}

/// As [`build_climatology`], pooling analyses within ±`half_width_days` of
/// each day of year (cyclically) at the same time of day.
pub fn build_climatology_smoothed(archive: &AnalysisArchive, period: DateRange, half_width_days: usize) -> Result<ClimatologyStore> {
    let first = archive.index_of(period.start.max(archive.start())).ok();
    let times: Vec<usize> = (first.unwrap_or(archive.n_times())..archive.n_times())
        .take_while(|&i| archive.time(i) < period.end)
        .collect();
    if times.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "no analyses between {} and {}",
            period.start, period.end
        )));
    }
    let state_len = archive.n_channels() * archive.grid().nlat * archive.grid().nlon;
    let mut sums = vec![vec![0.0; state_len]; DAYS * TIMES_OF_DAY];
    let mut counts = vec![0usize; DAYS * TIMES_OF_DAY];
    for &i in &times {
        let s = archive.state(i);
        let (d, h) = bucket_of(s.time);
        let w = half_width_days as i64;
        for off in -w..=w {
            let dd = (d as i64 + off).rem_euclid(DAYS as i64) as usize;
            let b = dd * TIMES_OF_DAY + h;
            for (acc, v) in sums[b].iter_mut().zip(&s.values) {
                *acc += v;
            }
            counts[b] += 1;
        }
    }
    let buckets: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let missing = buckets.iter().filter(|b| b.is_none()).count();
    if missing > 0 {
        log::warn!("climatology leaves {missing} of {} buckets unpopulated", buckets.len());
    }
    Ok(ClimatologyStore {
        layout: archive.layout().clone(),
        grid: archive.grid(),
        period,
        half_width_days,
        buckets,
    })
}

/// `state − climatology(state.time)`.
pub fn anomaly(state: &FieldState, clim: &ClimatologyStore) -> Result<Vec<f64>> {
    let c = clim.field(state.time)?;
    if c.len() != state.values.len() {
        return Err(Error::ShapeMismatch("climatology and state differ in shape".into()));
    }
    Ok(state.values.iter().zip(c).map(|(x, m)| x - m).collect())
}

//! Timestamps on the six-hour analysis cadence.

use chrono::{DateTime, Duration, Months, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Instant = DateTime<Utc>;

pub const STEP_HOURS: i64 = 6;
const TROPICAL_YEAR_SECONDS: f64 = 365.2425 * 86_400.0;

pub fn step() -> Duration {
    Duration::hours(STEP_HOURS)
}

/// Half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: Instant,
    pub end: Instant,
}

impl DateRange {
    pub fn new(start: Instant, end: Instant) -> Result<Self> {
        if end <= start {
            return Err(Error::InvalidParameter(format!(
                "empty date range {start} .. {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: Instant) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps(&self, other: &DateRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Number of six-hourly timestamps in the range.
    pub fn n_steps(&self) -> usize {
        let secs = (self.end - self.start).num_seconds();
        let step = STEP_HOURS * 3600;
        ((secs + step - 1) / step) as usize
    }

    /// Largest prefix spanning a whole number of calendar years, or `None`
    /// when the range is shorter than one year.
    pub fn truncated_to_whole_years(&self) -> Option<DateRange> {
        let mut years = 0u32;
        while let Some(next) = self.start.checked_add_months(Months::new(12 * (years + 1))) {
            if next > self.end {
                break;
            }
            years += 1;
        }
        if years == 0 {
            return None;
        }
        let end = self.start.checked_add_months(Months::new(12 * years))?;
        Some(DateRange {
            start: self.start,
            end,
        })
    }
}

pub fn is_on_cadence(t: Instant) -> bool {
    t.minute() == 0 && t.second() == 0 && t.nanosecond() == 0 && t.hour().is_multiple_of(6)
}

/// Fraction of the UTC day elapsed, in `[0, 1)`.
pub fn day_fraction(t: Instant) -> f64 {
    t.num_seconds_from_midnight() as f64 / 86_400.0
}

/// Fraction of a mean tropical year elapsed since the Unix epoch, in `[0, 1)`.
pub fn year_fraction(t: Instant) -> f64 {
    (t.timestamp() as f64 / TROPICAL_YEAR_SECONDS).rem_euclid(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(y: i32, m: u32, d: u32, h: u32) -> Instant {
        Utc.with_ymd_and_hms(y, m, d, h, 0, 0).unwrap()
    }

    #[test]
    fn whole_year_truncation() {
        let r = DateRange::new(at(2019, 7, 1, 0), at(2021, 12, 31, 18)).unwrap();
        let t = r.truncated_to_whole_years().unwrap();
        assert_eq!(t.end, at(2021, 7, 1, 0));
        let short = DateRange::new(at(2019, 7, 1, 0), at(2020, 3, 1, 0)).unwrap();
        assert!(short.truncated_to_whole_years().is_none());
    }

    #[test]
    fn fractions_and_counts() {
        assert_eq!(day_fraction(at(2020, 1, 1, 18)), 0.75);
        let r = DateRange::new(at(2020, 1, 1, 0), at(2020, 1, 2, 0)).unwrap();
        assert_eq!(r.n_steps(), 4);
        assert!(is_on_cadence(at(2020, 5, 5, 12)));
        assert!(!is_on_cadence(at(2020, 5, 5, 13)));
        let yf = year_fraction(at(2020, 6, 1, 0));
        assert!((0.0..1.0).contains(&yf));
    }
}

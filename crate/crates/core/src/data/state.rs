use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Physical,
    Normalized,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Physical => "physical",
            Space::Normalized => "normalized",
        }
    }
}

/// Every channel of every grid cell at one timestamp.
///
/// Values are stored channel-major: `values[c * n_cells + i * nlon + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub values: Vec<f64>,
    pub n_channels: usize,
    pub nlat: usize,
    pub nlon: usize,
    pub time: Instant,
    pub space: Space,
}

impl FieldState {
    pub fn new(
        values: Vec<f64>,
        n_channels: usize,
        nlat: usize,
        nlon: usize,
        time: Instant,
        space: Space,
    ) -> Result<Self> {
        if values.len() != n_channels * nlat * nlon {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {n_channels} channels on {nlat}x{nlon}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field state value".into()));
        }
        Ok(Self {
            values,
            n_channels,
            nlat,
            nlon,
            time,
            space,
        })
    }

    pub fn zeros(n_channels: usize, nlat: usize, nlon: usize, time: Instant, space: Space) -> Self {
        Self {
            values: vec![0.0; n_channels * nlat * nlon],
            n_channels,
            nlat,
            nlon,
            time,
            space,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.nlat * self.nlon
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.n_cells();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.n_cells();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FieldState) -> bool {
        self.n_channels == other.n_channels && self.nlat == other.nlat && self.nlon == other.nlon
    }

    pub fn check_same_shape(&self, other: &FieldState) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "state {}x{}x{} vs {}x{}x{}",
                self.n_channels, self.nlat, self.nlon, other.n_channels, other.nlat, other.nlon
            )))
        }
    }

    pub fn expect_space(&self, space: Space) -> Result<()> {
        if self.space == space {
            Ok(())
        } else {
            Err(Error::SpaceMismatch {
                expected: space.name(),
                found: self.space.name(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

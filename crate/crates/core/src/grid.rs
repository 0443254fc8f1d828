//! Equiangular latitude/longitude grids and area-weighted reductions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell-centered equiangular grid covering the whole sphere.
///
/// Row 0 is the northernmost row; the first and last rows have the poles as
/// their outer edges. Cell areas are exact solid angles, so they sum to 4π.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nlat: usize,
    nlon: usize,
    lat_centers: Vec<f64>,
    lon_centers: Vec<f64>,
    /// Solid angle of one cell in each row (all cells in a row are equal).
    row_area: Vec<f64>,
}

/// Serializable grid dimensions, as they appear in run configurations and file headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub nlat: usize,
    pub nlon: usize,
}

impl Grid {
    pub fn new(nlat: usize, nlon: usize) -> Result<Self> {
        if nlat < 2 || nlon < 4 {
            return Err(Error::GridTooSmall { nlat, nlon });
        }
        let dlat = PI / nlat as f64;
        let dlon = 2.0 * PI / nlon as f64;
        let edge = |i: usize| PI / 2.0 - i as f64 * dlat;
        let lat_centers = (0..nlat).map(|i| PI / 2.0 - (i as f64 + 0.5) * dlat).collect();
        let lon_centers = (0..nlon).map(|j| (j as f64 + 0.5) * dlon).collect();
        let row_area = (0..nlat)
            .map(|i| dlon * (edge(i).sin() - edge(i + 1).sin()))
            .collect();
        Ok(Self {
            nlat,
            nlon,
            lat_centers,
            lon_centers,
            row_area,
        })
    }

    pub fn from_dims(dims: GridDims) -> Result<Self> {
        Self::new(dims.nlat, dims.nlon)
    }

    pub fn dims(&self) -> GridDims {
        GridDims {
            nlat: self.nlat,
            nlon: self.nlon,
        }
    }

    pub fn nlat(&self) -> usize {
        self.nlat
    }

    pub fn nlon(&self) -> usize {
        self.nlon
    }

    pub fn n_cells(&self) -> usize {
        self.nlat * self.nlon
    }

    /// Latitudes of row centers in radians, north to south.
    pub fn lat_centers(&self) -> &[f64] {
        &self.lat_centers
    }

    /// Longitudes of column centers in radians, increasing eastward.
    pub fn lon_centers(&self) -> &[f64] {
        &self.lon_centers
    }

    /// Solid angle (steradians) of a single cell in row `i`.
    pub fn row_area(&self, i: usize) -> f64 {
        self.row_area[i]
    }

    pub fn row_areas(&self) -> &[f64] {
        &self.row_area
    }

    /// Solid angle of cell `(i, j)`.
    pub fn cell_area(&self, i: usize, _j: usize) -> f64 {
        self.row_area[i]
    }

    /// Per-row weight `dA / 4π`; summing it over every cell gives one.
    pub fn row_weight(&self, i: usize) -> f64 {
        self.row_area[i] / (4.0 * PI)
    }

    /// `Σ values · dA / 4π` for a field stored row-major (lat, lon).
    pub fn area_weighted_mean(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                self.n_cells()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at cell {pos}")));
        }
        Ok(self.weighted_sum_unchecked(values))
    }

    /// Area-weighted mean without validation; used on hot paths where the
    /// caller already guarantees the shape.
    pub(crate) fn weighted_sum_unchecked(&self, values: &[f64]) -> f64 {
        values
            .chunks_exact(self.nlon)
            .zip(&self.row_area)
            .map(|(row, area)| row.iter().sum::<f64>() * area)
            .sum::<f64>()
            / (4.0 * PI)
    }
}

/// Convenience wrapper matching the free-function form used by the metric code.
pub fn area_weighted_mean(values: &[f64], grid: &Grid) -> Result<f64> {
    grid.area_weighted_mean(values)
}

use serde::{Deserialize, Serialize};

use crate::data::Layout;
use crate::error::{Error, Result};
use crate::grid::GridDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

/// A shared-weight stencil network: every cell sees the `(2r+1)²`
/// neighborhood of both input states, plus optional time and position
/// features, through one hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layout: Layout,
    pub grid: GridDims,
    pub stencil_radius: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// sin/cos of local day fraction and of year fraction.
    pub time_features: bool,
    /// sin(latitude) of the cell.
    pub position_feature: bool,
}

impl ModelConfig {
    pub fn new(layout: Layout, grid: GridDims, stencil_radius: usize, hidden: usize, activation: Activation) -> Self {
        Self {
            layout,
            grid,
            stencil_radius,
            hidden,
            activation,
            time_features: true,
            position_feature: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidParameter("hidden width must be at least 1".into()));
        }
        if self.grid.nlat < 2 || self.grid.nlon < 4 {
            return Err(Error::GridTooSmall {
                nlat: self.grid.nlat,
                nlon: self.grid.nlon,
            });
        }
        Ok(())
    }

    pub fn stencil_size(&self) -> usize {
        let w = 2 * self.stencil_radius + 1;
        w * w
    }

    pub fn n_time_features(&self) -> usize {
        if self.time_features {
            4
        } else {
            0
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.layout.n_channels() * self.stencil_size()
            + self.n_time_features()
            + usize::from(self.position_feature)
    }
}

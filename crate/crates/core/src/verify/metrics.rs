use crate::data::{FieldState, Space};
use crate::error::{Error, Result};
use crate::grid::Grid;

use super::climatology::ClimatologyStore;

fn check(pred: &FieldState, truth: &FieldState, grid: &Grid, channel: usize) -> Result<()> {
    pred.check_same_shape(truth)?;
    pred.expect_space(Space::Physical)?;
    truth.expect_space(Space::Physical)?;
    if pred.nlat != grid.nlat() || pred.nlon != grid.nlon() {
        return Err(Error::ShapeMismatch("field grid differs from metric grid".into()));
    }
    if channel >= pred.n_channels {
        return Err(Error::IndexOutOfRange {
            index: channel,
            len: pred.n_channels,
        });
    }
    Ok(())
}

/// Area-weighted mean of `(a − b)²`.
pub(crate) fn mse_slices(a: &[f64], b: &[f64], grid: &Grid) -> f64 {
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    grid.weighted_sum_unchecked(&sq)
}

/// Area-weighted root mean squared error of one channel.
pub fn rmse(pred: &FieldState, truth: &FieldState, grid: &Grid, channel: usize) -> Result<f64> {
    check(pred, truth, grid, channel)?;
    Ok(mse_slices(pred.channel(channel), truth.channel(channel), grid).sqrt())
}

/// `1 − rmse_candidate / rmse_reference`.
pub fn skill(rmse_candidate: f64, rmse_reference: f64) -> Result<f64> {
    if !(rmse_reference > 0.0) {
        return Err(Error::ZeroReference(format!("reference RMSE {rmse_reference}")));
    }
    Ok(1.0 - rmse_candidate / rmse_reference)
}

/// RMS difference between a field and its climatology.
pub fn activity(x: &FieldState, clim: &ClimatologyStore, grid: &Grid, channel: usize) -> Result<f64> {
    check(x, x, grid, channel)?;
    Ok(mse_slices(x.channel(channel), clim.channel(x.time, channel)?, grid).sqrt())
}

/// Anomaly correlation: area-weighted anomaly covariance over the product of
/// activities. The bias is not removed.
pub fn acc(pred: &FieldState, analysis: &FieldState, clim: &ClimatologyStore, grid: &Grid, channel: usize) -> Result<f64> {
    check(pred, analysis, grid, channel)?;
    if pred.time != analysis.time {
        return Err(Error::Alignment(format!("forecast valid {} vs analysis {}", pred.time, analysis.time)));
    }
    let c = clim.channel(analysis.time, channel)?;
    let a: Vec<f64> = pred.channel(channel).iter().zip(c).map(|(x, m)| x - m).collect();
    let b: Vec<f64> = analysis.channel(channel).iter().zip(c).map(|(x, m)| x - m).collect();
    let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let cov = grid.weighted_sum_unchecked(&prod);
    let zeros = vec![0.0; a.len()];
    let act_p = mse_slices(&a, &zeros, grid).sqrt();
    let act_a = mse_slices(&b, &zeros, grid).sqrt();
    if !(act_p > 0.0 && act_a > 0.0) {
        return Err(Error::ZeroReference("anomaly activity is zero".into()));
    }
    Ok(cov / (act_p * act_a))
}

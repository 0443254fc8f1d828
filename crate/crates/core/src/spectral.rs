//! Spherical harmonic analysis on equiangular grids, cross spectra,
//! spectral variance, coherence, and wavenumber band averaging.
//!
//! Harmonics are orthonormal over the unit sphere (`∫|Y|² dΩ = 1`) and carry
//! the Condon–Shortley phase, so `Y(l, -m) = (-1)^m conj(Y(l, m))`.
//!
//! The forward transform takes the longitude FFT of every latitude row and
//! then, per zonal wavenumber, fits associated-Legendre profiles to the row
//! coefficients by area-weighted least squares. For band-limited fields with
//! `lmax < nlat` the fit is exact, which gives a clean round trip.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Complex harmonic coefficients for `|m| <= l <= lmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicCoefficients {
    lmax: usize,
    coeffs: Vec<Complex64>,
}

impl HarmonicCoefficients {
    pub fn zeros(lmax: usize) -> Self {
        Self {
            lmax,
            coeffs: vec![Complex64::new(0.0, 0.0); (lmax + 1) * (lmax + 1)],
        }
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    fn index(l: usize, m: i64) -> usize {
        l * l + (m + l as i64) as usize
    }

    /// Coefficient at total wavenumber `l`, zonal wavenumber `m`; `None`
    /// outside the triangle `|m| <= l <= lmax`.
    pub fn get(&self, l: usize, m: i64) -> Option<Complex64> {
        if l > self.lmax || m.unsigned_abs() as usize > l {
            return None;
        }
        Some(self.coeffs[Self::index(l, m)])
    }

    pub fn set(&mut self, l: usize, m: i64, value: Complex64) -> Result<()> {
        if l > self.lmax || m.unsigned_abs() as usize > l {
            return Err(Error::IndexOutOfRange {
                index: l,
                len: self.lmax + 1,
            });
        }
        self.coeffs[Self::index(l, m)] = value;
        Ok(())
    }

    /// Coefficients of wavenumber `l`, ordered `m = -l ..= l`.
    pub fn degree(&self, l: usize) -> &[Complex64] {
        &self.coeffs[l * l..(l + 1) * (l + 1)]
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            lmax: self.lmax,
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// Zero every coefficient above `l_cut`.
    pub fn truncated(&self, l_cut: usize) -> Self {
        let mut out = self.clone();
        for l in (l_cut + 1)..=self.lmax {
            for c in &mut out.coeffs[l * l..(l + 1) * (l + 1)] {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        out
    }
}

/// Orthonormal associated Legendre functions `P̄(l, m)(x)` for `m >= 0`,
/// scaled so that `P̄(l, m)(x) e^{imφ}` has unit norm on the sphere.
/// Returned as `table[m][l - m]` for `l` in `m..=lmax`.
pub fn legendre_table(lmax: usize, x: f64) -> Vec<Vec<f64>> {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut table = Vec::with_capacity(lmax + 1);
    let mut pmm = (1.0 / (4.0 * PI)).sqrt();
    for m in 0..=lmax {
        if m > 0 {
            let mf = m as f64;
            pmm *= -((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s;
        }
        let mut col = Vec::with_capacity(lmax - m + 1);
        col.push(pmm);
        if m < lmax {
            col.push((2.0 * m as f64 + 3.0).sqrt() * x * pmm);
        }
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
                .sqrt();
            let next = a * (x * col[l - m - 1] - b * col[l - m - 2]);
            col.push(next);
        }
        table.push(col);
    }
    table
}

fn check_resolvable(grid: &Grid, lmax: usize) -> Result<()> {
    if lmax + 1 > grid.nlat() || 2 * lmax + 1 > grid.nlon() {
        return Err(Error::UnresolvableLmax {
            lmax,
            nlat: grid.nlat(),
        });
    }
    Ok(())
}

/// Forward transform of a real field stored row-major `(lat, lon)`.
pub fn sht_forward(field: &[f64], grid: &Grid, lmax: usize) -> Result<HarmonicCoefficients> {
    check_resolvable(grid, lmax)?;
    if field.len() != grid.n_cells() {
        return Err(Error::ShapeMismatch(format!(
            "field has {} values, grid has {} cells",
            field.len(),
            grid.n_cells()
        )));
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectral transform input".into()));
    }
    let (nlat, nlon) = (grid.nlat(), grid.nlon());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nlon);
    let lon0 = grid.lon_centers()[0];

    // Row Fourier coefficients g[i][m] = (1/nlon) Σ_j f e^{-imφ_j}, m = 0..=lmax.
    let mut row_coeffs = vec![vec![Complex64::new(0.0, 0.0); lmax + 1]; nlat];
    let mut buf = vec![Complex64::new(0.0, 0.0); nlon];
    for (i, row) in field.chunks_exact(nlon).enumerate() {
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        for m in 0..=lmax {
            // FFT indexes from φ = 0; shift to the first cell center.
            let phase = Complex64::from_polar(1.0, -(m as f64) * lon0);
            row_coeffs[i][m] = buf[m] * phase / nlon as f64;
        }
    }

    let tables: Vec<Vec<Vec<f64>>> = grid
        .lat_centers()
        .iter()
        .map(|lat| legendre_table(lmax, lat.sin()))
        .collect();
    let weights = grid.row_areas();

    let mut out = HarmonicCoefficients::zeros(lmax);
    for m in 0..=lmax {
        let n = lmax - m + 1;
        let basis = DMatrix::from_fn(nlat, n, |i, k| tables[i][m][k]);
        let mut normal = DMatrix::<f64>::zeros(n, n);
        let mut rhs_re = DVector::<f64>::zeros(n);
        let mut rhs_im = DVector::<f64>::zeros(n);
        for i in 0..nlat {
            let w = weights[i];
            for a in 0..n {
                let pa = basis[(i, a)] * w;
                rhs_re[a] += pa * row_coeffs[i][m].re;
                rhs_im[a] += pa * row_coeffs[i][m].im;
                for b in 0..=a {
                    normal[(a, b)] += pa * basis[(i, b)];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                normal[(b, a)] = normal[(a, b)];
            }
        }
        let chol = normal.cholesky().ok_or_else(|| {
            Error::InvalidParameter(format!("singular Legendre system at m={m}"))
        })?;
        let re = chol.solve(&rhs_re);
        let im = chol.solve(&rhs_im);
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        for k in 0..n {
            let l = m + k;
            let c = Complex64::new(re[k], im[k]);
            out.coeffs[HarmonicCoefficients::index(l, m as i64)] = c;
            if m > 0 {
                out.coeffs[HarmonicCoefficients::index(l, -(m as i64))] = c.conj() * sign;
            }
        }
    }
    Ok(out)
}

/// Synthesize the (real part of the) field represented by `coeffs`.
pub fn sht_inverse(coeffs: &HarmonicCoefficients, grid: &Grid) -> Result<Vec<f64>> {
    let lmax = coeffs.lmax;
    check_resolvable(grid, lmax)?;
    let (nlat, nlon) = (grid.nlat(), grid.nlon());
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(nlon);
    let lon0 = grid.lon_centers()[0];
    let mut field = Vec::with_capacity(nlat * nlon);
    let mut buf = vec![Complex64::new(0.0, 0.0); nlon];
    for lat in grid.lat_centers() {
        let table = legendre_table(lmax, lat.sin());
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for m in -(lmax as i64)..=(lmax as i64) {
            let ma = m.unsigned_abs() as usize;
            let sign = if m < 0 && ma % 2 == 1 { -1.0 } else { 1.0 };
            let mut acc = Complex64::new(0.0, 0.0);
            for l in ma..=lmax {
                acc += coeffs.coeffs[HarmonicCoefficients::index(l, m)] * table[ma][l - ma];
            }
            let phase = Complex64::from_polar(1.0, m as f64 * lon0);
            let bin = m.rem_euclid(nlon as i64) as usize;
            buf[bin] += acc * sign * phase;
        }
        ifft.process(&mut buf);
        field.extend(buf.iter().map(|c| c.re));
    }
    Ok(field)
}

fn check_same_lmax(x: &HarmonicCoefficients, y: &HarmonicCoefficients) -> Result<()> {
    if x.lmax != y.lmax {
        return Err(Error::ShapeMismatch(format!(
            "lmax {} vs {}",
            x.lmax, y.lmax
        )));
    }
    Ok(())
}

/// `CROSS(x, y; κ) = Σ_λ S(x)(λ, κ) · conj(S(y)(λ, κ))`.
pub fn cross_spectral_density(
    x: &HarmonicCoefficients,
    y: &HarmonicCoefficients,
) -> Result<Vec<Complex64>> {
    check_same_lmax(x, y)?;
    Ok((0..=x.lmax)
        .map(|l| {
            x.degree(l)
                .iter()
                .zip(y.degree(l))
                .map(|(a, b)| a * b.conj())
                .sum()
        })
        .collect())
}

/// `SVAR(x; κ) = |CROSS(x, x; κ)|`.
pub fn spectral_variance(x: &HarmonicCoefficients) -> Vec<f64> {
    (0..=x.lmax)
        .map(|l| {
            x.degree(l)
                .iter()
                .map(|a| a * a.conj())
                .sum::<Complex64>()
                .norm()
        })
        .collect()
}

/// `SCOH = |CROSS(x, y)|² / (SVAR(x) SVAR(y))`; `None` where either variance is zero.
pub fn spectral_coherence(
    x: &HarmonicCoefficients,
    y: &HarmonicCoefficients,
) -> Result<Vec<Option<f64>>> {
    let cross = cross_spectral_density(x, y)?;
    let vx = spectral_variance(x);
    let vy = spectral_variance(y);
    Ok(cross
        .iter()
        .zip(vx.iter().zip(&vy))
        .map(|(c, (&a, &b))| {
            if a > 0.0 && b > 0.0 {
                Some(c.norm_sqr() / (a * b))
            } else {
                None
            }
        })
        .collect())
}

fn band(kappa: usize, fraction: f64, len: usize) -> std::ops::RangeInclusive<usize> {
    let half = fraction * kappa as f64;
    // Small epsilon so that e.g. 32 * 0.1 = 3.2000000000000006 still reaches 29..=35.
    let lo = (kappa as f64 - half - 1e-9).ceil().max(0.0) as usize;
    let hi = ((kappa as f64 + half + 1e-9).floor() as usize).min(len - 1);
    lo..=hi
}

/// Mean over all `κ'` with `|κ' - κ| <= fraction · κ`.
pub fn band_average(values: &[f64], fraction: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    (0..values.len())
        .map(|k| {
            let r = band(k, fraction.max(0.0), values.len());
            let n = r.end() - r.start() + 1;
            values[r].iter().sum::<f64>() / n as f64
        })
        .collect()
}

/// Band average that skips undefined entries; undefined if the whole band is.
pub fn band_average_masked(values: &[Option<f64>], fraction: f64) -> Vec<Option<f64>> {
    if values.is_empty() {
        return Vec::new();
    }
    (0..values.len())
        .map(|k| {
            let defined: Vec<f64> = values[band(k, fraction.max(0.0), values.len())]
                .iter()
                .flatten()
                .copied()
                .collect();
            if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            }
        })
        .collect()
}

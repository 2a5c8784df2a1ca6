//! Least-squares helpers shared by the energy fits, limit extrapolation and
//! blow-up rate estimation.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Ordinary least-squares fit `y ~ X c`.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    /// Standard errors from `s^2 (X^T X)^-1`; zero when there are no
    /// residual degrees of freedom.
    pub std_err: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
    pub dof: usize,
    /// Ratio of extreme singular values of the column-scaled design.
    pub condition: f64,
    pub covariance: Vec<Vec<f64>>,
}

/// Fit with design rows `rows[i]` (one entry per coefficient).
pub fn linear_least_squares(rows: &[Vec<f64>], y: &[f64]) -> Result<LinearFit> {
    let m = rows.len();
    let p = rows.first().map_or(0, |r| r.len());
    if p == 0 || m < p || y.len() != m {
        return Err(Error::Fit(format!("{m} observations cannot determine {p} coefficients")));
    }
    if rows.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite data in least-squares fit".into()));
    }
    // scale columns to unit norm so the condition number is meaningful
    let mut scale = vec![0.0; p];
    for r in rows {
        for (s, v) in scale.iter_mut().zip(r) {
            *s += v * v;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let x = DMatrix::from_fn(m, p, |i, j| rows[i][j] / scale[j]);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-14 * smax) {
        return Err(Error::Fit("design matrix is rank deficient".into()));
    }
    let yv = DVector::from_column_slice(y);
    let c = svd.solve(&yv, 0.0).map_err(|e| Error::Fit(e.to_string()))?;
    let fitted = &x * &c;
    let residuals: Vec<f64> = (0..m).map(|i| y[i] - fitted[i]).collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let dof = m - p;
    let s2 = if dof > 0 { rss / dof as f64 } else { 0.0 };
    let xtx_inv = (x.transpose() * &x)
        .try_inverse()
        .ok_or_else(|| Error::Fit("normal matrix is singular".into()))?;
    let covariance: Vec<Vec<f64>> =
        (0..p).map(|i| (0..p).map(|j| s2 * xtx_inv[(i, j)] / (scale[i] * scale[j])).collect()).collect();
    Ok(LinearFit {
        coef: (0..p).map(|j| c[j] / scale[j]).collect(),
        std_err: (0..p).map(|j| covariance[j][j].max(0.0).sqrt()).collect(),
        residuals,
        rss,
        dof,
        condition: smax / smin,
        covariance,
    })
}

/// Straight-line fit with a two-sided Student-t confidence interval on the slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Two-sided Student-t quantile for `dof` degrees of freedom.
pub fn t_quantile(dof: usize, confidence: f64) -> Result<f64> {
    if dof == 0 || !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Fit(format!("no t interval for dof = {dof}, confidence = {confidence}")));
    }
    Ok(StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::Fit(e.to_string()))?
        .inverse_cdf(0.5 + 0.5 * confidence))
}

pub fn line_fit(x: &[f64], y: &[f64], confidence: f64) -> Result<SlopeFit> {
    if x.len() < 3 {
        return Err(Error::Fit("a slope with a confidence interval needs at least 3 points".into()));
    }
    let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![1.0, v]).collect();
    let fit = linear_least_squares(&rows, y)?;
    let half = t_quantile(fit.dof, confidence)? * fit.std_err[1];
    Ok(SlopeFit {
        slope: fit.coef[1],
        intercept: fit.coef[0],
        slope_err: fit.std_err[1],
        ci_low: fit.coef[1] - half,
        ci_high: fit.coef[1] + half,
    })
}

/// `y ~ a + c * g(x)` for a fixed basis function `g`.
pub fn affine_fit(g: &[f64], y: &[f64]) -> Result<LinearFit> {
    let rows: Vec<Vec<f64>> = g.iter().map(|&v| vec![1.0, v]).collect();
    linear_least_squares(&rows, y)
}

/// Fit `y ~ a + c x^p` with the exponent free: variable projection over
/// `p` in `[p_lo, p_hi]`, then a linearised covariance for `(a, c, p)`.
#[derive(Debug, Clone)]
pub struct PowerFit {
    pub a: f64,
    pub c: f64,
    pub p: f64,
    pub a_err: f64,
    pub c_err: f64,
    pub p_err: f64,
    pub rss: f64,
    pub residuals: Vec<f64>,
}

pub fn power_law_offset_fit(x: &[f64], y: &[f64], p_lo: f64, p_hi: f64) -> Result<PowerFit> {
    if x.len() < 3 {
        return Err(Error::Fit("offset power law needs at least 3 points".into()));
    }
    let rss_at = |p: f64| -> f64 {
        let g: Vec<f64> = x.iter().map(|v| v.powf(p)).collect();
        affine_fit(&g, y).map(|f| f.rss).unwrap_or(f64::INFINITY)
    };
    let grid = 400;
    let mut best = (f64::INFINITY, p_lo);
    for k in 0..=grid {
        let p = p_lo + (p_hi - p_lo) * k as f64 / grid as f64;
        let r = rss_at(p);
        if r < best.0 {
            best = (r, p);
        }
    }
    // golden-section refinement around the best grid point
    let step = (p_hi - p_lo) / grid as f64;
    let (mut lo, mut hi) = ((best.1 - step).max(p_lo), (best.1 + step).min(p_hi));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if rss_at(m1) < rss_at(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let p = 0.5 * (lo + hi);
    let g: Vec<f64> = x.iter().map(|v| v.powf(p)).collect();
    let lin = affine_fit(&g, y)?;
    let (a, c) = (lin.coef[0], lin.coef[1]);
    // Jacobian of the model in (a, c, p)
    let n = x.len();
    let dof = n.saturating_sub(3);
    let s2 = if dof > 0 { lin.rss / dof as f64 } else { 0.0 };
    let jac = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => g[i],
        _ => c * g[i] * x[i].ln(),
    });
    let (a_err, c_err, p_err) = match (jac.transpose() * &jac).try_inverse() {
        Some(inv) => (
            (s2 * inv[(0, 0)]).max(0.0).sqrt(),
            (s2 * inv[(1, 1)]).max(0.0).sqrt(),
            (s2 * inv[(2, 2)]).max(0.0).sqrt(),
        ),
        None => (lin.std_err[0], lin.std_err[1], f64::INFINITY),
    };
    Ok(PowerFit { a, c, p, a_err, c_err, p_err, rss: lin.rss, residuals: lin.residuals })
}

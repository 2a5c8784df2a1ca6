//! Explicit asymptotic objects: the blow-up scale, the leading energy
//! coefficient, narrow-gap integrals and their closed forms, and fits of
//! the energy expansion `E(eps) = kappa / rho(eps) + M + o(1)`.

use crate::error::{invalid, Error, Result};
use crate::fit::{self, power_law_offset_fit};
use crate::geometry::GapGeometry;
use crate::quadrature::{integrate, integrate_breaks, QuadOptions};
use serde::Serialize;
use std::f64::consts::PI;

fn check_dim(n: usize) -> Result<()> {
    match n {
        2 | 3 => Ok(()),
        _ => Err(invalid(format!("dimension {n} is not supported (only 2 and 3)"))),
    }
}

/// Blow-up scale: `sqrt(eps)` in 2D, `1/|log eps|` in 3D.
pub fn rho(n: usize, eps: f64) -> Result<f64> {
    check_dim(n)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("eps must lie in (0, 1), got {eps}")));
    }
    Ok(if n == 2 { eps.sqrt() } else { 1.0 / eps.ln().abs() })
}

/// Leading energy coefficient from the relative principal curvatures.
pub fn kappa(n: usize, lambdas: &[f64]) -> Result<f64> {
    check_dim(n)?;
    if lambdas.len() < n - 1 {
        return Err(invalid(format!("{} curvatures supplied, {} needed", lambdas.len(), n - 1)));
    }
    if let Some(l) = lambdas[..n - 1].iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(invalid(format!("curvature must be positive, got {l}")));
    }
    Ok(if n == 2 {
        2f64.sqrt() * PI / lambdas[0].sqrt()
    } else {
        2.0 * PI / (lambdas[0] * lambdas[1]).sqrt()
    })
}

/// Exponent of the paper's energy remainder bound in the smooth limit:
/// `eps^{1/4}` in 2D, `eps^{1/2} |log eps|` in 3D.
pub fn remainder_exponent_bound(n: usize) -> Result<f64> {
    check_dim(n)?;
    Ok(if n == 2 { 0.25 } else { 0.5 })
}

/// `int_{|x'| < r} dx' / (eps + h1 - h2)`.
pub fn gap_integral(geom: &GapGeometry, eps: f64, r: f64, opts: QuadOptions) -> Result<f64> {
    gap_integral_annulus(geom, eps, 0.0, r, opts)
}

/// The same integral over `r_min < |x'| < r`; `eps = 0` is admissible only
/// when `r_min > 0`.
pub fn gap_integral_annulus(geom: &GapGeometry, eps: f64, r_min: f64, r: f64, opts: QuadOptions) -> Result<f64> {
    if !(r > 0.0 && r <= geom.r0 * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("radius {r} not in (0, R0 = {}]", geom.r0)));
    }
    if !(r_min >= 0.0 && r_min < r) {
        return Err(invalid(format!("inner radius {r_min} not in [0, {r})")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid(format!("eps must be non-negative, got {eps}")));
    }
    if eps == 0.0 && r_min == 0.0 {
        return Err(Error::Domain("integrand is not integrable at the contact point when eps = 0".into()));
    }
    // length scale of the integrand near the origin
    let lam_max = geom.lambdas.iter().copied().fold(0.0, f64::max).max(1e-300);
    let scale = (2.0 * eps / lam_max).sqrt().max(r_min);
    let breaks = |lo: f64, hi: f64| -> Vec<f64> {
        let mut pts = vec![lo];
        let mut s = scale.max(lo);
        while s < hi {
            if s > lo {
                pts.push(s);
            }
            s *= 4.0;
        }
        pts.push(hi);
        pts
    };
    let mut failure = None;
    let value = if geom.dim == 2 {
        let pts = breaks(r_min, r);
        let mut f = |s: f64| -> f64 {
            let mut total = 0.0;
            for x in [s, -s] {
                match geom.separation(&[x]) {
                    Ok(d) => total += 1.0 / (eps + d),
                    Err(e) => {
                        failure.get_or_insert(e);
                    }
                }
            }
            total
        };
        integrate_breaks(&mut f, &pts, opts)?.value
    } else {
        let pts = breaks(r_min, r);
        let inner_opts = QuadOptions { abs_tol: opts.abs_tol / (4.0 * PI), ..opts };
        let mut f = |theta: f64| -> f64 {
            let (st, ct) = theta.sin_cos();
            let g = |s: f64| -> f64 {
                match geom.separation(&[s * ct, s * st]) {
                    Ok(d) => s / (eps + d),
                    Err(_) => f64::NAN,
                }
            };
            match integrate_breaks(g, &pts, inner_opts) {
                Ok(q) => q.value,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        integrate(&mut f, 0.0, 2.0 * PI, opts)?.value
    };
    match failure {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

/// Explicit part of the 2D expansion of the gap integral over `|x'| < R0`.
pub fn closed_form_2d(lambda1: f64, r0: f64, eps: f64) -> Result<f64> {
    if !(lambda1 > 0.0 && r0 > 0.0 && eps > 0.0) {
        return Err(invalid("closed form requires positive inputs"));
    }
    Ok(kappa(2, &[lambda1])? / eps.sqrt() - 4.0 / (lambda1 * r0))
}

/// Radius of the level ellipse of the quadratic part in direction `theta`.
pub fn r_theta(lambda1: f64, lambda2: f64, r0: f64, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    r0 / (2.0 * c * c / lambda1 + 2.0 * s * s / lambda2).sqrt()
}

/// Explicit part of the 3D expansion of the gap integral over `|x'| < R0`.
pub fn closed_form_3d(lambda1: f64, lambda2: f64, r0: f64, eps: f64) -> Result<f64> {
    if !(lambda1 > 0.0 && lambda2 > 0.0 && r0 > 0.0 && eps > 0.0 && eps < 1.0) {
        return Err(invalid("closed form requires positive inputs and eps < 1"));
    }
    let log_r = integrate(|t| r_theta(lambda1, lambda2, r0, t).ln(), 0.0, 2.0 * PI, QuadOptions::abs(1e-13))?;
    Ok(kappa(3, &[lambda1, lambda2])? / rho(3, eps)? + 2.0 / (lambda1 * lambda2).sqrt() * log_r.value)
}

/// Energies of one potential across an eps-sweep.
#[derive(Debug, Clone, Serialize)]
pub struct EnergySeries {
    /// `(eps, E)` pairs, eps strictly decreasing.
    pub points: Vec<(f64, f64)>,
    pub inclusion: u8,
    pub geometry_hash: u64,
}

impl EnergySeries {
    pub fn new(points: Vec<(f64, f64)>, inclusion: u8, geometry_hash: u64) -> Result<Self> {
        if points.iter().any(|(e, v)| !(e.is_finite() && v.is_finite() && *e > 0.0)) {
            return Err(invalid("energy series contains non-finite or non-positive entries"));
        }
        if points.windows(2).any(|w| !(w[1].0 < w[0].0)) {
            return Err(invalid("eps must be strictly decreasing along the series"));
        }
        if points.windows(2).any(|w| !(w[1].1 > w[0].1)) {
            return Err(Error::Fit("energy is not increasing as eps decreases".into()));
        }
        Ok(Self { points, inclusion, geometry_hash })
    }

    pub fn eps(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    /// Decades of eps covered.
    pub fn span_decades(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => (a.0 / b.0).log10(),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ClosedForm,
    Quadrature,
    Fit,
}

/// Two-parameter fit `E = kappa_hat / rho + M_hat` on a subset of the series.
#[derive(Debug, Clone, Serialize)]
pub struct FreeFit {
    /// Index of the first point used (the fit uses the tail from there).
    pub start: usize,
    pub kappa_hat: f64,
    pub kappa_err: f64,
    pub m_hat: f64,
    pub m_err: f64,
    /// 95% half-width of `M_hat` (Student t); infinite without residual
    /// degrees of freedom.
    pub m_ci: f64,
    pub condition: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticModel {
    pub n: usize,
    pub kappa_n: f64,
    pub inclusion: u8,
    /// `M` with `kappa_n` fixed.
    pub m: f64,
    pub m_err: f64,
    /// `E - kappa_n / rho - m` per point.
    pub fit_residuals: Vec<f64>,
    /// Fitted exponent `p` of the remainder `c eps^p`; `None` when the
    /// remainder is below round-off or too few points are available.
    pub remainder_exponent: Option<f64>,
    pub remainder_exponent_err: Option<f64>,
    pub remainder_coefficient: Option<f64>,
    /// The paper's bound for the remainder exponent (smooth boundaries).
    pub paper_exponent: f64,
    /// `M` from a fit with the remainder exponent fixed at the paper's bound.
    pub m_paper_exponent: Option<f64>,
    pub free: FreeFit,
    /// Free fits on successively shorter tails.
    pub tails: Vec<FreeFit>,
    pub provenance: Provenance,
}

impl AsymptoticModel {
    /// Largest disagreement between tail estimates of `M_hat` and the full
    /// estimate, in units of their combined error bars.
    pub fn tail_spread_sigma(&self) -> f64 {
        self.tails
            .iter()
            .map(|t| (t.m_hat - self.free.m_hat).abs() / t.m_err.hypot(self.free.m_err).max(1e-300))
            .fold(0.0, f64::max)
    }

    /// Largest `|M_hat(tail) - M_hat|` in units of the full fit's 95%
    /// half-width.
    pub fn tail_spread_ci(&self) -> f64 {
        self.tails.iter().map(|t| (t.m_hat - self.free.m_hat).abs() / self.free.m_ci.max(1e-300)).fold(0.0, f64::max)
    }
}

fn free_fit(rho: &[f64], e: &[f64], start: usize) -> Result<FreeFit> {
    let g: Vec<f64> = rho[start..].iter().map(|r| 1.0 / r).collect();
    let f = fit::affine_fit(&g, &e[start..])?;
    Ok(FreeFit {
        start,
        kappa_hat: f.coef[1],
        kappa_err: f.std_err[1],
        m_hat: f.coef[0],
        m_err: f.std_err[0],
        m_ci: fit::t_quantile(f.dof, 0.95).map_or(f64::INFINITY, |t| t * f.std_err[0]),
        condition: f.condition,
    })
}

/// Fit the energy expansion of one potential.
pub fn fit_energy_model(series: &EnergySeries, n: usize, lambdas: &[f64]) -> Result<AsymptoticModel> {
    let kappa_n = kappa(n, lambdas)?;
    if series.points.len() < 3 {
        return Err(Error::Fit(format!("{} points; at least 3 are required", series.points.len())));
    }
    if series.span_decades() < 1.5 - 1e-9 {
        return Err(Error::Fit(format!(
            "eps spans {:.2} decades; at least 1.5 are required",
            series.span_decades()
        )));
    }
    let eps = series.eps();
    let e = series.energies();
    let rhos: Vec<f64> = eps.iter().map(|&x| rho(n, x)).collect::<Result<_>>()?;
    let y: Vec<f64> = e.iter().zip(&rhos).map(|(v, r)| v - kappa_n / r).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let spread = y.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    let paper_exponent = remainder_exponent_bound(n)?;
    // remainder basis: eps^p in 2D, eps^p |log eps| in 3D
    let basis = |x: f64, p: f64| if n == 2 { x.powf(p) } else { x.powf(p) * x.ln().abs() };

    let mut m = mean;
    let mut m_err = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() as f64 * (y.len() - 1) as f64)).sqrt();
    let (mut p_hat, mut p_err, mut c_hat) = (None, None, None);
    if spread > 1e-11 * mean.abs().max(1.0) && y.len() >= 4 {
        let pf = if n == 2 {
            power_law_offset_fit(&eps, &y, 0.02, 2.0)
        } else {
            // absorb |log eps| into the data so the same projection applies
            let lg: Vec<f64> = eps.iter().map(|x| x.ln().abs()).collect();
            let z: Vec<f64> = y.iter().zip(&lg).map(|(v, l)| v / l).collect();
            let w: Vec<f64> = lg.iter().map(|l| 1.0 / l).collect();
            offset_fit_weighted(&eps, &z, &w)
        };
        match pf {
            Ok(pf) if pf.p > 0.021 && pf.p < 1.99 => {
                m = pf.a;
                m_err = pf.a_err;
                p_hat = Some(pf.p);
                p_err = Some(pf.p_err);
                c_hat = Some(pf.c);
            }
            _ => {}
        }
    }
    let g: Vec<f64> = eps.iter().map(|&x| basis(x, paper_exponent)).collect();
    let m_paper_exponent = fit::affine_fit(&g, &y).ok().map(|f| f.coef[0]);
    let fit_residuals: Vec<f64> = match (p_hat, c_hat) {
        (Some(p), Some(c)) => y.iter().zip(&eps).map(|(v, &x)| v - m - c * basis(x, p)).collect(),
        _ => y.iter().map(|v| v - m).collect(),
    };
    if fit_residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::Fit("non-finite residuals".into()));
    }
    let free = free_fit(&rhos, &e, 0)?;
    let tails = (1..=y.len().saturating_sub(3)).map(|s| free_fit(&rhos, &e, s)).collect::<Result<Vec<_>>>()?;
    Ok(AsymptoticModel {
        n,
        kappa_n,
        inclusion: series.inclusion,
        m,
        m_err,
        fit_residuals,
        remainder_exponent: p_hat,
        remainder_exponent_err: p_err,
        remainder_coefficient: c_hat,
        paper_exponent,
        m_paper_exponent,
        free,
        tails,
        provenance: Provenance::Fit,
    })
}

// `z ~ a w + c x^p` : the 3D remainder model divided through by |log eps|.
fn offset_fit_weighted(x: &[f64], z: &[f64], w: &[f64]) -> Result<fit::PowerFit> {
    let rss_at = |p: f64| -> Result<fit::LinearFit> {
        let rows: Vec<Vec<f64>> = x.iter().zip(w).map(|(v, wi)| vec![*wi, v.powf(p)]).collect();
        fit::linear_least_squares(&rows, z)
    };
    let mut best = (f64::INFINITY, 0.5);
    for k in 0..=400 {
        let p = 0.02 + 1.98 * k as f64 / 400.0;
        if let Ok(f) = rss_at(p) {
            if f.rss < best.0 {
                best = (f.rss, p);
            }
        }
    }
    let f = rss_at(best.1)?;
    Ok(fit::PowerFit {
        a: f.coef[0],
        c: f.coef[1],
        p: best.1,
        a_err: f.std_err[0],
        c_err: f.std_err[1],
        p_err: 1.98 / 400.0,
        rss: f.rss,
        residuals: f.residuals,
    })
}

/// Stable hash of a geometry description, used to tag series.
pub fn geometry_hash(desc: &str) -> u64 {
    // FNV-1a: stable across runs and toolchains
    desc.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

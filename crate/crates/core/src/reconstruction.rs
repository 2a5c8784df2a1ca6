//! The explicit gap profile `ubar`, the leading singular term of `grad u`
//! built from it, and the size of what is left over.

use crate::asymptotics::rho;
use crate::error::{invalid, Error, Result};
use crate::field_solver::{triangle_gradients, DiscreteField, Region};
use crate::fit::{line_fit, SlopeFit};
use crate::functionals::{singular_prefactor, Estimate, LimitConstants};
use crate::geometry::{norm, GapGeometry};
use serde::{Deserialize, Serialize};

fn smoothstep(t: f64) -> f64 {
    // C2 quintic step on [0, 1]
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

fn smoothstep_d(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    30.0 * t * t * (1.0 - t) * (1.0 - t)
}

fn split(geom: &GapGeometry, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    if x.len() != geom.dim {
        return Err(invalid(format!("point has dimension {}, expected {}", x.len(), geom.dim)));
    }
    Ok((x[..geom.dim - 1].to_vec(), x[geom.dim - 1]))
}

// explicit profile and gradient for |x'| <= R0
fn explicit(geom: &GapGeometry, xp: &[f64], xn: f64) -> Result<(f64, Vec<f64>)> {
    let eps = geom.eps;
    let h1 = geom.h1(xp)?;
    let h2 = geom.h2(xp)?;
    let d = eps + h1 - h2;
    let g1 = geom.h1_gradient(xp)?;
    let g2 = geom.h2_gradient(xp)?;
    let num = xn - h2 + 0.5 * eps;
    let mut grad: Vec<f64> = (0..xp.len())
        .map(|j| (-g2[j] * d - num * (g1[j] - g2[j])) / (d * d))
        .collect();
    grad.push(1.0 / d);
    Ok((num / d, grad))
}

/// `ubar = (x_n - h2(x') + eps/2) / (eps + h1(x') - h2(x'))` on the gap
/// patch. For `R0 < |x'| < 2 R0` the profile frozen at `|x'| = R0` is blended
/// smoothly into the constant 1/2, which it equals beyond `2 R0`.
pub fn ubar(geom: &GapGeometry, x: &[f64]) -> Result<f64> {
    Ok(ubar_with_grad(geom, x)?.0)
}

pub fn ubar_grad(geom: &GapGeometry, x: &[f64]) -> Result<Vec<f64>> {
    Ok(ubar_with_grad(geom, x)?.1)
}

pub fn ubar_with_grad(geom: &GapGeometry, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (xp, xn) = split(geom, x)?;
    let r = norm(&xp);
    let r0 = geom.r0;
    if r <= r0 {
        return explicit(geom, &xp, xn);
    }
    let t = (r - r0) / r0;
    if t >= 1.0 {
        return Ok((0.5, vec![0.0; geom.dim]));
    }
    // radial clamp onto |x'| = R0 and blend towards 1/2
    let e: Vec<f64> = xp.iter().map(|v| v / r).collect();
    let xc: Vec<f64> = e.iter().map(|v| v * r0).collect();
    let (u, g) = explicit(geom, &xc, xn)?;
    let w = 1.0 - smoothstep(t);
    let dw = -smoothstep_d(t) / r0;
    let value = w * u + (1.0 - w) * 0.5;
    // the clamped profile depends on x' only through its direction
    let gr: f64 = (0..xp.len()).map(|j| g[j] * e[j]).sum();
    let mut grad: Vec<f64> = (0..xp.len())
        .map(|j| {
            let tangential = (g[j] - gr * e[j]) * r0 / r;
            w * tangential + dw * (u - 0.5) * e[j]
        })
        .collect();
    grad.push(w * g[xp.len()]);
    Ok((value, grad))
}

/// Leading singular term `prefactor * grad ubar`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SingularTerm {
    pub n: usize,
    pub eps: f64,
    pub prefactor: f64,
}

impl SingularTerm {
    pub fn new(limits: &LimitConstants, eps: f64) -> Result<Self> {
        Ok(Self { n: limits.n, eps, prefactor: limits.prefactor(eps)? })
    }

    pub fn from_constants(n: usize, q: f64, theta: f64, m_tilde: f64, eps: f64) -> Result<Self> {
        Ok(Self { n, eps, prefactor: singular_prefactor(n, q, theta, m_tilde, eps)? })
    }

    pub fn eval(&self, geom: &GapGeometry, x: &[f64]) -> Result<Vec<f64>> {
        if geom.dim != self.n {
            return Err(invalid("singular term and geometry differ in dimension"));
        }
        if (geom.eps - self.eps).abs() > 1e-15 * self.eps {
            return Err(invalid("singular term and geometry differ in eps"));
        }
        if self.prefactor == 0.0 {
            return Ok(vec![0.0; self.n]);
        }
        Ok(ubar_grad(geom, x)?.into_iter().map(|g| self.prefactor * g).collect())
    }
}

pub fn singular_term(limits: &LimitConstants, geom: &GapGeometry, eps: f64, x: &[f64]) -> Result<Vec<f64>> {
    let g = geom.with_eps(eps)?;
    SingularTerm::new(limits, eps)?.eval(&g, x)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ResidualNorms {
    /// `max |grad u - c grad ubar|`.
    pub max_residual: f64,
    /// `max |grad u|`.
    pub max_gradient: f64,
    pub ratio: f64,
}

/// Compare `grad field` with `prefactor * grad ubar` triangle by triangle,
/// `ubar` taken as its nodal interpolant so both gradients are constant
/// per triangle.
pub fn residual_norms(field: &DiscreteField, geom: &GapGeometry, prefactor: f64, region: Region) -> Result<ResidualNorms> {
    let grid = field.grid();
    if geom.dim != 2 {
        return Err(invalid("residual norms are available for planar grids only"));
    }
    if (geom.eps - grid.eps).abs() > 1e-12 * grid.eps {
        return Err(invalid(format!("geometry eps {} differs from grid eps {}", geom.eps, grid.eps)));
    }
    let gu = triangle_gradients(grid, &field.values);
    let gb = if prefactor != 0.0 {
        let ub: Vec<f64> = grid.nodes.iter().map(|p| ubar(geom, p)).collect::<Result<_>>()?;
        Some(triangle_gradients(grid, &ub))
    } else {
        None
    };
    let (mut max_residual, mut max_gradient) = (0.0f64, 0.0f64);
    for t in 0..grid.triangles.len() {
        if !region.contains(grid, t) {
            continue;
        }
        let g = gu[t];
        max_gradient = max_gradient.max(g[0].hypot(g[1]));
        let r = match &gb {
            Some(b) => (g[0] - prefactor * b[t][0]).hypot(g[1] - prefactor * b[t][1]),
            None => g[0].hypot(g[1]),
        };
        max_residual = max_residual.max(r);
    }
    if !(max_residual.is_finite() && max_gradient.is_finite()) {
        return Err(Error::Degenerate("non-finite gradient".into()));
    }
    let ratio = if max_gradient > 0.0 { max_residual / max_gradient } else { 0.0 };
    Ok(ResidualNorms { max_residual, max_gradient, ratio })
}

/// Log-log slope of the maximal gradient against eps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BlowupFit {
    pub slope: f64,
    pub slope_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
    pub points: usize,
}

/// Fit `log max|grad u| ~ s log eps` over `(eps, max|grad u|)` pairs.
/// Refuses when `Q*` cannot be told apart from zero, since then no
/// blow-up is predicted.
pub fn blowup_rate_fit(points: &[(f64, f64)], q_star: Estimate) -> Result<BlowupFit> {
    if points.len() < 4 {
        return Err(Error::Fit(format!("{} points; at least 4 are required", points.len())));
    }
    if !(q_star.value.abs() > 3.0 * q_star.err) || q_star.value == 0.0 {
        return Err(Error::Degenerate(format!(
            "Q* = {:e} +- {:e} is indistinguishable from zero; no blow-up is expected",
            q_star.value, q_star.err
        )));
    }
    if points.iter().any(|(e, g)| !(*e > 0.0 && *g > 0.0)) {
        return Err(invalid("eps and gradients must be positive"));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let confidence = 0.95;
    let SlopeFit { slope, slope_err, ci_low, ci_high, .. } = line_fit(&x, &y, confidence)?;
    Ok(BlowupFit { slope, slope_err, ci_low, ci_high, confidence, points: points.len() })
}

/// `max / min` of a positive sequence.
pub fn growth_factor(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

/// Windowed growth test along a sweep ordered by decreasing eps: reports
/// the largest growth factor over any `window` consecutive entries that
/// increase monotonically. Bounded sequences give values close to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct WindowedGrowth {
    pub window: usize,
    pub worst_monotone_growth: f64,
    /// Growth of the fitted power law `c eps^-s` across the sweep.
    pub trend_exponent: f64,
}

pub fn windowed_growth(eps: &[f64], values: &[f64], window: usize) -> Result<WindowedGrowth> {
    if eps.len() != values.len() || window < 2 || values.len() < window {
        return Err(invalid("windowed growth needs at least `window` paired values"));
    }
    let mut worst = 1.0f64;
    for w in values.windows(window) {
        if w.windows(2).all(|p| p[1] > p[0]) {
            worst = worst.max(w[window - 1] / w[0]);
        }
    }
    let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let trend_exponent = if x.len() >= 3 { -line_fit(&x, &y, 0.95)?.slope } else { f64::NAN };
    Ok(WindowedGrowth { window, worst_monotone_growth: worst, trend_exponent })
}

/// Whether `eps * max|grad v1|` stays in the band `[1/C, C]`.
pub fn within_band(eps: &[f64], grads: &[f64], c: f64) -> bool {
    eps.iter().zip(grads).all(|(e, g)| {
        let s = e * g;
        s >= 1.0 / c && s <= c
    })
}

/// Magnitude of the singular term at the contact point: `|prefactor| / eps`.
pub fn contact_magnitude(term: &SingularTerm) -> f64 {
    term.prefactor.abs() / term.eps
}

/// Blow-up scale of the 2D singular term at the contact point, `|Q| / (Theta sqrt(eps))`.
pub fn contact_scale_2d(q: f64, theta: f64, eps: f64) -> Result<f64> {
    Ok(q.abs() / (theta * rho(2, eps)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_solver::tests::solved;
    use crate::field_solver::{assemble_flux_system, assemble_u, max_gradient, solve_v0, BoundaryData};
    use crate::geometry::{BoundaryGraph, InclusionShape};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn discs(eps: f64) -> GapGeometry {
        let d = InclusionShape::disc(2, 1.0).unwrap();
        GapGeometry::new(BoundaryGraph::Shape(d.clone()), BoundaryGraph::Shape(d), eps, 1.0, None).unwrap()
    }

    #[test]
    fn midline_and_boundaries() {
        let g = discs(1e-2);
        assert_relative_eq!(ubar(&g, &[0.0, 0.0]).unwrap(), 0.5, epsilon = 1e-15);
        let gr = ubar_grad(&g, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(gr[1], 100.0, max_relative = 1e-14);
        assert!(gr[0].abs() < 1e-14);
        for x in [-0.4, -0.1, 0.2, 0.45] {
            let top = 0.5 * g.eps + g.h1(&[x]).unwrap();
            let bot = -0.5 * g.eps + g.h2(&[x]).unwrap();
            assert_relative_eq!(ubar(&g, &[x, top]).unwrap(), 1.0, epsilon = 1e-13);
            assert!(ubar(&g, &[x, bot]).unwrap().abs() < 1e-13);
        }
    }

    #[test]
    fn extension_is_bounded_and_continuous() {
        let g = discs(1e-3);
        let r0 = g.r0;
        let a = ubar(&g, &[r0 * (1.0 - 1e-9), 0.3]).unwrap();
        let b = ubar(&g, &[r0 * (1.0 + 1e-9), 0.3]).unwrap();
        assert!((a - b).abs() < 1e-6);
        assert_eq!(ubar(&g, &[2.5 * r0, 0.0]).unwrap(), 0.5);
        for k in 0..50 {
            let x = r0 * (1.0 + k as f64 / 50.0);
            let gr = ubar_grad(&g, &[x, 0.1]).unwrap();
            assert!(gr.iter().all(|v| v.is_finite() && v.abs() < 100.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = discs(1e-2);
        for p in [[0.1, 0.001], [-0.3, 0.02], [0.45, -0.05], [0.7, 0.2], [-0.9, 0.1]] {
            let gr = ubar_grad(&g, &p).unwrap();
            for j in 0..2 {
                let h = 1e-6;
                let mut a = p;
                let mut b = p;
                a[j] -= h;
                b[j] += h;
                let fd = (ubar(&g, &b).unwrap() - ubar(&g, &a).unwrap()) / (2.0 * h);
                assert!((fd - gr[j]).abs() < 1e-5 * gr[j].abs().max(1.0), "{p:?} {j}: {fd} vs {}", gr[j]);
            }
        }
    }

    #[test]
    fn three_dimensional_profile() {
        let g = GapGeometry::quadratic(vec![2.0, 2.0], 1e-3, 0.5).unwrap();
        assert_relative_eq!(ubar(&g, &[0.0, 0.0, 0.0]).unwrap(), 0.5);
        assert_relative_eq!(ubar_grad(&g, &[0.0, 0.0, 0.0]).unwrap()[2], 1e3, max_relative = 1e-13);
        let t = SingularTerm::from_constants(3, 2.0, 4.0, 0.3, 1e-3).unwrap();
        let expect = 2.0 / (4.0 * (1e3f64.ln() - 0.3) * 1e-3);
        assert_relative_eq!(contact_magnitude(&t), expect, max_relative = 1e-12);
    }

    #[test]
    fn zero_functional_leaves_full_gradient() {
        let s = solved();
        let g = discs(s.v1.grid().eps);
        let v0 = solve_v0(&s.v1.disc, &BoundaryData::constant(1.0)).unwrap();
        let fs = assemble_flux_system(&s.v1, &s.v2, &v0).unwrap();
        let u = assemble_u(&fs, &s.v1, &s.v2, &v0).unwrap();
        let r = residual_norms(&u, &g, 0.0, Region::Gap).unwrap();
        assert_eq!(r.max_residual, r.max_gradient);
        assert!(r.max_gradient < 1e-6);
    }

    #[test]
    fn v1_minus_ubar_is_small_against_v1() {
        let s = solved();
        let g = discs(s.v1.grid().eps);
        let r = residual_norms(&s.v1, &g, 1.0, Region::Gap).unwrap();
        assert_relative_eq!(r.max_gradient, max_gradient(&s.v1, Region::Gap));
        assert!(r.max_residual < 0.1 * r.max_gradient, "{r:?}");
        let c = s.v1.grid().eps * r.max_gradient;
        assert!(c > 0.5 && c < 2.0);
    }

    #[test]
    fn blowup_fit_contracts() {
        let pts: Vec<(f64, f64)> = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4].iter().map(|&e: &f64| (e, 3.0 / e.sqrt())).collect();
        let f = blowup_rate_fit(&pts, Estimate::new(2.0, 0.01)).unwrap();
        assert_relative_eq!(f.slope, -0.5, epsilon = 1e-12);
        assert!(matches!(blowup_rate_fit(&pts, Estimate::new(1e-9, 1e-8)), Err(Error::Degenerate(_))));
        assert!(blowup_rate_fit(&pts[..3], Estimate::exact(1.0)).is_err());
    }

    #[test]
    fn windowed_growth_detects_trends() {
        let eps = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4];
        let flat = [1.0, 1.02, 0.99, 1.01, 1.0];
        let w = windowed_growth(&eps, &flat, 3).unwrap();
        assert!(w.worst_monotone_growth < 1.05 && w.trend_exponent.abs() < 0.05);
        let grow: Vec<f64> = eps.iter().map(|e| e.powf(-0.5)).collect();
        let w = windowed_growth(&eps, &grow, 3).unwrap();
        assert!(w.worst_monotone_growth > 3.0);
        assert!(within_band(&eps, &eps.map(|e| 1.1 / e), 2.0));
        assert!(!within_band(&eps, &eps.map(|e| 0.1 / e), 2.0));
    }

    proptest! {
        #[test]
        fn normal_derivative_is_inverse_width(x in -0.49..0.49f64, s in 0.0..1.0f64, le in 1.0..6.0f64) {
            let g = discs(10f64.powf(-le));
            let top = 0.5 * g.eps + g.h1(&[x]).unwrap();
            let bot = -0.5 * g.eps + g.h2(&[x]).unwrap();
            let y = bot + s * (top - bot);
            let gr = ubar_grad(&g, &[x, y]).unwrap();
            let w = g.gap_width(&[x]).unwrap();
            prop_assert!((gr[1] - 1.0 / w).abs() <= 1e-15 * (1.0 / w));
            let u = ubar(&g, &[x, y]).unwrap();
            prop_assert!((u - s).abs() < 1e-9);
            // tangential bound |d_x ubar| <= C |x| / (eps + x^2)
            prop_assert!(gr[0].abs() <= 4.0 * x.abs() / (g.eps + x * x) + 1e-12);
        }

        #[test]
        fn zero_prefactor_gives_zero_term(x in -0.4..0.4f64, y in -0.001..0.001f64) {
            let g = discs(1e-2);
            let t = SingularTerm { n: 2, eps: 1e-2, prefactor: 0.0 };
            prop_assert_eq!(t.eval(&g, &[x, y]).unwrap(), vec![0.0, 0.0]);
        }
    }
}

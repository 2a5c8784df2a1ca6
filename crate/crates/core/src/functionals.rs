//! The functionals `Q_eps[phi]` and `Theta_eps`, the potential difference
//! identity they satisfy, and their touching limits by eps-extrapolation.

use crate::asymptotics::{kappa, rho};
use crate::error::{invalid, Error, Result};
use crate::field_solver::FluxSystem;
use crate::fit::{self, power_law_offset_fit};
use serde::{Deserialize, Serialize};

/// Tolerance of the potential difference identity, relative to
/// `max(|C1 - C2|, 1e-6)`.
pub const IDENTITY_TOL: f64 = 1e-12;

/// `Q_eps = f1 alpha2 - f2 alpha1`, the inclusion fluxes of `v_0`
/// weighted by the container fluxes of `v_2`, `v_1`.
pub fn q_eps(fs: &FluxSystem) -> f64 {
    fs.f[0] * fs.alpha[1] - fs.f[1] * fs.alpha[0]
}

/// `Theta_eps = -rho a11 alpha2 + rho a12 alpha1`.
pub fn theta_eps(fs: &FluxSystem, n: usize, eps: f64) -> Result<f64> {
    let r = rho(n, eps)?;
    Ok(-r * fs.a[0][0] * fs.alpha[1] + r * fs.a[0][1] * fs.alpha[0])
}

/// The equivalent form `-rho a11 (alpha1 + alpha2) - rho alpha1^2`, which
/// relies on `alpha1 = -(a11 + a12)`.
pub fn theta_eps_alt(fs: &FluxSystem, n: usize, eps: f64) -> Result<f64> {
    let r = rho(n, eps)?;
    Ok(-r * fs.a[0][0] * (fs.alpha[0] + fs.alpha[1]) - r * fs.alpha[0] * fs.alpha[0])
}

/// Relative residual of `C1 - C2 = rho Q_eps / Theta_eps`; an error above
/// [`IDENTITY_TOL`] means the flux system was assembled inconsistently.
pub fn c_diff_identity_check(fs: &FluxSystem, q: f64, theta: f64, rho_eps: f64) -> Result<f64> {
    if !(theta != 0.0 && theta.is_finite()) {
        return Err(Error::Degenerate(format!("Theta_eps = {theta} cannot be inverted")));
    }
    // the directly solved difference; c1 - c2 would cancel when C1 ~ C2
    let d = fs.c_diff;
    let res = (d - rho_eps * q / theta).abs() / d.abs().max(1e-6);
    if !(res <= IDENTITY_TOL) {
        return Err(Error::Identity(format!("|C1 - C2 - rho Q / Theta| = {res:e} (relative)")));
    }
    Ok(res)
}

/// Functionals of one solved configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FunctionalRecord {
    pub eps: f64,
    pub rho: f64,
    pub q_eps: f64,
    pub theta_eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub c_diff: f64,
    /// Container fluxes of `v_1`, `v_2`.
    pub alpha: [f64; 2],
    /// Inclusion fluxes of `v_0`.
    pub f: [f64; 2],
    pub a: [[f64; 2]; 2],
    pub identity_residual: f64,
}

impl FunctionalRecord {
    pub fn from_flux(fs: &FluxSystem, n: usize, eps: f64) -> Result<Self> {
        let r = rho(n, eps)?;
        let q = q_eps(fs);
        let theta = theta_eps(fs, n, eps)?;
        let identity_residual = c_diff_identity_check(fs, q, theta, r)?;
        Ok(Self {
            eps,
            rho: r,
            q_eps: q,
            theta_eps: theta,
            c1: fs.c1,
            c2: fs.c2,
            c_diff: fs.c_diff,
            alpha: fs.alpha,
            f: fs.f,
            a: fs.a,
            identity_residual,
        })
    }
}

/// A value with its error estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub err: f64,
}

impl Estimate {
    pub fn new(value: f64, err: f64) -> Self {
        Self { value, err }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, err: 0.0 }
    }

    pub fn rel_err(&self) -> f64 {
        self.err / self.value.abs()
    }
}

/// How one quantity was extrapolated to `eps = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtrapolationDiagnostic {
    pub quantity: String,
    pub estimate: Estimate,
    /// Coefficient of the imposed remainder term.
    pub slope: f64,
    pub condition: f64,
    pub residual_rms: f64,
    /// Exponent from a free `a + c eps^p` fit, when determinable.
    pub free_exponent: Option<f64>,
    pub free_limit: Option<f64>,
}

/// Fit of `Theta_eps = Theta (1 - Mtilde rho)` along the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaTrajectory {
    pub theta: Estimate,
    pub m_tilde: Estimate,
    /// Coefficient of the `rho^2` correction, fitted when there are at least
    /// four records.
    pub second_order: Option<f64>,
    pub residuals: Vec<f64>,
    pub max_abs_residual: f64,
    /// `(Theta* - Theta_eps) / rho` per record, next to its predicted limit.
    pub scaled_defect: Vec<f64>,
    pub predicted_defect_limit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitConstants {
    pub n: usize,
    pub kappa_n: f64,
    pub q_star: Estimate,
    pub theta_star: Estimate,
    pub alpha1_star: Estimate,
    pub alpha2_star: Estimate,
    pub m1: Estimate,
    pub m_tilde: Estimate,
    /// Half the smallest observed `Theta_eps`.
    pub delta0: f64,
    pub schedule: String,
    pub diagnostics: Vec<ExtrapolationDiagnostic>,
    pub trajectory: Option<ThetaTrajectory>,
}

impl LimitConstants {
    /// Prefactor of `grad ubar` in the singular term.
    pub fn prefactor(&self, eps: f64) -> Result<f64> {
        singular_prefactor(self.n, self.q_star.value, self.theta_star.value, self.m_tilde.value, eps)
    }
}

/// `Q sqrt(eps) / Theta` in 2D, `(Q / Theta) / (|log eps| - Mtilde)` in 3D.
pub fn singular_prefactor(n: usize, q: f64, theta: f64, m_tilde: f64, eps: f64) -> Result<f64> {
    let r = rho(n, eps)?;
    if !(theta > 0.0) {
        return Err(Error::Degenerate(format!("Theta = {theta} is not positive")));
    }
    let p = if n == 2 {
        q * r / theta
    } else {
        let den = 1.0 / r - m_tilde;
        if !(den > 0.0) {
            return Err(Error::Domain(format!("|log eps| - Mtilde = {den} is not positive")));
        }
        q / theta / den
    };
    if !p.is_finite() {
        return Err(Error::Degenerate("non-finite prefactor".into()));
    }
    Ok(p)
}

/// Remainder basis of the limit schedule: `eps^{3/4}` (2D), `eps |log eps|` (3D).
pub fn schedule_basis(n: usize, eps: f64) -> f64 {
    if n == 2 {
        eps.powf(0.75)
    } else {
        eps * eps.ln().abs()
    }
}

fn extrapolate(name: &str, n: usize, eps: &[f64], y: &[f64]) -> Result<ExtrapolationDiagnostic> {
    let g: Vec<f64> = eps.iter().map(|&e| schedule_basis(n, e)).collect();
    let f = fit::affine_fit(&g, y)?;
    if f.condition > 1e10 {
        return Err(Error::Fit(format!("{name}: extrapolation is ill-conditioned ({:.3e})", f.condition)));
    }
    // tail stability: refit without the largest eps
    let mut err = f.std_err[0];
    if y.len() >= 4 {
        let t = fit::affine_fit(&g[1..], &y[1..])?;
        err = err.hypot(t.coef[0] - f.coef[0]);
    }
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let spread = y.iter().map(|v| (v - y[0]).abs()).fold(0.0, f64::max);
    let (free_exponent, free_limit) = if y.len() >= 4 && spread > 1e-10 * scale.max(1e-300) {
        match power_law_offset_fit(eps, y, 0.05, 3.0) {
            Ok(p) => (Some(p.p), Some(p.a)),
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };
    Ok(ExtrapolationDiagnostic {
        quantity: name.to_string(),
        estimate: Estimate::new(f.coef[0], err),
        slope: f.coef[1],
        condition: f.condition,
        residual_rms: (f.rss / y.len() as f64).sqrt(),
        free_exponent,
        free_limit,
    })
}

/// Touching limits from an eps-sweep, given `M1` from the energy fit.
pub fn extrapolate_limits(records: &[FunctionalRecord], n: usize, lambdas: &[f64], m1: Estimate) -> Result<LimitConstants> {
    let kappa_n = kappa(n, lambdas)?;
    if records.len() < 3 {
        return Err(Error::Fit(format!("{} records; at least 3 are required", records.len())));
    }
    if records.windows(2).any(|w| !(w[1].eps < w[0].eps)) {
        return Err(invalid("records must have strictly decreasing eps"));
    }
    let eps: Vec<f64> = records.iter().map(|r| r.eps).collect();
    if eps[0] / eps[eps.len() - 1] < 2.0 {
        return Err(Error::Fit("eps values span less than a factor 2".into()));
    }
    let col = |f: &dyn Fn(&FunctionalRecord) -> f64| -> Vec<f64> { records.iter().map(f).collect() };
    let dq = extrapolate("Q", n, &eps, &col(&|r| r.q_eps))?;
    let d1 = extrapolate("alpha1", n, &eps, &col(&|r| r.alpha[0]))?;
    let d2 = extrapolate("alpha2", n, &eps, &col(&|r| r.alpha[1]))?;
    let ds = extrapolate("alpha1+alpha2", n, &eps, &col(&|r| r.alpha[0] + r.alpha[1]))?;
    let s = ds.estimate;
    let theta_star = Estimate::new(-kappa_n * s.value, kappa_n * s.err);
    if !(theta_star.value > 0.0) {
        return Err(Error::Degenerate(format!("extrapolated Theta = {} is not positive", theta_star.value)));
    }
    let a1 = d1.estimate;
    let m_tilde_value = -m1.value / kappa_n + a1.value * a1.value / theta_star.value;
    let m_tilde_err = ((m1.err / kappa_n).powi(2)
        + (2.0 * a1.value / theta_star.value * a1.err).powi(2)
        + (a1.value * a1.value / theta_star.value.powi(2) * theta_star.err).powi(2))
    .sqrt();
    let delta0 = 0.5 * records.iter().map(|r| r.theta_eps).fold(f64::INFINITY, f64::min);
    let trajectory = theta_trajectory(records, theta_star.value, s.value, a1.value, m1.value).ok();
    Ok(LimitConstants {
        n,
        kappa_n,
        q_star: dq.estimate,
        theta_star,
        alpha1_star: a1,
        alpha2_star: d2.estimate,
        m1,
        m_tilde: Estimate::new(m_tilde_value, m_tilde_err),
        delta0,
        schedule: if n == 2 { "eps^(3/4)".into() } else { "eps |log eps|".into() },
        diagnostics: vec![dq, d1, d2, ds],
        trajectory,
    })
}

/// Linear fit of `Theta_eps` against `rho`: the intercept estimates `Theta`
/// and `-slope / intercept` estimates `Mtilde` independently of `M1`.
pub fn theta_trajectory(records: &[FunctionalRecord], theta_star: f64, s_star: f64, a1_star: f64, m1: f64) -> Result<ThetaTrajectory> {
    let rhos: Vec<f64> = records.iter().map(|r| r.rho).collect();
    let th: Vec<f64> = records.iter().map(|r| r.theta_eps).collect();
    // Theta_eps = A + B rho (+ C rho^2): the next order is kept so it does
    // not leak into B
    let quadratic = records.len() >= 4;
    let rows: Vec<Vec<f64>> =
        rhos.iter().map(|&r| if quadratic { vec![1.0, r, r * r] } else { vec![1.0, r] }).collect();
    let f = fit::linear_least_squares(&rows, &th)?;
    let (a, b) = (f.coef[0], f.coef[1]);
    let cov = &f.covariance;
    // Mtilde = -b / a, first-order propagation
    let m = -b / a;
    let var = (cov[1][1] / (a * a)) + (b * b / a.powi(4)) * cov[0][0] - 2.0 * b / a.powi(3) * cov[0][1];
    Ok(ThetaTrajectory {
        theta: Estimate::new(a, f.std_err[0]),
        m_tilde: Estimate::new(m, var.max(0.0).sqrt()),
        second_order: quadratic.then(|| f.coef[2]),
        max_abs_residual: f.residuals.iter().map(|r| r.abs()).fold(0.0, f64::max),
        residuals: f.residuals,
        scaled_defect: records.iter().map(|r| (theta_star - r.theta_eps) / r.rho).collect(),
        predicted_defect_limit: m1 * s_star + a1_star * a1_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_solver::tests::solved;
    use crate::field_solver::{assemble_flux_system, solve_v0, BoundaryData};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fake_flux(a11: f64, a12: f64, a22: f64, f: [f64; 2]) -> FluxSystem {
        let alpha = [-(a11 + a12), -(a12 + a22)];
        let det = -a11 * alpha[1] + a12 * alpha[0];
        let c_diff = (f[0] * alpha[1] - f[1] * alpha[0]) / det;
        let b = [-f[0], -f[1]];
        let c2 = (a11 * b[1] - a12 * b[0]) / det;
        FluxSystem { a: [[a11, a12], [a12, a22]], b, f, alpha, c1: c_diff + c2, c2, c_diff }
    }

    #[test]
    fn zero_data_gives_zero_functional() {
        let fs = fake_flux(30.0, -27.0, 30.0, [0.0, 0.0]);
        assert_eq!(q_eps(&fs), 0.0);
        let rec = FunctionalRecord::from_flux(&fs, 2, 1e-2).unwrap();
        assert_eq!(rec.c_diff, 0.0);
    }

    #[test]
    fn theta_forms_agree_on_solved_case() {
        let s = solved();
        let v0 = solve_v0(&s.v1.disc, &BoundaryData::linear_xn()).unwrap();
        let fs = assemble_flux_system(&s.v1, &s.v2, &v0).unwrap();
        let eps = s.v1.grid().eps;
        let t = theta_eps(&fs, 2, eps).unwrap();
        let t2 = theta_eps_alt(&fs, 2, eps).unwrap();
        assert!(t > 0.0);
        assert_relative_eq!(t, t2, max_relative = 1e-9);
        let rec = FunctionalRecord::from_flux(&fs, 2, eps).unwrap();
        assert!(rec.identity_residual <= IDENTITY_TOL);
        // antisymmetric data: C1 - C2 = 2 C1
        assert_relative_eq!(rec.c_diff, 2.0 * rec.c1, max_relative = 1e-6);
    }

    #[test]
    fn constant_data_has_no_singular_part() {
        let s = solved();
        let v0 = solve_v0(&s.v1.disc, &BoundaryData::constant(1.0)).unwrap();
        let fs = assemble_flux_system(&s.v1, &s.v2, &v0).unwrap();
        let rec = FunctionalRecord::from_flux(&fs, 2, s.v1.grid().eps).unwrap();
        assert!(rec.q_eps.abs() < 1e-9 * fs.f[0].abs().max(1.0));
        assert_relative_eq!(rec.c1, 1.0, epsilon = 1e-9);
        assert_relative_eq!(rec.c2, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn q_is_linear_and_theta_ignores_data() {
        let s = solved();
        let d = &s.v1.disc;
        let p1 = BoundaryData::linear_xn();
        let p2 = BoundaryData::new("x1^2", |x| x[0] * x[0]);
        let p3 = BoundaryData::new("2 xn - 3 x1^2", |x| 2.0 * x[1] - 3.0 * x[0] * x[0]);
        let fs: Vec<FluxSystem> = [p1, p2, p3]
            .iter()
            .map(|p| assemble_flux_system(&s.v1, &s.v2, &solve_v0(d, p).unwrap()).unwrap())
            .collect();
        let q: Vec<f64> = fs.iter().map(q_eps).collect();
        assert!((q[2] - (2.0 * q[0] - 3.0 * q[1])).abs() < 1e-8 * q[0].abs());
        let eps = s.v1.grid().eps;
        let t: Vec<f64> = fs.iter().map(|f| theta_eps(f, 2, eps).unwrap()).collect();
        assert_eq!(t[0], t[1]);
        assert_eq!(t[0], t[2]);
    }

    #[test]
    fn identity_violation_is_reported() {
        let mut fs = fake_flux(30.0, -27.0, 30.0, [1.0, -1.0]);
        fs.c_diff += 1e-6;
        let q = q_eps(&fs);
        let t = theta_eps(&fs, 2, 1e-2).unwrap();
        assert!(matches!(c_diff_identity_check(&fs, q, t, 0.1), Err(Error::Identity(_))));
    }

    fn synthetic_records(n: usize, q: impl Fn(f64) -> f64) -> Vec<FunctionalRecord> {
        [1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4]
            .iter()
            .map(|&e| FunctionalRecord {
                eps: e,
                rho: rho(n, e).unwrap(),
                q_eps: q(e),
                theta_eps: 20.0 - 2.0 * rho(n, e).unwrap(),
                c1: 0.0,
                c2: 0.0,
                c_diff: 0.0,
                alpha: [-3.0 + e.powf(0.75), -3.0 + e.powf(0.75)],
                f: [0.0; 2],
                a: [[0.0; 2]; 2],
                identity_residual: 0.0,
            })
            .collect()
    }

    #[test]
    fn synthetic_limits_are_recovered() {
        let recs = synthetic_records(2, |e| 3.0 + 0.5 * e.powf(0.75));
        let l = extrapolate_limits(&recs, 2, &[2.0], Estimate::new(2.0, 0.01)).unwrap();
        assert_relative_eq!(l.q_star.value, 3.0, max_relative = 1e-10);
        assert_relative_eq!(l.alpha1_star.value, -3.0, max_relative = 1e-10);
        assert_relative_eq!(l.theta_star.value, 6.0 * std::f64::consts::PI, max_relative = 1e-10);
        let mt = -2.0 / std::f64::consts::PI + 9.0 / (6.0 * std::f64::consts::PI);
        assert_relative_eq!(l.m_tilde.value, mt, max_relative = 1e-10);
        let tr = l.trajectory.unwrap();
        assert_relative_eq!(tr.theta.value, 20.0, max_relative = 1e-10);
        assert_relative_eq!(tr.m_tilde.value, 0.1, max_relative = 1e-10);
        assert_relative_eq!(l.delta0, 0.5 * (20.0 - 0.2), max_relative = 1e-12);
    }

    #[test]
    fn trajectory_absorbs_second_order() {
        let mut recs = synthetic_records(2, |e| 3.0 + 0.5 * e.powf(0.75));
        for r in recs.iter_mut() {
            r.theta_eps += 5.0 * r.eps;
        }
        let tr = theta_trajectory(&recs, 20.0, 1.0, -3.0, 2.0).unwrap();
        assert_relative_eq!(tr.m_tilde.value, 0.1, max_relative = 1e-9);
        assert_relative_eq!(tr.second_order.unwrap(), 5.0, max_relative = 1e-8);
        assert!(tr.max_abs_residual < 1e-12);
        let short = theta_trajectory(&recs[..3], 20.0, 1.0, -3.0, 2.0).unwrap();
        assert!(short.second_order.is_none());
    }

    #[test]
    fn three_dimensional_schedule() {
        let recs = synthetic_records(3, |e| 3.0 + 0.5 * e * e.ln().abs());
        let l = extrapolate_limits(&recs, 3, &[2.0, 2.0], Estimate::exact(1.0)).unwrap();
        assert_relative_eq!(l.q_star.value, 3.0, max_relative = 1e-10);
    }

    #[test]
    fn degenerate_span_is_refused() {
        let mut recs = synthetic_records(2, |_| 1.0);
        for (k, r) in recs.iter_mut().enumerate() {
            r.eps = 1e-2 * (1.0 - 0.01 * k as f64);
            r.rho = r.eps.sqrt();
        }
        assert!(extrapolate_limits(&recs, 2, &[2.0], Estimate::exact(1.0)).is_err());
        assert!(extrapolate_limits(&recs[..2], 2, &[2.0], Estimate::exact(1.0)).is_err());
    }

    #[test]
    fn prefactors() {
        let p = singular_prefactor(2, 3.0, 6.0, 0.0, 1e-4).unwrap();
        assert_relative_eq!(p, 0.005, max_relative = 1e-14);
        let eps = (-10f64).exp();
        let p = singular_prefactor(3, 3.0, 6.0, 0.5, eps).unwrap();
        assert_relative_eq!(p, 0.5 / 9.5, max_relative = 1e-12);
        assert_eq!(singular_prefactor(2, 0.0, 6.0, 0.0, 1e-4).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn cramer_identity_holds_for_any_flux_system(
            a11 in 5.0..500.0f64, c in 0.5..0.99f64, a22s in 0.8..1.2f64,
            f1 in -10.0..10.0f64, f2 in -10.0..10.0f64, le in 1.0..9.0f64,
        ) {
            let a12 = -c * a11;
            let a22 = a11 * a22s;
            prop_assume!(a22 + a12 > 0.0);
            let fs = fake_flux(a11, a12, a22, [f1, f2]);
            let eps = 10f64.powf(-le);
            let q = q_eps(&fs);
            let t = theta_eps(&fs, 2, eps).unwrap();
            prop_assert!(t > 0.0);
            prop_assert!(c_diff_identity_check(&fs, q, t, eps.sqrt()).is_ok());
            prop_assert!((t - theta_eps_alt(&fs, 2, eps).unwrap()).abs() < 1e-10 * t.abs());
        }
    }
}

//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p narrowgap --test acceptance -- --nocapture`.

use narrowgap::asymptotics::{closed_form_2d, closed_form_3d, gap_integral, kappa, r_theta, rho};
use narrowgap::config::{two_discs_config, ExperimentConfig, PhiSpec, ShapeSpec};
use narrowgap::functionals::singular_prefactor;
use narrowgap::geometry::GapGeometry;
use narrowgap::harness::{run_solve, run_sweep, SweepOutcome};
use narrowgap::oracle::{annulus_study, ANNULUS_DEFAULT_RAYS};
use narrowgap::quadrature::QuadOptions;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::OnceLock;

fn reference_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_discs.json");
    ExperimentConfig::load(&path).expect("reference config")
}

fn sweep() -> &'static SweepOutcome {
    static S: OnceLock<SweepOutcome> = OnceLock::new();
    S.get_or_init(|| {
        let exp = reference_config().resolve().unwrap();
        run_sweep(&exp, Some(1)).unwrap()
    })
}

fn verdict(id: u32, ok: bool, detail: String) -> bool {
    println!("criterion {id:>2}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn c1_cramer_identity() -> bool {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for r in &sweep().records {
        worst = worst.max(r.identity_residual);
        cases += 1;
    }
    let phis = [
        PhiSpec::Constant { value: 1.0 },
        PhiSpec::LinearXn { scale: -2.5 },
        PhiSpec::Polynomial { terms: vec![(1, 0, 1.0), (0, 2, 0.5), (2, 1, -0.25)] },
        PhiSpec::Trigonometric { amplitude: 1.0, frequency: 3, phase: 0.3 },
    ];
    for phi in phis {
        let mut c = two_discs_config(vec![1e-2, 1e-3]);
        c.phi = phi;
        let exp = c.resolve().unwrap();
        for &e in &exp.config.eps {
            worst = worst.max(run_solve(&exp, e).unwrap().record.identity_residual);
            cases += 1;
        }
    }
    // no mirror symmetry
    let mut c = two_discs_config(vec![3e-3]);
    c.geometry.upper = ShapeSpec::Ellipse { semi_axes: vec![1.5, 0.8] };
    c.phi = PhiSpec::Polynomial { terms: vec![(0, 1, 1.0), (1, 0, 0.7)] };
    let exp = c.resolve().unwrap();
    worst = worst.max(run_solve(&exp, 3e-3).unwrap().record.identity_residual);
    cases += 1;
    verdict(1, worst <= 1e-12, format!("{cases} solves, worst relative identity residual {worst:.3e} (tol 1e-12)"))
}

fn c2_annulus() -> bool {
    let s = annulus_study(0.5, 2.0, &[ANNULUS_DEFAULT_RAYS / 4, ANNULUS_DEFAULT_RAYS / 2, ANNULUS_DEFAULT_RAYS]).unwrap();
    let top = s.levels.last().unwrap();
    let order = s.energy_refinement.observed_order();
    let ok = top.max_nodal_error <= 1e-4 && top.energy_rel_error <= 1e-4 && (order - 2.0).abs() <= 0.3;
    verdict(
        2,
        ok,
        format!(
            "default budget ({} rays, {} nodes): max nodal error {:.2e}, centroid error {:.2e}, energy rel error {:.2e}; energy order {:.3}",
            top.n_theta, top.nodes, top.max_nodal_error, top.max_centroid_error, top.energy_rel_error, order
        ),
    )
}

fn c3_flux_identities() -> bool {
    let solve = |refinement: f64| {
        let mut c = two_discs_config(vec![1e-2]);
        c.grid.refinement = Some(refinement);
        run_solve(&c.resolve().unwrap(), 1e-2).unwrap().record
    };
    let (coarse, fine) = (solve(1.0), solve(2.0));
    let rel = |r: &narrowgap::harness::SweepRecord| (r.flux_defect_sym.max(r.flux_defect_sum)) / r.a11.abs();
    let (dc, df) = (rel(&coarse), rel(&fine));
    // the discrete fluxes are conservative, so the defects may already sit at
    // round-off where no further shrinking is possible
    let round_off = 1e-11;
    let shrinks = df <= dc / 3.0 || (dc <= round_off && df <= round_off);
    verdict(
        3,
        dc <= 1e-6 && shrinks,
        format!("relative defects {dc:.2e} (default) -> {df:.2e} (refined x2); tol 1e-6, round-off floor {round_off:.0e}"),
    )
}

fn c4_energy_expansion() -> bool {
    let Some(m) = &sweep().aggregates.energy_v1 else {
        return verdict(4, false, "no energy model".into());
    };
    let kappa_ok = (m.free.kappa_hat / PI - 1.0).abs() <= 0.05;
    let spread = m.tail_spread_ci();
    let slope = m.remainder_exponent.unwrap_or(f64::NAN);
    let ok = kappa_ok && spread <= 1.0 && slope > 0.0;
    let tails: Vec<String> = m.tails.iter().map(|t| format!("{:.5}", t.m_hat)).collect();
    verdict(
        4,
        ok,
        format!(
            "kappa_hat = {:.6} ({:+.3}% vs pi), M_hat = {:.5} +- {:.1e} (95%), tails [{}] spread {:.2} of CI; remainder exponent {:.3}, fixed-kappa M1 = {:.5} +- {:.1e}",
            m.free.kappa_hat,
            100.0 * (m.free.kappa_hat / PI - 1.0),
            m.free.m_hat,
            m.free.m_ci,
            tails.join(", "),
            spread,
            slope,
            m.m,
            m.m_err
        ),
    )
}

fn c5_gap_integrals() -> bool {
    let opts = QuadOptions::abs(1e-12);
    let g2 = GapGeometry::quadratic(vec![2.0], 0.0, 0.5).unwrap();
    let q2 = gap_integral(&g2, 1e-4, 0.5, opts).unwrap();
    let c2 = closed_form_2d(2.0, 0.5, 1e-4).unwrap();
    // independent: the 2D integral in arctan form
    let arctan = 2.0 / 1e-4f64.sqrt() * (0.5 / 1e-4f64.sqrt()).atan();
    let g3 = GapGeometry::quadratic(vec![2.0, 2.0], 0.0, 0.5).unwrap();
    let q3 = gap_integral(&g3, 1e-6, 0.5, opts).unwrap();
    let c3 = closed_form_3d(2.0, 2.0, 0.5, 1e-6).unwrap();
    let log = PI * (1.0 + 0.25 / 1e-6f64).ln();
    let ok = (q2 - c2).abs() <= 1e-2 && (q3 - c3).abs() <= 1e-4 && (q2 - arctan).abs() < 1e-8 && (q3 - log).abs() < 1e-8;
    verdict(
        5,
        ok,
        format!(
            "2D: quadrature {q2:.6} (arctan form {arctan:.6}) vs closed form {c2:.6}, |d| = {:.2e}; 3D: {q3:.8} (log form {log:.8}) vs {c3:.8}, |d| = {:.2e}",
            (q2 - c2).abs(),
            (q3 - c3).abs()
        ),
    )
}

fn c6_blowup_rate() -> bool {
    match &sweep().aggregates.blowup {
        Some(b) => verdict(
            6,
            (b.slope + 0.5).abs() <= 0.05,
            format!("slope {:.4} +- {:.4}, 95% CI [{:.4}, {:.4}] (target -0.5 +- 0.05)", b.slope, b.slope_err, b.ci_low, b.ci_high),
        ),
        None => verdict(6, false, "no blow-up fit".into()),
    }
}

fn c7_residual_boundedness() -> bool {
    let a = &sweep().aggregates;
    let (r, g) = (a.residual_growth.unwrap_or(f64::NAN), a.gradient_growth.unwrap_or(f64::NAN));
    let lim = a.limits.as_ref().map_or(f64::NAN, |l| l.prefactor(1e-4).unwrap());
    let recorded = sweep().records.last().map_or(f64::NAN, |r| r.prefactor);
    let ok = r < 3.0 && g > 10.0 && (lim - recorded).abs() <= 1e-12 * lim.abs();
    verdict(7, ok, format!("residual grows x{r:.3} (< 3) while max|grad u| grows x{g:.3} (> 10); limit prefactor used"))
}

fn c8_prop_boundedness() -> bool {
    let a = &sweep().aggregates;
    let Some(w) = a.v1_residual_window else {
        return verdict(8, false, "no windowed test".into());
    };
    let eps: Vec<f64> = sweep().records.iter().map(|r| r.eps).collect();
    let grads: Vec<f64> = sweep().records.iter().map(|r| r.max_gap_grad_v1).collect();
    let band = narrowgap::reconstruction::within_band(&eps, &grads, 2.0);
    let (lo, hi) = a.v1_band.unwrap();
    let ok = w.worst_monotone_growth < 1.5 && w.trend_exponent < 0.1 && band;
    verdict(
        8,
        ok,
        format!(
            "|grad(v1 - ubar)|: worst {}-window growth x{:.3}, trend eps^-{:.4}; eps max|grad v1| in [{lo:.5}, {hi:.5}] (band [1/2, 2])",
            w.window, w.worst_monotone_growth, w.trend_exponent
        ),
    )
}

fn c9_limits() -> bool {
    let Some(l) = &sweep().aggregates.limits else {
        return verdict(9, false, "no limits".into());
    };
    let Some(t) = &l.trajectory else {
        return verdict(9, false, "no trajectory fit".into());
    };
    let rel = l.theta_star.err / l.theta_star.value;
    let below = sweep().records.iter().zip(&t.residuals).all(|(r, res)| r.theta_noise.is_some_and(|n| res.abs() < n));
    let floor = sweep().records.iter().filter_map(|r| r.theta_noise).fold(f64::INFINITY, f64::min);
    let ok = l.theta_star.value > 0.0 && rel <= 0.05 && below && l.m_tilde.err.is_finite();
    verdict(
        9,
        ok,
        format!(
            "Theta* = {:.6} +- {:.1e} ({:.1e} rel); trajectory max residual {:.2e} vs noise floor >= {floor:.2e}; Mtilde = {:.5} +- {:.1e} (formula), {:.5} +- {:.1e} (trajectory), sign {}",
            l.theta_star.value,
            l.theta_star.err,
            rel,
            t.max_abs_residual,
            l.m_tilde.value,
            l.m_tilde.err,
            t.m_tilde.value,
            t.m_tilde.err,
            if l.m_tilde.value > 0.0 { "+" } else { "-" }
        ),
    )
}

fn c10_three_dimensional_layer() -> bool {
    let mut ok = true;
    let mut worst = 0.0f64;
    for &e in &[1e-2, 1e-4, 1e-6, 1e-8] {
        ok &= (rho(3, e).unwrap() - 1.0 / e.ln().abs()).abs() <= 1e-15;
        let (q, th, mt) = (1.7, 3.2, 0.4);
        let p = singular_prefactor(3, q, th, mt, e).unwrap();
        worst = worst.max((p - (q / th) / (e.ln().abs() - mt)).abs() / p.abs());
    }
    for &(l1, l2) in &[(2.0f64, 2.0f64), (1.0, 3.0), (0.5, 4.0)] {
        let k = kappa(3, &[l1, l2]).unwrap();
        worst = worst.max((k - 2.0 * PI / (l1 * l2).sqrt()).abs() / k);
        // closed form against the elliptic log-integral
        let (e, r0) = (1e-6, 0.3);
        let c = closed_form_3d(l1, l2, r0, e).unwrap();
        // int ln(a^2 cos^2 + b^2 sin^2) over a period = 4 pi ln((a + b) / 2)
        let log_r = 2.0 * PI * r0.ln() - 2.0 * PI * (((2.0 / l1).sqrt() + (2.0 / l2).sqrt()) / 2.0).ln();
        let expect = k / rho(3, e).unwrap() + 2.0 / (l1 * l2).sqrt() * log_r;
        worst = worst.max((c - expect).abs() / c);
    }
    for t in 0..16 {
        let th = t as f64 * PI / 8.0;
        worst = worst.max((r_theta(2.0, 2.0, 0.7, th) - 0.7).abs());
    }
    let exp = ExperimentConfig::from_json(include_str!("../../../configs/two_balls_3d.json")).unwrap().resolve().unwrap();
    let out = run_sweep(&exp, Some(1)).unwrap();
    let a3 = out.asymptotic_3d.as_ref().unwrap();
    ok &= a3.rows.iter().all(|r| r.prefactor.is_some()) && (a3.kappa3 - PI).abs() < 1e-14;
    ok &= worst <= 1e-12;
    verdict(
        10,
        ok,
        format!("rho_3, kappa_3, R(theta), closed_form_3d and 1/(|log eps| - Mtilde) prefactors: worst relative defect {worst:.2e}"),
    )
}

#[test]
fn acceptance() {
    let results = [
        c1_cramer_identity(),
        c2_annulus(),
        c3_flux_identities(),
        c4_energy_expansion(),
        c5_gap_integrals(),
        c6_blowup_rate(),
        c7_residual_boundedness(),
        c8_prop_boundedness(),
        c9_limits(),
        c10_three_dimensional_layer(),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    assert_eq!(passed, results.len());
}

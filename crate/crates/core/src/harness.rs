//! Experiment runner: single solves, eps-sweeps, the fits built on them,
//! and the CSV / JSON / text outputs.

use crate::asymptotics::{
    closed_form_2d, closed_form_3d, fit_energy_model, gap_integral, geometry_hash, kappa, rho, AsymptoticModel,
    EnergySeries,
};
use crate::config::{Experiment, SyntheticLimits};
use crate::error::{Error, Result};
use crate::field_solver::{
    assemble_flux_system, assemble_u, flux_inclusion, flux_outer, max_gradient, solve_v0, solve_vi, DiscreteField,
    Discretization, Region,
};
use crate::functionals::{extrapolate_limits, singular_prefactor, Estimate, FunctionalRecord, LimitConstants};
use crate::geometry::{GapGeometry, InclusionShape};
use crate::mesh::{build_grid, Resolution};
use crate::oracle::{check_relations, symmetry_oracle, SymmetryRelation};
use crate::reconstruction::{blowup_rate_fit, growth_factor, residual_norms, windowed_growth, BlowupFit, WindowedGrowth};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

pub const CSV_SCHEMA: &str = "narrowgap-sweep/1";
pub const REPORT_SCHEMA: &str = "narrowgap-report/1";

/// One row of `sweep.csv`. Column order is part of the schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRecord {
    pub eps: f64,
    pub rho: f64,
    /// Energies of `v_1`, `v_2` (extrapolated when two grids are used).
    pub e1: f64,
    pub e2: f64,
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub b1: f64,
    pub b2: f64,
    pub q_eps: f64,
    pub theta_eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_gap_grad_u: f64,
    /// `max |grad u - prefactor grad ubar|` over the gap.
    pub max_gap_residual: f64,
    pub c_diff: f64,
    pub identity_residual: f64,
    pub prefactor: f64,
    pub max_gap_grad_v1: f64,
    pub max_gap_v1_residual: f64,
    pub max_outside_grad_v1: f64,
    /// `|a12 - a21|` from boundary reaction sums.
    pub flux_defect_sym: f64,
    /// `|a11 + a12 + alpha1|` from boundary reaction sums.
    pub flux_defect_sum: f64,
    pub nodes: usize,
    /// Single-grid energy of `v_1`.
    pub e1_grid: f64,
    /// Discretization error estimate of `Theta_eps`, `|fine - coarse| / 3`;
    /// empty without a second grid.
    pub theta_noise: Option<f64>,
    #[serde(skip)]
    pub wall_time: f64,
}

const COLUMNS: [&str; 29] = [
    "eps",
    "rho",
    "e1",
    "e2",
    "a11",
    "a12",
    "a21",
    "a22",
    "alpha1",
    "alpha2",
    "b1",
    "b2",
    "q_eps",
    "theta_eps",
    "c1",
    "c2",
    "max_gap_grad_u",
    "max_gap_residual",
    "c_diff",
    "identity_residual",
    "prefactor",
    "max_gap_grad_v1",
    "max_gap_v1_residual",
    "max_outside_grad_v1",
    "flux_defect_sym",
    "flux_defect_sum",
    "nodes",
    "e1_grid",
    "theta_noise",
];

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl SweepRecord {
    pub fn columns() -> &'static [&'static str] {
        &COLUMNS
    }

    fn row(&self) -> Vec<String> {
        let mut r: Vec<String> = [
            self.eps,
            self.rho,
            self.e1,
            self.e2,
            self.a11,
            self.a12,
            self.a21,
            self.a22,
            self.alpha1,
            self.alpha2,
            self.b1,
            self.b2,
            self.q_eps,
            self.theta_eps,
            self.c1,
            self.c2,
            self.max_gap_grad_u,
            self.max_gap_residual,
            self.c_diff,
            self.identity_residual,
            self.prefactor,
            self.max_gap_grad_v1,
            self.max_gap_v1_residual,
            self.max_outside_grad_v1,
            self.flux_defect_sym,
            self.flux_defect_sum,
        ]
        .iter()
        .map(|v| fmt17(*v))
        .collect();
        r.push(self.nodes.to_string());
        r.push(fmt17(self.e1_grid));
        r.push(self.theta_noise.map(fmt17).unwrap_or_default());
        r
    }

    pub fn is_finite(&self) -> bool {
        self.row().iter().all(|s| s.is_empty() || s.parse::<f64>().is_ok_and(f64::is_finite))
    }

    pub fn functional_record(&self) -> FunctionalRecord {
        FunctionalRecord {
            eps: self.eps,
            rho: self.rho,
            q_eps: self.q_eps,
            theta_eps: self.theta_eps,
            c1: self.c1,
            c2: self.c2,
            c_diff: self.c_diff,
            alpha: [self.alpha1, self.alpha2],
            f: [-self.b1, -self.b2],
            a: [[self.a11, self.a12], [self.a21, self.a22]],
            identity_residual: self.identity_residual,
        }
    }
}

pub fn write_csv(records: &[SweepRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record(r.row())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

pub fn read_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Config(format!("sweep CSV does not follow schema {CSV_SCHEMA}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Everything one solve produces; fields are kept so gap residuals can be
/// re-evaluated once the touching limits are known.
#[derive(Debug, Clone)]
pub struct SolveArtifacts {
    pub record: SweepRecord,
    pub geom: GapGeometry,
    pub u: DiscreteField,
    pub v1: DiscreteField,
    pub symmetry: Vec<(SymmetryRelation, f64)>,
}

struct GridSolve {
    fs: crate::field_solver::FluxSystem,
    rec: FunctionalRecord,
    v1: DiscreteField,
    u: DiscreteField,
    symmetry: Vec<(SymmetryRelation, f64)>,
    defects: (f64, f64),
    nodes: usize,
}

fn solve_on(exp: &Experiment, geom: &GapGeometry, res: &Resolution) -> Result<GridSolve> {
    let grid = build_grid(geom, &exp.outer, res)?;
    let nodes = grid.node_count();
    let disc = Discretization::new(grid, exp.solver)?;
    let v1 = solve_vi(&disc, 1)?;
    let v2 = solve_vi(&disc, 2)?;
    let v0 = solve_v0(&disc, &exp.config.phi.boundary_data())?;
    let fs = assemble_flux_system(&v1, &v2, &v0)?;
    let rec = FunctionalRecord::from_flux(&fs, 2, geom.eps)?;
    let u = assemble_u(&fs, &v1, &v2, &v0)?;
    let (a12r, a21r, a11r, al1r) = (flux_inclusion(&v2, 1), flux_inclusion(&v1, 2), flux_inclusion(&v1, 1), flux_outer(&v1));
    let defects = ((a12r - a21r).abs(), (a11r + a12r + al1r).abs());
    let symmetry = if exp.mirror_symmetric {
        check_relations(&symmetry_oracle(true, exp.config.phi.parity()), &v1, &v2, &u, &fs)?
    } else {
        Vec::new()
    };
    Ok(GridSolve { fs, rec, v1, u, symmetry, defects, nodes })
}

/// Geometry, grid, three potentials, flux system, functionals and gap
/// gradients for one `eps`. The singular term uses the local prefactor
/// `Q_eps sqrt(eps) / Theta_eps` until limits are available.
pub fn run_solve(exp: &Experiment, eps: f64) -> Result<SolveArtifacts> {
    if exp.dim() != 2 {
        return Err(Error::Config("field solves are available in 2D only".into()));
    }
    exp.check_eps(eps)?;
    let start = Instant::now();
    let geom = exp.geometry(eps)?;
    let base = solve_on(exp, &geom, &exp.resolution)?;
    if !exp.config.grid.richardson {
        let (e1, e2) = (base.fs.a[0][0], base.fs.a[1][1]);
        return finish(geom, base, e1, e2, None, start);
    }
    // second grid with halved spacings; energies extrapolated, everything
    // else reported from the finer grid
    let fine = solve_on(exp, &geom, &exp.resolution.refined(2.0))?;
    let rich = |f: f64, c: f64| f + (f - c) / 3.0;
    let e1 = rich(fine.fs.a[0][0], base.fs.a[0][0]);
    let e2 = rich(fine.fs.a[1][1], base.fs.a[1][1]);
    // second order in the spacing: the finer value is off by about a third
    // of the difference
    let noise = (fine.rec.theta_eps - base.rec.theta_eps).abs() / 3.0;
    finish(geom, fine, e1, e2, Some(noise), start)
}

fn finish(
    geom: GapGeometry,
    s: GridSolve,
    e1: f64,
    e2: f64,
    theta_noise: Option<f64>,
    start: Instant,
) -> Result<SolveArtifacts> {
    let rec = &s.rec;
    let prefactor = singular_prefactor(2, rec.q_eps, rec.theta_eps, 0.0, geom.eps)?;
    let ru = residual_norms(&s.u, &geom, prefactor, Region::Gap)?;
    let rv = residual_norms(&s.v1, &geom, 1.0, Region::Gap)?;
    let record = SweepRecord {
        eps: geom.eps,
        rho: rec.rho,
        e1,
        e2,
        a11: s.fs.a[0][0],
        a12: s.fs.a[0][1],
        a21: s.fs.a[1][0],
        a22: s.fs.a[1][1],
        alpha1: s.fs.alpha[0],
        alpha2: s.fs.alpha[1],
        b1: s.fs.b[0],
        b2: s.fs.b[1],
        q_eps: rec.q_eps,
        theta_eps: rec.theta_eps,
        c1: rec.c1,
        c2: rec.c2,
        max_gap_grad_u: ru.max_gradient,
        max_gap_residual: ru.max_residual,
        c_diff: rec.c_diff,
        identity_residual: rec.identity_residual,
        prefactor,
        max_gap_grad_v1: rv.max_gradient,
        max_gap_v1_residual: rv.max_residual,
        max_outside_grad_v1: max_gradient(&s.v1, Region::OutsideGap),
        flux_defect_sym: s.defects.0,
        flux_defect_sum: s.defects.1,
        nodes: s.nodes,
        e1_grid: s.fs.a[0][0],
        theta_noise,
        wall_time: start.elapsed().as_secs_f64(),
    };
    if !record.is_finite() {
        return Err(Error::Degenerate(format!("non-finite entries in the record at eps = {}", geom.eps)));
    }
    Ok(SolveArtifacts { record, geom, u: s.u, v1: s.v1, symmetry: s.symmetry })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveFailure {
    pub eps: f64,
    pub error: String,
}

/// Gap integral of the configured geometry next to the closed form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapIntegralRow {
    pub eps: f64,
    pub quadrature: f64,
    pub closed_form: f64,
    /// The same comparison for the pure quadratic model of the contact.
    pub quadratic_quadrature: f64,
}

/// Fits over a set of sweep records.
#[derive(Debug, Clone, Serialize, Default)]
pub struct Aggregates {
    pub energy_v1: Option<AsymptoticModel>,
    pub energy_v2: Option<AsymptoticModel>,
    pub limits: Option<LimitConstants>,
    pub blowup: Option<BlowupFit>,
    /// Growth factors across the sweep.
    pub residual_growth: Option<f64>,
    pub gradient_growth: Option<f64>,
    pub v1_residual_window: Option<WindowedGrowth>,
    pub v1_band: Option<(f64, f64)>,
    pub errors: Vec<String>,
}

impl AsymptoticModel {
    fn m_estimate(&self) -> Estimate {
        Estimate::new(self.m, self.m_err)
    }
}

/// Energy fits and touching limits from records alone.
pub fn aggregate_records(records: &[SweepRecord], lambdas: &[f64], geometry_desc: &str) -> Aggregates {
    let mut agg = Aggregates::default();
    if records.len() < 3 {
        agg.errors.push(format!("{} successful solves; aggregate fits need at least 3", records.len()));
        return agg;
    }
    let hash = geometry_hash(geometry_desc);
    let series = |i: u8| -> Result<EnergySeries> {
        let pts = records.iter().map(|r| (r.eps, if i == 1 { r.e1 } else { r.e2 })).collect();
        EnergySeries::new(pts, i, hash)
    };
    match series(1).and_then(|s| fit_energy_model(&s, 2, lambdas)) {
        Ok(m) => agg.energy_v1 = Some(m),
        Err(e) => agg.errors.push(format!("energy fit (v1): {e}")),
    }
    match series(2).and_then(|s| fit_energy_model(&s, 2, lambdas)) {
        Ok(m) => agg.energy_v2 = Some(m),
        Err(e) => agg.errors.push(format!("energy fit (v2): {e}")),
    }
    if let Some(m) = &agg.energy_v1 {
        let recs: Vec<FunctionalRecord> = records.iter().map(SweepRecord::functional_record).collect();
        match extrapolate_limits(&recs, 2, lambdas, m.m_estimate()) {
            Ok(l) => agg.limits = Some(l),
            Err(e) => agg.errors.push(format!("limits: {e}")),
        }
    }
    if let Some(l) = &agg.limits {
        let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.eps, r.max_gap_grad_u)).collect();
        match blowup_rate_fit(&pts, l.q_star) {
            Ok(b) => agg.blowup = Some(b),
            Err(e) => agg.errors.push(format!("blow-up fit: {e}")),
        }
    }
    let res: Vec<f64> = records.iter().map(|r| r.max_gap_residual).collect();
    let grad: Vec<f64> = records.iter().map(|r| r.max_gap_grad_u).collect();
    agg.residual_growth = Some(growth_factor(&res));
    agg.gradient_growth = Some(growth_factor(&grad));
    let eps: Vec<f64> = records.iter().map(|r| r.eps).collect();
    let v1r: Vec<f64> = records.iter().map(|r| r.max_gap_v1_residual).collect();
    match windowed_growth(&eps, &v1r, 3) {
        Ok(w) => agg.v1_residual_window = Some(w),
        Err(e) => agg.errors.push(format!("v1 residual window: {e}")),
    }
    let scaled: Vec<f64> = records.iter().map(|r| r.eps * r.max_gap_grad_v1).collect();
    agg.v1_band = Some((
        scaled.iter().copied().fold(f64::INFINITY, f64::min),
        scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    ));
    agg
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub eps: f64,
    pub seconds: f64,
}

/// Result of a full sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub dim: usize,
    pub lambdas: Vec<f64>,
    pub kappa_n: f64,
    pub records: Vec<SweepRecord>,
    pub failures: Vec<SolveFailure>,
    pub aggregates: Aggregates,
    pub gap_integrals: Vec<GapIntegralRow>,
    pub symmetry: Vec<(f64, Vec<(SymmetryRelation, f64)>)>,
    pub asymptotic_3d: Option<Asymptotic3d>,
    pub timings: Vec<Timing>,
    pub total_seconds: f64,
}

impl SweepOutcome {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.failures.is_empty() && self.asymptotic_3d.as_ref().is_none_or(|a| a.rows.is_empty())
    }
}

fn shape_desc(s: &InclusionShape) -> String {
    format!("{:?}", s.kind())
}

fn gap_integral_rows(exp: &Experiment, eps: &[f64]) -> Result<Vec<GapIntegralRow>> {
    let g = &exp.template;
    let r0 = g.r0;
    let lam = &g.lambdas;
    let quad = GapGeometry::quadratic(lam.clone(), g.eps, r0)?;
    eps.iter()
        .map(|&e| {
            let closed = if g.dim == 2 { closed_form_2d(lam[0], r0, e)? } else { closed_form_3d(lam[0], lam[1], r0, e)? };
            Ok(GapIntegralRow {
                eps: e,
                quadrature: gap_integral(g, e, r0, exp.quad)?,
                closed_form: closed,
                quadratic_quadrature: gap_integral(&quad, e, r0, exp.quad)?,
            })
        })
        .collect()
}

/// Per-eps row of the 3D asymptotic layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Asymptotic3dRow {
    pub eps: f64,
    pub rho: f64,
    /// `1 / (|log eps| - Mtilde)` with the synthetic `Mtilde`.
    pub log_factor: Option<f64>,
    pub prefactor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Asymptotic3d {
    pub kappa3: f64,
    pub r_theta_axes: (f64, f64),
    pub synthetic: Option<SyntheticLimits>,
    pub rows: Vec<Asymptotic3dRow>,
}

/// The 3D layer: explicit constants and prefactors only, no field solve.
pub fn run_asymptotic_3d(exp: &Experiment) -> Result<Asymptotic3d> {
    let g = &exp.template;
    if g.dim != 3 {
        return Err(Error::Config("the asymptotic layer needs a 3D geometry".into()));
    }
    let lam = &g.lambdas;
    let syn = exp.config.synthetic_limits;
    let rows = exp
        .config
        .eps
        .iter()
        .map(|&e| {
            let r = rho(3, e)?;
            let (log_factor, prefactor) = match syn {
                Some(s) => {
                    let p = singular_prefactor(3, s.q_star, s.theta_star, s.m_tilde, e)?;
                    (Some(1.0 / (1.0 / r - s.m_tilde)), Some(p))
                }
                None => (None, None),
            };
            Ok(Asymptotic3dRow { eps: e, rho: r, log_factor, prefactor })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Asymptotic3d {
        kappa3: kappa(3, lam)?,
        r_theta_axes: (
            crate::asymptotics::r_theta(lam[0], lam[1], g.r0, 0.0),
            crate::asymptotics::r_theta(lam[0], lam[1], g.r0, std::f64::consts::FRAC_PI_2),
        ),
        synthetic: syn,
        rows,
    })
}

/// Re-evaluate gap residuals with the limit prefactor `Q* sqrt(eps) / Theta*`.
pub fn apply_limits(artifacts: &mut [SolveArtifacts], limits: &LimitConstants) -> Result<()> {
    for a in artifacts.iter_mut() {
        let p = limits.prefactor(a.record.eps)?;
        let r = residual_norms(&a.u, &a.geom, p, Region::Gap)?;
        a.record.prefactor = p;
        a.record.max_gap_residual = r.max_residual;
    }
    Ok(())
}

/// Run every eps of the configuration, concurrently up to `threads`.
pub fn run_sweep(exp: &Experiment, threads: Option<usize>) -> Result<SweepOutcome> {
    let start = Instant::now();
    let eps = exp.config.eps.clone();
    let lambdas = exp.template.lambdas.clone();
    let gap_integrals = if eps.is_empty() { Vec::new() } else { gap_integral_rows(exp, &eps)? };
    if exp.dim() == 3 {
        let a3 = run_asymptotic_3d(exp)?;
        return Ok(SweepOutcome {
            dim: 3,
            kappa_n: a3.kappa3,
            lambdas,
            records: Vec::new(),
            failures: Vec::new(),
            aggregates: Aggregates::default(),
            gap_integrals,
            symmetry: Vec::new(),
            asymptotic_3d: Some(a3),
            timings: Vec::new(),
            total_seconds: start.elapsed().as_secs_f64(),
        });
    }
    let run = || eps.par_iter().map(|&e| (e, run_solve(exp, e))).collect::<Vec<_>>();
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut artifacts = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in results {
        match r {
            Ok(a) => artifacts.push(a),
            Err(err) => failures.push(SolveFailure { eps: e, error: err.to_string() }),
        }
    }
    let desc = format!("{}|{}|{:?}", shape_desc(&exp.upper), shape_desc(&exp.lower), exp.outer);
    let records: Vec<SweepRecord> = artifacts.iter().map(|a| a.record.clone()).collect();
    let mut aggregates = if eps.is_empty() { Aggregates::default() } else { aggregate_records(&records, &lambdas, &desc) };
    if let Some(l) = aggregates.limits.clone() {
        match apply_limits(&mut artifacts, &l) {
            Ok(()) => {
                let res: Vec<f64> = artifacts.iter().map(|a| a.record.max_gap_residual).collect();
                aggregates.residual_growth = Some(growth_factor(&res));
            }
            Err(e) => aggregates.errors.push(format!("limit prefactor: {e}")),
        }
    }
    Ok(SweepOutcome {
        dim: 2,
        kappa_n: kappa(2, &lambdas)?,
        lambdas,
        timings: artifacts.iter().map(|a| Timing { eps: a.record.eps, seconds: a.record.wall_time }).collect(),
        symmetry: artifacts.iter().map(|a| (a.record.eps, a.symmetry.clone())).collect(),
        records: artifacts.into_iter().map(|a| a.record).collect(),
        failures,
        aggregates,
        gap_integrals,
        asymptotic_3d: None,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Write `contents` next to `path` and rename it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().and_then(|s| s.to_str()).unwrap_or("out")));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportJson<'a> {
    schema: &'static str,
    csv_schema: &'static str,
    empty: bool,
    config: &'a crate::config::ExperimentConfig,
    outcome: &'a SweepOutcome,
}

/// The human-readable summary.
pub fn summary_text(exp: &Experiment, out: &SweepOutcome) -> String {
    let mut s = String::new();
    let name = exp.config.name.clone().unwrap_or_else(|| "experiment".into());
    let _ = writeln!(s, "{name}: n = {}, lambdas = {:?}, kappa_n = {:.10}", out.dim, out.lambdas, out.kappa_n);
    if out.is_empty() {
        let _ = writeln!(s, "EMPTY SWEEP: no eps values were solved");
        for f in &out.failures {
            let _ = writeln!(s, "  failed eps = {:e}: {}", f.eps, f.error);
        }
        return s;
    }
    if let Some(a3) = &out.asymptotic_3d {
        let _ = writeln!(s, "\n3D asymptotic layer (no field solves)");
        let _ = writeln!(s, "  kappa_3 = {:.12}, R(0) = {:.6}, R(pi/2) = {:.6}", a3.kappa3, a3.r_theta_axes.0, a3.r_theta_axes.1);
        let _ = writeln!(s, "  {:>10} {:>12} {:>16} {:>16}", "eps", "rho_3", "1/(|log|-Mt)", "prefactor");
        for r in &a3.rows {
            let _ = writeln!(
                s,
                "  {:>10.3e} {:>12.6e} {:>16} {:>16}",
                r.eps,
                r.rho,
                r.log_factor.map_or("-".into(), |v| format!("{v:.8e}")),
                r.prefactor.map_or("-".into(), |v| format!("{v:.8e}"))
            );
        }
    }
    if !out.gap_integrals.is_empty() {
        let _ = writeln!(s, "\nGap integral over |x'| < R0 = {:.6}: quadrature vs closed form", exp.template.r0);
        let _ = writeln!(s, "  {:>10} {:>18} {:>18} {:>14} {:>14}", "eps", "geometry", "closed form", "geom - cf", "quadr. - cf");
        for g in &out.gap_integrals {
            let _ = writeln!(
                s,
                "  {:>10.3e} {:>18.10} {:>18.10} {:>14.6e} {:>14.6e}",
                g.eps,
                g.quadrature,
                g.closed_form,
                g.quadrature - g.closed_form,
                g.quadratic_quadrature - g.closed_form
            );
        }
    }
    if out.dim == 3 {
        return s;
    }
    let agg = &out.aggregates;
    let m1 = agg.energy_v1.as_ref().map(|m| m.m);
    let _ = writeln!(s, "\nEnergy of v1 vs kappa/rho + M1 (M1 = {})", m1.map_or("-".into(), |v| format!("{v:.8}")));
    let _ = writeln!(s, "  {:>10} {:>18} {:>18} {:>14}", "eps", "E1", "kappa/rho + M1", "difference");
    for r in &out.records {
        let model = m1.map(|m| out.kappa_n / r.rho + m);
        let _ = writeln!(
            s,
            "  {:>10.3e} {:>18.10} {:>18} {:>14}",
            r.eps,
            r.e1,
            model.map_or("-".into(), |v| format!("{v:.10}")),
            model.map_or("-".into(), |v| format!("{:.4e}", r.e1 - v))
        );
    }
    if let Some(m) = &agg.energy_v1 {
        let _ = writeln!(
            s,
            "  fixed kappa: M1 = {:.8} +- {:.2e}; remainder exponent {} (paper bound eps^{:.2} for smooth boundaries)",
            m.m,
            m.m_err,
            m.remainder_exponent.map_or("n/a".into(), |p| format!("{p:.3} +- {:.3}", m.remainder_exponent_err.unwrap_or(f64::NAN))),
            m.paper_exponent
        );
        let _ = writeln!(
            s,
            "  free fit: kappa_hat = {:.6} +- {:.2e} (kappa_n = {:.6}, ratio {:.5}), M_hat = {:.6} +- {:.2e} (95%: +- {:.2e})",
            m.free.kappa_hat,
            m.free.kappa_err,
            m.kappa_n,
            m.free.kappa_hat / m.kappa_n,
            m.free.m_hat,
            m.free.m_err,
            m.free.m_ci
        );
        for t in &m.tails {
            let _ = writeln!(s, "    tail from #{}: M_hat = {:.6} +- {:.2e}", t.start, t.m_hat, t.m_err);
        }
    }
    if let Some(l) = &agg.limits {
        let _ = writeln!(s, "\nTouching limits ({} schedule)", l.schedule);
        for (name, e) in [
            ("Q*", l.q_star),
            ("Theta*", l.theta_star),
            ("alpha1*", l.alpha1_star),
            ("alpha2*", l.alpha2_star),
            ("M1", l.m1),
            ("Mtilde", l.m_tilde),
        ] {
            let _ = writeln!(s, "  {name:>8} = {:>16.10} +- {:.2e}", e.value, e.err);
        }
        let _ = writeln!(s, "  delta0 = {:.6} (half the smallest Theta_eps)", l.delta0);
        let _ = writeln!(s, "  Mtilde is {} (sign reported, not asserted)", if l.m_tilde.value > 0.0 { "positive" } else { "negative" });
        let _ = writeln!(s, "\nTheta_eps vs Theta (1 - Mtilde rho); the fit also carries a rho^2 term");
        let _ = writeln!(
            s,
            "  {:>10} {:>16} {:>16} {:>12} {:>12} {:>12}",
            "eps", "Theta_eps", "Theta*(1-Mt rho)", "difference", "fit resid.", "noise"
        );
        for (k, r) in out.records.iter().enumerate() {
            let model = l.theta_star.value * (1.0 - l.m_tilde.value * r.rho);
            let resid = l.trajectory.as_ref().and_then(|t| t.residuals.get(k).copied());
            let _ = writeln!(
                s,
                "  {:>10.3e} {:>16.10} {:>16.10} {:>12.4e} {:>12} {:>12}",
                r.eps,
                r.theta_eps,
                model,
                r.theta_eps - model,
                resid.map_or("-".into(), |v| format!("{v:.4e}")),
                r.theta_noise.map_or("-".into(), |v| format!("{v:.4e}"))
            );
        }
        if let Some(t) = &l.trajectory {
            let _ = writeln!(
                s,
                "  trajectory fit: Theta = {:.8} +- {:.2e}, Mtilde = {:.6} +- {:.2e}, rho^2 coefficient {}, max residual {:.3e}",
                t.theta.value,
                t.theta.err,
                t.m_tilde.value,
                t.m_tilde.err,
                t.second_order.map_or("-".into(), |c| format!("{c:.4}")),
                t.max_abs_residual
            );
        }
    }
    let _ = writeln!(s, "\nPotential difference identity |C1 - C2 - rho Q/Theta| / max(|C1 - C2|, 1e-6)");
    for r in &out.records {
        let _ = writeln!(s, "  {:>10.3e} C1 = {:>14.6e} C2 = {:>14.6e} residual {:.3e}", r.eps, r.c1, r.c2, r.identity_residual);
    }
    let _ = writeln!(s, "\nGap gradients: u against the singular term, v1 against grad ubar");
    let _ = writeln!(
        s,
        "  {:>10} {:>14} {:>14} {:>14} {:>14} {:>14} {:>12}",
        "eps", "max|grad u|", "residual", "prefactor", "eps|grad v1|", "|grad(v1-ub)|", "outside v1"
    );
    for r in &out.records {
        let _ = writeln!(
            s,
            "  {:>10.3e} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6} {:>14.6e} {:>12.5}",
            r.eps,
            r.max_gap_grad_u,
            r.max_gap_residual,
            r.prefactor,
            r.eps * r.max_gap_grad_v1,
            r.max_gap_v1_residual,
            r.max_outside_grad_v1
        );
    }
    if let (Some(g), Some(rg)) = (agg.gradient_growth, agg.residual_growth) {
        let _ = writeln!(s, "  growth across sweep: max|grad u| x{g:.3}, residual x{rg:.3}");
    }
    if let Some(b) = &agg.blowup {
        let _ = writeln!(
            s,
            "  blow-up slope {:.4} +- {:.4} ({:.0}% CI [{:.4}, {:.4}])",
            b.slope,
            b.slope_err,
            100.0 * b.confidence,
            b.ci_low,
            b.ci_high
        );
    }
    if !out.failures.is_empty() || !agg.errors.is_empty() {
        let _ = writeln!(s, "\nProblems");
        for f in &out.failures {
            let _ = writeln!(s, "  solve at eps = {:e}: {}", f.eps, f.error);
        }
        for e in &agg.errors {
            let _ = writeln!(s, "  {e}");
        }
    }
    s
}

/// Write `sweep.csv`, `report.json` and `summary.txt` into `dir`.
pub fn report(exp: &Experiment, out: &SweepOutcome, dir: &Path) -> Result<String> {
    write_atomic(&dir.join("sweep.csv"), &write_csv(&out.records)?)?;
    let json = ReportJson { schema: REPORT_SCHEMA, csv_schema: CSV_SCHEMA, empty: out.is_empty(), config: &exp.config, outcome: out };
    write_atomic(&dir.join("report.json"), &serde_json::to_string_pretty(&json)?)?;
    let text = summary_text(exp, out);
    write_atomic(&dir.join("summary.txt"), &text)?;
    Ok(text)
}

/// Rebuild an outcome from a stored `sweep.csv`.
pub fn outcome_from_records(exp: &Experiment, records: Vec<SweepRecord>) -> Result<SweepOutcome> {
    let lambdas = exp.template.lambdas.clone();
    let desc = format!("{}|{}|{:?}", shape_desc(&exp.upper), shape_desc(&exp.lower), exp.outer);
    let eps: Vec<f64> = records.iter().map(|r| r.eps).collect();
    Ok(SweepOutcome {
        dim: exp.dim(),
        kappa_n: kappa(exp.dim(), &lambdas)?,
        aggregates: aggregate_records(&records, &lambdas, &desc),
        gap_integrals: if eps.is_empty() { Vec::new() } else { gap_integral_rows(exp, &eps)? },
        lambdas,
        records,
        failures: Vec::new(),
        symmetry: Vec::new(),
        asymptotic_3d: None,
        timings: Vec::new(),
        total_seconds: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{two_discs_config, ExperimentConfig, PhiSpec};

    #[test]
    fn single_solve_record() {
        let exp = two_discs_config(vec![1e-2]).resolve().unwrap();
        let a = run_solve(&exp, 1e-2).unwrap();
        let r = &a.record;
        assert!(r.theta_eps > 0.0);
        assert!(r.identity_residual <= 1e-12);
        assert!(r.is_finite());
        assert!(a.symmetry.iter().all(|(_, d)| *d < 1e-8));
        assert!(run_solve(&exp, 0.0).is_err());
    }

    #[test]
    fn constant_data_gives_unit_potentials() {
        let mut c = two_discs_config(vec![1e-2]);
        c.phi = PhiSpec::Constant { value: 1.0 };
        let a = run_solve(&c.resolve().unwrap(), 1e-2).unwrap();
        assert!((a.record.c1 - 1.0).abs() < 1e-9 && (a.record.c2 - 1.0).abs() < 1e-9);
        assert!(a.record.q_eps.abs() < 1e-9);
        assert!(a.record.max_gap_grad_u < 1e-6);
    }

    #[test]
    fn csv_round_trip_and_schema() {
        let exp = two_discs_config(vec![1e-2]).resolve().unwrap();
        let r = run_solve(&exp, 1e-2).unwrap().record;
        let text = write_csv(std::slice::from_ref(&r)).unwrap();
        assert!(text.starts_with("eps,rho,e1,e2,a11,a12,a21,a22,alpha1,alpha2,b1,b2,q_eps,theta_eps,c1,c2,"));
        let back = read_csv(&text).unwrap();
        let mut expect = r;
        expect.wall_time = 0.0;
        assert_eq!(back, vec![expect]);
        assert!(read_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn empty_sweep_is_marked() {
        let exp = two_discs_config(vec![]).resolve().unwrap();
        let out = run_sweep(&exp, Some(1)).unwrap();
        assert!(out.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let text = report(&exp, &out, dir.path()).unwrap();
        assert!(text.contains("EMPTY SWEEP"));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json["empty"], true);
    }

    #[test]
    fn three_dimensional_layer() {
        let text = r#"{"schema_version":1,
            "geometry":{"dim":3,"upper":{"kind":"disc","radius":1.0},"lower":{"kind":"disc","radius":1.0},
                        "outer":{"kind":"ball","radius":4.0}},
            "phi":{"family":"linear-xn"}, "eps":[1e-3,1e-5,1e-7],
            "synthetic_limits":{"q_star":2.0,"theta_star":4.0,"m_tilde":0.5}}"#;
        let exp = ExperimentConfig::from_json(text).unwrap().resolve().unwrap();
        let out = run_sweep(&exp, Some(1)).unwrap();
        let a3 = out.asymptotic_3d.as_ref().unwrap();
        assert!((a3.kappa3 - std::f64::consts::PI).abs() < 1e-12);
        let r = &a3.rows[1];
        assert!((r.prefactor.unwrap() - 0.5 / (1e5f64.ln() - 0.5)).abs() < 1e-14);
        // the quadratic model matches the closed form to O(eps)
        let r0 = exp.template.r0;
        for g in &out.gap_integrals {
            assert!((g.quadratic_quadrature - g.closed_form).abs() < 2.0 * std::f64::consts::PI * g.eps / (r0 * r0) + 1e-8);
        }
        let s = summary_text(&exp, &out);
        assert!(s.contains("3D asymptotic layer"));
    }
}

//! Experiment configuration: a versioned JSON document, strictly parsed.

use crate::error::{Error, Result};
use crate::field_solver::{BoundaryData, LinearSolver};
use crate::geometry::{translate_pair, BoundaryGraph, GapGeometry, InclusionShape, OuterDomain, OuterKind};
use crate::mesh::Resolution;
use crate::oracle::Parity;
use crate::quadrature::QuadOptions;
use crate::sparse::Preconditioner;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

fn cfg(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapeSpec {
    Disc { radius: f64 },
    Ellipse { semi_axes: Vec<f64> },
    PerturbedDisc { radius: f64, cubic: Vec<f64> },
}

impl ShapeSpec {
    pub fn build(&self, dim: usize) -> Result<InclusionShape> {
        match self {
            ShapeSpec::Disc { radius } => InclusionShape::disc(dim, *radius),
            ShapeSpec::Ellipse { semi_axes } => {
                if semi_axes.len() != dim {
                    return Err(cfg(format!("ellipse needs {dim} semi-axes")));
                }
                InclusionShape::ellipse(semi_axes.clone())
            }
            ShapeSpec::PerturbedDisc { radius, cubic } => InclusionShape::perturbed_disc(dim, *radius, cubic.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OuterSpec {
    Disc { radius: f64 },
    Ball { radius: f64 },
    RoundedRectangle { half_width: f64, half_height: f64, corner_radius: f64 },
}

fn default_clearance() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub dim: usize,
    pub upper: ShapeSpec,
    pub lower: ShapeSpec,
    pub outer: OuterSpec,
    /// Minimal distance between the inclusions and the container.
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    /// Lower bound on the relative curvatures at the contact point.
    #[serde(default)]
    pub kappa_lb: Option<f64>,
    /// Gap patch radius; defaults to the admissible maximum.
    #[serde(default)]
    pub patch_radius: Option<f64>,
}

/// Boundary data on the container.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhiSpec {
    Constant { value: f64 },
    LinearXn {
        #[serde(default = "one")]
        scale: f64,
    },
    /// `sum c x1^i xn^j` over `[i, j, c]` triples.
    Polynomial { terms: Vec<(u32, u32, f64)> },
    /// `amplitude cos(frequency theta + phase)` with `theta` the polar angle.
    Trigonometric {
        amplitude: f64,
        frequency: u32,
        #[serde(default)]
        phase: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl PhiSpec {
    pub fn boundary_data(&self) -> BoundaryData {
        match self.clone() {
            PhiSpec::Constant { value } => BoundaryData::constant(value),
            PhiSpec::LinearXn { scale } if scale == 1.0 => BoundaryData::linear_xn(),
            PhiSpec::LinearXn { scale } => BoundaryData::new(format!("{scale} x_n"), move |x| scale * x[1]),
            PhiSpec::Polynomial { terms } => {
                let desc = terms.iter().map(|(i, j, c)| format!("{c} x1^{i} xn^{j}")).collect::<Vec<_>>().join(" + ");
                BoundaryData::new(desc, move |x| {
                    terms.iter().map(|(i, j, c)| c * x[0].powi(*i as i32) * x[1].powi(*j as i32)).sum()
                })
            }
            PhiSpec::Trigonometric { amplitude, frequency, phase } => BoundaryData::new(
                format!("{amplitude} cos({frequency} theta + {phase})"),
                move |x| amplitude * (frequency as f64 * x[1].atan2(x[0]) + phase).cos(),
            ),
        }
    }

    /// Parity under `x_n -> -x_n`.
    pub fn parity(&self) -> Parity {
        let tol = 1e-14;
        match self {
            PhiSpec::Constant { .. } => Parity::Constant,
            PhiSpec::LinearXn { .. } => Parity::Odd,
            PhiSpec::Polynomial { terms } => {
                let live: Vec<_> = terms.iter().filter(|t| t.2 != 0.0).collect();
                if live.iter().all(|t| t.0 == 0 && t.1 == 0) {
                    Parity::Constant
                } else if live.iter().all(|t| t.1 % 2 == 1) {
                    Parity::Odd
                } else if live.iter().all(|t| t.1 % 2 == 0) {
                    Parity::Even
                } else {
                    Parity::None
                }
            }
            PhiSpec::Trigonometric { frequency, phase, .. } => {
                let s = phase.sin();
                let c = phase.cos();
                if *frequency == 0 {
                    Parity::Constant
                } else if s.abs() < tol {
                    Parity::Even
                } else if c.abs() < tol {
                    Parity::Odd
                } else {
                    Parity::None
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub gap_layers: Option<usize>,
    pub column_step: Option<f64>,
    pub arc_spacing: Option<f64>,
    pub arc_growth: Option<f64>,
    pub radial_growth: Option<f64>,
    pub max_nodes: Option<usize>,
    /// Uniform refinement factor applied on top of the values above.
    pub refinement: Option<f64>,
    /// Also solve on the twice-refined grid and extrapolate energies.
    #[serde(default)]
    pub richardson: bool,
}

impl GridSpec {
    pub fn resolution(&self) -> Result<Resolution> {
        let d = Resolution::default();
        let r = Resolution {
            gap_layers: self.gap_layers.unwrap_or(d.gap_layers),
            column_step: self.column_step.unwrap_or(d.column_step),
            arc_spacing: self.arc_spacing.unwrap_or(d.arc_spacing),
            arc_growth: self.arc_growth.unwrap_or(d.arc_growth),
            radial_growth: self.radial_growth.unwrap_or(d.radial_growth),
            max_nodes: self.max_nodes.unwrap_or(d.max_nodes),
        };
        let f = self.refinement.unwrap_or(1.0);
        if !(f > 0.0 && f.is_finite()) {
            return Err(cfg(format!("refinement factor must be positive, got {f}")));
        }
        let r = if f == 1.0 { r } else { r.refined(f) };
        r.validate().map_err(|e| cfg(e.to_string()))?;
        Ok(r)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SolverSpec {
    Cholesky,
    Pcg {
        #[serde(default = "default_precond")]
        preconditioner: String,
        #[serde(default = "default_cg_tol")]
        tol: f64,
    },
}

fn default_precond() -> String {
    "ic0".into()
}

fn default_cg_tol() -> f64 {
    1e-12
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec::Cholesky
    }
}

impl SolverSpec {
    pub fn linear_solver(&self) -> Result<LinearSolver> {
        match self {
            SolverSpec::Cholesky => Ok(LinearSolver::Cholesky),
            SolverSpec::Pcg { preconditioner, tol } => {
                let p = match preconditioner.as_str() {
                    "ic0" => Preconditioner::Ic0,
                    "jacobi" => Preconditioner::Jacobi,
                    other => return Err(cfg(format!("unknown preconditioner {other:?}"))),
                };
                if !(*tol > 0.0 && *tol < 1.0) {
                    return Err(cfg(format!("CG tolerance must lie in (0, 1), got {tol}")));
                }
                Ok(LinearSolver::Pcg { preconditioner: p, tol: *tol })
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    #[serde(default = "default_quad_tol")]
    pub abs_tol: f64,
}

fn default_quad_tol() -> f64 {
    1e-10
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { abs_tol: default_quad_tol() }
    }
}

/// Touching-limit constants supplied by hand, for the 3D asymptotic layer
/// where no field solve is available.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLimits {
    pub q_star: f64,
    pub theta_star: f64,
    pub m_tilde: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub geometry: GeometrySpec,
    pub phi: PhiSpec,
    pub eps: Vec<f64>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Reserved; the numerics are deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synthetic_limits: Option<SyntheticLimits>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| cfg(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(cfg(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        validate_eps(&self.eps)?;
        if !(self.quadrature.abs_tol > 0.0) {
            return Err(cfg("quadrature tolerance must be positive"));
        }
        if !(self.geometry.clearance >= 0.0) {
            return Err(cfg("clearance must be non-negative"));
        }
        let dim = self.geometry.dim;
        if dim != 2 && dim != 3 {
            return Err(cfg(format!("dim must be 2 or 3, got {dim}")));
        }
        let outer_dim = match self.geometry.outer {
            OuterSpec::Ball { .. } => 3,
            _ => 2,
        };
        if outer_dim != dim {
            return Err(cfg(format!("outer domain is {outer_dim}D but dim = {dim}")));
        }
        if dim == 2 && self.synthetic_limits.is_some() {
            return Err(cfg("synthetic_limits apply to the 3D asymptotic layer only"));
        }
        if let Some(s) = self.synthetic_limits {
            if !(s.theta_star > 0.0) || !s.q_star.is_finite() || !s.m_tilde.is_finite() {
                return Err(cfg("synthetic limits need finite values and theta_star > 0"));
            }
        }
        self.grid.resolution()?;
        self.solver.linear_solver()?;
        Ok(())
    }

    /// Geometry and container, checked for compatibility at `eps`.
    pub fn resolve(&self) -> Result<Experiment> {
        self.validate()?;
        let g = &self.geometry;
        let upper = g.upper.build(g.dim).map_err(|e| cfg(e.to_string()))?;
        let lower = g.lower.build(g.dim).map_err(|e| cfg(e.to_string()))?;
        let outer_kind = match g.outer {
            OuterSpec::Disc { radius } => OuterKind::Disc { radius },
            OuterSpec::Ball { radius } => OuterKind::Ball { radius },
            OuterSpec::RoundedRectangle { half_width, half_height, corner_radius } => {
                OuterKind::RoundedRectangle { half_width, half_height, corner_radius }
            }
        };
        let outer = OuterDomain::new(outer_kind, g.clearance).map_err(|e| cfg(e.to_string()))?;
        let kappa_lb = g.kappa_lb.unwrap_or(1e-9);
        let eps0 = self.eps.first().copied().unwrap_or(1e-2);
        let template = GapGeometry::new(
            BoundaryGraph::Shape(upper.clone()),
            BoundaryGraph::Shape(lower.clone()),
            eps0,
            kappa_lb,
            g.patch_radius,
        )
        .map_err(|e| cfg(e.to_string()))?;
        // every container kind is centered, so equal shapes make the setup mirror symmetric
        let mirror_symmetric = g.upper == g.lower;
        let exp = Experiment {
            config: self.clone(),
            upper,
            lower,
            outer,
            template,
            resolution: self.grid.resolution()?,
            solver: self.solver.linear_solver()?,
            quad: QuadOptions::abs(self.quadrature.abs_tol),
            mirror_symmetric,
        };
        for &e in &self.eps {
            exp.check_eps(e)?;
        }
        Ok(exp)
    }
}

pub fn validate_eps(eps: &[f64]) -> Result<()> {
    if let Some(e) = eps.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(cfg(format!("every eps must lie in (0, 1), got {e}")));
    }
    if eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(cfg("eps list must be strictly decreasing"));
    }
    Ok(())
}

/// A resolved configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub upper: InclusionShape,
    pub lower: InclusionShape,
    pub outer: OuterDomain,
    /// Gap geometry; `with_eps` gives the instance for each sweep entry.
    pub template: GapGeometry,
    pub resolution: Resolution,
    pub solver: LinearSolver,
    pub quad: QuadOptions,
    pub mirror_symmetric: bool,
}

impl Experiment {
    pub fn dim(&self) -> usize {
        self.template.dim
    }

    pub fn geometry(&self, eps: f64) -> Result<GapGeometry> {
        self.template.with_eps(eps)
    }

    /// The inclusions must fit in the container at this separation.
    pub fn check_eps(&self, eps: f64) -> Result<()> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(cfg(format!("eps must lie in (0, 1), got {eps}")));
        }
        let pair = translate_pair(self.upper.clone(), self.lower.clone(), eps).map_err(|e| cfg(e.to_string()))?;
        if self.dim() == 2 {
            self.outer.validate_pair(&pair).map_err(|e| cfg(e.to_string()))?;
        }
        Ok(())
    }

    pub fn output_dir(&self, overridden: Option<&Path>) -> PathBuf {
        overridden
            .map(Path::to_path_buf)
            .or_else(|| self.config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// The two-disc reference configuration: unit discs in a disc of radius 4,
/// `phi = x_n`.
pub fn two_discs_config(eps: Vec<f64>) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: Some("two unit discs".into()),
        geometry: GeometrySpec {
            dim: 2,
            upper: ShapeSpec::Disc { radius: 1.0 },
            lower: ShapeSpec::Disc { radius: 1.0 },
            outer: OuterSpec::Disc { radius: 4.0 },
            clearance: default_clearance(),
            kappa_lb: Some(1.0),
            patch_radius: None,
        },
        phi: PhiSpec::LinearXn { scale: 1.0 },
        eps,
        grid: GridSpec::default(),
        solver: SolverSpec::Cholesky,
        quadrature: QuadratureSpec::default(),
        output_dir: None,
        seed: 0,
        synthetic_limits: None,
    }
}

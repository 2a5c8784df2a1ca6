//! P1 finite-element solves of the three auxiliary harmonic problems, flux
//! extraction and the 2x2 flux system that fixes the inclusion potentials.
//!
//! Flux conventions: `flux_inclusion(v, i)` is the normal derivative taken
//! from the perforated domain, with the normal pointing into `D_i`. So
//! `flux_inclusion(v1, 1)` is positive and equals the Dirichlet energy of
//! `v1`. `flux_outer(v)` uses the outward normal of the container.
//! Discretely both are reaction sums `(K v)_b` over the boundary nodes.
//! That is the consistent flux of the Galerkin scheme, and it satisfies the
//! divergence theorem exactly.

use crate::error::{invalid, Error, Result};
use crate::mesh::{GradedGrid, NodeTag};
use crate::sparse::{norm2, pcg, CsrMatrix, EnvelopeCholesky, Preconditioner};
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearSolver {
    /// Envelope Cholesky on a reverse Cuthill-McKee ordering.
    Cholesky,
    /// Preconditioned conjugate gradients to relative residual `tol`.
    Pcg { preconditioner: Preconditioner, tol: f64 },
}

impl Default for LinearSolver {
    fn default() -> Self {
        LinearSolver::Cholesky
    }
}

enum Factor {
    Cholesky(EnvelopeCholesky),
    Pcg { preconditioner: Preconditioner, tol: f64 },
}

/// A mesh with its assembled stiffness matrix and a factorization of the
/// interior block, shared by every field solved on it.
pub struct Discretization {
    pub grid: GradedGrid,
    pub stiffness: CsrMatrix,
    free: Vec<usize>,
    interior: CsrMatrix,
    factor: Factor,
}

impl fmt::Debug for Discretization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Discretization")
            .field("nodes", &self.grid.node_count())
            .field("triangles", &self.grid.triangles.len())
            .field("free", &self.free.len())
            .finish()
    }
}

/// Gradient-of-hat-function coefficients and area of a triangle.
fn shape_coefficients(grid: &GradedGrid, t: usize) -> ([f64; 3], [f64; 3], f64) {
    let [i, j, k] = grid.triangles[t];
    let (p, q, r) = (grid.nodes[i], grid.nodes[j], grid.nodes[k]);
    let b = [q[1] - r[1], r[1] - p[1], p[1] - q[1]];
    let c = [r[0] - q[0], p[0] - r[0], q[0] - p[0]];
    let area = 0.5 * (b[0] * c[1] - b[1] * c[0]);
    (b, c, area)
}

impl Discretization {
    pub fn new(grid: GradedGrid, solver: LinearSolver) -> Result<Arc<Self>> {
        let n = grid.node_count();
        let mut trip = Vec::with_capacity(9 * grid.triangles.len());
        for t in 0..grid.triangles.len() {
            let (b, c, area) = shape_coefficients(&grid, t);
            let tri = grid.triangles[t];
            for a in 0..3 {
                for e in 0..3 {
                    trip.push((tri[a], tri[e], (b[a] * b[e] + c[a] * c[e]) / (4.0 * area)));
                }
            }
        }
        let stiffness = CsrMatrix::from_triplets(n, &trip);
        let free: Vec<usize> = (0..n).filter(|&i| !grid.tags[i].is_dirichlet()).collect();
        if free.is_empty() {
            return Err(invalid("mesh has no interior nodes"));
        }
        let interior = stiffness.principal_submatrix(&free);
        let factor = match solver {
            LinearSolver::Cholesky => Factor::Cholesky(EnvelopeCholesky::factor(&interior)?),
            LinearSolver::Pcg { preconditioner, tol } => {
                if !(tol > 0.0) {
                    return Err(invalid("CG tolerance must be positive"));
                }
                Factor::Pcg { preconditioner, tol }
            }
        };
        Ok(Arc::new(Self { grid, stiffness, free, interior, factor }))
    }

    /// Solve the Laplace equation with Dirichlet data `data(node, tag, x)`
    /// on every tagged node.
    pub fn solve_dirichlet(
        self: &Arc<Self>,
        label: FieldLabel,
        data: impl Fn(usize, NodeTag, [f64; 2]) -> f64,
    ) -> Result<DiscreteField> {
        let g = &self.grid;
        let mut values = vec![0.0; g.node_count()];
        for (i, (&tag, &p)) in g.tags.iter().zip(&g.nodes).enumerate() {
            if tag.is_dirichlet() {
                let v = data(i, tag, p);
                if !v.is_finite() {
                    return Err(invalid(format!("boundary data is not finite at {p:?}")));
                }
                values[i] = v;
            }
        }
        let rhs: Vec<f64> = self
            .free
            .iter()
            .map(|&i| {
                -self
                    .stiffness
                    .row(i)
                    .filter(|&(j, _)| g.tags[j].is_dirichlet())
                    .map(|(j, k)| k * values[j])
                    .sum::<f64>()
            })
            .collect();
        let rhs_norm = norm2(&rhs);
        if rhs_norm > 0.0 {
            let x = match &self.factor {
                Factor::Cholesky(f) => f.solve_refined(&self.interior, &rhs),
                Factor::Pcg { preconditioner, tol } => {
                    pcg(&self.interior, &rhs, None, *tol, 20 * self.free.len() + 100, *preconditioner)?.x
                }
            };
            let ax = self.interior.mul_vec(&x);
            let res = norm2(&ax.iter().zip(&rhs).map(|(a, b)| a - b).collect::<Vec<_>>()) / rhs_norm;
            let limit = match self.factor {
                Factor::Cholesky(_) => 1e-9,
                Factor::Pcg { tol, .. } => 10.0 * tol,
            };
            if !(res <= limit) {
                return Err(Error::Solver { message: "interior residual too large".into(), residual: res });
            }
            for (&i, v) in self.free.iter().zip(x) {
                values[i] = v;
            }
        }
        Ok(DiscreteField { disc: Arc::clone(self), values, label })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldLabel {
    V0,
    V1,
    V2,
    U,
    Custom(String),
}

/// Nodal values on a discretization.
#[derive(Clone)]
pub struct DiscreteField {
    pub disc: Arc<Discretization>,
    pub values: Vec<f64>,
    pub label: FieldLabel,
}

impl fmt::Debug for DiscreteField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteField").field("label", &self.label).field("nodes", &self.values.len()).finish()
    }
}

impl DiscreteField {
    pub fn grid(&self) -> &GradedGrid {
        &self.disc.grid
    }

    /// Another field on the same mesh with the given nodal values.
    pub fn with_values(&self, values: Vec<f64>, label: FieldLabel) -> Self {
        Self { disc: Arc::clone(&self.disc), values, label }
    }

    pub fn same_grid(&self, other: &DiscreteField) -> bool {
        Arc::ptr_eq(&self.disc, &other.disc)
    }

    /// Reaction `(K v)_b` at every node; zero up to solver error at
    /// interior nodes.
    pub fn reactions(&self) -> Vec<f64> {
        self.disc.stiffness.mul_vec(&self.values)
    }
}

/// Dirichlet data on the container boundary.
#[derive(Clone)]
pub struct BoundaryData {
    pub description: String,
    f: Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>,
}

impl fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BoundaryData({})", self.description)
    }
}

impl BoundaryData {
    pub fn new(description: impl Into<String>, f: impl Fn([f64; 2]) -> f64 + Send + Sync + 'static) -> Self {
        Self { description: description.into(), f: Arc::new(f) }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("constant {c}"), move |_| c)
    }

    pub fn linear_xn() -> Self {
        Self::new("x_n", |p| p[1])
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        (self.f)(p)
    }
}

/// `v_i`: one on `D_i`, zero on the other inclusion and on the container.
pub fn solve_vi(disc: &Arc<Discretization>, i: u8) -> Result<DiscreteField> {
    if i != 1 && i != 2 {
        return Err(invalid(format!("inclusion index must be 1 or 2, got {i}")));
    }
    let label = if i == 1 { FieldLabel::V1 } else { FieldLabel::V2 };
    disc.solve_dirichlet(label, |_, tag, _| if tag == NodeTag::Inclusion(i) { 1.0 } else { 0.0 })
}

/// `v_0`: zero on both inclusions and `phi` on the container.
pub fn solve_v0(disc: &Arc<Discretization>, phi: &BoundaryData) -> Result<DiscreteField> {
    disc.solve_dirichlet(FieldLabel::V0, |_, tag, p| if tag == NodeTag::Outer { phi.eval(p) } else { 0.0 })
}

fn reaction_sum(field: &DiscreteField, tag: NodeTag) -> f64 {
    let k = &field.disc.stiffness;
    field
        .grid()
        .boundary_nodes(tag)
        .map(|b| k.row(b).map(|(j, v)| v * field.values[j]).sum::<f64>())
        .sum()
}

/// Flux of `field` into inclusion `i`.
pub fn flux_inclusion(field: &DiscreteField, i: u8) -> f64 {
    reaction_sum(field, NodeTag::Inclusion(i))
}

/// Outward flux of `field` through the container boundary.
pub fn flux_outer(field: &DiscreteField) -> f64 {
    reaction_sum(field, NodeTag::Outer)
}

/// Discrete Dirichlet form `v^T K w`.
pub fn dirichlet_form(v: &DiscreteField, w: &DiscreteField) -> f64 {
    v.disc.stiffness.bilinear(&v.values, &w.values)
}

/// Piecewise-constant gradient, one vector per triangle.
pub fn gradient(field: &DiscreteField) -> Vec<[f64; 2]> {
    triangle_gradients(field.grid(), &field.values)
}

pub(crate) fn triangle_gradients(grid: &GradedGrid, values: &[f64]) -> Vec<[f64; 2]> {
    (0..grid.triangles.len())
        .map(|t| {
            let (b, c, area) = shape_coefficients(grid, t);
            let tri = grid.triangles[t];
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..3 {
                gx += b[a] * values[tri[a]];
                gy += c[a] * values[tri[a]];
            }
            [gx / (2.0 * area), gy / (2.0 * area)]
        })
        .collect()
}

/// Triangle selection for gradient maxima.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    All,
    Gap,
    OutsideGap,
}

impl Region {
    pub fn contains(self, grid: &GradedGrid, t: usize) -> bool {
        match self {
            Region::All => true,
            Region::Gap => grid.in_gap[t],
            Region::OutsideGap => !grid.in_gap[t],
        }
    }
}

/// Largest gradient magnitude over a region.
pub fn max_gradient(field: &DiscreteField, region: Region) -> f64 {
    let grid = field.grid();
    gradient(field)
        .iter()
        .enumerate()
        .filter(|(t, _)| region.contains(grid, *t))
        .map(|(_, g)| g[0].hypot(g[1]))
        .fold(0.0, f64::max)
}

/// Dirichlet energy by cell quadrature of the piecewise-constant gradient.
pub fn energy_of(field: &DiscreteField) -> f64 {
    let grid = field.grid();
    gradient(field)
        .iter()
        .enumerate()
        .map(|(t, g)| grid.area(t) * (g[0] * g[0] + g[1] * g[1]))
        .sum()
}

/// The flux matrix, right-hand side and inclusion potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxSystem {
    /// `a[i][j]`: flux of `v_(j+1)` into inclusion `i+1`.
    pub a: [[f64; 2]; 2],
    /// `b[i] = -f[i]`.
    pub b: [f64; 2],
    /// Flux of `v_0` into each inclusion.
    pub f: [f64; 2],
    /// Outward container flux of `v_1`, `v_2`.
    pub alpha: [f64; 2],
    pub c1: f64,
    pub c2: f64,
    /// `C1 - C2` as solved for directly.
    pub c_diff: f64,
}

/// Assemble and solve the flux system.
///
/// Fluxes are evaluated as Galerkin forms (`a_ij = v_i^T K v_j`,
/// `f_i = v_i^T K v_0`, `alpha_i = -v_i^T K (v_1 + v_2)`). These equal the
/// boundary reaction sums up to solver error, and they make `a` exactly
/// symmetric. The system is solved by Cramer's rule in the unknowns
/// `(C1 - C2, C2)`; the determinant of that form is `Theta_eps / rho`.
pub fn assemble_flux_system(v1: &DiscreteField, v2: &DiscreteField, v0: &DiscreteField) -> Result<FluxSystem> {
    if !(v1.same_grid(v2) && v1.same_grid(v0)) {
        return Err(invalid("flux system needs fields on one discretization"));
    }
    let a11 = dirichlet_form(v1, v1);
    let a12 = dirichlet_form(v1, v2);
    let a22 = dirichlet_form(v2, v2);
    let f = [dirichlet_form(v1, v0), dirichlet_form(v2, v0)];
    let sum: Vec<f64> = v1.values.iter().zip(&v2.values).map(|(a, b)| a + b).collect();
    let s = v1.with_values(sum, FieldLabel::Custom("v1+v2".into()));
    let alpha = [-dirichlet_form(v1, &s), -dirichlet_form(v2, &s)];
    let b = [-f[0], -f[1]];
    // a11 D - alpha1 S = b1, a21 D - alpha2 S = b2 with D = C1 - C2, S = C2
    let det = -a11 * alpha[1] + a12 * alpha[0];
    let scale = a11.abs() * alpha[1].abs() + a12.abs() * alpha[0].abs();
    if !(det.abs() > 1e-13 * scale) || !det.is_finite() {
        return Err(Error::Degenerate(format!("flux system determinant {det:e} vanishes")));
    }
    let c_diff = (f[0] * alpha[1] - f[1] * alpha[0]) / det;
    let c2 = (a11 * b[1] - a12 * b[0]) / det;
    let c1 = c_diff + c2;
    Ok(FluxSystem { a: [[a11, a12], [a12, a22]], b, f, alpha, c1, c2, c_diff })
}

/// `u = C1 v1 + C2 v2 + v0`.
pub fn assemble_u(fs: &FluxSystem, v1: &DiscreteField, v2: &DiscreteField, v0: &DiscreteField) -> Result<DiscreteField> {
    if !(v1.same_grid(v2) && v1.same_grid(v0)) {
        return Err(invalid("u needs fields on one discretization"));
    }
    let values = (0..v1.values.len())
        .map(|i| fs.c1 * v1.values[i] + fs.c2 * v2.values[i] + v0.values[i])
        .collect();
    Ok(v1.with_values(values, FieldLabel::U))
}

//! Independent references for the solver: exact radial solutions on
//! annuli, Richardson extrapolation across refinement levels, and the exact
//! relations implied by mirror symmetry.

use crate::error::{invalid, Error, Result};
use crate::field_solver::{dirichlet_form, solve_vi, DiscreteField, FluxSystem, LinearSolver};
use crate::field_solver::Discretization;
use crate::mesh::{annulus_grid, GradedGrid};
use crate::sparse::Preconditioner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Harmonic function equal to 1 on `|x| = r_in` and 0 on `|x| = r_out`.
pub fn annulus_exact(r_in: f64, r_out: f64, x: &[f64]) -> Result<f64> {
    if !(r_in > 0.0 && r_out > r_in) {
        return Err(invalid("annulus needs 0 < r_in < r_out"));
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-12 * r_out;
    if !(r >= r_in - tol && r <= r_out + tol) {
        return Err(Error::Domain(format!("|x| = {r} outside the annulus [{r_in}, {r_out}]")));
    }
    match x.len() {
        2 => Ok((r / r_out).ln() / (r_in / r_out).ln()),
        3 => Ok((1.0 / r - 1.0 / r_out) / (1.0 / r_in - 1.0 / r_out)),
        d => Err(invalid(format!("dimension {d} not supported"))),
    }
}

/// Dirichlet energy of [`annulus_exact`].
pub fn annulus_energy(dim: usize, r_in: f64, r_out: f64) -> Result<f64> {
    if !(r_in > 0.0 && r_out > r_in) {
        return Err(invalid("annulus needs 0 < r_in < r_out"));
    }
    match dim {
        2 => Ok(2.0 * PI / (r_out / r_in).ln()),
        3 => Ok(4.0 * PI / (1.0 / r_in - 1.0 / r_out)),
        d => Err(invalid(format!("dimension {d} not supported"))),
    }
}

/// A closed-form reference together with where it applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleCase {
    pub name: &'static str,
    pub dim: usize,
    pub r_in: f64,
    pub r_out: f64,
}

impl OracleCase {
    pub fn annulus(dim: usize, r_in: f64, r_out: f64) -> Result<Self> {
        annulus_energy(dim, r_in, r_out)?;
        Ok(Self { name: "annulus", dim, r_in, r_out })
    }

    pub fn applies(&self, x: &[f64]) -> bool {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tol = 1e-12 * self.r_out;
        x.len() == self.dim && r >= self.r_in - tol && r <= self.r_out + tol
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if !self.applies(x) {
            return Err(Error::Domain(format!("{} oracle does not apply at {x:?}", self.name)));
        }
        annulus_exact(self.r_in, self.r_out, x)
    }

    pub fn energy(&self) -> f64 {
        annulus_energy(self.dim, self.r_in, self.r_out).expect("validated on construction")
    }
}

/// Richardson extrapolation of a sequence computed with mesh size halved
/// at each level.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Refinement {
    pub values: Vec<f64>,
    /// Second-order extrapolation from the two finest levels.
    pub extrapolated: f64,
    pub error_estimate: f64,
    /// `log2` of successive difference ratios.
    pub observed_orders: Vec<f64>,
}

impl Refinement {
    pub fn observed_order(&self) -> f64 {
        *self.observed_orders.last().expect("at least three levels")
    }
}

pub fn refine_oracle(values: &[f64]) -> Result<Refinement> {
    let n = values.len();
    if n < 3 {
        return Err(invalid("refinement study needs at least 3 levels"));
    }
    let diffs: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.windows(2).any(|d| d[0] * d[1] <= 0.0) || diffs.contains(&0.0) {
        return Err(Error::Fit(format!("non-monotone convergence: {values:?}")));
    }
    let observed_orders: Vec<f64> = diffs.windows(2).map(|d| (d[0] / d[1]).log2()).collect();
    let rich = |a: f64, b: f64| b + (b - a) / 3.0;
    let extrapolated = rich(values[n - 2], values[n - 1]);
    let previous = rich(values[n - 3], values[n - 2]);
    Ok(Refinement {
        values: values.to_vec(),
        extrapolated,
        error_estimate: (extrapolated - previous).abs(),
        observed_orders,
    })
}

/// One level of the annulus study.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnulusLevel {
    pub n_theta: usize,
    pub nodes: usize,
    pub max_nodal_error: f64,
    /// Error of the piecewise linear solution at triangle centroids.
    pub max_centroid_error: f64,
    pub energy: f64,
    pub energy_rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnulusStudy {
    pub exact_energy: f64,
    pub levels: Vec<AnnulusLevel>,
    pub energy_refinement: Refinement,
}

/// Ray count of the default annulus budget.
pub const ANNULUS_DEFAULT_RAYS: usize = 512;

pub fn solve_annulus(r_in: f64, r_out: f64, n_theta: usize) -> Result<DiscreteField> {
    let grid = annulus_grid(r_in, r_out, n_theta)?;
    // the envelope of a periodic grid grows with the ray count
    let solver = if grid.node_count() <= 20_000 {
        LinearSolver::Cholesky
    } else {
        LinearSolver::Pcg { preconditioner: Preconditioner::Ic0, tol: 1e-12 }
    };
    solve_vi(&Discretization::new(grid, solver)?, 1)
}

pub fn annulus_level(r_in: f64, r_out: f64, n_theta: usize) -> Result<AnnulusLevel> {
    let case = OracleCase::annulus(2, r_in, r_out)?;
    let v = solve_annulus(r_in, r_out, n_theta)?;
    let grid: &GradedGrid = v.grid();
    let mut max_nodal_error = 0.0f64;
    for (p, u) in grid.nodes.iter().zip(&v.values) {
        max_nodal_error = max_nodal_error.max((u - case.eval(p)?).abs());
    }
    let mut max_centroid_error = 0.0f64;
    for tri in &grid.triangles {
        let c = [0, 1].map(|d| tri.iter().map(|&i| grid.nodes[i][d]).sum::<f64>() / 3.0);
        let uh = tri.iter().map(|&i| v.values[i]).sum::<f64>() / 3.0;
        // centroids of boundary triangles can sit just outside the circles
        let r = c[0].hypot(c[1]).clamp(r_in, r_out);
        let exact = (r / r_out).ln() / (r_in / r_out).ln();
        max_centroid_error = max_centroid_error.max((uh - exact).abs());
    }
    let energy = dirichlet_form(&v, &v);
    Ok(AnnulusLevel {
        n_theta,
        nodes: grid.node_count(),
        max_nodal_error,
        max_centroid_error,
        energy,
        energy_rel_error: (energy - case.energy()).abs() / case.energy(),
    })
}

/// Solve on successively doubled ray counts and extrapolate the energy.
pub fn annulus_study(r_in: f64, r_out: f64, rays: &[usize]) -> Result<AnnulusStudy> {
    if rays.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(invalid("ray counts must double from level to level"));
    }
    let levels = rays.iter().map(|&n| annulus_level(r_in, r_out, n)).collect::<Result<Vec<_>>>()?;
    let energies: Vec<f64> = levels.iter().map(|l| l.energy).collect();
    Ok(AnnulusStudy {
        exact_energy: annulus_energy(2, r_in, r_out)?,
        levels,
        energy_refinement: refine_oracle(&energies)?,
    })
}

/// Parity of boundary data under `x_n -> -x_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parity {
    Odd,
    Even,
    Constant,
    None,
}

/// Exact consequences of mirror symmetry in the contact plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymmetryRelation {
    /// `v2(x', -x_n) = v1(x', x_n)`.
    MirrorPotentials,
    /// `u(x', -x_n) = -u(x', x_n)`.
    OddSolution,
    /// `C1 + C2 = 0`.
    OppositePotentials,
    /// `C1 = C2`, hence no singular term.
    EqualPotentials,
    /// `u = 1` at every node.
    UnitSolution,
}

pub fn symmetry_oracle(mirror_symmetric: bool, parity: Parity) -> Vec<SymmetryRelation> {
    use SymmetryRelation::*;
    if !mirror_symmetric {
        return Vec::new();
    }
    let mut rel = vec![MirrorPotentials];
    match parity {
        Parity::Odd => rel.extend([OddSolution, OppositePotentials]),
        Parity::Even => rel.push(EqualPotentials),
        Parity::Constant => rel.extend([EqualPotentials, UnitSolution]),
        Parity::None => {}
    }
    rel
}

/// Index of the mirror image `(x', -x_n)` of every node; `None` when the
/// grid is not symmetric to within `tol`.
pub fn mirror_map(grid: &GradedGrid, tol: f64) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..grid.node_count()).collect();
    order.sort_by(|&a, &b| grid.nodes[a][0].total_cmp(&grid.nodes[b][0]));
    let xs: Vec<f64> = order.iter().map(|&i| grid.nodes[i][0]).collect();
    (0..grid.node_count())
        .map(|i| {
            let [x, y] = grid.nodes[i];
            let lo = xs.partition_point(|&v| v < x - tol);
            let hi = xs.partition_point(|&v| v <= x + tol);
            order[lo..hi]
                .iter()
                .map(|&j| (j, (grid.nodes[j][1] + y).abs() + (grid.nodes[j][0] - x).abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .filter(|(_, d)| *d < tol)
                .map(|(j, _)| j)
        })
        .collect()
}

/// Largest violation of each relation, in absolute terms.
pub fn check_relations(
    relations: &[SymmetryRelation],
    v1: &DiscreteField,
    v2: &DiscreteField,
    u: &DiscreteField,
    fs: &FluxSystem,
) -> Result<Vec<(SymmetryRelation, f64)>> {
    let map = mirror_map(v1.grid(), 1e-9).ok_or_else(|| Error::Geometry("grid is not mirror symmetric".into()))?;
    let worst = |f: &dyn Fn(usize) -> f64| (0..map.len()).map(f).fold(0.0f64, f64::max);
    Ok(relations
        .iter()
        .map(|&r| {
            let d = match r {
                SymmetryRelation::MirrorPotentials => worst(&|i| (v2.values[map[i]] - v1.values[i]).abs()),
                SymmetryRelation::OddSolution => worst(&|i| (u.values[map[i]] + u.values[i]).abs()),
                SymmetryRelation::OppositePotentials => (fs.c1 + fs.c2).abs(),
                SymmetryRelation::EqualPotentials => fs.c_diff.abs(),
                SymmetryRelation::UnitSolution => worst(&|i| (u.values[i] - 1.0).abs()),
            };
            (r, d)
        })
        .collect())
}

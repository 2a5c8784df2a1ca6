//! Inclusion shapes, the epsilon-translated pair, the outer container and
//! the local gap profile.
//!
//! Every inclusion is described in a canonical frame in which it lies above
//! the origin and touches it at its lowest point with a horizontal tangent.
//! The contact axis is the last coordinate. The upper inclusion is used as
//! is; the lower inclusion is the mirror image of its canonical shape, so
//! near the contact point its boundary is the graph of `-g(x')` where `g` is
//! the canonical graph.

use crate::error::{invalid, Error, Result};
use std::f64::consts::PI;

/// Which side of the contact plane an inclusion occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Lower,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Upper => 1.0,
            Side::Lower => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeKind {
    /// Disc in 2D, ball in 3D.
    Disc { radius: f64 },
    /// Axis-aligned ellipse/ellipsoid. Horizontal semi-axes first, the
    /// vertical (contact-axis) semi-axis last.
    Ellipse { semi_axes: Vec<f64> },
    /// Disc/ball whose radial function carries a cubic perturbation that
    /// shows up as `sum C_a x'^a` in the contact graph. In 2D `cubic = [C3]`;
    /// in 3D `cubic = [C30, C21, C12, C03]`.
    PerturbedDisc { radius: f64, cubic: Vec<f64> },
}

/// A convex inclusion together with the center it was specified with.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionShape {
    dim: usize,
    kind: ShapeKind,
    center: Vec<f64>,
    // set when the caller pinned the center; placement then validates it
    explicit_center: bool,
}

impl InclusionShape {
    pub fn disc(dim: usize, radius: f64) -> Result<Self> {
        check_dim(dim)?;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid(format!("disc radius must be positive, got {radius}")));
        }
        Self::build(dim, ShapeKind::Disc { radius })
    }

    pub fn ellipse(semi_axes: Vec<f64>) -> Result<Self> {
        let dim = semi_axes.len();
        check_dim(dim)?;
        if semi_axes.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(invalid("ellipse semi-axes must be positive"));
        }
        Self::build(dim, ShapeKind::Ellipse { semi_axes })
    }

    pub fn perturbed_disc(dim: usize, radius: f64, cubic: Vec<f64>) -> Result<Self> {
        check_dim(dim)?;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid(format!("disc radius must be positive, got {radius}")));
        }
        let expected = if dim == 2 { 1 } else { 4 };
        if cubic.len() != expected {
            return Err(invalid(format!(
                "{dim}D cubic perturbation needs {expected} coefficients, got {}",
                cubic.len()
            )));
        }
        let shape = Self::build(dim, ShapeKind::PerturbedDisc { radius, cubic })?;
        shape.check_convexity()?;
        Ok(shape)
    }

    fn build(dim: usize, kind: ShapeKind) -> Result<Self> {
        let mut s = Self { dim, kind, center: vec![0.0; dim], explicit_center: false };
        s.center = s.canonical_center(Side::Upper);
        Ok(s)
    }

    /// Override the center. Placement checks that the center puts the
    /// lowest (or highest) point of the shape at the origin.
    pub fn with_center(mut self, center: Vec<f64>) -> Result<Self> {
        if center.len() != self.dim {
            return Err(invalid("center dimension mismatch"));
        }
        self.center = center;
        self.explicit_center = true;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ShapeKind {
        &self.kind
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Height of the center above the contact point in the canonical frame.
    pub fn center_height(&self) -> f64 {
        match &self.kind {
            ShapeKind::Disc { radius } | ShapeKind::PerturbedDisc { radius, .. } => *radius,
            ShapeKind::Ellipse { semi_axes } => semi_axes[self.dim - 1],
        }
    }

    /// The center that makes the shape tangent to the contact plane at the
    /// origin from the given side.
    pub fn canonical_center(&self, side: Side) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        c[self.dim - 1] = side.sign() * self.center_height();
        c
    }

    pub fn min_radius(&self) -> f64 {
        match &self.kind {
            ShapeKind::Disc { radius } | ShapeKind::PerturbedDisc { radius, .. } => *radius,
            ShapeKind::Ellipse { semi_axes } => {
                semi_axes.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Largest horizontal extent, used to size outer-domain checks.
    pub fn max_extent(&self) -> f64 {
        match &self.kind {
            ShapeKind::Disc { radius } => 2.0 * radius,
            ShapeKind::PerturbedDisc { radius, cubic } => {
                let c: f64 = cubic.iter().map(|v| v.abs()).sum();
                2.0 * radius + radius.powi(3) * c
            }
            ShapeKind::Ellipse { semi_axes } => {
                2.0 * semi_axes.iter().copied().fold(0.0, f64::max)
            }
        }
    }

    /// Cubic form `P(w)` of the perturbation evaluated at a horizontal vector.
    fn cubic_form(cubic: &[f64], w: &[f64]) -> f64 {
        match w.len() {
            1 => cubic[0] * w[0].powi(3),
            _ => {
                let (a, b) = (w[0], w[1]);
                cubic[0] * a * a * a + cubic[1] * a * a * b + cubic[2] * a * b * b + cubic[3] * b * b * b
            }
        }
    }

    /// Radial function of the perturbed disc along the unit direction
    /// `omega` measured from the center.
    fn perturbed_radius(radius: f64, cubic: &[f64], omega_h: &[f64]) -> f64 {
        radius - radius.powi(3) * Self::cubic_form(cubic, omega_h)
    }

    /// Horizontal limit of the contact graph along unit horizontal direction `e`.
    fn graph_reach(&self, e: &[f64]) -> f64 {
        match &self.kind {
            ShapeKind::Disc { radius } => *radius,
            ShapeKind::Ellipse { semi_axes } => {
                let q: f64 = e.iter().zip(semi_axes).map(|(x, a)| (x / a).powi(2)).sum();
                1.0 / q.sqrt()
            }
            ShapeKind::PerturbedDisc { radius, cubic } => {
                Self::perturbed_radius(*radius, cubic, e)
            }
        }
    }

    /// Lower boundary of the canonical shape as a graph over `x'`.
    pub fn graph(&self, xp: &[f64]) -> Result<f64> {
        let s = norm(xp);
        match &self.kind {
            ShapeKind::Disc { radius } => {
                let r = *radius;
                if s >= r {
                    return Err(Error::Domain(format!("|x'|={s} outside graph of disc radius {r}")));
                }
                // r - sqrt(r^2 - s^2) written without cancellation
                Ok(s * s / (r + (r * r - s * s).sqrt()))
            }
            ShapeKind::Ellipse { semi_axes } => {
                let b = semi_axes[self.dim - 1];
                let q: f64 = xp.iter().zip(semi_axes).map(|(x, a)| (x / a).powi(2)).sum();
                if q >= 1.0 {
                    return Err(Error::Domain(format!("x'={xp:?} outside ellipse graph")));
                }
                Ok(b * q / (1.0 + (1.0 - q).sqrt()))
            }
            ShapeKind::PerturbedDisc { radius, cubic } => {
                if s == 0.0 {
                    return Ok(0.0);
                }
                let e: Vec<f64> = xp.iter().map(|x| x / s).collect();
                let psi = self.perturbed_polar_angle(*radius, cubic, &e, s)?;
                let w: Vec<f64> = e.iter().map(|x| x * psi.sin()).collect();
                let rho = Self::perturbed_radius(*radius, cubic, &w);
                // radius - rho*cos(psi), rearranged to keep relative accuracy near 0
                let one_minus_cos = 2.0 * (0.5 * psi).sin().powi(2);
                Ok((radius - rho) + rho * one_minus_cos)
            }
        }
    }

    /// Solve `rho(psi) sin(psi) = s` along horizontal direction `e`.
    fn perturbed_polar_angle(&self, radius: f64, cubic: &[f64], e: &[f64], s: f64) -> Result<f64> {
        let f = |psi: f64| {
            let w: Vec<f64> = e.iter().map(|x| x * psi.sin()).collect();
            Self::perturbed_radius(radius, cubic, &w) * psi.sin() - s
        };
        let (mut lo, mut hi) = (0.0_f64, 0.5 * PI);
        if f(hi) <= 0.0 {
            return Err(Error::Domain(format!("|x'|={s} outside perturbed graph")));
        }
        let mut psi = (s / radius).min(1.0).asin();
        for _ in 0..200 {
            let val = f(psi);
            if val == 0.0 {
                break;
            }
            if val > 0.0 {
                hi = psi;
            } else {
                lo = psi;
            }
            let h = 1e-7 * (1.0 + psi);
            let d = (f(psi + h) - f(psi - h)) / (2.0 * h);
            let next = psi - val / d;
            if d > 0.0 && next >= lo && next <= hi {
                let step = (next - psi).abs();
                psi = next;
                if step <= 1e-15 * psi.max(1e-300) {
                    break;
                }
            } else {
                psi = 0.5 * (lo + hi);
            }
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        Ok(psi)
    }

    pub fn graph_gradient(&self, xp: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            ShapeKind::Disc { radius } => {
                let s2: f64 = xp.iter().map(|x| x * x).sum();
                let root = (radius * radius - s2).sqrt();
                if !(root > 0.0) {
                    return Err(Error::Domain("outside disc graph".into()));
                }
                Ok(xp.iter().map(|x| x / root).collect())
            }
            ShapeKind::Ellipse { semi_axes } => {
                let b = semi_axes[self.dim - 1];
                let q: f64 = xp.iter().zip(semi_axes).map(|(x, a)| (x / a).powi(2)).sum();
                if q >= 1.0 {
                    return Err(Error::Domain("outside ellipse graph".into()));
                }
                let root = (1.0 - q).sqrt();
                Ok(xp.iter().zip(semi_axes).map(|(x, a)| b * x / (a * a * root)).collect())
            }
            ShapeKind::PerturbedDisc { radius, .. } => {
                let h = 1e-6 * radius;
                let mut g = Vec::with_capacity(xp.len());
                for j in 0..xp.len() {
                    let mut p = xp.to_vec();
                    let mut m = xp.to_vec();
                    p[j] += h;
                    m[j] -= h;
                    g.push((self.graph(&p)? - self.graph(&m)?) / (2.0 * h));
                }
                Ok(g)
            }
        }
    }

    /// Hessian of the contact graph at the origin. Cubic terms do not enter.
    pub fn contact_hessian(&self) -> Vec<Vec<f64>> {
        let m = self.dim - 1;
        let mut hess = vec![vec![0.0; m]; m];
        for (j, row) in hess.iter_mut().enumerate() {
            row[j] = match &self.kind {
                ShapeKind::Disc { radius } | ShapeKind::PerturbedDisc { radius, .. } => 1.0 / radius,
                ShapeKind::Ellipse { semi_axes } => semi_axes[m] / semi_axes[j].powi(2),
            };
        }
        hess
    }

    /// Canonical-frame boundary point (2D). `psi = 0` is the contact point
    /// and the curve runs counter-clockwise.
    pub fn boundary_point(&self, psi: f64) -> [f64; 2] {
        debug_assert_eq!(self.dim, 2);
        match &self.kind {
            ShapeKind::Disc { radius } => {
                [radius * psi.sin(), radius * (1.0 - psi.cos())]
            }
            ShapeKind::Ellipse { semi_axes } => {
                let (a, b) = (semi_axes[0], semi_axes[1]);
                [a * psi.sin(), b * (1.0 - psi.cos())]
            }
            ShapeKind::PerturbedDisc { radius, cubic } => {
                let rho = Self::perturbed_radius(*radius, cubic, &[psi.sin()]);
                [rho * psi.sin(), radius - rho * psi.cos()]
            }
        }
    }

    /// Level-set membership in the canonical frame (strict interior).
    pub fn contains_canonical(&self, p: &[f64]) -> bool {
        let n = self.dim;
        let c = self.center_height();
        match &self.kind {
            ShapeKind::Disc { radius } => {
                let mut d2: f64 = p[..n - 1].iter().map(|x| x * x).sum();
                d2 += (p[n - 1] - c).powi(2);
                d2 < radius * radius
            }
            ShapeKind::Ellipse { semi_axes } => {
                let mut q: f64 = p[..n - 1].iter().zip(semi_axes).map(|(x, a)| (x / a).powi(2)).sum();
                q += ((p[n - 1] - c) / c).powi(2);
                q < 1.0
            }
            ShapeKind::PerturbedDisc { radius, cubic } => {
                let mut d: Vec<f64> = p.to_vec();
                d[n - 1] -= c;
                let len = norm(&d);
                if len == 0.0 {
                    return true;
                }
                let omega_h: Vec<f64> = d[..n - 1].iter().map(|x| x / len).collect();
                len < Self::perturbed_radius(*radius, cubic, &omega_h)
            }
        }
    }

    /// Area enclosed by a 2D shape.
    pub fn area(&self) -> f64 {
        match &self.kind {
            ShapeKind::Disc { radius } => PI * radius * radius,
            ShapeKind::Ellipse { semi_axes } => PI * semi_axes[0] * semi_axes[1],
            ShapeKind::PerturbedDisc { radius, cubic } => {
                // polar area: 1/2 * int rho^2 dpsi, integrand is a trigonometric polynomial
                let n = 512;
                let h = 2.0 * PI / n as f64;
                (0..n)
                    .map(|k| {
                        let psi = k as f64 * h;
                        0.5 * Self::perturbed_radius(*radius, cubic, &[psi.sin()]).powi(2) * h
                    })
                    .sum()
            }
        }
    }

    fn check_convexity(&self) -> Result<()> {
        let ShapeKind::PerturbedDisc { radius, cubic } = &self.kind else {
            return Ok(());
        };
        let samples = if self.dim == 2 { vec![vec![1.0]] } else { azimuths(32) };
        for e in samples {
            let m = 720;
            for k in 0..m {
                let psi = 2.0 * PI * k as f64 / m as f64;
                let rho = |p: f64| {
                    let w: Vec<f64> = e.iter().map(|x| x * p.sin()).collect();
                    Self::perturbed_radius(*radius, cubic, &w)
                };
                let h = 1e-4;
                let (r0, rp, rm) = (rho(psi), rho(psi + h), rho(psi - h));
                let d1 = (rp - rm) / (2.0 * h);
                let d2 = (rp - 2.0 * r0 + rm) / (h * h);
                let curvature = r0 * r0 + 2.0 * d1 * d1 - r0 * d2;
                if r0 <= 0.0 || curvature <= 0.0 {
                    return Err(Error::Geometry(format!(
                        "cubic perturbation {cubic:?} breaks convexity of the disc of radius {radius}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(invalid(format!("dimension must be 2 or 3, got {dim}")))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit horizontal directions in the 3D contact plane.
fn azimuths(count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / count as f64;
            vec![t.cos(), t.sin()]
        })
        .collect()
}

/// An inclusion placed in the physical frame.
#[derive(Debug, Clone)]
pub struct PlacedInclusion {
    pub shape: InclusionShape,
    pub side: Side,
    pub eps: f64,
}

impl PlacedInclusion {
    fn to_canonical(&self, p: &[f64]) -> Vec<f64> {
        let n = p.len();
        let mut q = p.to_vec();
        q[n - 1] = self.side.sign() * p[n - 1] - 0.5 * self.eps;
        q
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.shape.contains_canonical(&self.to_canonical(p))
    }

    /// Boundary point in the physical frame (2D), canonical parameter `psi`.
    pub fn boundary_point(&self, psi: f64) -> [f64; 2] {
        let [x, y] = self.shape.boundary_point(psi);
        [x, self.side.sign() * (y + 0.5 * self.eps)]
    }

    /// Physical height of the boundary graph near the gap.
    pub fn graph(&self, xp: &[f64]) -> Result<f64> {
        Ok(self.side.sign() * (0.5 * self.eps + self.shape.graph(xp)?))
    }

    pub fn center(&self) -> Vec<f64> {
        let mut c = self.shape.canonical_center(self.side);
        let n = c.len();
        c[n - 1] += self.side.sign() * 0.5 * self.eps;
        c
    }
}

/// Two inclusions separated by `eps` along the contact axis.
#[derive(Debug, Clone)]
pub struct InclusionPair {
    pub upper: PlacedInclusion,
    pub lower: PlacedInclusion,
    pub eps: f64,
}

impl InclusionPair {
    /// Minimal boundary distance, found by sampling both boundaries and
    /// refining around the closest pair (2D).
    pub fn min_boundary_distance(&self) -> f64 {
        let dist = |a: f64, b: f64| {
            let p = self.upper.boundary_point(a);
            let q = self.lower.boundary_point(b);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        let n = 720;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..n {
            let a = 2.0 * PI * i as f64 / n as f64;
            for j in 0..n {
                let b = 2.0 * PI * j as f64 / n as f64;
                let d = dist(a, b);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (mut d, mut a, mut b) = best;
        let mut step = 2.0 * PI / n as f64;
        while step > 1e-12 {
            let mut improved = false;
            for (da, db) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
                let cand = dist(a + da, b + db);
                if cand < d {
                    d = cand;
                    a += da;
                    b += db;
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        d
    }
}

/// Place `upper` above and `lower` below the contact plane, each shifted by
/// `eps/2` away from it.
pub fn translate_pair(upper: InclusionShape, lower: InclusionShape, eps: f64) -> Result<InclusionPair> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid(format!("separation must be non-negative, got {eps}")));
    }
    if upper.dim() != lower.dim() {
        return Err(invalid("inclusions must share a dimension"));
    }
    for (shape, side) in [(&upper, Side::Upper), (&lower, Side::Lower)] {
        if !shape.explicit_center {
            continue;
        }
        let want = shape.canonical_center(side);
        let off = shape
            .center()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if off > 1e-12 * shape.center_height().max(1.0) {
            return Err(Error::Geometry(format!(
                "{side:?} inclusion with center {:?} is not tangent to the contact plane at the origin (expected center {want:?})",
                shape.center()
            )));
        }
    }
    Ok(InclusionPair {
        upper: PlacedInclusion { shape: upper, side: Side::Upper, eps },
        lower: PlacedInclusion { shape: lower, side: Side::Lower, eps },
        eps,
    })
}

/// One side of the gap: either a real inclusion or an explicit quadratic
/// profile `sum k_j x_j^2 / 2` (used for model computations only).
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryGraph {
    Shape(InclusionShape),
    Quadratic { curvatures: Vec<f64> },
}

impl BoundaryGraph {
    pub fn dim(&self) -> usize {
        match self {
            BoundaryGraph::Shape(s) => s.dim(),
            BoundaryGraph::Quadratic { curvatures } => curvatures.len() + 1,
        }
    }

    /// Canonical (upward, non-negative) graph value.
    pub fn graph(&self, xp: &[f64]) -> Result<f64> {
        match self {
            BoundaryGraph::Shape(s) => s.graph(xp),
            BoundaryGraph::Quadratic { curvatures } => {
                Ok(xp.iter().zip(curvatures).map(|(x, k)| 0.5 * k * x * x).sum())
            }
        }
    }

    pub fn graph_gradient(&self, xp: &[f64]) -> Result<Vec<f64>> {
        match self {
            BoundaryGraph::Shape(s) => s.graph_gradient(xp),
            BoundaryGraph::Quadratic { curvatures } => {
                Ok(xp.iter().zip(curvatures).map(|(x, k)| k * x).collect())
            }
        }
    }

    pub fn contact_hessian(&self) -> Vec<Vec<f64>> {
        match self {
            BoundaryGraph::Shape(s) => s.contact_hessian(),
            BoundaryGraph::Quadratic { curvatures } => {
                let m = curvatures.len();
                let mut h = vec![vec![0.0; m]; m];
                for j in 0..m {
                    h[j][j] = curvatures[j];
                }
                h
            }
        }
    }

    fn min_radius(&self) -> f64 {
        match self {
            BoundaryGraph::Shape(s) => s.min_radius(),
            BoundaryGraph::Quadratic { .. } => f64::INFINITY,
        }
    }

    fn reach(&self, e: &[f64]) -> f64 {
        match self {
            BoundaryGraph::Shape(s) => s.graph_reach(e),
            BoundaryGraph::Quadratic { .. } => f64::INFINITY,
        }
    }

    /// Largest `r` along `e` where the graph slope stays below one.
    fn slope_limit(&self, e: &[f64]) -> f64 {
        let slope = |r: f64| {
            let xp: Vec<f64> = e.iter().map(|x| x * r).collect();
            self.graph_gradient(&xp).map(|g| norm(&g)).unwrap_or(f64::INFINITY)
        };
        let reach = self.reach(e);
        let mut hi = if reach.is_finite() { reach * (1.0 - 1e-12) } else { 1.0 };
        if !reach.is_finite() {
            while slope(hi) < 1.0 {
                hi *= 2.0;
            }
        }
        if slope(hi) < 1.0 {
            return hi;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 * hi {
                break;
            }
        }
        lo
    }
}

/// The patch radius rule: half the smallest radius, capped by the largest
/// radius on which both boundaries stay graphs with slope below one.
pub fn default_patch_radius(upper: &BoundaryGraph, lower: &BoundaryGraph) -> f64 {
    let dim = upper.dim();
    let dirs = if dim == 2 { vec![vec![1.0], vec![-1.0]] } else { azimuths(32) };
    let mut r = 0.5 * upper.min_radius().min(lower.min_radius());
    for e in &dirs {
        r = r.min(upper.slope_limit(e)).min(lower.slope_limit(e));
    }
    r
}

/// Local description of the gap between the two inclusions.
#[derive(Debug, Clone)]
pub struct GapGeometry {
    pub dim: usize,
    pub eps: f64,
    pub upper: BoundaryGraph,
    pub lower: BoundaryGraph,
    pub r0: f64,
    pub lambdas: Vec<f64>,
    pub kappa_lb: f64,
}

impl GapGeometry {
    pub fn new(
        upper: BoundaryGraph,
        lower: BoundaryGraph,
        eps: f64,
        kappa_lb: f64,
        r0: Option<f64>,
    ) -> Result<Self> {
        let dim = upper.dim();
        check_dim(dim)?;
        if lower.dim() != dim {
            return Err(invalid("upper and lower graphs differ in dimension"));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(invalid(format!("eps must be non-negative, got {eps}")));
        }
        if !(kappa_lb > 0.0) {
            return Err(invalid("kappa_lb must be positive"));
        }
        let rule = default_patch_radius(&upper, &lower);
        let r0 = match r0 {
            Some(r) if r > 0.0 && r <= rule * (1.0 + 1e-12) => r,
            Some(r) => {
                return Err(Error::Geometry(format!(
                    "patch radius {r} exceeds the admissible radius {rule}"
                )))
            }
            None => rule,
        };
        let mut g = Self { dim, eps, upper, lower, r0, lambdas: Vec::new(), kappa_lb };
        g.lambdas = g.relative_curvatures()?;
        g.check_invariants()?;
        Ok(g)
    }

    /// Geometry built from a placed pair.
    pub fn from_pair(pair: &InclusionPair, kappa_lb: f64, r0: Option<f64>) -> Result<Self> {
        Self::new(
            BoundaryGraph::Shape(pair.upper.shape.clone()),
            BoundaryGraph::Shape(pair.lower.shape.clone()),
            pair.eps,
            kappa_lb,
            r0,
        )
    }

    /// Pure quadratic model `h1 - h2 = sum lambda_j x_j^2 / 2`, flat lower side.
    pub fn quadratic(lambdas: Vec<f64>, eps: f64, r0: f64) -> Result<Self> {
        let dim = lambdas.len() + 1;
        let kappa_lb = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
        let zero = vec![0.0; dim - 1];
        let upper = BoundaryGraph::Quadratic { curvatures: lambdas };
        let lower = BoundaryGraph::Quadratic { curvatures: zero };
        let mut g = Self { dim, eps, upper, lower, r0, lambdas: Vec::new(), kappa_lb };
        g.lambdas = g.relative_curvatures()?;
        Ok(g)
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(invalid(format!("eps must be non-negative, got {eps}")));
        }
        let mut g = self.clone();
        g.eps = eps;
        Ok(g)
    }

    /// Upper boundary graph `h1` (without the `eps/2` shift).
    pub fn h1(&self, xp: &[f64]) -> Result<f64> {
        self.upper.graph(xp)
    }

    /// Lower boundary graph `h2` (without the `-eps/2` shift).
    pub fn h2(&self, xp: &[f64]) -> Result<f64> {
        Ok(-self.lower.graph(xp)?)
    }

    pub fn h1_gradient(&self, xp: &[f64]) -> Result<Vec<f64>> {
        self.upper.graph_gradient(xp)
    }

    pub fn h2_gradient(&self, xp: &[f64]) -> Result<Vec<f64>> {
        Ok(self.lower.graph_gradient(xp)?.into_iter().map(|v| -v).collect())
    }

    /// `h1 - h2` at `x'`, no range check.
    pub fn separation(&self, xp: &[f64]) -> Result<f64> {
        Ok(self.upper.graph(xp)? + self.lower.graph(xp)?)
    }

    /// Local gap width `eps + h1(x') - h2(x')` for `|x'| <= R0`.
    pub fn gap_width(&self, xp: &[f64]) -> Result<f64> {
        if xp.len() != self.dim - 1 {
            return Err(invalid("x' has the wrong dimension"));
        }
        if norm(xp) > self.r0 * (1.0 + 1e-12) {
            return Err(Error::Domain(format!("|x'| = {} exceeds R0 = {}", norm(xp), self.r0)));
        }
        Ok(self.eps + self.separation(xp)?)
    }

    /// Eigenvalues of the Hessian of `h1 - h2` at the contact point, ascending.
    pub fn relative_curvatures(&self) -> Result<Vec<f64>> {
        let hu = self.upper.contact_hessian();
        let hl = self.lower.contact_hessian();
        let m = self.dim - 1;
        let mut lambdas = if m == 1 {
            vec![hu[0][0] + hl[0][0]]
        } else {
            let a = hu[0][0] + hl[0][0];
            let b = hu[0][1] + hl[0][1];
            let d = hu[1][1] + hl[1][1];
            let mean = 0.5 * (a + d);
            let disc = (0.25 * (a - d).powi(2) + b * b).sqrt();
            vec![mean - disc, mean + disc]
        };
        lambdas.sort_by(|a, b| a.total_cmp(b));
        if let Some(bad) = lambdas.iter().find(|l| **l < self.kappa_lb * (1.0 - 1e-12)) {
            return Err(Error::Geometry(format!(
                "relative curvature {bad} is below the convexity bound {}",
                self.kappa_lb
            )));
        }
        Ok(lambdas)
    }

    fn check_invariants(&self) -> Result<()> {
        let m = self.dim - 1;
        let zero = vec![0.0; m];
        let tol = 1e-12;
        if self.h1(&zero)?.abs() > tol || self.h2(&zero)?.abs() > tol {
            return Err(Error::Geometry("boundary graphs do not vanish at the contact point".into()));
        }
        let g1 = self.h1_gradient(&zero)?;
        let g2 = self.h2_gradient(&zero)?;
        if norm(&g1) > 1e-8 || norm(&g2) > 1e-8 {
            return Err(Error::Geometry("boundary graphs are not flat at the contact point".into()));
        }
        let dirs = if m == 1 { vec![vec![1.0], vec![-1.0]] } else { azimuths(16) };
        for e in &dirs {
            for k in 1..=32 {
                let r = self.r0 * k as f64 / 32.0;
                let xp: Vec<f64> = e.iter().map(|x| x * r).collect();
                if self.separation(&xp)? <= 0.0 {
                    return Err(Error::Geometry(format!("h1 <= h2 at x' = {xp:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn gap_patch(&self, r: f64) -> Result<GapPatch<'_>> {
        if !(r > 0.0 && r <= self.r0 * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("patch radius {r} not in (0, {}]", self.r0)));
        }
        Ok(GapPatch { geom: self, r })
    }
}

/// The narrow region `{ -eps/2 + h2 < x_n < eps/2 + h1, |x'| < r }`.
#[derive(Debug, Clone, Copy)]
pub struct GapPatch<'a> {
    pub geom: &'a GapGeometry,
    pub r: f64,
}

impl GapPatch<'_> {
    pub fn contains(&self, x: &[f64]) -> bool {
        let n = self.geom.dim;
        let xp = &x[..n - 1];
        if norm(xp) >= self.r {
            return false;
        }
        let (Ok(h1), Ok(h2)) = (self.geom.h1(xp), self.geom.h2(xp)) else {
            return false;
        };
        let half = 0.5 * self.geom.eps;
        x[n - 1] > -half + h2 && x[n - 1] < half + h1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OuterKind {
    Disc { radius: f64 },
    Ball { radius: f64 },
    RoundedRectangle { half_width: f64, half_height: f64, corner_radius: f64 },
}

/// The container, centered at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterDomain {
    pub kind: OuterKind,
    pub clearance: f64,
}

impl OuterDomain {
    pub fn new(kind: OuterKind, clearance: f64) -> Result<Self> {
        let ok = match &kind {
            OuterKind::Disc { radius } | OuterKind::Ball { radius } => *radius > 0.0,
            OuterKind::RoundedRectangle { half_width, half_height, corner_radius } => {
                *corner_radius > 0.0 && corner_radius <= half_width && corner_radius <= half_height
            }
        };
        if !ok || !(clearance >= 0.0) {
            return Err(invalid(format!("invalid outer domain {kind:?} / clearance {clearance}")));
        }
        Ok(Self { kind, clearance })
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            OuterKind::Ball { .. } => 3,
            _ => 2,
        }
    }

    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: &[f64]) -> f64 {
        match &self.kind {
            OuterKind::Disc { radius } | OuterKind::Ball { radius } => norm(p) - radius,
            OuterKind::RoundedRectangle { half_width, half_height, corner_radius } => {
                let qx = p[0].abs() - (half_width - corner_radius);
                let qy = p[1].abs() - (half_height - corner_radius);
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0) - corner_radius
            }
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.signed_distance(p) < 0.0
    }

    /// Distance from the origin to the boundary along angle `theta` (2D).
    pub fn radius_along(&self, theta: f64) -> f64 {
        match &self.kind {
            OuterKind::Disc { radius } | OuterKind::Ball { radius } => *radius,
            OuterKind::RoundedRectangle { half_width, half_height, .. } => {
                let d = [theta.cos(), theta.sin()];
                let (mut lo, mut hi) = (0.0, 2.0 * half_width.hypot(*half_height));
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.signed_distance(&[mid * d[0], mid * d[1]]) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 * hi {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// Check both placed inclusions sit inside with the required clearance (2D).
    pub fn validate_pair(&self, pair: &InclusionPair) -> Result<()> {
        if self.dim() != 2 {
            return Err(invalid("pair validation against the outer domain is 2D only"));
        }
        let n = 2048;
        for inc in [&pair.upper, &pair.lower] {
            for k in 0..n {
                let p = inc.boundary_point(2.0 * PI * k as f64 / n as f64);
                let d = -self.signed_distance(&p);
                if d < self.clearance {
                    return Err(Error::Geometry(format!(
                        "inclusion boundary point {p:?} is within {d} of the outer boundary (clearance {})",
                        self.clearance
                    )));
                }
            }
        }
        Ok(())
    }

    /// Area of a 2D container.
    pub fn area(&self) -> f64 {
        match &self.kind {
            OuterKind::Disc { radius } => PI * radius * radius,
            OuterKind::Ball { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            OuterKind::RoundedRectangle { half_width, half_height, corner_radius } => {
                4.0 * half_width * half_height - (4.0 - PI) * corner_radius * corner_radius
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_discs(eps: f64) -> GapGeometry {
        let d = InclusionShape::disc(2, 1.0).unwrap();
        GapGeometry::new(BoundaryGraph::Shape(d.clone()), BoundaryGraph::Shape(d), eps, 1.0, None).unwrap()
    }

    #[test]
    fn touching_discs_meet_at_origin() {
        let d = InclusionShape::disc(2, 1.0).unwrap();
        let pair = translate_pair(d.clone(), d.with_center(vec![0.0, -1.0]).unwrap(), 0.0).unwrap();
        assert!(pair.min_boundary_distance() < 1e-9);
        assert_eq!(pair.upper.boundary_point(0.0), [0.0, 0.0]);
    }

    #[test]
    fn translated_discs_have_gap_eps() {
        let d = InclusionShape::disc(2, 1.0).unwrap();
        let pair = translate_pair(d.clone(), d, 0.01).unwrap();
        assert_relative_eq!(pair.min_boundary_distance(), 0.01, epsilon = 1e-10);
        assert_relative_eq!(pair.upper.boundary_point(0.0)[1] - pair.lower.boundary_point(0.0)[1], 0.01);
    }

    #[test]
    fn unequal_discs_gap_on_contact_axis() {
        let a = InclusionShape::disc(2, 1.0).unwrap();
        let b = InclusionShape::disc(2, 2.0).unwrap();
        let pair = translate_pair(a, b, 0.02).unwrap();
        assert_relative_eq!(pair.min_boundary_distance(), 0.02, epsilon = 1e-10);
        let c1 = pair.upper.center();
        let c2 = pair.lower.center();
        assert_eq!(c1[0], 0.0);
        assert_eq!(c2[0], 0.0);
        assert_relative_eq!(c1[1] - c2[1] - 3.0, 0.02, epsilon = 1e-14);
    }

    #[test]
    fn translate_rejects_bad_input() {
        let d = InclusionShape::disc(2, 1.0).unwrap();
        assert!(translate_pair(d.clone(), d.clone(), -1e-3).is_err());
        let off = d.clone().with_center(vec![0.1, 1.0]).unwrap();
        assert!(matches!(translate_pair(off, d, 0.0), Err(Error::Geometry(_))));
    }

    #[test]
    fn gap_width_examples() {
        let g = unit_discs(0.01);
        assert_eq!(g.gap_width(&[0.0]).unwrap(), 0.01);
        let expected = 0.01 + 2.0 * (1.0 - 0.99_f64.sqrt());
        assert_relative_eq!(g.gap_width(&[0.1]).unwrap(), expected, max_relative = 1e-14);
        assert_relative_eq!(g.gap_width(&[0.1]).unwrap(), 0.0200252, epsilon = 1e-7);
        assert!(matches!(g.gap_width(&[0.6]), Err(Error::Domain(_))));
        let touching = unit_discs(0.0);
        for x in [1e-4, 0.01, -0.3, 0.5] {
            assert!(touching.gap_width(&[x]).unwrap() > 0.0);
        }
    }

    #[test]
    fn gap_width_matches_circle_distance_on_samples() {
        let a = InclusionShape::disc(2, 1.0).unwrap();
        let b = InclusionShape::ellipse(vec![1.5, 0.8]).unwrap();
        let g = GapGeometry::new(BoundaryGraph::Shape(a), BoundaryGraph::Shape(b), 0.003, 0.5, None).unwrap();
        for k in 0..20 {
            let x = -g.r0 + 2.0 * g.r0 * k as f64 / 19.0;
            let upper = 1.0 - (1.0 - x * x).sqrt();
            let lower = 0.8 - 0.8 * (1.0 - x * x / 2.25).sqrt();
            let exact = 0.003 + upper + lower;
            assert_relative_eq!(g.gap_width(&[x]).unwrap(), exact, max_relative = 1e-14, epsilon = 1e-16);
        }
    }

    #[test]
    fn relative_curvature_examples() {
        assert_relative_eq!(unit_discs(0.0).lambdas[0], 2.0);
        let a = InclusionShape::disc(2, 1.0).unwrap();
        let b = InclusionShape::disc(2, 2.0).unwrap();
        let g = GapGeometry::new(BoundaryGraph::Shape(a), BoundaryGraph::Shape(b), 0.0, 1.0, None).unwrap();
        assert_relative_eq!(g.lambdas[0], 1.5);
        let ball = InclusionShape::disc(3, 1.0).unwrap();
        let g3 = GapGeometry::new(BoundaryGraph::Shape(ball.clone()), BoundaryGraph::Shape(ball), 0.0, 1.0, None).unwrap();
        assert_relative_eq!(g3.lambdas[0], 2.0);
        assert_relative_eq!(g3.lambdas[1], 2.0);
    }

    #[test]
    fn curvature_bound_violation_is_an_error() {
        let a = InclusionShape::disc(2, 1.0).unwrap();
        let res = GapGeometry::new(BoundaryGraph::Shape(a.clone()), BoundaryGraph::Shape(a), 0.0, 2.5, None);
        assert!(matches!(res, Err(Error::Geometry(_))));
    }

    #[test]
    fn hessian_agrees_with_finite_differences() {
        let e = InclusionShape::ellipse(vec![1.2, 2.0, 0.7]).unwrap();
        let b = InclusionShape::perturbed_disc(3, 1.0, vec![0.05, -0.02, 0.01, 0.03]).unwrap();
        let g = GapGeometry::new(BoundaryGraph::Shape(e), BoundaryGraph::Shape(b), 0.0, 0.1, None).unwrap();
        let h = 1e-3;
        let sep = |x: f64, y: f64| g.separation(&[x, y]).unwrap();
        let hxx = (sep(h, 0.0) - 2.0 * sep(0.0, 0.0) + sep(-h, 0.0)) / (h * h);
        let hyy = (sep(0.0, h) - 2.0 * sep(0.0, 0.0) + sep(0.0, -h)) / (h * h);
        let hxy = (sep(h, h) - sep(h, -h) - sep(-h, h) + sep(-h, -h)) / (4.0 * h * h);
        assert!(hxy.abs() < 1e-5);
        let mut fd = [hxx, hyy];
        fd.sort_by(|a, b| a.total_cmp(b));
        assert_relative_eq!(g.lambdas[0], fd[0], max_relative = 1e-5);
        assert_relative_eq!(g.lambdas[1], fd[1], max_relative = 1e-5);
    }

    #[test]
    fn cubic_terms_leave_curvatures_unchanged() {
        let plain = InclusionShape::disc(2, 1.0).unwrap();
        let bumped = InclusionShape::perturbed_disc(2, 1.0, vec![0.1]).unwrap();
        let g0 = GapGeometry::new(BoundaryGraph::Shape(plain.clone()), BoundaryGraph::Shape(plain.clone()), 0.0, 1.0, None).unwrap();
        let g1 = GapGeometry::new(BoundaryGraph::Shape(bumped), BoundaryGraph::Shape(plain), 0.0, 1.0, None).unwrap();
        assert_relative_eq!(g0.lambdas[0], g1.lambdas[0]);
        // the cubic term is visible in the graph itself
        let x = 0.05;
        let diff = g1.separation(&[x]).unwrap() - g0.separation(&[x]).unwrap();
        assert_relative_eq!(diff, 0.1 * x * x * x, max_relative = 0.02);
    }

    #[test]
    fn perturbed_graph_matches_boundary_parametrisation() {
        let s = InclusionShape::perturbed_disc(2, 1.0, vec![-0.2]).unwrap();
        for psi in [-0.4, -0.1, 0.05, 0.3, 0.5] {
            let [x, y] = s.boundary_point(psi);
            assert_relative_eq!(s.graph(&[x]).unwrap(), y, epsilon = 1e-13);
        }
    }

    #[test]
    fn gap_width_lower_bound_with_cubic_remainder() {
        let bumped = InclusionShape::perturbed_disc(2, 1.0, vec![0.15]).unwrap();
        let plain = InclusionShape::disc(2, 1.0).unwrap();
        let g = GapGeometry::new(BoundaryGraph::Shape(bumped), BoundaryGraph::Shape(plain), 1e-3, 1.0, None).unwrap();
        let c = 1.0;
        for k in 1..=40 {
            let x = g.r0 * (k as f64 / 20.0 - 1.0);
            let w = g.gap_width(&[x]).unwrap();
            assert!(w >= g.eps + 0.5 * g.kappa_lb * x * x - c * x.abs().powi(3));
        }
    }

    #[test]
    fn patch_radius_rule_for_discs() {
        let d = BoundaryGraph::Shape(InclusionShape::disc(2, 1.0).unwrap());
        assert_relative_eq!(default_patch_radius(&d, &d), 0.5);
        let small = BoundaryGraph::Shape(InclusionShape::ellipse(vec![0.3, 2.0]).unwrap());
        // slope of b(1 - sqrt(1 - x^2/a^2)) reaches one well before a/2
        let r = default_patch_radius(&small, &d);
        let slope = small.graph_gradient(&[r]).unwrap()[0];
        assert!(r < 0.15 && (slope - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gap_patch_membership() {
        let g = unit_discs(1e-3);
        let full = g.gap_patch(g.r0).unwrap();
        assert_eq!(full.r, g.r0);
        assert!(full.contains(&[0.0, 0.0]));
        assert!(!full.contains(&[0.0, 1e-3]));
        assert!(full.contains(&[0.0, 0.49e-3]));
        assert!(g.gap_patch(0.0).is_err());
        assert!(g.gap_patch(2.0 * g.r0).is_err());
    }

    #[test]
    fn outer_rounded_rectangle_ray() {
        let o = OuterDomain::new(
            OuterKind::RoundedRectangle { half_width: 4.0, half_height: 3.0, corner_radius: 1.0 },
            0.1,
        )
        .unwrap();
        assert_relative_eq!(o.radius_along(0.0), 4.0, epsilon = 1e-12);
        assert_relative_eq!(o.radius_along(0.5 * PI), 3.0, epsilon = 1e-12);
        let d = InclusionShape::disc(2, 1.0).unwrap();
        let pair = translate_pair(d.clone(), d, 0.01).unwrap();
        assert!(o.validate_pair(&pair).is_ok());
        let tight = OuterDomain::new(OuterKind::Disc { radius: 2.05 }, 0.1).unwrap();
        assert!(tight.validate_pair(&pair).is_err());
    }
}

//! Body-fitted triangular meshes of the perforated domain.
//!
//! The mesh has two blocks. The gap block covers `|x| <= X0` between the two
//! boundary graphs. Its columns cluster at the contact point on the natural
//! scale `sqrt(eps)`, and it has a fixed number of layers across the local
//! width. The polar block fills the rest of the container. Rays leave the
//! origin through every node of the closed inner loop (gap block sides plus
//! the two exposed inclusion arcs) and run out to the outer boundary. Radial
//! spacing starts at the local tangential spacing and grows geometrically.
//! Quads are split along their shorter valid diagonal and Lawson flips then
//! make every interior edge Delaunay, so the P1 stiffness matrix is an
//! M-matrix.

use crate::error::{invalid, Error, Result};
use crate::geometry::{BoundaryGraph, GapGeometry, InclusionShape, OuterDomain, Side};
use std::collections::HashMap;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeTag {
    Interior,
    Outer,
    /// Boundary of inclusion 1 (upper) or 2 (lower).
    Inclusion(u8),
}

impl NodeTag {
    pub fn is_dirichlet(self) -> bool {
        !matches!(self, NodeTag::Interior)
    }
}

/// Mesh-size knobs. Doubling via [`Resolution::refined`] halves every spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    /// Layers across the gap; at least 8.
    pub gap_layers: usize,
    /// Column step in the stretched variable `asinh(x / sqrt(eps))`.
    pub column_step: f64,
    /// Largest node spacing along the inclusion arcs.
    pub arc_spacing: f64,
    /// Linear growth rate of the arc spacing away from the gap corners.
    pub arc_growth: f64,
    /// Geometric growth of radial layers in the polar block.
    pub radial_growth: f64,
    /// Node budget.
    pub max_nodes: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            gap_layers: 16,
            column_step: 0.04,
            arc_spacing: 0.04,
            arc_growth: 0.15,
            radial_growth: 0.15,
            max_nodes: 400_000,
        }
    }
}

impl Resolution {
    /// Scale every spacing by `1/factor`.
    pub fn refined(&self, factor: f64) -> Self {
        Self {
            gap_layers: ((self.gap_layers as f64) * factor).round() as usize,
            column_step: self.column_step / factor,
            arc_spacing: self.arc_spacing / factor,
            arc_growth: self.arc_growth / factor,
            radial_growth: (1.0 + self.radial_growth).powf(1.0 / factor) - 1.0,
            max_nodes: self.max_nodes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gap_layers < 8 {
            return Err(invalid(format!("gap_layers must be at least 8, got {}", self.gap_layers)));
        }
        for (name, v) in [
            ("column_step", self.column_step),
            ("arc_spacing", self.arc_spacing),
            ("arc_growth", self.arc_growth),
            ("radial_growth", self.radial_growth),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Triangular mesh with boundary tags.
#[derive(Debug, Clone)]
pub struct GradedGrid {
    pub nodes: Vec<[f64; 2]>,
    pub tags: Vec<NodeTag>,
    /// Counter-clockwise triangles.
    pub triangles: Vec<[usize; 3]>,
    /// Triangles with all three nodes in the gap block.
    pub in_gap: Vec<bool>,
    pub eps: f64,
    /// Half-width of the gap block.
    pub gap_half_width: f64,
    pub gap_layers: usize,
    pub gap_columns: usize,
    pub rays: usize,
    pub radial_layers: usize,
}

impl GradedGrid {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    /// Longest triangle edge.
    pub fn max_edge(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|t| {
                (0..3).map(move |e| (t[e], t[(e + 1) % 3]))
            })
            .map(|(a, b)| dist(self.nodes[a], self.nodes[b]))
            .fold(0.0, f64::max)
    }

    /// Number of gap layers crossed along the contact axis.
    pub fn layers_at_contact(&self) -> usize {
        self.gap_layers
    }

    pub fn boundary_nodes(&self, tag: NodeTag) -> impl Iterator<Item = usize> + '_ {
        self.tags.iter().enumerate().filter(move |(_, t)| **t == tag).map(|(i, _)| i)
    }

    /// Sum over interior edges of negative cotangent weights (zero for a
    /// Delaunay mesh).
    pub fn worst_cotangent_sum(&self) -> f64 {
        let mut sums: HashMap<(usize, usize), (f64, u8)> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b, c) = (t[(e + 1) % 3], t[(e + 2) % 3], t[e]);
                let key = (a.min(b), a.max(b));
                let entry = sums.entry(key).or_insert((0.0, 0));
                entry.0 += cot(self.nodes[a], self.nodes[b], self.nodes[c]);
                entry.1 += 1;
            }
        }
        sums.values().filter(|(_, n)| *n == 2).map(|(s, _)| *s).fold(f64::INFINITY, f64::min)
    }

    pub fn check(&self) -> Result<()> {
        for t in 0..self.triangles.len() {
            if !(self.area(t) > 0.0) {
                return Err(Error::Geometry(format!("triangle {t} has non-positive area {}", self.area(t))));
            }
        }
        Ok(())
    }
}

pub(crate) fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Cotangent of the angle at `c` in triangle `(a, b, c)`.
fn cot(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let u = [a[0] - c[0], a[1] - c[1]];
    let v = [b[0] - c[0], b[1] - c[1]];
    (u[0] * v[0] + u[1] * v[1]) / (u[0] * v[1] - u[1] * v[0]).abs()
}

/// Build the mesh for the geometry at its current `eps`.
pub fn build_grid(geom: &GapGeometry, outer: &OuterDomain, res: &Resolution) -> Result<GradedGrid> {
    res.validate()?;
    if geom.dim != 2 || outer.dim() != 2 {
        return Err(invalid("direct solves are implemented for n = 2 only"));
    }
    let eps = geom.eps;
    if !(eps > 0.0) {
        return Err(invalid(format!("meshing needs eps > 0, got {eps}")));
    }
    let (BoundaryGraph::Shape(upper), BoundaryGraph::Shape(lower)) = (&geom.upper, &geom.lower) else {
        return Err(invalid("meshing needs inclusion shapes, not model profiles"));
    };
    let pair = crate::geometry::translate_pair(upper.clone(), lower.clone(), eps)?;
    outer.validate_pair(&pair)?;

    let nt = res.gap_layers;
    let x0 = geom.r0;
    let se = eps.sqrt();
    let s_max = (x0 / se).asinh();
    let m = (s_max / res.column_step).ceil().max(2.0) as usize;
    let columns = 2 * m + 1;
    let layer = eps / nt as f64;
    if layer < 1e-13 {
        return Err(Error::ResolutionInfeasible(format!(
            "eps = {eps:e} leaves layers of {layer:e} with {nt} gap layers"
        )));
    }
    let gap_nodes = columns * (nt + 1);
    if gap_nodes > res.max_nodes {
        return Err(Error::ResolutionInfeasible(format!(
            "gap block alone needs {gap_nodes} nodes at eps = {eps:e}, budget is {}",
            res.max_nodes
        )));
    }

    let mut nodes: Vec<[f64; 2]> = Vec::with_capacity(gap_nodes * 3);
    let mut tags = Vec::with_capacity(gap_nodes * 3);
    let half = 0.5 * eps;
    let xs: Vec<f64> = (0..columns)
        .map(|j| {
            if j == 0 {
                -x0
            } else if j == columns - 1 {
                x0
            } else {
                se * (s_max * (j as f64 - m as f64) / m as f64).sinh()
            }
        })
        .collect();
    for &x in &xs {
        let bottom = -half - lower.graph(&[x])?;
        let top = half + upper.graph(&[x])?;
        let width = top - bottom;
        for k in 0..=nt {
            let y = if k == nt { top } else { bottom + width * k as f64 / nt as f64 };
            nodes.push([x, y]);
            tags.push(if k == 0 {
                NodeTag::Inclusion(2)
            } else if k == nt {
                NodeTag::Inclusion(1)
            } else {
                NodeTag::Interior
            });
        }
    }
    let gid = |j: usize, k: usize| j * (nt + 1) + k;
    let mut tris: Vec<[usize; 3]> = Vec::new();
    for j in 0..columns - 1 {
        for k in 0..nt {
            split_quad(&nodes, [gid(j, k), gid(j + 1, k), gid(j + 1, k + 1), gid(j, k + 1)], &mut tris)?;
        }
    }

    // inner loop, counter-clockwise around the origin
    let h_right = (nodes[gid(columns - 1, nt)][1] - nodes[gid(columns - 1, 0)][1]) / nt as f64;
    let h_left = (nodes[gid(0, nt)][1] - nodes[gid(0, 0)][1]) / nt as f64;
    let mut loop_ids: Vec<usize> = (0..=nt).map(|k| gid(columns - 1, k)).collect();
    for p in arc_points(upper, Side::Upper, eps, x0, h_right, h_left, res)? {
        nodes.push(p);
        tags.push(NodeTag::Inclusion(1));
        loop_ids.push(nodes.len() - 1);
    }
    loop_ids.extend((0..=nt).rev().map(|k| gid(0, k)));
    for p in arc_points(lower, Side::Lower, eps, x0, h_left, h_right, res)? {
        nodes.push(p);
        tags.push(NodeTag::Inclusion(2));
        loop_ids.push(nodes.len() - 1);
    }
    let rays = loop_ids.len();

    // polar angles must increase strictly around the loop
    let mut theta = Vec::with_capacity(rays);
    let mut prev = f64::NEG_INFINITY;
    for &id in &loop_ids {
        let p = nodes[id];
        let mut t = p[1].atan2(p[0]);
        if prev.is_finite() {
            while t <= prev - PI {
                t += 2.0 * PI;
            }
            if t <= prev {
                return Err(Error::Geometry(format!(
                    "inner loop is not star-shaped from the contact point near {p:?}"
                )));
            }
        }
        theta.push(t);
        prev = t;
    }
    if theta[rays - 1] - theta[0] >= 2.0 * PI {
        return Err(Error::Geometry("inner loop winds more than once".into()));
    }

    let q = 1.0 + res.radial_growth;
    let mut spans = Vec::with_capacity(rays);
    let mut n_r = 2usize;
    for i in 0..rays {
        let p = nodes[loop_ids[i]];
        let r_in = p[0].hypot(p[1]);
        let r_out = outer.radius_along(theta[i]);
        let len = r_out - r_in;
        if !(len > 0.0) {
            return Err(Error::Geometry(format!("inner loop node {p:?} lies outside the container")));
        }
        let a = nodes[loop_ids[(i + rays - 1) % rays]];
        let b = nodes[loop_ids[(i + 1) % rays]];
        let t0 = 0.5 * (dist(a, p) + dist(b, p));
        let needed = ((1.0 + len * (q - 1.0) / t0).ln() / q.ln()).ceil() as usize;
        n_r = n_r.max(needed);
        spans.push((r_in, len, t0));
    }
    let total = nodes.len() + rays * n_r;
    if total > res.max_nodes {
        return Err(Error::ResolutionInfeasible(format!(
            "mesh needs {total} nodes, budget is {}",
            res.max_nodes
        )));
    }

    // ray nodes: column i holds loop node then n_r further nodes
    let mut ray_ids = vec![Vec::with_capacity(n_r + 1); rays];
    for i in 0..rays {
        let (r_in, len, t0) = spans[i];
        let beta = stretch_exponent(len, t0, n_r);
        let dir = [theta[i].cos(), theta[i].sin()];
        ray_ids[i].push(loop_ids[i]);
        for l in 1..=n_r {
            let xi = l as f64 / n_r as f64;
            let g = if beta == 0.0 { xi } else { (beta * xi).exp_m1() / beta.exp_m1() };
            let r = if l == n_r { r_in + len } else { r_in + len * g };
            nodes.push([r * dir[0], r * dir[1]]);
            tags.push(if l == n_r { NodeTag::Outer } else { NodeTag::Interior });
            ray_ids[i].push(nodes.len() - 1);
        }
    }
    for i in 0..rays {
        let ip = (i + 1) % rays;
        for l in 0..n_r {
            let (a, b) = (ray_ids[i][l], ray_ids[ip][l]);
            let (c, d) = (ray_ids[ip][l + 1], ray_ids[i][l + 1]);
            split_quad(&nodes, [a, d, c, b], &mut tris)?;
        }
    }

    let mut in_gap_node = vec![false; nodes.len()];
    in_gap_node[..gap_nodes].iter_mut().for_each(|v| *v = true);
    delaunay_flips(&nodes, &mut tris)?;
    let in_gap = tris.iter().map(|t| t.iter().all(|&v| in_gap_node[v])).collect();
    let grid = GradedGrid {
        nodes,
        tags,
        triangles: tris,
        in_gap,
        eps,
        gap_half_width: x0,
        gap_layers: nt,
        gap_columns: columns,
        rays,
        radial_layers: n_r,
    };
    grid.check()?;
    Ok(grid)
}

/// `beta` such that the first of `n` layers on a ray of length `len`,
/// stretched as `(e^(beta xi) - 1)/(e^beta - 1)`, has length `t0`.
fn stretch_exponent(len: f64, t0: f64, n: usize) -> f64 {
    let first = |beta: f64| {
        if beta == 0.0 {
            len / n as f64
        } else {
            len * (beta / n as f64).exp_m1() / beta.exp_m1()
        }
    };
    if t0 >= first(0.0) {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while first(hi) > t0 {
        hi *= 2.0;
        if hi > 700.0 {
            return hi;
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if first(mid) > t0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Nodes strictly between the two gap corners along the exposed arc of an
/// inclusion, ordered counter-clockwise around the origin. `h_start` and
/// `h_end` are the spacings requested at the two ends.
fn arc_points(
    shape: &InclusionShape,
    side: Side,
    eps: f64,
    x0: f64,
    h_start: f64,
    h_end: f64,
    res: &Resolution,
) -> Result<Vec<[f64; 2]>> {
    let sign = if side == Side::Upper { 1.0 } else { -1.0 };
    let corner = |target: f64| -> Result<f64> {
        // parameter on the contact side where the canonical abscissa is `target`
        let (mut lo, mut hi) = if target > 0.0 { (0.0, 0.5 * PI) } else { (-0.5 * PI, 0.0) };
        if (shape.boundary_point(lo)[0] - target) * (shape.boundary_point(hi)[0] - target) > 0.0 {
            return Err(Error::Geometry(format!("gap block edge x = {target} misses the inclusion")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if shape.boundary_point(mid)[0] < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    // upper: from the right corner over the top to the left corner (psi increasing);
    // lower (mirrored): from the left corner under the bottom to the right corner
    let (t0, t1) = match side {
        Side::Upper => (corner(x0)?, corner(-x0)? + 2.0 * PI),
        Side::Lower => (corner(-x0)?, corner(x0)? - 2.0 * PI),
    };
    let point = |t: f64| {
        let [x, y] = shape.boundary_point(t);
        [x, sign * (y + 0.5 * eps)]
    };
    let dense = 20_000;
    let mut cum = vec![0.0; dense + 1];
    let mut prev = point(t0);
    for k in 1..=dense {
        let p = point(t0 + (t1 - t0) * k as f64 / dense as f64);
        cum[k] = cum[k - 1] + dist(prev, p);
        prev = p;
    }
    let total = cum[dense];
    let size = |s: f64| {
        (h_start + res.arc_growth * s)
            .min(h_end + res.arc_growth * (total - s))
            .min(res.arc_spacing)
    };
    let mut weight = vec![0.0; dense + 1];
    for k in 1..=dense {
        let ds = cum[k] - cum[k - 1];
        weight[k] = weight[k - 1] + 0.5 * ds * (1.0 / size(cum[k - 1]) + 1.0 / size(cum[k]));
    }
    let count = weight[dense].round().max(2.0) as usize;
    let mut out = Vec::with_capacity(count - 1);
    let mut k = 0;
    for i in 1..count {
        let target = weight[dense] * i as f64 / count as f64;
        while weight[k + 1] < target {
            k += 1;
        }
        let frac = (target - weight[k]) / (weight[k + 1] - weight[k]);
        let t = t0 + (t1 - t0) * (k as f64 + frac) / dense as f64;
        out.push(point(t));
    }
    Ok(out)
}

/// Split the counter-clockwise quad `q` along the shorter diagonal that
/// gives two positively oriented triangles.
fn split_quad(nodes: &[[f64; 2]], q: [usize; 4], tris: &mut Vec<[usize; 3]>) -> Result<()> {
    let p = |i: usize| nodes[q[i]];
    let options = [
        ([q[0], q[1], q[2]], [q[0], q[2], q[3]], dist(p(0), p(2))),
        ([q[0], q[1], q[3]], [q[1], q[2], q[3]], dist(p(1), p(3))),
    ];
    let valid = |t: &[usize; 3]| signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) > 0.0;
    let mut best: Option<&([usize; 3], [usize; 3], f64)> = None;
    for o in &options {
        if valid(&o.0) && valid(&o.1) && best.is_none_or(|b| o.2 < b.2) {
            best = Some(o);
        }
    }
    match best {
        Some(o) => {
            tris.push(o.0);
            tris.push(o.1);
            Ok(())
        }
        None => Err(Error::Geometry(format!("degenerate mesh quad at {:?}", p(0)))),
    }
}

/// Lawson flips until every interior edge satisfies the Delaunay condition.
fn delaunay_flips(nodes: &[[f64; 2]], tris: &mut [[usize; 3]]) -> Result<()> {
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut edges: HashMap<(usize, usize), [usize; 2]> = HashMap::with_capacity(tris.len() * 2);
    for (t, tri) in tris.iter().enumerate() {
        for e in 0..3 {
            let k = key(tri[(e + 1) % 3], tri[(e + 2) % 3]);
            edges.entry(k).and_modify(|v| v[1] = t).or_insert([t, usize::MAX]);
        }
    }
    let mut stack: Vec<(usize, usize)> = edges.iter().filter(|(_, v)| v[1] != usize::MAX).map(|(k, _)| *k).collect();
    stack.sort_unstable();
    let opposite = |tri: &[usize; 3], a: usize, b: usize| *tri.iter().find(|&&v| v != a && v != b).unwrap();
    let mut flips = 0usize;
    let limit = 50 * tris.len() + 1000;
    while let Some((a0, b0)) = stack.pop() {
        let Some(&[t1, t2]) = edges.get(&(a0, b0)) else { continue };
        if t2 == usize::MAX {
            continue;
        }
        // orient so that t1 traverses a -> b
        let tri1 = tris[t1];
        let pos = tri1.iter().position(|&v| v == a0).unwrap();
        let (a, b) = if tri1[(pos + 1) % 3] == b0 { (a0, b0) } else { (b0, a0) };
        let c = opposite(&tri1, a, b);
        let d = opposite(&tris[t2], a, b);
        let s = cot(nodes[a], nodes[b], nodes[c]) + cot(nodes[a], nodes[b], nodes[d]);
        if s >= -1e-12 {
            continue;
        }
        let n1 = [a, d, c];
        let n2 = [d, b, c];
        if !(signed_area(nodes[a], nodes[d], nodes[c]) > 0.0 && signed_area(nodes[d], nodes[b], nodes[c]) > 0.0) {
            continue;
        }
        flips += 1;
        if flips > limit {
            return Err(Error::Geometry("edge flipping did not terminate".into()));
        }
        tris[t1] = n1;
        tris[t2] = n2;
        edges.remove(&key(a, b));
        edges.insert(key(c, d), [t1, t2]);
        for (k, from, to) in [(key(a, d), t2, t1), (key(b, c), t1, t2)] {
            if let Some(v) = edges.get_mut(&k) {
                for slot in v.iter_mut() {
                    if *slot == from {
                        *slot = to;
                    }
                }
            }
        }
        for k in [key(a, d), key(d, b), key(b, c), key(c, a)] {
            stack.push(k);
        }
    }
    Ok(())
}

/// Annulus `r_in < |x| < r_out` with `n_theta` uniform rays and radial
/// layers spaced so cells are close to squares. Inner circle is tagged as
/// inclusion 1.
pub fn annulus_grid(r_in: f64, r_out: f64, n_theta: usize) -> Result<GradedGrid> {
    if !(r_in > 0.0 && r_out > r_in) || n_theta < 8 {
        return Err(invalid("annulus needs 0 < r_in < r_out and at least 8 rays"));
    }
    let dtheta = 2.0 * PI / n_theta as f64;
    let n_r = ((r_out / r_in).ln() / dtheta).round().max(2.0) as usize;
    let mut nodes = Vec::with_capacity(n_theta * (n_r + 1));
    let mut tags = Vec::with_capacity(n_theta * (n_r + 1));
    for i in 0..n_theta {
        let t = dtheta * i as f64;
        for l in 0..=n_r {
            let r = if l == n_r { r_out } else { r_in * (r_out / r_in).powf(l as f64 / n_r as f64) };
            nodes.push([r * t.cos(), r * t.sin()]);
            tags.push(match l {
                0 => NodeTag::Inclusion(1),
                l if l == n_r => NodeTag::Outer,
                _ => NodeTag::Interior,
            });
        }
    }
    let id = |i: usize, l: usize| (i % n_theta) * (n_r + 1) + l;
    let mut tris = Vec::with_capacity(2 * n_theta * n_r);
    for i in 0..n_theta {
        for l in 0..n_r {
            split_quad(&nodes, [id(i, l), id(i, l + 1), id(i + 1, l + 1), id(i + 1, l)], &mut tris)?;
        }
    }
    delaunay_flips(&nodes, &mut tris)?;
    let in_gap = vec![false; tris.len()];
    let grid = GradedGrid {
        nodes,
        tags,
        triangles: tris,
        in_gap,
        eps: 0.0,
        gap_half_width: 0.0,
        gap_layers: 0,
        gap_columns: 0,
        rays: n_theta,
        radial_layers: n_r,
    };
    grid.check()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{OuterKind, ShapeKind};

    pub(crate) fn two_discs(eps: f64) -> (GapGeometry, OuterDomain) {
        let d = InclusionShape::disc(2, 1.0).unwrap();
        let g = GapGeometry::new(BoundaryGraph::Shape(d.clone()), BoundaryGraph::Shape(d), eps, 1.0, None).unwrap();
        (g, OuterDomain::new(OuterKind::Disc { radius: 4.0 }, 0.1).unwrap())
    }

    fn total_area(g: &GradedGrid) -> f64 {
        (0..g.triangles.len()).map(|t| g.area(t)).sum()
    }

    #[test]
    fn two_disc_mesh_is_valid() {
        let (g, o) = two_discs(1e-2);
        let m = build_grid(&g, &o, &Resolution::default()).unwrap();
        assert!(m.layers_at_contact() >= 8);
        assert!(m.worst_cotangent_sum() >= -1e-10);
        // area = container minus two polygonal discs
        let expected = PI * 16.0 - 2.0 * PI;
        let rel = (total_area(&m) - expected).abs() / expected;
        assert!(rel < 2e-3, "area mismatch {rel}");
        // exactly one tag per node; boundary nodes lie on their curves
        for (p, t) in m.nodes.iter().zip(&m.tags) {
            match t {
                NodeTag::Outer => assert!((p[0].hypot(p[1]) - 4.0).abs() < 1e-12),
                NodeTag::Inclusion(1) => assert!(((p[1] - 1.005).hypot(p[0]) - 1.0).abs() < 1e-12),
                NodeTag::Inclusion(2) => assert!(((p[1] + 1.005).hypot(p[0]) - 1.0).abs() < 1e-12),
                _ => {}
            }
        }
        assert!(m.in_gap.iter().any(|&v| v));
    }

    #[test]
    fn gap_layers_at_contact() {
        let (g, o) = two_discs(1e-4);
        let m = build_grid(&g, &o, &Resolution::default()).unwrap();
        let on_axis: Vec<_> = m.nodes.iter().filter(|p| p[0] == 0.0 && p[1].abs() <= 0.5e-4 + 1e-15).collect();
        assert_eq!(on_axis.len(), m.gap_layers + 1);
    }

    #[test]
    fn infeasible_budget_is_reported() {
        let (g, o) = two_discs(1e-5);
        let res = Resolution { max_nodes: 2000, ..Resolution::default() };
        assert!(matches!(build_grid(&g, &o, &res), Err(Error::ResolutionInfeasible(_))));
        let res = Resolution { gap_layers: 4, ..Resolution::default() };
        assert!(matches!(build_grid(&g, &o, &res), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn refinement_halves_cell_size() {
        let (g, o) = two_discs(1e-3);
        let coarse = build_grid(&g, &o, &Resolution::default()).unwrap();
        let fine = build_grid(&g, &o, &Resolution::default().refined(2.0)).unwrap();
        let ratio = coarse.max_edge() / fine.max_edge();
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn ellipse_and_perturbed_pairs_mesh() {
        let a = InclusionShape::ellipse(vec![1.4, 0.8]).unwrap();
        let b = InclusionShape::perturbed_disc(2, 1.0, vec![0.1]).unwrap();
        let g = GapGeometry::new(BoundaryGraph::Shape(a), BoundaryGraph::Shape(b), 1e-3, 0.5, None).unwrap();
        let o = OuterDomain::new(
            OuterKind::RoundedRectangle { half_width: 4.0, half_height: 4.0, corner_radius: 1.0 },
            0.1,
        )
        .unwrap();
        let m = build_grid(&g, &o, &Resolution::default()).unwrap();
        assert!(m.worst_cotangent_sum() >= -1e-10);
        assert!(matches!(g.upper, BoundaryGraph::Shape(ref s) if matches!(s.kind(), ShapeKind::Ellipse { .. })));
    }

    #[test]
    fn annulus_mesh_area() {
        let m = annulus_grid(0.5, 2.0, 128).unwrap();
        let exact = PI * (4.0 - 0.25);
        assert!((total_area(&m) - exact).abs() / exact < 1e-3);
        assert!(m.worst_cotangent_sum() >= -1e-10);
    }
}

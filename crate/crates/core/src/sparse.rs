//! Sparse symmetric positive-definite linear algebra: CSR storage, reverse
//! Cuthill-McKee ordering, an envelope Cholesky factorization and
//! preconditioned conjugate gradients.

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Compressed sparse row matrix with sorted column indices.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(i, _, _) in triplets {
            counts[i + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            scratch.clear();
            scratch.extend((counts[i]..counts[i + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|e| e.0);
            for &(j, v) in &scratch {
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            if x[i] == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * y[self.col_idx[k]];
            }
            total += x[i] * s;
        }
        total
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Principal submatrix on the rows/columns listed in `keep`.
    pub fn principal_submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let mut row_ptr = Vec::with_capacity(keep.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for &old in keep {
            for (j, v) in self.row(old) {
                if map[j] != usize::MAX {
                    col_idx.push(map[j]);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        // `keep` may be unsorted; restore sorted columns per row
        let mut m = CsrMatrix { n: keep.len(), row_ptr, col_idx, values };
        for i in 0..m.n {
            let r = m.row_ptr[i]..m.row_ptr[i + 1];
            let mut pairs: Vec<(usize, f64)> =
                m.col_idx[r.clone()].iter().copied().zip(m.values[r.clone()].iter().copied()).collect();
            pairs.sort_by_key(|e| e.0);
            for (k, (j, v)) in pairs.into_iter().enumerate() {
                m.col_idx[r.start + k] = j;
                m.values[r.start + k] = v;
            }
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (v - self.get(j, i)).abs() <= tol * v.abs().max(1.0)))
    }
}

/// Reverse Cuthill-McKee ordering; `perm[new] = old`.
pub fn rcm_ordering(a: &CsrMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).filter(|&(j, _)| j != i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| degree[i]);
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(a, seed, &degree);
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut nbrs = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(a.row(v).map(|(j, _)| j).filter(|&j| !visited[j]));
            nbrs.sort_by_key(|&j| (degree[j], j));
            for &j in &nbrs {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(a: &CsrMatrix, start: usize) -> Vec<usize> {
    let mut level = vec![usize::MAX; a.dim()];
    level[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for (j, _) in a.row(v) {
            if level[j] == usize::MAX {
                level[j] = level[v] + 1;
                queue.push_back(j);
            }
        }
    }
    level
}

fn pseudo_peripheral(a: &CsrMatrix, seed: usize, degree: &[usize]) -> usize {
    let mut node = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let level = bfs_levels(a, node);
        let depth = level.iter().filter(|&&l| l != usize::MAX).copied().max().unwrap_or(0);
        if depth <= ecc && node != seed {
            break;
        }
        ecc = depth;
        let far = (0..a.dim())
            .filter(|&i| level[i] == depth)
            .min_by_key(|&i| degree[i])
            .unwrap_or(node);
        if far == node {
            break;
        }
        node = far;
    }
    node
}

/// Cholesky factor stored row-wise over the envelope of a symmetrically
/// permuted matrix.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factor with a reverse Cuthill-McKee ordering.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        Self::factor_with(a, rcm_ordering(a))
    }

    pub fn factor_with(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.dim();
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0usize; n];
        for (i, f) in first.iter_mut().enumerate() {
            *f = a.row(perm[i]).map(|(j, _)| inv[j]).filter(|&j| j <= i).min().unwrap_or(i);
        }
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i - first[i] + 1));
        }
        let mut data = vec![0.0; offset[n]];
        for i in 0..n {
            for (j, v) in a.row(perm[i]) {
                let jj = inv[j];
                if jj <= i {
                    data[offset[i] + jj - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let (done, rest) = data.split_at_mut(offset[i]);
            let row_i = &mut rest[..i - fi + 1];
            for j in fi..i {
                let fj = first[j];
                let start = fi.max(fj);
                let row_j = &done[offset[j]..offset[j] + (j - fj + 1)];
                let mut s = row_i[j - fi];
                let li = &row_i[start - fi..j - fi];
                let lj = &row_j[start - fj..j - fj];
                s -= li.iter().zip(lj).map(|(x, y)| x * y).sum::<f64>();
                row_i[j - fi] = s / row_j[j - fj];
            }
            let d = row_i[i - fi] - row_i[..i - fi].iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Solver {
                    message: format!("non-positive pivot {d:e} at row {i} during Cholesky"),
                    residual: f64::NAN,
                });
            }
            row_i[i - fi] = d.sqrt();
        }
        Ok(Self { perm, first, offset, data })
    }

    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            let s: f64 = row[..i - fi].iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] = (y[i] - s) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            let xi = y[i] / row[i - fi];
            y[i] = xi;
            for (k, l) in row[..i - fi].iter().enumerate() {
                y[fi + k] -= l * xi;
            }
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    /// Solve followed by one step of iterative refinement against `a`.
    pub fn solve_refined(&self, a: &CsrMatrix, b: &[f64]) -> Vec<f64> {
        let mut x = self.solve(b);
        let ax = a.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let d = self.solve(&r);
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += di;
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    Jacobi,
    Ic0,
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Incomplete Cholesky with zero fill, lower factor in CSR.
struct Ic0 {
    l: CsrMatrix,
    diag_pos: Vec<usize>,
}

impl Ic0 {
    fn new(a: &CsrMatrix) -> Option<Self> {
        let n = a.dim();
        let mut trip = Vec::new();
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    trip.push((i, j, v));
                }
            }
        }
        let mut l = CsrMatrix::from_triplets(n, &trip);
        let diag_pos: Vec<usize> = (0..n).map(|i| l.row_ptr[i + 1] - 1).collect();
        for i in 0..n {
            let ri = l.row_ptr[i]..l.row_ptr[i + 1];
            for kk in ri.clone() {
                let j = l.col_idx[kk];
                // sum over common columns < j of L_ik L_jk
                let mut s = 0.0;
                let (mut p, mut q) = (ri.start, l.row_ptr[j]);
                while p < kk && q < diag_pos[j] {
                    let (cp, cq) = (l.col_idx[p], l.col_idx[q]);
                    if cp == cq {
                        s += l.values[p] * l.values[q];
                        p += 1;
                        q += 1;
                    } else if cp < cq {
                        p += 1;
                    } else {
                        q += 1;
                    }
                }
                if j < i {
                    l.values[kk] = (l.values[kk] - s) / l.values[diag_pos[j]];
                } else {
                    let d = l.values[kk] - s;
                    if !(d > 0.0) {
                        return None;
                    }
                    l.values[kk] = d.sqrt();
                }
            }
        }
        Some(Self { l, diag_pos })
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = r.len();
        for i in 0..n {
            let mut s = r[i];
            for k in self.l.row_ptr[i]..self.diag_pos[i] {
                s -= self.l.values[k] * z[self.l.col_idx[k]];
            }
            z[i] = s / self.l.values[self.diag_pos[i]];
        }
        for i in (0..n).rev() {
            z[i] /= self.l.values[self.diag_pos[i]];
            let zi = z[i];
            for k in self.l.row_ptr[i]..self.diag_pos[i] {
                z[self.l.col_idx[k]] -= self.l.values[k] * zi;
            }
        }
    }
}

/// Preconditioned conjugate gradients, stopping at `||r|| <= tol ||b||`.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
    precond: Preconditioner,
) -> Result<PcgOutcome> {
    let n = a.dim();
    let bnorm = norm2(b);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    if bnorm == 0.0 {
        return Ok(PcgOutcome { x: vec![0.0; n], iterations: 0, relative_residual: 0.0 });
    }
    let ic = match precond {
        Preconditioner::Ic0 => Ic0::new(a),
        Preconditioner::Jacobi => None,
    };
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|d| 1.0 / d).collect();
    let apply = |r: &[f64], z: &mut [f64]| match &ic {
        Some(f) => f.apply(r, z),
        None => {
            for i in 0..r.len() {
                z[i] = r[i] * inv_diag[i];
            }
        }
    };
    let mut r: Vec<f64> = b.iter().zip(a.mul_vec(&x)).map(|(bi, ai)| bi - ai).collect();
    let mut z = vec![0.0; n];
    apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = norm2(&r) / bnorm;
    for it in 0..max_iter {
        if rel <= tol {
            return Ok(PcgOutcome { x, iterations: it, relative_residual: rel });
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Solver { message: "matrix not positive definite in CG".into(), residual: rel });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = norm2(&r) / bnorm;
        apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if rel <= tol {
        return Ok(PcgOutcome { x, iterations: max_iter, relative_residual: rel });
    }
    Err(Error::Solver { message: format!("CG did not converge in {max_iter} iterations"), residual: rel })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

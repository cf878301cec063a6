//! Small dense linear-algebra kernel in 64-bit floats.
//!
//! Holds the row-major [`Matrix`] type, a cyclic Jacobi symmetric
//! eigensolver, Gram-Schmidt orthonormalization and rank-one deflation.

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[i]` pairs with `eigenvalues[i]`.
    pub eigenvectors: Vec<Vec<f64>>,
}

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(a: &Matrix) -> Result<EigenResult> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::invalid(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let mut m = a.clone();
    // symmetrize exactly so rotations act on one consistent matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);

    let total = m.frobenius_norm();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off == 0.0 || off.sqrt() <= 1e-15 * total {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                if apq.abs() <= 1e-18 * (m[(p, p)].abs() + m[(q, q)].abs()) {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let eigenvectors = order
        .iter()
        .map(|&j| {
            let mut col = v.column(j);
            let nrm = norm(&col);
            col.iter_mut().for_each(|x| *x /= nrm);
            col
        })
        .collect();
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Removes the component along unit vector `b` from every row.
pub fn deflate(vectors: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != vectors.cols() {
        return Err(Error::invalid(format!(
            "deflation direction has length {}, rows have {}",
            b.len(),
            vectors.cols()
        )));
    }
    if (norm(b) - 1.0).abs() > 1e-10 {
        return Err(Error::invalid("deflation direction must be unit norm"));
    }
    let mut out = vectors.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let c = dot(row, b);
        for (r, bj) in row.iter_mut().zip(b) {
            *r -= c * bj;
        }
        // a second pass removes the rounding residue of the first
        let c2 = dot(row, b);
        for (r, bj) in row.iter_mut().zip(b) {
            *r -= c2 * bj;
        }
    }
    Ok(out)
}

const INDEPENDENCE_TOL: f64 = 1e-10;

/// Modified Gram-Schmidt with one re-orthogonalization pass.
pub fn orthonormalize(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for (index, v) in vectors.iter().enumerate() {
        if let Some(first) = out.first() {
            if first.len() != v.len() {
                return Err(Error::invalid("vectors differ in length"));
            }
        }
        let original = norm(v);
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &out {
                let c = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let n = norm(&w);
        if original == 0.0 || n <= INDEPENDENCE_TOL * original.max(1.0) {
            return Err(Error::DegenerateBasis { index });
        }
        w.iter_mut().for_each(|x| *x /= n);
        out.push(w);
    }
    Ok(out)
}

/// Extends an orthonormal set to a basis of R^d with standard-basis candidates,
/// greedily taking the candidate with the largest remaining component.
pub fn orthonormal_completion(basis: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut all: Vec<Vec<f64>> = basis.to_vec();
    let mut added = Vec::new();
    let mut used = vec![false; dim];
    while all.len() < dim {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for (j, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let mut w = vec![0.0; dim];
            w[j] = 1.0;
            for _ in 0..2 {
                for q in &all {
                    let c = dot(&w, q);
                    for (wi, qi) in w.iter_mut().zip(q) {
                        *wi -= c * qi;
                    }
                }
            }
            let n = norm(&w);
            if best.as_ref().is_none_or(|(_, _, bn)| n > *bn) {
                best = Some((j, w, n));
            }
        }
        match best {
            Some((j, mut w, n)) if n > 1e-6 => {
                w.iter_mut().for_each(|x| *x /= n);
                used[j] = true;
                all.push(w.clone());
                added.push(w);
            }
            _ => {
                return Err(Error::Numeric(format!(
                    "orthonormal completion stalled at {} of {dim} vectors",
                    all.len()
                )))
            }
        }
    }
    Ok(added)
}

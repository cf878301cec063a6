//! Per-label subspaces of the representation space.
//!
//! Each abstract label owns `p` orthonormal directions; whatever is left of
//! R^d forms a residual basis shared by every label. Projecting a vector for
//! label `l` keeps its components along that label's directions plus the
//! residual, and drops the directions owned by other labels.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm, orthonormal_completion, sym_eig, Matrix};
use crate::rng::Rng;
use crate::sampling::ProjectionTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    Fixed,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBases {
    pub mode: BasisMode,
    pub dim: usize,
    pub p: usize,
    /// `per_label[l]` holds that label's `p` orthonormal rows.
    pub per_label: Vec<Vec<Vec<f64>>>,
    /// Orthonormal completion shared by all labels.
    pub residual: Vec<Vec<f64>>,
}

fn check_capacity(dim: usize, labels: usize, p: usize) -> Result<()> {
    if labels == 0 || p == 0 || p * labels > dim {
        return Err(Error::Capacity { p, labels, dim });
    }
    Ok(())
}

fn unit(dim: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[i] = 1.0;
    e
}

/// Label `a` owns coordinates `a*p .. (a+1)*p`; the residual owns `l*p .. d`.
pub fn fixed_allocation(dim: usize, labels: usize, p: usize) -> Result<SubspaceBases> {
    check_capacity(dim, labels, p)?;
    Ok(SubspaceBases {
        mode: BasisMode::Fixed,
        dim,
        p,
        per_label: (0..labels)
            .map(|a| (a * p..(a + 1) * p).map(|i| unit(dim, i)).collect())
            .collect(),
        residual: (labels * p..dim).map(|i| unit(dim, i)).collect(),
    })
}

impl SubspaceBases {
    pub fn num_labels(&self) -> usize {
        self.per_label.len()
    }

    /// Every basis row: labels in order, then the residual.
    pub fn stacked(&self) -> Vec<Vec<f64>> {
        self.per_label
            .iter()
            .flatten()
            .chain(self.residual.iter())
            .cloned()
            .collect()
    }

    /// `B^T B v` for the label's rows stacked with the residual.
    pub fn project(&self, v: &[f64], label: usize) -> Result<Vec<f64>> {
        if label >= self.num_labels() {
            return Err(Error::invalid(format!(
                "label {label} outside [0, {})",
                self.num_labels()
            )));
        }
        if v.len() != self.dim {
            return Err(Error::invalid(format!(
                "vector of length {} against dimension {}",
                v.len(),
                self.dim
            )));
        }
        if self.mode == BasisMode::Fixed {
            // coordinate mask: zero the blocks owned by other labels
            let mut out = v.to_vec();
            let l = self.num_labels();
            for other in (0..l).filter(|&o| o != label) {
                out[other * self.p..(other + 1) * self.p]
                    .iter_mut()
                    .for_each(|x| *x = 0.0);
            }
            return Ok(out);
        }
        let mut out = vec![0.0; self.dim];
        for row in self.per_label[label].iter().chain(self.residual.iter()) {
            let c = dot(row, v);
            for (o, r) in out.iter_mut().zip(row) {
                *o += c * r;
            }
        }
        Ok(out)
    }
}

/// Within- and between-class scatter of class-tagged rows.
pub fn scatter_matrices(vectors: &Matrix, classes: &[usize]) -> Result<(Matrix, Matrix)> {
    let d = vectors.cols();
    if classes.len() != vectors.rows() {
        return Err(Error::invalid("one class tag per row required"));
    }
    let mut ids: Vec<usize> = classes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::DegenerateSubtask(format!(
            "need at least two classes, found {}",
            ids.len()
        )));
    }
    let mut means = vec![vec![0.0; d]; ids.len()];
    let mut counts = vec![0usize; ids.len()];
    let slot = |c: usize| ids.binary_search(&c).expect("class present");
    for (row, &c) in vectors.row_iter().zip(classes) {
        let s = slot(c);
        counts[s] += 1;
        for (m, x) in means[s].iter_mut().zip(row) {
            *m += x;
        }
    }
    if let Some(s) = counts.iter().position(|&n| n < 2) {
        return Err(Error::DegenerateSubtask(format!(
            "class {} has {} sample(s), need at least 2",
            ids[s], counts[s]
        )));
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|x| *x /= n as f64);
    }
    let total = vectors.rows() as f64;
    let mut overall = vec![0.0; d];
    for (m, &n) in means.iter().zip(&counts) {
        for (o, x) in overall.iter_mut().zip(m) {
            *o += x * n as f64 / total;
        }
    }

    let mut within = Matrix::zeros(d, d);
    for (row, &c) in vectors.row_iter().zip(classes) {
        let mean = &means[slot(c)];
        let diff: Vec<f64> = row.iter().zip(mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            if diff[i] == 0.0 {
                continue;
            }
            for j in i..d {
                within[(i, j)] += diff[i] * diff[j];
            }
        }
    }
    let mut between = Matrix::zeros(d, d);
    for (m, &n) in means.iter().zip(&counts) {
        let diff: Vec<f64> = m.iter().zip(&overall).map(|(x, o)| x - o).collect();
        for i in 0..d {
            for j in i..d {
                between[(i, j)] += n as f64 * diff[i] * diff[j];
            }
        }
    }
    for s in [&mut within, &mut between] {
        for i in 0..d {
            for j in 0..i {
                s[(i, j)] = s[(j, i)];
            }
        }
    }
    Ok((within, between))
}

/// Top Fisher discriminant direction of class-tagged rows.
///
/// Solves `S_b x = mu (S_w + eps I) x` through symmetric whitening, with
/// `eps = 1e-6 * trace(S_w) / d`. The result is unit-norm with its first
/// nonzero component positive.
pub fn lda_component(vectors: &Matrix, classes: &[usize]) -> Result<Vec<f64>> {
    let d = vectors.cols();
    let (mut within, between) = scatter_matrices(vectors, classes)?;
    let eps = (1e-6 * within.trace() / d as f64).max(1e-12);
    for i in 0..d {
        within[(i, i)] += eps;
    }
    let we = sym_eig(&within)?;
    // W = S_w^{-1/2}
    let mut whiten = Matrix::zeros(d, d);
    for (lam, v) in we.eigenvalues.iter().zip(&we.eigenvectors) {
        let s = 1.0 / lam.max(eps).sqrt();
        for i in 0..d {
            for j in 0..d {
                whiten[(i, j)] += s * v[i] * v[j];
            }
        }
    }
    let m = whiten.matmul(&between)?.matmul(&whiten)?;
    let mut sym = m.clone();
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    let me = sym_eig(&sym)?;
    let top = me.eigenvalues[0];
    if top <= 1e-12 * sym.max_abs().max(f64::MIN_POSITIVE) || top <= 0.0 {
        return Err(Error::DegenerateSubtask(
            "classes are not separable along any direction".into(),
        ));
    }
    let x = whiten.matvec(&me.eigenvectors[0])?;
    let n = norm(&x);
    let mut b: Vec<f64> = x.iter().map(|v| v / n).collect();
    canonicalize_sign(&mut b);
    Ok(b)
}

/// Flips `v` so that its first component with magnitude above 1e-10 is positive.
pub fn canonicalize_sign(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-10) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Iterative discriminant extraction with deflation.
///
/// Runs `l * p` steps. Each round of `l` steps visits the labels in a fresh
/// random order; a step extracts the top discriminant direction of the
/// chosen label's classes from the working vectors, stores it for that label
/// and deflates all working vectors along it. Remaining directions become
/// the shared residual.
pub fn supervised_selection(
    table: &ProjectionTable,
    lambda_map: &[usize],
    p: usize,
    rng: &mut Rng,
) -> Result<SubspaceBases> {
    let d = table.dim();
    let labels = table.label_index.len();
    check_capacity(d, labels, p)?;
    let mut working = table.vectors.clone();
    let mut per_label: Vec<Vec<Vec<f64>>> = vec![Vec::new(); labels];
    let mut extracted: Vec<Vec<f64>> = Vec::with_capacity(labels * p);
    let mut order: Vec<usize> = (0..labels).collect();
    for _ in 0..p {
        order.shuffle(rng);
        for &label in &order {
            let rows = &table.label_index[label];
            let mut sub = Matrix::zeros(rows.len(), d);
            let mut classes = Vec::with_capacity(rows.len());
            for (r, &i) in rows.iter().enumerate() {
                sub.row_mut(r).copy_from_slice(working.row(i));
                classes.push(table.class_of[i]);
            }
            debug_assert!(classes.iter().all(|&c| lambda_map[c] == label));
            let mut b = lda_component(&sub, &classes).map_err(|e| match e {
                Error::DegenerateSubtask(m) => {
                    Error::DegenerateSubtask(format!("label {label}: {m}"))
                }
                other => other,
            })?;
            // remove rounding drift toward earlier directions
            for _ in 0..2 {
                for q in &extracted {
                    let c = dot(&b, q);
                    for (bi, qi) in b.iter_mut().zip(q) {
                        *bi -= c * qi;
                    }
                }
            }
            let n = norm(&b);
            if n < 1e-6 {
                return Err(Error::Numeric(format!(
                    "label {label}: discriminant direction collapsed after deflation"
                )));
            }
            b.iter_mut().for_each(|x| *x /= n);
            canonicalize_sign(&mut b);
            working = linalg::deflate(&working, &b)?;
            extracted.push(b.clone());
            per_label[label].push(b);
        }
    }
    let residual = orthonormal_completion(&extracted, d)?;
    Ok(SubspaceBases {
        mode: BasisMode::Supervised,
        dim: d,
        p,
        per_label,
        residual,
    })
}

//! Dense SVD and eigen kernels for small matrices, plus the truncation,
//! tail-energy, projection and angle helpers built on them.
//!
//! `thin_svd` is a one-sided (Hestenes) Jacobi SVD. The Gram route
//! (`gram_right_singular`) diagonalises `M Mᵀ` with a cyclic Jacobi
//! eigensolver, which is the cheap path when there are few rows and many
//! columns.

use crate::error::{Error, Result};

/// Convergence target for the off-diagonal residual of the Jacobi sweeps.
pub const SWEEP_TOLERANCE: f64 = 1e-12;
/// Sweep budget before giving up.
pub const MAX_SWEEPS: usize = 100;
/// Gram eigenvalues below `RANK_CUTOFF * trace(G)` are treated as null directions.
pub const RANK_CUTOFF: f64 = 1e-12;

/// Row-major dense matrix.
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

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        let mut m = Matrix::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
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
            return Err(Error::ShapeMismatch(format!(
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
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix applied to length-{} vector",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::ShapeMismatch(
                "matrix difference of unequal shapes".into(),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

/// Thin SVD `A = U·diag(S)·Vᵀ` with `q = min(m, n)` components.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×q, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// n×q, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.s.len())
    }

    /// Sum of the leading `r` rank-one terms.
    pub fn reconstruct_rank(&self, r: usize) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for l in 0..r.min(self.s.len()) {
            let s = self.s[l];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let a = s * self.u[(i, l)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += a * self.v[(j, l)];
                }
            }
        }
        out
    }
}

/// One-sided Jacobi SVD.
///
/// Each right singular vector is signed so that its largest-magnitude entry
/// (lowest index on ties) is nonnegative.
pub fn thin_svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::EmptyInput("thin_svd matrix"));
    }
    if !a.is_finite() {
        return Err(Error::InvalidArgument(
            "thin_svd input has non-finite entries".into(),
        ));
    }
    let mut out = if a.rows() >= a.cols() {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

/// Hestenes iteration on the columns of a tall (m ≥ n) matrix.
fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let pair_tol = f64::EPSILON * (m as f64).max(1.0);

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        let mut off2 = 0.0;
        let mut diag2 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&w[i], &w[i]);
                let beta = dot(&w[j], &w[j]);
                let gamma = dot(&w[i], &w[j]);
                off2 += gamma * gamma;
                diag2 += alpha * beta;
                if gamma == 0.0 || gamma.abs() <= pair_tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        residual = if diag2 > 0.0 {
            (off2 / diag2).sqrt()
        } else {
            0.0
        };
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged && residual > SWEEP_TOLERANCE {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let zero_cut = smax * f64::EPSILON * (m.max(n) as f64);

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (l, &j) in order.iter().enumerate() {
        if s[l] > zero_cut && s[l] > 0.0 {
            ucols.push(w[j].iter().map(|x| x / s[l]).collect());
        } else {
            ucols.push(vec![0.0; m]);
            missing.push(l);
        }
    }
    complete_orthonormal(&mut ucols, &missing);

    let vcols: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    Ok(SvdResult {
        u: Matrix::from_columns(m, &ucols),
        s,
        v: Matrix::from_columns(n, &vcols),
    })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to all
/// other columns, drawn from the standard basis by Gram–Schmidt.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut candidate = 0;
    for &l in missing {
        loop {
            assert!(candidate < m, "not enough basis vectors to complete U");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == l || (missing.contains(&k) && norm(c) == 0.0) {
                        continue;
                    }
                    let p = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= p * y;
                    }
                }
            }
            let nrm = norm(&e);
            if nrm > 0.5 {
                cols[l] = e.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

fn fix_signs(svd: &mut SvdResult) {
    for l in 0..svd.s.len() {
        let col = svd.v.column(l);
        if sign_flip_needed(&col) {
            for i in 0..svd.v.rows() {
                svd.v[(i, l)] = -svd.v[(i, l)];
            }
            for i in 0..svd.u.rows() {
                svd.u[(i, l)] = -svd.u[(i, l)];
            }
        }
    }
}

/// Whether the largest-magnitude entry (first on ties) is negative.
fn sign_flip_needed(v: &[f64]) -> bool {
    let mut best = 0.0f64;
    let mut sign_neg = false;
    for &x in v {
        if x.abs() > best {
            best = x.abs();
            sign_neg = x < 0.0;
        }
    }
    sign_neg
}

pub(crate) fn canonical_sign(v: &mut [f64]) {
    if sign_flip_needed(v) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in nonincreasing order and eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::ShapeMismatch(
            "symmetric_eigen needs a square matrix".into(),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyInput("symmetric_eigen matrix"));
    }
    if !a.is_finite() {
        return Err(Error::InvalidArgument(
            "symmetric_eigen input has non-finite entries".into(),
        ));
    }
    let mut m = a.clone();
    let mut vecs = Matrix::identity(n);
    let total = m.frobenius_norm();
    let mut residual = 0.0;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off2 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off2 += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        residual = if total > 0.0 {
            off2.sqrt() / total
        } else {
            0.0
        };
        if residual <= SWEEP_TOLERANCE * 1e-4 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                if t == 0.0 {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
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
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = vecs[(k, p)];
                    let vkq = vecs[(k, q)];
                    vecs[(k, p)] = c * vkp - s * vkq;
                    vecs[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && residual > SWEEP_TOLERANCE {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[(y, y)].total_cmp(&m[(x, x)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let cols: Vec<Vec<f64>> = order.iter().map(|&i| vecs.column(i)).collect();
    Ok((values, Matrix::from_columns(n, &cols)))
}

/// Eigen-decomposition of the Gram matrix `G = M Mᵀ` of a short, wide matrix.
#[derive(Debug, Clone)]
pub struct GramDecomposition {
    /// Eigenvalues of `G`, nonincreasing.
    pub eigenvalues: Vec<f64>,
    eigenvectors: Matrix,
    pub trace: f64,
}

impl GramDecomposition {
    /// Singular values of `M`, i.e. `√max(λ, 0)`.
    pub fn singular_values(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect()
    }

    /// Number of eigenvalues above `RANK_CUTOFF · trace(G)`.
    pub fn numerical_rank(&self) -> usize {
        let cutoff = RANK_CUTOFF * self.trace;
        self.eigenvalues
            .iter()
            .filter(|&&l| l > cutoff && l > 0.0)
            .count()
    }

    /// `v_j = Mᵀu_j / ‖Mᵀu_j‖` for the top `k` eigenvectors `u_j`.
    pub fn right_vectors(&self, rows: &[Vec<f64>], k: usize) -> Result<GramSvd> {
        let n = rows.len();
        if n != self.eigenvectors.rows() {
            return Err(Error::ShapeMismatch(
                "rows do not match the decomposition".into(),
            ));
        }
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!(
                "k = {k} must lie in 1..={n}"
            )));
        }
        let rank = self.numerical_rank();
        if k > rank {
            return Err(Error::RankDeficient { requested: k, rank });
        }
        let d = rows[0].len();
        let mut vectors = Vec::with_capacity(k);
        let mut values = Vec::with_capacity(k);
        for j in 0..k {
            let u = self.eigenvectors.column(j);
            let mut v = vec![0.0; d];
            for (ui, row) in u.iter().zip(rows) {
                for (vx, rx) in v.iter_mut().zip(row) {
                    *vx += ui * rx;
                }
            }
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            canonical_sign(&mut v);
            vectors.push(v);
            values.push(self.eigenvalues[j].sqrt());
        }
        Ok(GramSvd {
            vectors,
            values,
            rank,
        })
    }
}

pub fn gram_decompose(rows: &[Vec<f64>]) -> Result<GramDecomposition> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyInput("gram rows"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::ShapeMismatch("ragged rows".into()));
    }
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(&rows[i], &rows[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let trace = (0..n).map(|i| g[(i, i)]).sum();
    let (eigenvalues, eigenvectors) = symmetric_eigen(&g)?;
    Ok(GramDecomposition {
        eigenvalues,
        eigenvectors,
        trace,
    })
}

/// Top right singular vectors of a short, wide matrix.
#[derive(Debug, Clone)]
pub struct GramSvd {
    /// `k` unit vectors of length D.
    pub vectors: Vec<Vec<f64>>,
    /// Matching singular values.
    pub values: Vec<f64>,
    /// Numerical rank after the `RANK_CUTOFF` test.
    pub rank: usize,
}

/// Computes `G = M Mᵀ`, its top-`k` eigenpairs `(λ, u)`, and returns
/// `v = Mᵀu / √λ` with `σ = √λ`. Eigenvalues below `1e-12·trace(G)` are null
/// directions and cannot be requested.
pub fn gram_right_singular(rows: &[Vec<f64>], k: usize) -> Result<GramSvd> {
    gram_decompose(rows)?.right_vectors(rows, k)
}

/// Best rank-`r` approximation in Frobenius norm.
pub fn truncate_rank(a: &Matrix, r: usize) -> Result<Matrix> {
    let q = a.rows().min(a.cols());
    if r == 0 || r > q {
        return Err(Error::InvalidArgument(format!("rank {r} outside 1..={q}")));
    }
    Ok(thin_svd(a)?.reconstruct_rank(r))
}

/// `(Σ_{l>r} σ_l²)^{1/2}`; equals ‖A‖_F for `r = 0`.
pub fn tail_energy(a: &Matrix, r: usize) -> Result<f64> {
    let q = a.rows().min(a.cols());
    if r > q {
        return Err(Error::InvalidArgument(format!("rank {r} outside 0..={q}")));
    }
    let svd = thin_svd(a)?;
    Ok(svd.s[r..].iter().map(|s| s * s).sum::<f64>().sqrt())
}

/// Operator (spectral) norm.
pub fn op_norm(a: &Matrix) -> Result<f64> {
    Ok(thin_svd(a)?.s.first().copied().unwrap_or(0.0))
}

/// `√(1 − cos²∠(a, b))`, clamped to [0, 1]. Invariant to the sign of either argument.
pub fn sin_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("sin_angle of unequal lengths".into()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("sin_angle"));
    }
    let ua: Vec<f64> = a.iter().map(|x| x / na).collect();
    let ub: Vec<f64> = b.iter().map(|x| x / nb).collect();
    let cos = dot(&ua, &ub).clamp(-1.0, 1.0);
    // Norm of the component of â orthogonal to b̂; keeps precision at small angles.
    let sin = ua
        .iter()
        .zip(&ub)
        .map(|(x, y)| {
            let r = x - cos * y;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(sin.clamp(0.0, 1.0))
}

/// Orthogonal projector onto the span of orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    basis: Vec<Vec<f64>>,
    dim: usize,
}

impl Projector {
    /// Columns must be orthonormal to 1e-10.
    pub fn new(dim: usize, basis: Vec<Vec<f64>>) -> Result<Self> {
        for (i, b) in basis.iter().enumerate() {
            if b.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "basis vector {i} has length {}, expected {dim}",
                    b.len()
                )));
            }
            for (j, c) in basis.iter().enumerate().take(i + 1) {
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot(b, c) - target).abs() > 1e-10 {
                    return Err(Error::InvalidArgument(format!(
                        "basis columns {j},{i} are not orthonormal"
                    )));
                }
            }
        }
        Ok(Projector { basis, dim })
    }

    pub fn empty(dim: usize) -> Self {
        Projector {
            basis: Vec::new(),
            dim,
        }
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// `basis·(basisᵀx)`.
pub fn project(p: &Projector, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != p.dim {
        return Err(Error::ShapeMismatch(format!(
            "projector of dimension {} applied to length {}",
            p.dim,
            x.len()
        )));
    }
    let mut out = vec![0.0; p.dim];
    for b in &p.basis {
        let c = dot(b, x);
        for (o, bi) in out.iter_mut().zip(b) {
            *o += c * bi;
        }
    }
    Ok(out)
}

/// `x − project(x)`.
pub fn reject(p: &Projector, x: &[f64]) -> Result<Vec<f64>> {
    let pr = project(p, x)?;
    Ok(x.iter().zip(&pr).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_row_major(m, n, data).unwrap()
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.transpose().matmul(q).unwrap();
        g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
    }

    #[test]
    fn identity_and_diagonal() {
        let s = thin_svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.s, vec![1.0, 1.0, 1.0]);
        let s = thin_svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.s, vec![3.0, 2.0, 1.0]);
        let s = thin_svd(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.s, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_invariants_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, n) in &[(6, 4), (4, 6), (1, 5), (5, 1), (9, 9), (32, 3)] {
            let a = random(&mut rng, m, n);
            let s = thin_svd(&a).unwrap();
            assert!(orthonormality_error(&s.u) <= 1e-10);
            assert!(orthonormality_error(&s.v) <= 1e-10);
            let err = s.reconstruct().sub(&a).unwrap().frobenius_norm();
            assert!(err <= 1e-9 * (1.0 + a.frobenius_norm()), "{m}x{n}: {err}");
            assert!(s.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_u_is_completed() {
        let a = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
            vec![0.0, 0.0, 0.0],
            vec![-1.0, -2.0, -3.0],
        ])
        .unwrap();
        let s = thin_svd(&a).unwrap();
        assert!(s.s[1] < 1e-12 && s.s[2] < 1e-12);
        assert!(orthonormality_error(&s.u) <= 1e-10);
        assert!(s.reconstruct().sub(&a).unwrap().frobenius_norm() <= 1e-12);

        let zero = thin_svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(zero.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&zero.u) <= 1e-10);
    }

    #[test]
    fn sign_convention_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 5, 4);
        let s = thin_svd(&a).unwrap();
        for l in 0..4 {
            assert!(!sign_flip_needed(&s.v.column(l)));
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let a = Matrix::from_diag(&[1.0, f64::NAN]);
        assert!(thin_svd(&a).is_err());
    }

    #[test]
    fn gram_route_single_row() {
        let g = gram_right_singular(&[vec![3.0, 4.0]], 1).unwrap();
        assert!((g.values[0] - 5.0).abs() < 1e-12);
        assert!((g.vectors[0][0] - 0.6).abs() < 1e-12 && (g.vectors[0][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gram_route_hand_case() {
        let g = gram_right_singular(&[vec![-1.0, 0.0], vec![1.0, 0.0]], 1).unwrap();
        assert!((g.values[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((g.vectors[0][0].abs() - 1.0).abs() < 1e-12);
        assert!(g.vectors[0][1].abs() < 1e-12);
        assert_eq!(g.rank, 1);
        let err = gram_right_singular(&[vec![-1.0, 0.0], vec![1.0, 0.0]], 2).unwrap_err();
        assert!(matches!(
            err,
            Error::RankDeficient {
                requested: 2,
                rank: 1
            }
        ));
    }

    #[test]
    fn gram_route_matches_direct_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 3, 50);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| a.row(i).to_vec()).collect();
        let g = gram_right_singular(&rows, 3).unwrap();
        let s = thin_svd(&a).unwrap();
        for j in 0..3 {
            assert!(sin_angle(&g.vectors[j], &s.v.column(j)).unwrap() <= 1e-8);
            assert!((g.values[j] - s.s[j]).abs() <= 1e-10);
        }
    }

    #[test]
    fn truncation_cases() {
        let d = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let t = truncate_rank(&d, 2).unwrap();
        assert!(
            t.sub(&Matrix::from_diag(&[3.0, 2.0, 0.0]))
                .unwrap()
                .max_abs()
                < 1e-12
        );
        assert!((tail_energy(&d, 1).unwrap() - 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(tail_energy(&d, 3).unwrap(), 0.0);
        assert!((tail_energy(&d, 0).unwrap() - d.frobenius_norm()).abs() < 1e-12);
        assert!(truncate_rank(&d, 0).is_err());
        assert!(truncate_rank(&d, 4).is_err());
        assert!(tail_energy(&d, 4).is_err());

        let r1 = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(truncate_rank(&r1, 1).unwrap().sub(&r1).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn truncation_commutes_with_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 6, 4);
        let neg = Matrix::from_row_major(6, 4, a.as_slice().iter().map(|x| -x).collect()).unwrap();
        let ta = truncate_rank(&a, 2).unwrap();
        let tn = truncate_rank(&neg, 2).unwrap();
        for (x, y) in ta.as_slice().iter().zip(tn.as_slice()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn angles() {
        assert!(sin_angle(&[1.0, 2.0], &[1.0, 2.0]).unwrap() < 1e-15);
        assert_eq!(sin_angle(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        let s = sin_angle(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            sin_angle(&[1.0, 0.3], &[2.0, -1.0]).unwrap(),
            sin_angle(&[1.0, 0.3], &[-2.0, 1.0]).unwrap()
        );
        assert!(matches!(
            sin_angle(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector(_))
        ));
        // tiny angle keeps relative precision
        let s = sin_angle(&[1.0, 0.0], &[1.0, 1e-9]).unwrap();
        assert!((s - 1e-9).abs() < 1e-20);
    }

    #[test]
    fn projection_basics() {
        let p = Projector::new(2, vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(project(&p, &[3.0, 4.0]).unwrap(), vec![3.0, 0.0]);
        assert_eq!(reject(&p, &[3.0, 4.0]).unwrap(), vec![0.0, 4.0]);
        assert!(project(&p, &[1.0]).is_err());
        assert!(Projector::new(2, vec![vec![1.0, 1.0]]).is_err());
        let e = Projector::empty(3);
        assert_eq!(project(&e, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn symmetric_eigen_small() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        assert!(orthonormality_error(&vecs) < 1e-14);
    }
}

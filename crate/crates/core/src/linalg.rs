//! Dense real-matrix utilities shared by every test statistic.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which stores entries column-major,
//! so `vec(A)` is a plain copy of the storage. All covariance matrices in the
//! crate are indexed by this column-major `vec` ordering: entry `(r, s)` of a
//! `d x d` matrix lives at position `r + s * d`.
//!
//! The truncated SVD is the workhorse: a threshold `epsilon` zeroes every
//! singular value `<= epsilon`, giving a truncated matrix, its Moore-Penrose
//! inverse and an effective rank that stay continuous under consistent
//! estimation of the input.

use nalgebra::{DMatrix, DVector, Schur, SVD};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Singular values below this fraction of the largest are treated as exact zeros.
pub const SVD_ZERO_FLOOR: f64 = 1e-14;
/// Relative distance at which `epsilon` is considered to collide with a singular value.
pub const EPSILON_COLLISION: f64 = 1e-12;
/// Size of the upward nudge applied to a colliding `epsilon`, relative to the largest singular value.
pub const EPSILON_NUDGE: f64 = 1e-9;

const SVD_MAX_ITER: usize = 10_000;

pub(crate) fn ensure_square(a: &Mat) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Column-stacking vectorization.
pub fn vec(a: &Mat) -> Vector {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec`] for square matrices.
pub fn mat_d(v: &Vector, d: usize) -> Result<Mat> {
    if v.len() != d * d {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} cannot be reshaped to {d}x{d}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(d, d, v.as_slice()))
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// `[A, B] = AB - BA`.
pub fn commutator(a: &Mat, b: &Mat) -> Result<Mat> {
    let d = ensure_square(a)?;
    if ensure_square(b)? != d {
        return Err(Error::DimensionMismatch(format!(
            "commutator of {d}x{d} and {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(a * b - b * a)
}

/// `I_d (x) X - X' (x) I_d`, so that `Lambda(X) vec(A) = vec[X, A]`.
pub fn lambda_op(x: &Mat) -> Result<Mat> {
    let d = ensure_square(x)?;
    let eye = Mat::identity(d, d);
    Ok(kron(&eye, x) - kron(&x.transpose(), &eye))
}

/// Truncated singular value decomposition `Psi(eps) = U Pi(eps) W'`.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Left singular vectors, `rows x min(rows, cols)`.
    pub u: Mat,
    /// Right singular vectors, `cols x min(rows, cols)`.
    pub w: Mat,
    /// All singular values, non-increasing, after the zero floor.
    pub singular_values: Vector,
    /// Threshold actually applied (after any collision nudge).
    pub epsilon: f64,
    /// Threshold requested by the caller.
    pub requested_epsilon: f64,
    /// Number of singular values strictly greater than `epsilon`.
    pub effective_rank: usize,
}

impl TruncatedSvd {
    pub fn nudged(&self) -> bool {
        self.epsilon != self.requested_epsilon
    }

    /// The largest singular value, or 0 for an empty matrix.
    pub fn largest(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    /// `Psi(eps)`.
    pub fn truncated(&self) -> Mat {
        let r = self.effective_rank;
        let u = self.u.columns(0, r);
        let w = self.w.columns(0, r);
        let s = Mat::from_diagonal(&self.singular_values.rows(0, r).into_owned());
        u * s * w.transpose()
    }

    /// `Psi^+(eps)`: reciprocals of the retained singular values.
    pub fn pseudo_inverse(&self) -> Mat {
        let r = self.effective_rank;
        let u = self.u.columns(0, r);
        let w = self.w.columns(0, r);
        let s = Mat::from_diagonal(&self.singular_values.rows(0, r).map(|x| 1.0 / x));
        w * s * u.transpose()
    }
}

/// Truncated SVD of `psi` at threshold `epsilon >= 0`.
///
/// Singular values below `SVD_ZERO_FLOOR * max` are zeroed first. If any
/// singular value lies within `EPSILON_COLLISION` relative distance of a
/// positive `epsilon`, the threshold is moved up by `EPSILON_NUDGE * max`.
pub fn truncated_svd(psi: &Mat, epsilon: f64) -> Result<TruncatedSvd> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "truncation threshold must be finite and non-negative, got {epsilon}"
        )));
    }
    if psi.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    let tau = psi.nrows().min(psi.ncols());
    if tau == 0 {
        return Ok(TruncatedSvd {
            u: Mat::zeros(psi.nrows(), 0),
            w: Mat::zeros(psi.ncols(), 0),
            singular_values: Vector::zeros(0),
            epsilon,
            requested_epsilon: epsilon,
            effective_rank: 0,
        });
    }
    let svd =
        SVD::try_new(psi.clone(), true, true, f64::EPSILON, SVD_MAX_ITER).ok_or(Error::SvdNoConvergence)?;
    let u = svd.u.ok_or(Error::SvdNoConvergence)?;
    let w = svd.v_t.ok_or(Error::SvdNoConvergence)?.transpose();
    let mut order: Vec<usize> = (0..tau).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let u = Mat::from_fn(u.nrows(), tau, |r, c| u[(r, order[c])]);
    let w = Mat::from_fn(w.nrows(), tau, |r, c| w[(r, order[c])]);
    let mut singular_values = Vector::from_fn(tau, |i, _| svd.singular_values[order[i]]);

    let largest = singular_values[0];
    for s in singular_values.iter_mut() {
        if *s < SVD_ZERO_FLOOR * largest {
            *s = 0.0;
        }
    }
    let mut effective = epsilon;
    if epsilon > 0.0
        && singular_values
            .iter()
            .any(|&s| (s - epsilon).abs() <= EPSILON_COLLISION * epsilon)
    {
        effective = epsilon + EPSILON_NUDGE * largest;
    }
    let effective_rank = singular_values.iter().filter(|&&s| s > effective).count();
    Ok(TruncatedSvd {
        u,
        w,
        singular_values,
        epsilon: effective,
        requested_epsilon: epsilon,
        effective_rank,
    })
}

/// Moore-Penrose inverse with a relative tolerance, for matrices whose rank
/// is a structural property rather than a statistical estimate.
pub fn pinv(a: &Mat, rtol: f64) -> Result<Mat> {
    let t = truncated_svd(a, 0.0)?;
    let cut = rtol * t.largest();
    let t = TruncatedSvd {
        effective_rank: t.singular_values.iter().filter(|&&s| s > cut).count(),
        ..t
    };
    Ok(t.pseudo_inverse())
}

/// Numerical rank with a relative tolerance.
pub fn numerical_rank(a: &Mat, rtol: f64) -> Result<usize> {
    let t = truncated_svd(a, 0.0)?;
    let cut = rtol * t.largest();
    Ok(t.singular_values.iter().filter(|&&s| s > cut).count())
}

/// Selector `S_d` (`d(d-1) x d^2`) with `S_d vec(X)` the off-diagonal entries of
/// `X`, traversed column-major and skipping the diagonal.
pub fn offdiag_selector(d: usize) -> Result<Mat> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "off-diagonal selector needs d >= 2, got {d}"
        )));
    }
    Ok(offdiag_selector_any(d))
}

/// Same as [`offdiag_selector`] but allows `d = 1`, where it has no rows.
pub(crate) fn offdiag_selector_any(d: usize) -> Mat {
    let mut s = Mat::zeros(d * d.saturating_sub(1), d * d);
    let mut row = 0;
    for j in 0..d {
        for i in 0..d {
            if i != j {
                s[(row, i + j * d)] = 1.0;
                row += 1;
            }
        }
    }
    s
}

/// `offvec_d(X) = S_d vec(X)` without materializing the selector.
pub fn offvec(x: &Mat) -> Vector {
    let d = x.nrows();
    let mut out = Vec::with_capacity(d * d.saturating_sub(1));
    for j in 0..d {
        for i in 0..d {
            if i != j {
                out.push(x[(i, j)]);
            }
        }
    }
    Vector::from_vec(out)
}

/// Duplication matrix `G_d` with `G_d vech(A) = vec(A)` for symmetric `A`.
pub fn duplication_matrix(d: usize) -> Mat {
    let mut g = Mat::zeros(d * d, d * (d + 1) / 2);
    let mut col = 0;
    for j in 0..d {
        for i in j..d {
            g[(i + j * d, col)] = 1.0;
            g[(j + i * d, col)] = 1.0;
            col += 1;
        }
    }
    g
}

/// Lower triangle stacked column by column.
pub fn vech(a: &Mat) -> Result<Vector> {
    let d = ensure_square(a)?;
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in j..d {
            out.push(a[(i, j)]);
        }
    }
    Ok(Vector::from_vec(out))
}

/// Lift a covariance of `vech(A)` to a covariance of `vec(A)`: `G_d S G_d'`.
pub fn vech_to_vec_covariance(cov_vech: &Mat, d: usize) -> Result<Mat> {
    let g = duplication_matrix(d);
    if cov_vech.nrows() != g.ncols() || cov_vech.ncols() != g.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "vech covariance must be {0}x{0}",
            g.ncols()
        )));
    }
    Ok(&g * cov_vech * g.transpose())
}

/// Normalized power basis `(vec(M^1)/|M^1|_F, ..., vec(M^d)/|M^d|_F)`.
pub fn power_basis(m: &Mat) -> Result<Mat> {
    let d = ensure_square(m)?;
    let mut basis = Mat::zeros(d * d, d);
    let mut power = m.clone();
    for j in 0..d {
        if j > 0 {
            power = &power * m;
        }
        let norm = power.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroPower(j + 1));
        }
        basis.set_column(j, &(vec(&power) / norm));
    }
    Ok(basis)
}

/// `(A + A') / 2`.
pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Block-diagonal matrix from a list of blocks.
pub fn blkdiag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// 2-norm condition number via singular values (infinite when singular).
pub fn condition_number(a: &Mat) -> Result<f64> {
    let t = truncated_svd(a, 0.0)?;
    let smallest = t.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    if smallest == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(t.largest() / smallest)
}

/// Inverse of `v` through an LU solve, refused above `max_cond`.
pub fn guarded_inverse(v: &Mat, max_cond: f64) -> Result<Mat> {
    let d = ensure_square(v)?;
    let cond = condition_number(v)?;
    if !(cond < max_cond) {
        return Err(Error::Singular(format!(
            "condition number {cond:e} exceeds {max_cond:e}"
        )));
    }
    v.clone()
        .lu()
        .solve(&Mat::identity(d, d))
        .ok_or_else(|| Error::Singular("LU solve failed".into()))
}

/// Real eigen-decomposition of a general square matrix.
///
/// Returns eigenvalues in descending order and unit-norm eigenvectors as the
/// columns of the second element. `None` when the real Schur form has complex
/// eigenvalue pairs or fails to converge.
pub fn real_eigen(m: &Mat) -> Option<(Vec<f64>, Mat)> {
    let d = m.nrows();
    let schur = Schur::try_new(m.clone(), f64::EPSILON, SVD_MAX_ITER)?;
    let mut values: Vec<f64> = schur.eigenvalues()?.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let mut vectors = Mat::zeros(d, d);
    for (j, &lambda) in values.iter().enumerate() {
        let shifted = m - Mat::identity(d, d) * lambda;
        let svd = SVD::try_new(shifted, false, true, f64::EPSILON, SVD_MAX_ITER)?;
        let v_t = svd.v_t?;
        let (idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))?;
        let v = v_t.row(idx).transpose();
        vectors.set_column(j, &(v.clone() / v.norm()));
    }
    Some((values, vectors))
}

/// Orthonormal basis of the orthogonal complement of a unit vector, via a
/// Householder reflection `H` with `H e_1 = q`. Returns the full reflection;
/// its first column is `q` and the remaining columns span `q^perp`.
pub fn householder_completion(q: &Vector) -> Mat {
    let d = q.len();
    let q = q / q.norm();
    let mut e1 = Vector::zeros(d);
    e1[0] = 1.0;
    // reflect e1 onto q: H = I - 2 u u' with u = (e1 - q)/|e1 - q|
    let diff = &e1 - &q;
    let nd = diff.norm();
    if nd < 1e-15 {
        return Mat::identity(d, d);
    }
    let u = diff / nd;
    Mat::identity(d, d) - (&u * u.transpose()) * 2.0
}

/// Frobenius-normalize a matrix's columns and fix each column's sign so that
/// its largest-magnitude entry is positive.
pub fn normalize_columns(v: &mut Mat) {
    for mut col in v.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
        let mut best = 0.0f64;
        for &x in col.iter() {
            if x.abs() > best.abs() + 1e-12 {
                best = x;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

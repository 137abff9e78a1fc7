//! Optimizers behind the multi-sample and partial tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::check_row_stochastic;
use crate::linalg::{self, householder_completion, normalize_columns, real_eigen, Mat, Vector};

const MAX_HALVINGS: usize = 30;
const INIT_RETRIES: u64 = 5;
const INIT_MAX_COND: f64 = 1e10;
const LSTSQ_RTOL: f64 = 1e-12;
const FG_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDiagResult {
    pub v_hat: Mat,
    pub off_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Sum of squared off-diagonal entries.
pub fn off2(x: &Mat) -> f64 {
    let mut s = 0.0;
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            if i != j {
                s += x[(i, j)] * x[(i, j)];
            }
        }
    }
    s
}

/// `off(U) = sum_i off2(U^{-1} A_i U)`, infinite for singular `U`.
pub fn off_criterion(u: &Mat, matrices: &[Mat]) -> f64 {
    let lu = u.clone().lu();
    let mut total = 0.0;
    for a in matrices {
        match lu.solve(&(a * u)) {
            Some(x) => total += off2(&x),
            None => return f64::INFINITY,
        }
    }
    total
}

fn check_pool(matrices: &[Mat]) -> Result<usize> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InsufficientData("empty matrix pool".into()))?;
    let d = linalg::ensure_square(first)?;
    for m in matrices {
        if m.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "pool mixes {d}x{d} with {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "pool matrix has non-finite entries".into(),
            ));
        }
    }
    Ok(d)
}

fn usable(v: &Mat) -> bool {
    linalg::condition_number(v)
        .map(|c| c < INIT_MAX_COND)
        .unwrap_or(false)
}

fn initial_diagonalizer(matrices: &[Mat], seed: u64, warnings: &mut Vec<String>) -> Result<Mat> {
    if let Some((_, v)) = real_eigen(&matrices[0]) {
        if usable(&v) {
            return Ok(v);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = matrices[0].nrows();
    for _ in 0..INIT_RETRIES {
        let mut combo = Mat::zeros(d, d);
        for m in matrices {
            combo += m * rng.random_range(0.0..1.0);
        }
        if let Some((_, v)) = real_eigen(&combo) {
            if usable(&v) {
                warnings.push(
                    "first matrix has no real eigenbasis; initialized from a random combination".into(),
                );
                return Ok(v);
            }
        }
    }
    warnings.push("no real eigenbasis found; initialized from real Schur vectors".into());
    let schur = nalgebra::Schur::try_new(matrices[0].clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Optimizer("Schur decomposition failed".into()))?;
    let (q, _) = schur.unpack();
    if !usable(&q) {
        return Err(Error::Optimizer("no invertible initialization".into()));
    }
    Ok(q)
}

/// Least-squares solution of `J x = -c`.
fn lstsq_step(j: &Mat, c: &Vector) -> Result<Vector> {
    let svd =
        nalgebra::SVD::try_new(j.clone(), true, true, f64::EPSILON, 10_000).ok_or(Error::SvdNoConvergence)?;
    let cut = LSTSQ_RTOL * svd.singular_values.max();
    svd.solve(&(-c), cut).map_err(|e| Error::Optimizer(e.to_string()))
}

/// Gauss-Newton direction `W` (zero diagonal) for `V <- V (I + W)`, from the
/// linearization `off2(X + XW - WX)` of each transformed matrix `X`.
fn diag_direction(xs: &[Mat]) -> Result<Mat> {
    let d = xs[0].nrows();
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|l| (0..d).filter(move |&j| j != l).map(move |j| (j, l)))
        .collect();
    let rows = xs.len() * pairs.len();
    let mut jac = Mat::zeros(rows, pairs.len());
    let mut c = Vector::zeros(rows);
    for (i, x) in xs.iter().enumerate() {
        for (ri, &(a, b)) in pairs.iter().enumerate() {
            let row = i * pairs.len() + ri;
            c[row] = x[(a, b)];
            for (ci, &(j, l)) in pairs.iter().enumerate() {
                let mut v = 0.0;
                if b == l {
                    v += x[(a, j)];
                }
                if a == j {
                    v -= x[(l, b)];
                }
                jac[(row, ci)] = v;
            }
        }
    }
    let step = lstsq_step(&jac, &c)?;
    let mut w = Mat::zeros(d, d);
    for (ci, &(j, l)) in pairs.iter().enumerate() {
        w[(j, l)] = step[ci];
    }
    Ok(w)
}

fn transformed(v: &Mat, matrices: &[Mat]) -> Option<Vec<Mat>> {
    let lu = v.clone().lu();
    matrices.iter().map(|a| lu.solve(&(a * v))).collect()
}

/// Approximate joint diagonalizer of a pool of square matrices: minimizes
/// `sum_i off2(V^{-1} A_i V)` by damped Gauss-Newton updates `V <- V (I + W)`.
///
/// Columns of the result have unit norm, their largest entry positive, and are
/// ordered by descending diagonal of `V^{-1} A_1 V`.
pub fn joint_diagonalize(matrices: &[Mat], opts: OptimOptions) -> Result<JointDiagResult> {
    let d = check_pool(matrices)?;
    if matrices.iter().all(|m| m.iter().all(|&x| x == 0.0)) {
        return Err(Error::InvalidArgument("all matrices are zero".into()));
    }
    let mut warnings = Vec::new();
    let mut v = initial_diagonalizer(matrices, opts.seed, &mut warnings)?;
    normalize_columns(&mut v);
    let mut off = off_criterion(&v, matrices);
    let mut iterations = 0;
    let mut converged = off == 0.0;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let xs = transformed(&v, matrices)
            .ok_or_else(|| Error::Optimizer("diagonalizer became singular".into()))?;
        let w = diag_direction(&xs)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = &v * (Mat::identity(d, d) + &w * t);
            normalize_columns(&mut cand);
            let val = off_criterion(&cand, matrices);
            if val < off {
                accepted = Some((cand, val));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, val)) => {
                let rel = (off - val) / off;
                v = cand;
                off = val;
                if rel < opts.tol || off == 0.0 {
                    converged = true;
                }
            }
            None => converged = true,
        }
    }

    let x1 = transformed(&v, &matrices[..1])
        .ok_or_else(|| Error::Optimizer("diagonalizer became singular".into()))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| x1[0][(j, j)].total_cmp(&x1[0][(i, i)]));
    let mut v_hat = Mat::from_fn(d, d, |r, c| v[(r, order[c])]);
    normalize_columns(&mut v_hat);
    let off_value = off_criterion(&v_hat, matrices);
    if !off_value.is_finite() {
        return Err(Error::Optimizer("diagonalizer is singular".into()));
    }
    Ok(JointDiagResult {
        v_hat,
        off_value,
        iterations,
        converged,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSubspaceResult {
    pub q_hat: Mat,
    pub k: usize,
    pub objective: f64,
    pub warmup_objective: f64,
    pub converged: bool,
}

/// `f(Q; A, k) = sum_i |[Q' A_i Q]_{1..k, k+1..d}|_F^2`.
pub fn partial_objective(q: &Mat, matrices: &[Mat], k: usize) -> f64 {
    let d = q.nrows();
    matrices
        .iter()
        .map(|a| {
            let x = q.transpose() * a * q;
            x.view((0, k), (k, d - k)).norm_squared()
        })
        .sum()
}

/// `sum_i |A_i' p - (p' A_i p) p|^2` for a unit vector `p`.
fn single_vector_objective(p: &Vector, matrices: &[Mat]) -> f64 {
    matrices
        .iter()
        .map(|a| {
            let ap = a.transpose() * p;
            (&ap - p * p.dot(&ap)).norm_squared()
        })
        .sum()
}

/// Minimizes `sum_i |A_i' p - lambda_i p|^2` over unit `p` and scalars
/// `lambda_i` by alternating exact updates, from `start`.
fn refine_single_vector(start: &Vector, matrices: &[Mat], tol: f64) -> (Vector, f64) {
    let m = start.len();
    let mut p = start / start.norm();
    let mut val = single_vector_objective(&p, matrices);
    for _ in 0..FG_MAX_ITER {
        if val == 0.0 {
            break;
        }
        let mut h = Mat::zeros(m, m);
        for a in matrices {
            let lambda = p.dot(&(a * &p));
            let shifted = a - Mat::identity(m, m) * lambda;
            h += &shifted * shifted.transpose();
        }
        let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(&h));
        let (idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        let mut cand = eig.eigenvectors.column(idx).into_owned();
        if cand.dot(&p) < 0.0 {
            cand = -cand;
        }
        let cand_val = single_vector_objective(&cand, matrices);
        if cand_val >= val {
            break;
        }
        let rel = (val - cand_val) / val;
        p = cand;
        val = cand_val;
        if rel < tol {
            break;
        }
    }
    (p, val)
}

/// Best unit vector for one column of the warm-up: multistart from every real
/// left eigenvector of every pool member.
fn best_single_vector(matrices: &[Mat], tol: f64) -> Vector {
    let m = matrices[0].nrows();
    let mut starts: Vec<Vector> = Vec::new();
    for a in matrices {
        if let Some((_, vecs)) = real_eigen(&a.transpose()) {
            starts.extend(vecs.column_iter().map(|c| c.into_owned()));
        }
    }
    starts.extend((0..m).map(|i| {
        let mut e = Vector::zeros(m);
        e[i] = 1.0;
        e
    }));
    let mut best: Option<(Vector, f64)> = None;
    for s in &starts {
        if s.norm() == 0.0 || !s.iter().all(|x| x.is_finite()) {
            continue;
        }
        let (p, val) = refine_single_vector(s, matrices, tol);
        if best.as_ref().is_none_or(|(_, b)| val < *b) {
            best = Some((p, val));
        }
    }
    best.map(|(p, _)| p)
        .unwrap_or_else(|| starts[starts.len() - m].clone())
}

fn orthonormalize(q: &Mat) -> Mat {
    let qr = q.clone().qr();
    let mut out = qr.q();
    let r = qr.r();
    for j in 0..out.ncols() {
        if r[(j, j)] < 0.0 {
            let neg = -out.column(j);
            out.set_column(j, &neg);
        }
    }
    out
}

fn skew_generator(params: &Vector, d: usize, k: usize) -> Mat {
    let mut s = Mat::zeros(d, d);
    for b in 0..d - k {
        for a in 0..k {
            let v = params[a + b * k];
            s[(a, k + b)] = v;
            s[(k + b, a)] = -v;
        }
    }
    s
}

/// One Gauss-Newton direction for `Q <- Q expm(S)` on the upper-right blocks.
fn partial_direction(q: &Mat, matrices: &[Mat], k: usize) -> Result<Vector> {
    let d = q.nrows();
    let np = k * (d - k);
    let block = k * (d - k);
    let xs: Vec<Mat> = matrices.iter().map(|a| q.transpose() * a * q).collect();
    let mut jac = Mat::zeros(xs.len() * block, np);
    let mut c = Vector::zeros(xs.len() * block);
    for (i, x) in xs.iter().enumerate() {
        let ur = x.view((0, k), (k, d - k));
        for (r, v) in ur.iter().enumerate() {
            c[i * block + r] = *v;
        }
    }
    for col in 0..np {
        let mut e = Vector::zeros(np);
        e[col] = 1.0;
        let s = skew_generator(&e, d, k);
        for (i, x) in xs.iter().enumerate() {
            let lin = x * &s - &s * x;
            let ur = lin.view((0, k), (k, d - k));
            for (r, v) in ur.iter().enumerate() {
                jac[(i * block + r, col)] = *v;
            }
        }
    }
    lstsq_step(&jac, &c)
}

/// Orthogonal `Q` whose first `k` columns approximately span a common
/// left-invariant subspace: column-by-column warm-up, then Gauss-Newton on
/// `Q expm(S)` with `S` skew-symmetric and supported on the off-diagonal blocks.
pub fn partial_subspace(matrices: &[Mat], k: usize, opts: OptimOptions) -> Result<PartialSubspaceResult> {
    let d = check_pool(matrices)?;
    if k == 0 || k >= d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k < d, got k={k}, d={d}"
        )));
    }

    let mut q = Mat::identity(d, d);
    let mut reduced: Vec<Mat> = matrices.to_vec();
    for i in 0..k {
        let p = best_single_vector(&reduced, opts.tol);
        let o = householder_completion(&p);
        let tail = q.columns(i, d - i) * &o;
        q.columns_mut(i, d - i).copy_from(&tail);
        let rest = o.columns(1, d - i - 1).into_owned();
        reduced = reduced.iter().map(|a| rest.transpose() * a * &rest).collect();
    }
    let q = orthonormalize(&q);
    let warmup_objective = partial_objective(&q, matrices, k);

    let mut best = q;
    let mut obj = warmup_objective;
    let mut converged = obj == 0.0;
    let mut iter = 0;
    while !converged && iter < opts.max_iter {
        iter += 1;
        let step = match partial_direction(&best, matrices, k) {
            Ok(s) => s,
            Err(_) => break,
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let rot = skew_generator(&(&step * t), d, k).exp();
            let cand = orthonormalize(&(&best * rot));
            let val = partial_objective(&cand, matrices, k);
            if val < obj {
                accepted = Some((cand, val));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, val)) => {
                let rel = (obj - val) / obj;
                best = cand;
                obj = val;
                if rel < opts.tol || obj == 0.0 {
                    converged = true;
                }
            }
            None => converged = true,
        }
    }
    let objective = partial_objective(&best, matrices, k);
    Ok(PartialSubspaceResult {
        q_hat: best,
        k,
        objective,
        warmup_objective,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexOptions {
    pub max_iter: usize,
    /// Frank-Wolfe gap at which to stop; `None` means `1e-12 * p * d`.
    pub tol: Option<f64>,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iter: 100_000,
            tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexQpResult {
    pub x: Vector,
    pub objective: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Probability vector minimizing `sum_i |(P_i' - I) x|^2`, by Frank-Wolfe with
/// away steps and exact line search.
pub fn simplex_qp_stationary(p_hats: &[Mat], opts: SimplexOptions) -> Result<SimplexQpResult> {
    let d = check_pool(p_hats)?;
    if d < 2 {
        return Err(Error::InvalidArgument("need at least 2 states".into()));
    }
    for p in p_hats {
        check_row_stochastic(p, 1e-6)?;
    }
    let tol = opts.tol.unwrap_or(1e-12 * (p_hats.len() * d) as f64);
    let mut h = Mat::zeros(d, d);
    for p in p_hats {
        let b = p.transpose() - Mat::identity(d, d);
        h += b.transpose() * &b;
    }
    let h = linalg::symmetrize(&h);
    let f = |x: &Vector| x.dot(&(&h * x)).max(0.0);

    let mut x = Vector::from_element(d, 1.0 / d as f64);
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let grad = &h * &x * 2.0;
        let (s, _) = grad
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("d >= 2");
        let gx = grad.dot(&x);
        gap = gx - grad[s];
        if gap <= tol {
            converged = true;
            break;
        }
        iterations += 1;
        let away = (0..d)
            .filter(|&j| x[j] > 0.0)
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]))
            .expect("x on the simplex");
        let away_gap = grad[away] - gx;
        let (dir, gamma_max) = if gap >= away_gap || x[away] >= 1.0 {
            let mut dir = -x.clone();
            dir[s] += 1.0;
            (dir, 1.0)
        } else {
            let mut dir = x.clone();
            dir[away] -= 1.0;
            (dir, x[away] / (1.0 - x[away]))
        };
        let curv = dir.dot(&(&h * &dir));
        let slope = grad.dot(&dir);
        let gamma = if curv > 0.0 {
            (-slope / (2.0 * curv)).clamp(0.0, gamma_max)
        } else {
            gamma_max
        };
        if gamma == 0.0 {
            break;
        }
        let mut next = &x + dir * gamma;
        for v in next.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        next /= next.sum();
        if f(&next) > f(&x) {
            break;
        }
        x = next;
    }
    Ok(SimplexQpResult {
        objective: f(&x),
        x,
        gap,
        iterations,
        converged,
    })
}

/// `Q` from the partial-subspace optimizer and `V~` jointly diagonalizing the
/// leading `k x k` blocks of `Q' A_i Q`.
pub fn estimate_partial_structure(mats: &[Mat], k: usize, opts: OptimOptions) -> Result<(Mat, Mat)> {
    let sub = partial_subspace(mats, k, opts)?;
    let q = sub.q_hat;
    if k == 1 {
        return Ok((q, Mat::identity(1, 1)));
    }
    let blocks: Vec<Mat> = mats
        .iter()
        .map(|a| (q.transpose() * a * &q).view((0, 0), (k, k)).into_owned())
        .collect();
    let v_tilde = joint_diagonalize(&blocks, opts)?.v_hat;
    Ok((q, v_tilde))
}

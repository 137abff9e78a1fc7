//! Test statistics for simultaneous diagonalizability.
//!
//! Every test reduces to a Wald-type quadratic form `c(n)^2 r' Psi^+(eps) r`
//! of a residual `r` that vanishes under the null, referred either to a
//! chi-squared law with `rank(Psi; eps)` degrees of freedom or to a Box
//! moment-matched gamma law.
//!
//! Residuals whose entries are at round-off level relative to the inputs are
//! flushed to exact zero, so exact null inputs give a statistic of exactly 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::MatrixEstimate;
use crate::linalg::{
    self, commutator, guarded_inverse, kron, lambda_op, offdiag_selector_any, offvec, power_basis,
    truncated_svd, vec, Mat, Vector,
};
use crate::statdist::{box_gamma_from_traces, RefDistribution};

/// Relative size below which residual entries count as round-off.
pub const RESIDUAL_FLOOR: f64 = 1e-12;
/// Relative tolerance for the structural rank of `P' Sigma^+ P`.
pub const PROJECTION_RANK_RTOL: f64 = 1e-10;
/// Largest condition number accepted for an eigenvector matrix `V`.
pub const MAX_COND_V: f64 = 1e12;
/// Relative gap between rates above which a warning is attached.
pub const RATE_MISMATCH_TOL: f64 = 0.01;
/// Tolerance on `Q'Q = I` for the partial test.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub distribution: RefDistribution,
    pub p_value: f64,
    pub p_lower: Option<f64>,
    pub p_upper: Option<f64>,
    pub epsilon_used: f64,
    pub rank_diagnostics: Vec<(String, usize)>,
    pub warnings: Vec<String>,
}

impl TestReport {
    fn degenerate(epsilon: f64, warning: &str) -> Self {
        TestReport {
            statistic: 0.0,
            distribution: RefDistribution::Degenerate,
            p_value: 1.0,
            p_lower: None,
            p_upper: None,
            epsilon_used: epsilon,
            rank_diagnostics: Vec::new(),
            warnings: vec![warning.to_string()],
        }
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Truncation threshold: `n^{-1/3}` or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    Auto,
    Fixed(f64),
}

impl Epsilon {
    pub fn resolve(self, n: usize) -> Result<f64> {
        match self {
            Epsilon::Auto => {
                if n == 0 {
                    return Err(Error::InvalidArgument(
                        "sample size 0 for automatic epsilon".into(),
                    ));
                }
                Ok(default_epsilon(n))
            }
            Epsilon::Fixed(e) if e >= 0.0 && e.is_finite() => Ok(e),
            Epsilon::Fixed(e) => Err(Error::InvalidArgument(format!(
                "epsilon must be finite and non-negative, got {e}"
            ))),
        }
    }
}

/// Negative values select the automatic rule.
impl From<f64> for Epsilon {
    fn from(e: f64) -> Self {
        if e < 0.0 {
            Epsilon::Auto
        } else {
            Epsilon::Fixed(e)
        }
    }
}

pub fn default_epsilon(n: usize) -> f64 {
    (n as f64).powf(-1.0 / 3.0)
}

/// Independent estimates of matrices with a common dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateBundle {
    estimates: Vec<MatrixEstimate>,
}

impl EstimateBundle {
    pub fn new(estimates: Vec<MatrixEstimate>) -> Result<Self> {
        let first = estimates
            .first()
            .ok_or_else(|| Error::InsufficientData("empty estimate bundle".into()))?;
        let d = first.dim();
        if let Some(e) = estimates.iter().find(|e| e.dim() != d) {
            return Err(Error::DimensionMismatch(format!(
                "bundle mixes dimensions {d} and {}",
                e.dim()
            )));
        }
        Ok(Self { estimates })
    }

    pub fn estimates(&self) -> &[MatrixEstimate] {
        &self.estimates
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.estimates[0].dim()
    }

    pub fn min_n(&self) -> usize {
        self.estimates.iter().map(|e| e.n).min().unwrap_or(0)
    }

    pub fn matrices(&self) -> Vec<Mat> {
        self.estimates.iter().map(|e| e.a.clone()).collect()
    }
}

fn flush_roundoff(r: &mut Vector, scale: f64) {
    let cut = RESIDUAL_FLOOR * scale.max(f64::MIN_POSITIVE);
    for x in r.iter_mut() {
        if x.abs() <= cut {
            *x = 0.0;
        }
    }
}

struct WaldPiece {
    statistic: f64,
    rank: usize,
    epsilon: f64,
    nudged: bool,
}

fn wald_piece(residual: &Vector, sigma: &Mat, c_n: f64, epsilon: f64) -> Result<WaldPiece> {
    if sigma.nrows() != residual.len() || sigma.ncols() != residual.len() {
        return Err(Error::DimensionMismatch(format!(
            "residual of length {} against {}x{} covariance",
            residual.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if !(c_n > 0.0 && c_n.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "rate c(n) must be positive, got {c_n}"
        )));
    }
    let t = truncated_svd(sigma, epsilon)?;
    let statistic = if residual.iter().all(|&x| x == 0.0) {
        0.0
    } else {
        // r' W Pi^+ U' r, evaluated in the truncated singular basis
        let r = t.effective_rank;
        let left = t.u.columns(0, r).transpose() * residual;
        let right = t.w.columns(0, r).transpose() * residual;
        let q: f64 = (0..r).map(|j| left[j] * right[j] / t.singular_values[j]).sum();
        (c_n * c_n * q).max(0.0)
    };
    Ok(WaldPiece {
        statistic,
        rank: t.effective_rank,
        epsilon: t.epsilon,
        nudged: t.nudged(),
    })
}

fn nudge_warning(label: &str, requested: f64, used: f64) -> String {
    format!("epsilon {requested:e} collided with a singular value of {label}; used {used:e}")
}

fn chi2_report(
    pieces: &[(String, WaldPiece)],
    requested: f64,
    mut warnings: Vec<String>,
) -> Result<TestReport> {
    let statistic: f64 = pieces.iter().map(|(_, p)| p.statistic).sum();
    let df: usize = pieces.iter().map(|(_, p)| p.rank).sum();
    let mut epsilon_used = requested;
    for (label, p) in pieces {
        if p.nudged {
            warnings.push(nudge_warning(label, requested, p.epsilon));
        }
        epsilon_used = epsilon_used.max(p.epsilon);
    }
    let distribution = RefDistribution::ChiSquared { df };
    Ok(TestReport {
        statistic,
        distribution,
        p_value: distribution.sf(statistic)?,
        p_lower: None,
        p_upper: None,
        epsilon_used,
        rank_diagnostics: pieces.iter().map(|(l, p)| (l.clone(), p.rank)).collect(),
        warnings,
    })
}

/// Wald statistic `c_n^2 r' Sigma^+(eps) r` referred to `chi2(rank(Sigma; eps))`.
pub fn generalized_wald(residual: &Vector, sigma_hat: &Mat, c_n: f64, epsilon: f64) -> Result<TestReport> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    let piece = wald_piece(residual, sigma_hat, c_n, epsilon)?;
    chi2_report(&[("rank_sigma".to_string(), piece)], epsilon, Vec::new())
}

fn common_rate(e1: &MatrixEstimate, e2: &MatrixEstimate, warnings: &mut Vec<String>) -> f64 {
    let (a, b) = (e1.c_n, e2.c_n);
    if (a - b).abs() > RATE_MISMATCH_TOL * a.max(b) {
        warnings.push(format!(
            "rates c(n) differ ({a} vs {b}); using their geometric mean"
        ));
    }
    (a * b).sqrt()
}

/// Covariance of `vec[A1, A2]` by the delta method, with the `vec(I)`
/// direction projected out exactly.
pub fn commutator_covariance(e1: &MatrixEstimate, e2: &MatrixEstimate) -> Result<Mat> {
    let l1 = lambda_op(&e1.a)?;
    let l2 = lambda_op(&e2.a)?;
    let sigma = &l2 * &e1.sigma_hat * l2.transpose() + &l1 * &e2.sigma_hat * l1.transpose();
    let d = e1.dim();
    let mut u = vec(&Mat::identity(d, d));
    u /= u.norm();
    let proj = Mat::identity(d * d, d * d) - &u * u.transpose();
    Ok(linalg::symmetrize(&(&proj * sigma * &proj)))
}

/// Two-sample commutator test.
pub fn commutator_test(e1: &MatrixEstimate, e2: &MatrixEstimate, epsilon: Epsilon) -> Result<TestReport> {
    let d = e1.dim();
    if e2.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "commutator test of {d}x{d} and {}x{} estimates",
            e2.dim(),
            e2.dim()
        )));
    }
    let eps = epsilon.resolve(e1.n.min(e2.n))?;
    if d == 1 {
        return Ok(TestReport::degenerate(eps, "1x1 matrices always commute"));
    }
    let mut warnings = Vec::new();
    let c_n = common_rate(e1, e2, &mut warnings);
    let mut eta = vec(&commutator(&e1.a, &e2.a)?);
    flush_roundoff(&mut eta, e1.a.norm() * e2.a.norm());
    let sigma_eta = commutator_covariance(e1, e2)?;
    let piece = wald_piece(&eta, &sigma_eta, c_n, eps)?;
    debug_assert!(piece.rank < d * d);
    chi2_report(&[("rank_sigma_eta".to_string(), piece)], eps, warnings)
}

/// `P (P' W P)^+ P' W vec(A)` with `W = Sigma^+(eps)`, reshaped to a matrix.
pub fn llr_projection(a: &Mat, sigma: &Mat, p: &Mat, epsilon: f64) -> Result<Mat> {
    let d = linalg::ensure_square(a)?;
    let w = truncated_svd(sigma, epsilon)?.pseudo_inverse();
    let fitted = weighted_projection(&vec(a), &w, p)?;
    linalg::mat_d(&fitted, d)
}

fn weighted_projection(x: &Vector, w: &Mat, p: &Mat) -> Result<Vector> {
    if p.nrows() != x.len() || w.nrows() != x.len() || w.ncols() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "projection of a length-{} vector with {}x{} basis and {}x{} weight",
            x.len(),
            p.nrows(),
            p.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    let pw = p.transpose() * w;
    let g = linalg::pinv(&(&pw * p), PROJECTION_RANK_RTOL)?;
    Ok(p * (g * (pw * x)))
}

/// Two-sample likelihood-ratio test with power bases of caller-supplied
/// reference matrices. Reports the p-value at the plug-in degrees of freedom
/// together with the bounds from the lower and upper df bounds.
pub fn llr_test(
    e1: &MatrixEstimate,
    e2: &MatrixEstimate,
    p1_source: &Mat,
    p2_source: &Mat,
    epsilon: Epsilon,
) -> Result<TestReport> {
    let d = e1.dim();
    if e2.dim() != d || p1_source.shape() != (d, d) || p2_source.shape() != (d, d) {
        return Err(Error::DimensionMismatch(
            "estimates and reference matrices must share one dimension".into(),
        ));
    }
    let eps = epsilon.resolve(e1.n.min(e2.n))?;
    let p1 = power_basis(p1_source)?;
    let p2 = power_basis(p2_source)?;
    let mut warnings =
        vec!["the chi-squared law assumes exact reference matrices; estimated ones void it".to_string()];
    let c_n = common_rate(e1, e2, &mut warnings);

    let mut statistic = 0.0;
    let mut r_hat = 0usize;
    let mut rank_sum = 0usize;
    let mut diagnostics = Vec::new();
    let mut epsilon_used = eps;
    for (label, est, basis) in [("1,2", e1, &p2), ("2,1", e2, &p1)] {
        let t = truncated_svd(&est.sigma_hat, eps)?;
        if t.nudged() {
            warnings.push(nudge_warning(&format!("Sigma_{}", &label[..1]), eps, t.epsilon));
        }
        epsilon_used = epsilon_used.max(t.epsilon);
        let w = t.pseudo_inverse();
        let x = vec(&est.a);
        let mut resid = &x - weighted_projection(&x, &w, basis)?;
        flush_roundoff(&mut resid, x.norm());
        if resid.iter().any(|&v| v != 0.0) {
            statistic += c_n * c_n * resid.dot(&(&w * &resid)).max(0.0);
        }
        let inner = linalg::numerical_rank(&(basis.transpose() * &w * basis), PROJECTION_RANK_RTOL)?;
        let rank_sigma = t.effective_rank;
        diagnostics.push((format!("rank_sigma_{}", &label[..1]), rank_sigma));
        diagnostics.push((format!("rank_projection_{label}"), inner));
        rank_sum += rank_sigma;
        r_hat += rank_sigma.saturating_sub(inner);
    }
    let r_lower = rank_sum.saturating_sub(2 * d);
    let r_upper = rank_sum;
    diagnostics.push(("df".into(), r_hat));
    diagnostics.push(("df_lower".into(), r_lower));
    diagnostics.push(("df_upper".into(), r_upper));
    let distribution = RefDistribution::ChiSquared { df: r_hat };
    let sf = |df| RefDistribution::ChiSquared { df }.sf(statistic);
    Ok(TestReport {
        statistic,
        distribution,
        p_value: distribution.sf(statistic)?,
        p_lower: Some(sf(r_lower)?),
        p_upper: Some(sf(r_upper)?),
        epsilon_used,
        rank_diagnostics: diagnostics,
        warnings,
    })
}

/// `S_d (V' (x) V^{-1})` and `V^{-1}`.
fn eigen_selector(v: &Mat) -> Result<(Mat, Mat)> {
    let d = linalg::ensure_square(v)?;
    let v_inv = guarded_inverse(v, MAX_COND_V)?;
    let s = offdiag_selector_any(d) * kron(&v.transpose(), &v_inv);
    Ok((s, v_inv))
}

struct EigenPieces {
    zetas: Vec<Vector>,
    thetas: Vec<Mat>,
}

fn eigen_pieces(bundle: &EstimateBundle, v: &Mat) -> Result<EigenPieces> {
    let d = bundle.dim();
    if v.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "eigenvector matrix {}x{} for {d}x{d} estimates",
            v.nrows(),
            v.ncols()
        )));
    }
    let (s, v_inv) = eigen_selector(v)?;
    let scale = v.norm() * v_inv.norm();
    let mut zetas = Vec::with_capacity(bundle.len());
    let mut thetas = Vec::with_capacity(bundle.len());
    for e in bundle.estimates() {
        let mut zeta = offvec(&(&v_inv * &e.a * v));
        flush_roundoff(&mut zeta, scale * e.a.norm());
        zetas.push(zeta);
        thetas.push(linalg::symmetrize(&(&s * &e.sigma_hat * s.transpose())));
    }
    Ok(EigenPieces { zetas, thetas })
}

/// Multi-sample eigenvector test referred to `chi2(sum_i rank(Theta_i; eps))`.
pub fn multi_eig_test(bundle: &EstimateBundle, v: &Mat, epsilon: Epsilon) -> Result<TestReport> {
    let eps = epsilon.resolve(bundle.min_n())?;
    let EigenPieces { zetas, thetas } = eigen_pieces(bundle, v)?;
    let mut pieces = Vec::with_capacity(bundle.len());
    for (i, ((zeta, theta), e)) in zetas.iter().zip(&thetas).zip(bundle.estimates()).enumerate() {
        pieces.push((
            format!("rank_theta_{}", i + 1),
            wald_piece(zeta, theta, e.c_n, eps)?,
        ));
    }
    chi2_report(&pieces, eps, Vec::new())
}

fn gamma_report(statistic: f64, blocks: &[Mat], epsilon: f64, warnings: Vec<String>) -> Result<TestReport> {
    let trace: f64 = blocks.iter().map(|b| b.trace()).sum();
    let trace_sq: f64 = blocks.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum();
    let distribution = box_gamma_from_traces(trace, trace_sq)?;
    Ok(TestReport {
        statistic,
        distribution,
        p_value: distribution.sf(statistic)?,
        p_lower: None,
        p_upper: None,
        epsilon_used: epsilon,
        rank_diagnostics: blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let rank = linalg::numerical_rank(b, PROJECTION_RANK_RTOL).unwrap_or(0);
                (format!("rank_block_{}", i + 1), rank)
            })
            .collect(),
        warnings,
    })
}

/// Multi-sample eigenvector test `c_n^2 sum_i |zeta_i|^2` with a Box gamma reference.
pub fn multi_eig_gamma_test(bundle: &EstimateBundle, v: &Mat) -> Result<TestReport> {
    let EigenPieces { zetas, thetas } = eigen_pieces(bundle, v)?;
    let statistic = zetas
        .iter()
        .zip(bundle.estimates())
        .map(|(z, e)| e.c_n * e.c_n * z.norm_squared())
        .sum();
    gamma_report(statistic, &thetas, 0.0, Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialVariant {
    Chi2,
    Gamma,
}

/// Selection rows picking `vec(B)` and then `vec(C)` from `vec(X)`, where
/// `B = X[..k, ..k]` and `C = X[..k, k..]`.
pub fn block_selector(d: usize, k: usize) -> Mat {
    let mut s = Mat::zeros(k * d, d * d);
    let mut row = 0;
    for cols in [0..k, k..d] {
        for c in cols {
            for r in 0..k {
                s[(row, r + c * d)] = 1.0;
                row += 1;
            }
        }
    }
    s
}

/// The map `P_w` with `w_i = P_w vec(A_i)`.
pub fn partial_projector(q_hat: &Mat, k: usize, v_tilde: &Mat) -> Result<Mat> {
    let d = linalg::ensure_square(q_hat)?;
    if k == 0 || k >= d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k < d, got k={k}, d={d}"
        )));
    }
    let gram_err = (q_hat.transpose() * q_hat - Mat::identity(d, d)).amax();
    if gram_err > ORTHOGONALITY_TOL {
        return Err(Error::InvalidArgument(format!(
            "Q is not orthogonal: max |Q'Q - I| = {gram_err:e}"
        )));
    }
    if v_tilde.shape() != (k, k) {
        return Err(Error::DimensionMismatch(format!(
            "V~ must be {k}x{k}, got {}x{}",
            v_tilde.nrows(),
            v_tilde.ncols()
        )));
    }
    let qt = q_hat.transpose();
    let q_bc = block_selector(d, k) * kron(&qt, &qt);
    let (s_v, _) = eigen_selector(v_tilde)?;
    let left = linalg::blkdiag(&[s_v, Mat::identity(k * (d - k), k * (d - k))]);
    Ok(left * q_bc)
}

/// Partial test of `k` shared left eigenvectors given an orthogonal `Q` whose
/// first `k` columns span them and the eigenvectors `V~` of the leading blocks.
pub fn partial_test(
    bundle: &EstimateBundle,
    q_hat: &Mat,
    k: usize,
    v_tilde: &Mat,
    epsilon: Epsilon,
    variant: PartialVariant,
) -> Result<TestReport> {
    let d = bundle.dim();
    if q_hat.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "Q is {}x{} for {d}x{d} estimates",
            q_hat.nrows(),
            q_hat.ncols()
        )));
    }
    let p_w = partial_projector(q_hat, k, v_tilde)?;
    let v_inv = guarded_inverse(v_tilde, MAX_COND_V)?;
    let scale = v_tilde.norm() * v_inv.norm();
    let mut ws = Vec::with_capacity(bundle.len());
    let mut omegas = Vec::with_capacity(bundle.len());
    for e in bundle.estimates() {
        let mut w = &p_w * vec(&e.a);
        flush_roundoff(&mut w, scale * e.a.norm());
        ws.push(w);
        omegas.push(linalg::symmetrize(&(&p_w * &e.sigma_hat * p_w.transpose())));
    }
    match variant {
        PartialVariant::Chi2 => {
            let eps = epsilon.resolve(bundle.min_n())?;
            let mut pieces = Vec::with_capacity(bundle.len());
            for (i, ((w, omega), e)) in ws.iter().zip(&omegas).zip(bundle.estimates()).enumerate() {
                pieces.push((format!("rank_omega_{}", i + 1), wald_piece(w, omega, e.c_n, eps)?));
            }
            chi2_report(&pieces, eps, Vec::new())
        }
        PartialVariant::Gamma => {
            let statistic = ws
                .iter()
                .zip(bundle.estimates())
                .map(|(w, e)| e.c_n * e.c_n * w.norm_squared())
                .sum();
            gamma_report(statistic, &omegas, 0.0, Vec::new())
        }
    }
}

/// Symmetric matrix of pairwise commutator-test p-values with unit diagonal.
pub fn pairwise_pvalue_matrix(bundle: &EstimateBundle, epsilon: Epsilon) -> Result<Mat> {
    let p = bundle.len();
    if p < 2 {
        return Err(Error::InsufficientData(format!(
            "pairwise comparison needs at least 2 estimates, got {p}"
        )));
    }
    let est = bundle.estimates();
    let mut out = Mat::identity(p, p);
    for i in 0..p {
        for j in i + 1..p {
            let pv = commutator_test(&est[i], &est[j], epsilon)?.p_value;
            out[(i, j)] = pv;
            out[(j, i)] = pv;
        }
    }
    Ok(out)
}

//! Estimated matrices bundled with the estimated limiting covariance of their
//! vectorization, for the three data regimes: i.i.d. matrix samples, vector
//! autoregressions and finite-state Markov chains.
//!
//! Every `sigma_hat` is indexed by column-major `vec` order, so the covariance
//! between entries `(r, s)` and `(u, v)` of a `d x d` estimate sits at
//! `sigma_hat[(r + s*d, u + v*d)]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, ensure_square, symmetrize, truncated_svd, vec, Mat, Vector};

const SYMMETRY_TOL: f64 = 1e-8;
const MOMENT_MAX_COND: f64 = 1e12;

/// An estimate `A` with `c(n) vec(A - M) -> N(0, Sigma)` and a plug-in `Sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub a: Mat,
    pub sigma_hat: Mat,
    /// Normalization rate `c(n)`, e.g. `sqrt(n)`.
    pub c_n: f64,
    pub n: usize,
}

impl MatrixEstimate {
    pub fn new(a: Mat, sigma_hat: Mat, c_n: f64, n: usize) -> Result<Self> {
        let d = ensure_square(&a)?;
        if sigma_hat.nrows() != d * d || sigma_hat.ncols() != d * d {
            return Err(Error::DimensionMismatch(format!(
                "covariance of a {d}x{d} estimate must be {0}x{0}, got {1}x{2}",
                d * d,
                sigma_hat.nrows(),
                sigma_hat.ncols()
            )));
        }
        if !(c_n > 0.0 && c_n.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rate c(n) must be positive, got {c_n}"
            )));
        }
        if a.iter().chain(sigma_hat.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("estimate has non-finite entries".into()));
        }
        let scale = sigma_hat.amax().max(1.0);
        if (&sigma_hat - sigma_hat.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        Ok(Self {
            a,
            sigma_hat: symmetrize(&sigma_hat),
            c_n,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Sample mean of i.i.d. matrix observations with the empirical covariance of
/// their vectorizations (denominator `n - 1`) and `c(n) = sqrt(n)`.
pub fn mean_estimator(samples: &[Mat]) -> Result<MatrixEstimate> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = ensure_square(&samples[0])?;
    if let Some(bad) = samples.iter().find(|s| s.shape() != (d, d)) {
        return Err(Error::DimensionMismatch(format!(
            "sample of shape {:?} among {d}x{d} samples",
            bad.shape()
        )));
    }
    let n = samples.len();
    let mut mean = Mat::zeros(d, d);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    let mv = vec(&mean);
    let mut cov = Mat::zeros(d * d, d * d);
    for s in samples {
        let centered = vec(s) - &mv;
        cov.ger(1.0, &centered, &centered, 1.0);
    }
    cov /= (n - 1) as f64;
    MatrixEstimate::new(mean, cov, (n as f64).sqrt(), n)
}

/// Least-squares fit of a VAR(p).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarFit {
    pub intercept: Option<Vector>,
    /// `Phi_1, ..., Phi_p`, with `y_t = mu + sum_i Phi_i y_{t-i} + e_t`.
    pub coefficients: Vec<Mat>,
    pub innovation_cov: Mat,
    /// Per-lag estimates, each carrying the marginal limiting covariance of `vec(Phi_i)`.
    pub lag_estimates: Vec<MatrixEstimate>,
    /// Number of equations used in the regression, `T - p`.
    pub n_eff: usize,
}

/// Ordinary least squares for a VAR of the given order.
///
/// `series` has one row per time point and one column per variable. The limiting
/// covariance of `sqrt(T - p) vec(B)`, `B = [mu, Phi_1, ..., Phi_p]`, is
/// `Gamma^{-1} (x) Sigma_e` with `Gamma = Z Z' / (T - p)`; the per-lag blocks are
/// read off its diagonal, which marginalizes the intercept.
pub fn var_ls_estimator(series: &Mat, order: usize, include_intercept: bool) -> Result<VarFit> {
    let (t_len, d) = series.shape();
    if order == 0 || d == 0 {
        return Err(Error::InvalidArgument(
            "VAR order and dimension must be positive".into(),
        ));
    }
    if t_len <= d * order + 1 {
        return Err(Error::InsufficientData(format!(
            "series of length {t_len} too short for a VAR({order}) in dimension {d}"
        )));
    }
    let n_eff = t_len - order;
    let offset = usize::from(include_intercept);
    let m = d * order + offset;
    let mut z = Mat::zeros(m, n_eff);
    let mut y = Mat::zeros(d, n_eff);
    for col in 0..n_eff {
        let t = col + order;
        if include_intercept {
            z[(0, col)] = 1.0;
        }
        for lag in 1..=order {
            for j in 0..d {
                z[(offset + (lag - 1) * d + j, col)] = series[(t - lag, j)];
            }
        }
        for j in 0..d {
            y[(j, col)] = series[(t, j)];
        }
    }
    let moment = &z * z.transpose();
    let cond = condition_number(&moment)?;
    if !(cond < MOMENT_MAX_COND) {
        return Err(Error::Singular(format!(
            "regressor moment matrix has condition number {cond:e}"
        )));
    }
    let moment_inv = moment
        .clone()
        .lu()
        .solve(&Mat::identity(m, m))
        .ok_or_else(|| Error::Singular("regressor moment matrix".into()))?;
    let b = &y * z.transpose() * &moment_inv;
    let resid = &y - &b * &z;
    let innovation_cov = symmetrize(&(&resid * resid.transpose() / n_eff as f64));
    let gamma_inv = &moment_inv * n_eff as f64;

    let c_n = (n_eff as f64).sqrt();
    let mut coefficients = Vec::with_capacity(order);
    let mut lag_estimates = Vec::with_capacity(order);
    for lag in 0..order {
        let start = offset + lag * d;
        let phi = b.columns(start, d).into_owned();
        let block = gamma_inv.view((start, start), (d, d)).into_owned();
        let sigma = symmetrize(&block).kronecker(&innovation_cov);
        lag_estimates.push(MatrixEstimate::new(phi.clone(), symmetrize(&sigma), c_n, n_eff)?);
        coefficients.push(phi);
    }
    Ok(VarFit {
        intercept: include_intercept.then(|| b.column(0).into_owned()),
        coefficients,
        innovation_cov,
        lag_estimates,
        n_eff,
    })
}

/// Empirical transition matrix of a finite-state chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovFit {
    pub p_hat: Mat,
    /// Visit frequencies over the transition sources.
    pub pi_hat: Vector,
    pub estimate: MatrixEstimate,
}

/// Transition counts of a chain with labels `1..=d`.
///
/// The limiting covariance of `sqrt(n) vec(P_hat)` is block structured by source
/// row: within row `r` it is `(diag(p_r) - p_r p_r') / pi_r`, and entries from
/// different source rows are uncorrelated. `n` is the number of transitions.
pub fn markov_transition_estimator(chain: &[usize], d: usize) -> Result<MarkovFit> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 states, got {d}")));
    }
    if chain.len() < 2 {
        return Err(Error::InsufficientData(
            "chain needs at least one transition".into(),
        ));
    }
    if let Some(&bad) = chain.iter().find(|&&s| s == 0 || s > d) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 1..={d}")));
    }
    let n = chain.len() - 1;
    let mut counts = Mat::zeros(d, d);
    let mut visits = vec![0usize; d];
    for w in chain.windows(2) {
        counts[(w[0] - 1, w[1] - 1)] += 1.0;
        visits[w[0] - 1] += 1;
    }
    if let Some(r) = visits.iter().position(|&v| v == 0) {
        return Err(Error::UnvisitedState(r + 1));
    }
    let mut p_hat = Mat::zeros(d, d);
    for r in 0..d {
        let total = visits[r] as f64;
        for s in 0..d {
            p_hat[(r, s)] = counts[(r, s)] / total;
        }
    }
    let pi_hat = Vector::from_iterator(d, visits.iter().map(|&v| v as f64 / n as f64));
    let mut sigma = Mat::zeros(d * d, d * d);
    for r in 0..d {
        for s in 0..d {
            for v in 0..d {
                let ps = p_hat[(r, s)];
                let pv = p_hat[(r, v)];
                let cov = if s == v { ps * (1.0 - ps) } else { -ps * pv };
                sigma[(r + s * d, r + v * d)] = cov / pi_hat[r];
            }
        }
    }
    let estimate = MatrixEstimate::new(p_hat.clone(), sigma, (n as f64).sqrt(), n)?;
    Ok(MarkovFit {
        p_hat,
        pi_hat,
        estimate,
    })
}

pub(crate) fn check_row_stochastic(p: &Mat, tol: f64) -> Result<usize> {
    let d = ensure_square(p)?;
    for (r, row) in p.row_iter().enumerate() {
        if row.iter().any(|&x| x < -tol || !x.is_finite()) {
            return Err(Error::NotStochastic(format!("row {r} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::NotStochastic(format!("row {r} sums to {sum}")));
        }
    }
    Ok(d)
}

/// Stationary law: the left eigenvector of eigenvalue 1, on the simplex.
pub fn stationary_from_transition(p: &Mat) -> Result<Vector> {
    let d = check_row_stochastic(p, 1e-8)?;
    let shifted = p.transpose() - Mat::identity(d, d);
    let t = truncated_svd(&shifted, 0.0)?;
    let scale = t.largest().max(1.0);
    let null_dim = t.singular_values.iter().filter(|&&s| s <= 1e-9 * scale).count();
    if null_dim > 1 {
        return Err(Error::Reducible(null_dim));
    }
    let v = t.w.column(d - 1).into_owned();
    let v = if v.sum() < 0.0 { -v } else { v };
    let v = v.map(|x| x.max(0.0));
    Ok(&v / v.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sample_chain(p: &Mat, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let d = p.nrows();
        let mut state = 0;
        let mut chain = Vec::with_capacity(len);
        for _ in 0..len {
            chain.push(state + 1);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = d - 1;
            for s in 0..d {
                acc += p[(state, s)];
                if u < acc {
                    next = s;
                    break;
                }
            }
            state = next;
        }
        chain
    }

    #[test]
    fn mean_estimator_examples() {
        let x = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let e = mean_estimator(&[x.clone(), x.clone()]).unwrap();
        assert_eq!(e.a, x);
        assert_eq!(e.sigma_hat, Mat::zeros(4, 4));

        let e = mean_estimator(&[Mat::from_element(1, 1, 0.0), Mat::from_element(1, 1, 2.0)]).unwrap();
        assert_eq!(e.a[(0, 0)], 1.0);
        assert_eq!(e.sigma_hat[(0, 0)], 2.0);
        assert_relative_eq!(e.c_n, 2f64.sqrt());

        assert!(matches!(
            mean_estimator(&[x.clone()]),
            Err(Error::InsufficientData(_))
        ));
        assert!(mean_estimator(&[x, Mat::zeros(3, 3)]).is_err());
    }

    #[test]
    fn mean_estimator_order_invariant_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let samples: Vec<Mat> = (0..30)
            .map(|_| Mat::from_fn(2, 2, |_, _| rng.sample(StandardNormal)))
            .collect();
        let e1 = mean_estimator(&samples).unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        let e2 = mean_estimator(&rev).unwrap();
        assert_relative_eq!(e1.a, e2.a, epsilon = 1e-14);
        assert_relative_eq!(e1.sigma_hat, e2.sigma_hat, epsilon = 1e-13);
        let eig = nalgebra::SymmetricEigen::new(e1.sigma_hat.clone());
        assert!(eig.eigenvalues.min() > -1e-12);
    }

    #[test]
    fn mean_estimator_root_n_consistency() {
        let m = Mat::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut errs = Vec::new();
        for &n in &[100usize, 1000, 10_000] {
            let mut acc = 0.0;
            let reps = 20;
            for _ in 0..reps {
                let samples: Vec<Mat> = (0..n)
                    .map(|_| &m + Mat::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                acc += (mean_estimator(&samples).unwrap().a - &m).norm();
            }
            errs.push(acc / reps as f64);
        }
        // log-log slope close to -1/2
        let slope = (errs[2].ln() - errs[0].ln()) / (10_000f64.ln() - 100f64.ln());
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn var_noiseless_scalar() {
        let s = Mat::from_column_slice(4, 1, &[1.0, 0.5, 0.25, 0.125]);
        let fit = var_ls_estimator(&s, 1, false).unwrap();
        assert_eq!(fit.coefficients[0][(0, 0)], 0.5);
        let fit = var_ls_estimator(&s, 1, true).unwrap();
        assert_relative_eq!(fit.coefficients[0][(0, 0)], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn var_errors() {
        let zeros = Mat::zeros(20, 2);
        assert!(matches!(
            var_ls_estimator(&zeros, 1, true),
            Err(Error::Singular(_))
        ));
        assert!(matches!(
            var_ls_estimator(&zeros, 1, false),
            Err(Error::Singular(_))
        ));
        let short = Mat::from_element(3, 2, 1.0);
        assert!(matches!(
            var_ls_estimator(&short, 1, true),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn var_noiseless_recovery() {
        let phi1 = Mat::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let phi2 = Mat::from_row_slice(2, 2, &[0.1, 0.0, 0.05, -0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        // random initial conditions, then a noiseless recursion with full-rank regressors
        let t = 12;
        let mut s = Mat::zeros(t, 2);
        for i in 0..2 {
            for j in 0..2 {
                s[(i, j)] = rng.sample(StandardNormal);
            }
        }
        for i in 2..t {
            let y = &phi1 * s.row(i - 1).transpose() + &phi2 * s.row(i - 2).transpose();
            s.set_row(i, &y.transpose());
        }
        let fit = var_ls_estimator(&s, 2, false).unwrap();
        assert!((&fit.coefficients[0] - &phi1).amax() < 1e-8);
        assert!((&fit.coefficients[1] - &phi2).amax() < 1e-8);
    }

    #[test]
    fn var_simulated_recovery() {
        let phi = Mat::from_row_slice(3, 3, &[0.5, 0.1, 0.0, -0.2, 0.3, 0.1, 0.0, 0.2, -0.4]);
        let mut ok = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let t = 5000;
            let mut s = Mat::zeros(t, 3);
            for i in 1..t {
                let e = Vector::from_fn(3, |_, _| rng.sample(StandardNormal));
                let y = &phi * s.row(i - 1).transpose() + e;
                s.set_row(i, &y.transpose());
            }
            let fit = var_ls_estimator(&s, 1, true).unwrap();
            if (&fit.coefficients[0] - &phi).norm() < 0.1 {
                ok += 1;
            }
            // asymptotic covariance of the coefficients is (Gamma^{-1} (x) Sigma_e)
            assert_eq!(fit.lag_estimates[0].sigma_hat.nrows(), 9);
        }
        assert!(ok as f64 >= 0.95 * seeds as f64);
    }

    #[test]
    fn markov_hand_example() {
        let fit = markov_transition_estimator(&[1, 2, 1, 2, 1], 2).unwrap();
        assert_eq!(fit.p_hat, Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(fit.pi_hat.as_slice(), &[0.5, 0.5]);
        assert_eq!(fit.estimate.sigma_hat, Mat::zeros(4, 4));
        assert_eq!(fit.estimate.n, 4);
    }

    #[test]
    fn markov_errors() {
        assert_eq!(
            markov_transition_estimator(&[1, 1, 1, 1], 2).unwrap_err(),
            Error::UnvisitedState(2)
        );
        assert!(markov_transition_estimator(&[1, 2, 3], 2).is_err());
        assert!(markov_transition_estimator(&[1, 1], 1).is_err());
    }

    #[test]
    fn markov_covariance_structure() {
        let p = Mat::from_row_slice(3, 3, &[0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.3, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let chain = sample_chain(&p, 5000, &mut rng);
        let fit = markov_transition_estimator(&chain, 3).unwrap();
        for r in 0..3 {
            assert_relative_eq!(fit.p_hat.row(r).sum(), 1.0, epsilon = 1e-12);
        }
        let s = &fit.estimate.sigma_hat;
        let d = 3;
        for r in 0..d {
            for u in 0..d {
                for a in 0..d {
                    for b in 0..d {
                        if r != u {
                            assert_eq!(s[(r + a * d, u + b * d)], 0.0);
                        }
                    }
                }
            }
            // within-row block: PSD with zero row sums
            let idx: Vec<usize> = (0..d).map(|c| r + c * d).collect();
            let block = Mat::from_fn(d, d, |i, j| s[(idx[i], idx[j])]);
            for i in 0..d {
                assert!(block.row(i).sum().abs() < 1e-12);
            }
            assert!(nalgebra::SymmetricEigen::new(block).eigenvalues.min() > -1e-12);
        }
    }

    #[test]
    fn markov_long_chain_within_asymptotic_band() {
        let p = Mat::from_row_slice(3, 3, &[0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.3, 0.3, 0.4]);
        let pi = stationary_from_transition(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let n = 100_000;
        let chain = sample_chain(&p, n + 1, &mut rng);
        let fit = markov_transition_estimator(&chain, 3).unwrap();
        let mut bound: f64 = 0.0;
        for r in 0..3 {
            for s in 0..3 {
                let v = p[(r, s)] * (1.0 - p[(r, s)]) / (n as f64 * pi[r]);
                bound = bound.max(v);
            }
        }
        let bound = 3.0 * bound.sqrt();
        assert!((&fit.p_hat - &p).amax() < bound);
    }

    #[test]
    fn stationary_examples() {
        let p = Mat::from_element(2, 2, 0.5);
        assert_relative_eq!(
            stationary_from_transition(&p).unwrap(),
            Vector::from_vec(vec![0.5, 0.5]),
            epsilon = 1e-12
        );
        let p = Mat::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        assert_relative_eq!(
            stationary_from_transition(&p).unwrap(),
            Vector::from_vec(vec![2.0 / 3.0, 1.0 / 3.0]),
            epsilon = 1e-12
        );
        let reducible = Mat::identity(3, 3);
        assert!(matches!(
            stationary_from_transition(&reducible),
            Err(Error::Reducible(3))
        ));
        let not_stochastic = Mat::from_element(2, 2, 0.7);
        assert!(matches!(
            stationary_from_transition(&not_stochastic),
            Err(Error::NotStochastic(_))
        ));
    }

    #[test]
    fn stationary_residual_on_random_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..20 {
            let mut p = Mat::from_fn(4, 4, |_, _| rng.random_range(0.05..1.0));
            for mut row in p.row_iter_mut() {
                let s = row.sum();
                row /= s;
            }
            let pi = stationary_from_transition(&p).unwrap();
            let resid = pi.transpose() * &p - pi.transpose();
            assert!(resid.amax() < 1e-10);
            assert!(pi.iter().all(|&x| x >= 0.0));
        }
    }
}

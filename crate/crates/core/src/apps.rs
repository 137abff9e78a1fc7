//! End-to-end pipelines: common eigenvectors of VAR coefficient matrices
//! across subjects, and a common stationary law across Markov chains.
//!
//! Both pipelines work in the left-eigenvector convention of
//! [`partial_test`]: a VAR coefficient `Phi` is decoupled by the rows of
//! `V^{-1}` when `V^{-1} Phi V` is diagonal, and a stationary law satisfies
//! `pi' P = pi'`, so estimated transition matrices enter the tests untransposed.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{markov_transition_estimator, var_ls_estimator, MarkovFit, VarFit};
use crate::hypothesis::{
    multi_eig_gamma_test, pairwise_pvalue_matrix, partial_test, Epsilon, EstimateBundle, PartialVariant,
    TestReport, MAX_COND_V,
};
use crate::linalg::{guarded_inverse, householder_completion, Mat, Vector};
use crate::optim::{
    estimate_partial_structure, joint_diagonalize, simplex_qp_stationary, OptimOptions, SimplexOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub epsilon: Epsilon,
    pub alpha: f64,
    pub include_intercept: bool,
    pub optim: OptimOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            epsilon: Epsilon::Auto,
            alpha: 0.05,
            include_intercept: true,
            optim: OptimOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartialReports {
    pub k: usize,
    pub q_hat: Mat,
    pub v_tilde: Mat,
    pub chi2: TestReport,
    pub gamma: TestReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarAnalysis {
    pub fits: Vec<VarFit>,
    /// One label per tested coefficient matrix, `s<subject>` or `s<subject>l<lag>`.
    pub labels: Vec<String>,
    pub pairwise: Mat,
    pub gamma: TestReport,
    pub partial: Vec<PartialReports>,
    /// Columns are the fitted common right eigenvectors.
    pub v_hat: Mat,
    /// `V^{-1}`; its rows define the decoupled coordinates.
    pub transform: Mat,
    /// `z_t = V^{-1} y_t` per subject, present only when the gamma test does not reject.
    pub decoupled: Option<Vec<Mat>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovAnalysis {
    pub fits: Vec<MarkovFit>,
    pub pi_common: Vector,
    pub qp_objective: f64,
    pub qp_converged: bool,
    pub q_hat: Mat,
    pub v_tilde: Mat,
    pub chi2: TestReport,
    pub gamma: TestReport,
}

/// Tests whether VAR coefficient matrices of several subjects share all (and
/// `k = 1..d-1`) eigenvectors, and decouples the series when they plausibly do.
///
/// With `order > 1` every lag matrix of every subject enters the bundle.
pub fn var_pipeline(series_list: &[Mat], order: usize, opts: PipelineOptions) -> Result<VarAnalysis> {
    if series_list.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 subjects, got {}",
            series_list.len()
        )));
    }
    let d = series_list[0].ncols();
    if let Some(s) = series_list.iter().find(|s| s.ncols() != d) {
        return Err(Error::DimensionMismatch(format!(
            "series have {} and {d} variables",
            s.ncols()
        )));
    }
    let fits: Vec<VarFit> = series_list
        .par_iter()
        .map(|s| var_ls_estimator(s, order, opts.include_intercept))
        .collect::<Result<_>>()?;

    let mut labels = Vec::new();
    let mut estimates = Vec::new();
    for (i, fit) in fits.iter().enumerate() {
        for (l, e) in fit.lag_estimates.iter().enumerate() {
            labels.push(if order == 1 {
                format!("s{}", i + 1)
            } else {
                format!("s{}l{}", i + 1, l + 1)
            });
            estimates.push(e.clone());
        }
    }
    let bundle = EstimateBundle::new(estimates)?;
    let matrices = bundle.matrices();

    let pairwise = pairwise_pvalue_matrix(&bundle, opts.epsilon)?;
    let v_hat = joint_diagonalize(&matrices, opts.optim)?.v_hat;
    let transform = guarded_inverse(&v_hat, MAX_COND_V)?;
    let gamma = multi_eig_gamma_test(&bundle, &v_hat)?;

    let mut partial = Vec::with_capacity(d.saturating_sub(1));
    for k in 1..d {
        let (q_hat, v_tilde) = estimate_partial_structure(&matrices, k, opts.optim)?;
        let chi2 = partial_test(&bundle, &q_hat, k, &v_tilde, opts.epsilon, PartialVariant::Chi2)?;
        let gamma = partial_test(&bundle, &q_hat, k, &v_tilde, opts.epsilon, PartialVariant::Gamma)?;
        partial.push(PartialReports {
            k,
            q_hat,
            v_tilde,
            chi2,
            gamma,
        });
    }

    let decoupled =
        (!gamma.rejects(opts.alpha)).then(|| series_list.iter().map(|y| y * transform.transpose()).collect());
    Ok(VarAnalysis {
        fits,
        labels,
        pairwise,
        gamma,
        partial,
        v_hat,
        transform,
        decoupled,
    })
}

/// Tests whether several chains on states `1..=d` share a stationary law.
///
/// The common law `pi` minimizes `sum_i |(P_i' - I) x|^2` over the simplex; the
/// partial test with `k = 1` then runs on `Q` whose first column is `pi / |pi|`.
pub fn markov_pipeline(chains: &[Vec<usize>], d: usize, opts: PipelineOptions) -> Result<MarkovAnalysis> {
    if chains.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 chains, got {}",
            chains.len()
        )));
    }
    let fits: Vec<MarkovFit> = chains
        .par_iter()
        .map(|c| markov_transition_estimator(c, d))
        .collect::<Result<_>>()?;
    let p_hats: Vec<Mat> = fits.iter().map(|f| f.p_hat.clone()).collect();
    let qp = simplex_qp_stationary(&p_hats, SimplexOptions::default())?;
    let q_hat = householder_completion(&qp.x);
    let v_tilde = Mat::from_element(1, 1, qp.x.norm());
    let bundle = EstimateBundle::new(fits.iter().map(|f| f.estimate.clone()).collect())?;
    let chi2 = partial_test(&bundle, &q_hat, 1, &v_tilde, opts.epsilon, PartialVariant::Chi2)?;
    let gamma = partial_test(&bundle, &q_hat, 1, &v_tilde, opts.epsilon, PartialVariant::Gamma)?;
    Ok(MarkovAnalysis {
        fits,
        pi_common: qp.x,
        qp_objective: qp.objective,
        qp_converged: qp.converged,
        q_hat,
        v_tilde,
        chi2,
        gamma,
    })
}

/// Simulates `y_t = mu + sum_i Phi_i y_{t-i} + e_t` with standard normal
/// innovations after a burn-in, returning `t_len` rows.
pub fn simulate_var<R: Rng + ?Sized>(
    phis: &[Mat],
    mu: &Vector,
    t_len: usize,
    burn_in: usize,
    rng: &mut R,
) -> Mat {
    let d = mu.len();
    let order = phis.len();
    let total = t_len + burn_in + order;
    let mut y = Mat::zeros(total, d);
    for t in order..total {
        let mut row = mu.clone();
        for (i, phi) in phis.iter().enumerate() {
            row += phi * y.row(t - i - 1).transpose();
        }
        for j in 0..d {
            row[j] += rng.sample::<f64, _>(StandardNormal);
        }
        y.set_row(t, &row.transpose());
    }
    y.rows(total - t_len, t_len).into_owned()
}

/// Simulates a chain with labels `1..=d` from a row-stochastic matrix.
pub fn simulate_markov_chain<R: Rng + ?Sized>(p: &Mat, len: usize, start: usize, rng: &mut R) -> Vec<usize> {
    let mut chain = Vec::with_capacity(len);
    let mut state = start - 1;
    for _ in 0..len {
        chain.push(state + 1);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = p.ncols() - 1;
        for (s, &w) in p.row(state).iter().enumerate() {
            acc += w;
            if u < acc {
                next = s;
                break;
            }
        }
        state = next;
    }
    chain
}

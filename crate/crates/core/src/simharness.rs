//! Monte-Carlo designs for the two-sample, multi-sample and partial tests.
//!
//! Each replicate draws true matrices from a design, simulates the mean of
//! `n` i.i.d. observations `M + Z` (entrywise standard normal `Z`) together
//! with their sample covariance, runs the design's tests and keeps the
//! p-values. The sample mean and the scaled sample covariance are drawn
//! directly from their exact joint law (independent normal and Wishart), which
//! keeps large `n` cheap.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::MatrixEstimate;
use crate::hypothesis::{
    commutator_test, multi_eig_gamma_test, multi_eig_test, partial_test, Epsilon, EstimateBundle,
    PartialVariant,
};
use crate::linalg::{self, normalize_columns, Mat, Vector};
use crate::optim::{estimate_partial_structure, joint_diagonalize, OptimOptions};

pub const MAX_COND_DRAW: f64 = 1e6;
const MAX_DRAW_ATTEMPTS: usize = 1000;
pub const HISTOGRAM_BINS: usize = 20;
const EIGEN_RANGE: (f64, f64) = (0.5, 2.0);
const EIGEN_GAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    TwoSample,
    Multi,
    Partial,
}

/// Signal-to-noise ratio `1 / rho^2` of the eigenvector perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Snr {
    Infinite,
    Finite(f64),
}

impl Snr {
    /// Perturbation scale `rho = snr^{-1/2}`; 0 when infinite.
    pub fn rho(self) -> f64 {
        match self {
            Snr::Infinite => 0.0,
            Snr::Finite(s) => 1.0 / s.sqrt(),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Snr::Finite(s) if !(s > 0.0) || s.is_nan() => {
                Err(Error::InvalidArgument(format!("snr must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub design: Design,
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub n: usize,
    pub replicates: usize,
    pub snr: Snr,
    pub epsilon: Epsilon,
    pub seed: u64,
    pub alpha: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.snr.validate()?;
        if self.d < 2 {
            return bad(format!("d must be at least 2, got {}", self.d));
        }
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        match self.design {
            Design::TwoSample => {}
            Design::Multi if self.p < 2 => return bad(format!("p must be at least 2, got {}", self.p)),
            Design::Partial if self.p < 1 => return bad("p must be at least 1".into()),
            Design::Partial if self.k == 0 || self.k >= self.d => {
                return bad(format!("need 1 <= k < d, got k={}, d={}", self.k, self.d))
            }
            _ => {}
        }
        if let Epsilon::Fixed(e) = self.epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("epsilon must be finite and non-negative, got {e}"));
            }
        }
        Ok(())
    }

    /// Names of the p-value collections this design produces.
    pub fn variant_names(&self) -> Vec<&'static str> {
        match self.design {
            Design::TwoSample => vec!["commutator"],
            Design::Multi => vec![
                "multi_chi2_exact_v",
                "multi_chi2_estimated_v",
                "multi_gamma_estimated_v",
            ],
            Design::Partial => vec!["partial_chi2", "partial_gamma"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
    pub fraction: f64,
}

/// Equal-width histogram of values in `[0, 1]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let total = values.len().max(1) as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_left: i as f64 / bins as f64,
            bin_right: (i + 1) as f64 / bins as f64,
            count,
            fraction: count as f64 / total,
        })
        .collect()
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut out = String::from("bin_left,bin_right,count,fraction\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{}\n",
            b.bin_left, b.bin_right, b.count, b.fraction
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub p_values: Vec<f64>,
    pub rejection_rate: f64,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub variants: Vec<VariantResult>,
    pub failures: Vec<ReplicateFailure>,
    pub mean_runtime_secs: f64,
}

impl SimResult {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Kolmogorov-Smirnov distance of a sample from `U[0, 1]`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max)
}

fn standard_normal_mat<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn well_conditioned<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Result<Mat> {
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let v = standard_normal_mat(rng, rows, cols);
        if linalg::condition_number(&v)? <= MAX_COND_DRAW {
            return Ok(v);
        }
    }
    Err(Error::Singular(
        "could not draw a well-conditioned eigenvector matrix".into(),
    ))
}

/// `base + rho E` with `E` standard normal, redrawn until well conditioned.
fn perturbed<R: Rng + ?Sized>(base: &Mat, rho: f64, rng: &mut R) -> Result<Mat> {
    if rho == 0.0 {
        return Ok(base.clone());
    }
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let v = base + standard_normal_mat(rng, base.nrows(), base.ncols()) * rho;
        if linalg::condition_number(&v)? <= MAX_COND_DRAW {
            return Ok(v);
        }
    }
    Err(Error::Singular(
        "could not draw a well-conditioned perturbation".into(),
    ))
}

/// Diagonal with entries of magnitude in `[0.5, 2]`, random signs and
/// pairwise gaps of at least 0.1.
pub fn draw_eigenvalues<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Mat {
    loop {
        let vals: Vec<f64> = (0..d)
            .map(|_| {
                let m = rng.random_range(EIGEN_RANGE.0..=EIGEN_RANGE.1);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let separated = (0..d).all(|i| (i + 1..d).all(|j| (vals[i] - vals[j]).abs() >= EIGEN_GAP));
        if separated {
            return Mat::from_diagonal(&Vector::from_vec(vals));
        }
    }
}

fn conjugate(v: &Mat, dg: &Mat) -> Result<Mat> {
    let vi = linalg::guarded_inverse(v, f64::INFINITY)?;
    Ok(v * dg * vi)
}

/// Two-sample design: `M1 = V D1 V^{-1}`, `M2 = V* D2 V*^{-1}`, `V* = V + rho E`.
pub fn gen_two_sample<R: Rng + ?Sized>(d: usize, snr: Snr, rng: &mut R) -> Result<(Mat, Mat, Mat)> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("d must be at least 2, got {d}")));
    }
    snr.validate()?;
    let v = well_conditioned(rng, d, d)?;
    let v_star = perturbed(&v, snr.rho(), rng)?;
    let m1 = conjugate(&v, &draw_eigenvalues(d, rng))?;
    let m2 = conjugate(&v_star, &draw_eigenvalues(d, rng))?;
    Ok((m1, m2, v))
}

#[derive(Debug, Clone)]
pub struct MultiDraw {
    pub matrices: Vec<Mat>,
    /// Unperturbed common eigenvectors.
    pub v: Mat,
}

/// Multi-sample design: `M_i = V_i D_i V_i^{-1}` with `V_i = V + rho E_i`.
pub fn gen_multi<R: Rng + ?Sized>(d: usize, p: usize, snr: Snr, rng: &mut R) -> Result<MultiDraw> {
    if d < 2 || p < 2 {
        return Err(Error::InvalidArgument(format!(
            "need d >= 2 and p >= 2, got d={d}, p={p}"
        )));
    }
    snr.validate()?;
    let v = well_conditioned(rng, d, d)?;
    let matrices = (0..p)
        .map(|_| {
            let vi = perturbed(&v, snr.rho(), rng)?;
            conjugate(&vi, &draw_eigenvalues(d, rng))
        })
        .collect::<Result<_>>()?;
    Ok(MultiDraw { matrices, v })
}

#[derive(Debug, Clone)]
pub struct PartialDraw {
    pub matrices: Vec<Mat>,
    /// The `d x k` shared left eigenvectors before perturbation.
    pub shared: Mat,
}

/// Partial design: `V_i = (V, V~_i)` with `k` shared columns, perturbed to
/// `V_i + rho E_i`, and `M_i = (V_i D_i V_i^{-1})'` so that the shared
/// columns are left eigenvectors of `M_i`.
pub fn gen_partial<R: Rng + ?Sized>(
    d: usize,
    p: usize,
    k: usize,
    snr: Snr,
    rng: &mut R,
) -> Result<PartialDraw> {
    if k == 0 || k >= d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k < d, got k={k}, d={d}"
        )));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("p must be at least 1".into()));
    }
    snr.validate()?;
    let shared = well_conditioned(rng, d, k)?;
    let mut matrices = Vec::with_capacity(p);
    for _ in 0..p {
        let mut base = None;
        for _ in 0..MAX_DRAW_ATTEMPTS {
            let mut vi = standard_normal_mat(rng, d, d);
            vi.columns_mut(0, k).copy_from(&shared);
            if linalg::condition_number(&vi)? <= MAX_COND_DRAW {
                base = Some(vi);
                break;
            }
        }
        let base =
            base.ok_or_else(|| Error::Singular("could not complete the shared eigenvectors".into()))?;
        let vi = perturbed(&base, snr.rho(), rng)?;
        matrices.push(conjugate(&vi, &draw_eigenvalues(d, rng))?.transpose());
    }
    Ok(PartialDraw { matrices, shared })
}

/// Wishart(`df`, I_m) draw by the Bartlett decomposition.
pub fn wishart_identity<R: Rng + ?Sized>(m: usize, df: usize, rng: &mut R) -> Result<Mat> {
    if df < m {
        return Err(Error::InvalidArgument(format!(
            "Wishart degrees of freedom {df} below dimension {m}"
        )));
    }
    let mut l = Mat::zeros(m, m);
    for i in 0..m {
        let chi = ChiSquared::new((df - i) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        l[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            l[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(&l * l.transpose())
}

/// Estimate from `n` i.i.d. observations `M + Z`: the sample mean and the
/// sample covariance of `vec` (denominator `n - 1`), with `c(n) = sqrt(n)`.
pub fn simulate_mean_estimate<R: Rng + ?Sized>(m: &Mat, n: usize, rng: &mut R) -> Result<MatrixEstimate> {
    let d = linalg::ensure_square(m)?;
    if n < 2 {
        return Err(Error::InsufficientData(format!("need n >= 2, got {n}")));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let a = m + standard_normal_mat(rng, d, d) * scale;
    let sigma = if n - 1 >= d * d {
        wishart_identity(d * d, n - 1, rng)? / (n - 1) as f64
    } else {
        // rank-deficient sample covariance: form it from explicit draws
        let mut draws = Mat::zeros(d * d, n);
        for mut c in draws.column_iter_mut() {
            c.copy_from(&Vector::from_fn(d * d, |_, _| rng.sample(StandardNormal)));
        }
        let mean = draws.column_mean();
        for mut c in draws.column_iter_mut() {
            c -= &mean;
        }
        &draws * draws.transpose() / (n - 1) as f64
    };
    MatrixEstimate::new(a, sigma, (n as f64).sqrt(), n)
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

fn estimate_all<R: Rng + ?Sized>(mats: &[Mat], n: usize, rng: &mut R) -> Result<EstimateBundle> {
    let ests = mats
        .iter()
        .map(|m| simulate_mean_estimate(m, n, rng))
        .collect::<Result<Vec<_>>>()?;
    EstimateBundle::new(ests)
}

/// Runs one replicate and returns one p-value per design variant.
pub fn run_replicate(config: &SimConfig, replicate: usize) -> Result<Vec<f64>> {
    let mut rng = replicate_rng(config.seed, replicate);
    let opts = OptimOptions {
        seed: config.seed ^ replicate as u64,
        ..OptimOptions::default()
    };
    match config.design {
        Design::TwoSample => {
            let (m1, m2, _) = gen_two_sample(config.d, config.snr, &mut rng)?;
            let bundle = estimate_all(&[m1, m2], config.n, &mut rng)?;
            let e = bundle.estimates();
            Ok(vec![commutator_test(&e[0], &e[1], config.epsilon)?.p_value])
        }
        Design::Multi => {
            let draw = gen_multi(config.d, config.p, config.snr, &mut rng)?;
            let bundle = estimate_all(&draw.matrices, config.n, &mut rng)?;
            let mut v = draw.v;
            normalize_columns(&mut v);
            let exact = multi_eig_test(&bundle, &v, config.epsilon)?.p_value;
            let jd = joint_diagonalize(&bundle.matrices(), opts)?;
            let est = multi_eig_test(&bundle, &jd.v_hat, config.epsilon)?.p_value;
            let gamma = multi_eig_gamma_test(&bundle, &jd.v_hat)?.p_value;
            Ok(vec![exact, est, gamma])
        }
        Design::Partial => {
            let draw = gen_partial(config.d, config.p, config.k, config.snr, &mut rng)?;
            let bundle = estimate_all(&draw.matrices, config.n, &mut rng)?;
            let (q, v_tilde) = estimate_partial_structure(&bundle.matrices(), config.k, opts)?;
            let chi2 = partial_test(
                &bundle,
                &q,
                config.k,
                &v_tilde,
                config.epsilon,
                PartialVariant::Chi2,
            )?;
            let gamma = partial_test(
                &bundle,
                &q,
                config.k,
                &v_tilde,
                config.epsilon,
                PartialVariant::Gamma,
            )?;
            Ok(vec![chi2.p_value, gamma.p_value])
        }
    }
}

/// Runs all replicates in parallel on the current rayon pool. Results are
/// merged by replicate index, so they do not depend on the worker count.
pub fn run_replicates(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let outcomes: Vec<(Result<Vec<f64>>, f64)> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let start = Instant::now();
            let out = run_replicate(config, r);
            (out, start.elapsed().as_secs_f64())
        })
        .collect();
    let names = config.variant_names();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut failures = Vec::new();
    let mut runtime = 0.0;
    for (r, (out, secs)) in outcomes.into_iter().enumerate() {
        runtime += secs;
        match out {
            Ok(ps) => {
                for (col, p) in columns.iter_mut().zip(ps) {
                    col.push(p);
                }
            }
            Err(e) => failures.push(ReplicateFailure {
                replicate: r,
                message: e.to_string(),
            }),
        }
    }
    let variants = names
        .iter()
        .zip(columns)
        .map(|(name, p_values)| {
            let rejected = p_values.iter().filter(|&&p| p < config.alpha).count();
            VariantResult {
                name: name.to_string(),
                rejection_rate: if p_values.is_empty() {
                    0.0
                } else {
                    rejected as f64 / p_values.len() as f64
                },
                histogram: histogram(&p_values, HISTOGRAM_BINS),
                p_values,
            }
        })
        .collect();
    Ok(SimResult {
        config: config.clone(),
        variants,
        failures,
        mean_runtime_secs: runtime / config.replicates as f64,
    })
}

//! Reference distributions for the test statistics and Gaussian sampling.
//!
//! Tail probabilities come from the regularized upper incomplete gamma
//! function, evaluated by its power series below `a + 1` and by a Lentz
//! continued fraction above it.

use nalgebra::{Cholesky, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_square, symmetrize, Mat, Vector};

const GAMMA_REL_TOL: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 10_000;
const TINY: f64 = 1e-300;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn lower_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_REL_TOL {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn upper_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_REL_TOL {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma `Q(a, x) = Gamma(a, x) / Gamma(a)`.
pub fn regularized_upper_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        (1.0 - lower_series(a, x)).clamp(0.0, 1.0)
    } else {
        upper_continued_fraction(a, x).clamp(0.0, 1.0)
    }
}

/// `P(chi2(df) > x)`.
pub fn chi2_sf(x: f64, df: usize) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "chi-squared argument must be non-negative, got {x}"
        )));
    }
    if df == 0 {
        return Ok(if x > 0.0 { 0.0 } else { 1.0 });
    }
    Ok(regularized_upper_gamma(df as f64 / 2.0, x / 2.0))
}

/// Gamma law with shape `alpha` and rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma parameters must be finite and positive, got shape={shape}, rate={rate}"
            )));
        }
        Ok(Self { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }
}

/// `P(gamma(alpha, beta) > x)`.
pub fn gamma_sf(x: f64, params: GammaParams) -> Result<f64> {
    GammaParams::new(params.shape, params.rate)?;
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma argument must be non-negative, got {x}"
        )));
    }
    Ok(regularized_upper_gamma(params.shape, params.rate * x))
}

/// Limiting law a statistic is referred to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RefDistribution {
    ChiSquared {
        df: usize,
    },
    Gamma(GammaParams),
    /// The statistic is identically zero in the limit.
    Degenerate,
}

impl RefDistribution {
    /// Upper-tail probability at `x`.
    pub fn sf(&self, x: f64) -> Result<f64> {
        match *self {
            RefDistribution::ChiSquared { df } => chi2_sf(x, df),
            RefDistribution::Gamma(p) => gamma_sf(x, p),
            RefDistribution::Degenerate => Ok(if x > 0.0 { 0.0 } else { 1.0 }),
        }
    }
}

/// Box moment-matching gamma approximation for `sum_r lambda_r(Theta) chi2(1)`.
pub fn box_gamma_params(theta: &Mat) -> Result<RefDistribution> {
    ensure_square(theta)?;
    let sym = symmetrize(theta);
    let trace = sym.trace();
    let trace_sq = sym.iter().map(|x| x * x).sum::<f64>();
    box_gamma_from_traces(trace, trace_sq)
}

/// Same as [`box_gamma_params`] from `tr(Theta)` and `tr(Theta^2)` directly,
/// which lets block-diagonal `Theta` be handled block by block.
pub fn box_gamma_from_traces(trace: f64, trace_sq: f64) -> Result<RefDistribution> {
    if trace < 0.0 {
        return Err(Error::NotPositiveSemidefinite(trace));
    }
    if trace == 0.0 || trace_sq == 0.0 {
        return Ok(RefDistribution::Degenerate);
    }
    let shape = trace * trace / (2.0 * trace_sq);
    let rate = trace / (2.0 * trace_sq);
    Ok(RefDistribution::Gamma(GammaParams::new(shape, rate)?))
}

/// Factorized Gaussian sampler `mean + L z` with `L L' = cov`.
#[derive(Debug, Clone)]
pub struct MvnSampler {
    mean: Vector,
    factor: Mat,
}

impl MvnSampler {
    pub fn new(mean: Vector, cov: &Mat) -> Result<Self> {
        let n = ensure_square(cov)?;
        if n != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean of length {} with {n}x{n} covariance",
                mean.len()
            )));
        }
        let sym = symmetrize(cov);
        let factor = match Cholesky::new(sym.clone()) {
            Some(ch) => ch.l(),
            None => {
                let eig = SymmetricEigen::new(sym);
                let largest = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
                let smallest = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
                if smallest < -1e-8 * largest.max(1.0) {
                    return Err(Error::NotPositiveSemidefinite(smallest));
                }
                let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                eig.eigenvectors * Mat::from_diagonal(&roots)
            }
        };
        Ok(Self { mean, factor })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let z = Vector::from_fn(self.mean.len(), |_, _| rng.sample(StandardNormal));
        &self.mean + &self.factor * z
    }
}

/// One draw from `N(mean, cov)`.
pub fn mvn_sample<R: Rng + ?Sized>(mean: &Vector, cov: &Mat, rng: &mut R) -> Result<Vector> {
    Ok(MvnSampler::new(mean.clone(), cov)?.sample(rng))
}

//! Per-regime conditional emission laws.
//!
//! Every law is expressed with respect to the mixed reference measure
//! "counting measure on the atoms + Lebesgue measure". Counting families put
//! their atoms on the nonnegative integers, the point mass sits at zero, and
//! the Gaussian family is absolutely continuous. Whether the Gaussian density
//! must vanish on an atom is a property of the whole model, so it is handled
//! in [`crate::markov`], not here.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// Lower clamp applied to linear-link Poisson means inside likelihood code.
pub const POISSON_MEAN_FLOOR: f64 = 1e-10;

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;
const TAIL_CUTOFF: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    /// `mu = exp(sum phi_k log(1 + y_{t-k}) + alpha' z)`
    LogLinear,
    /// `mu = sum phi_k y_{t-k} + alpha' z`, nonnegative regressors only.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmissionFamily {
    GaussianAr,
    PoissonAr { link: Link },
    PointMassAtZero,
}

/// Regression parameters of one regime.
///
/// `alpha[0]` multiplies the constant covariate. `sigma` is only read by the
/// Gaussian family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionParams {
    pub phi: Vec<f64>,
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub sigma: f64,
}

impl EmissionParams {
    pub fn new(phi: Vec<f64>, alpha: Vec<f64>, sigma: f64) -> Self {
        Self { phi, alpha, sigma }
    }

    /// Parameters of the point mass at zero.
    pub fn empty() -> Self {
        Self { phi: Vec::new(), alpha: Vec::new(), sigma: 0.0 }
    }

    /// All-zero coefficients with an intercept.
    pub fn intercept_only(p: usize, r: usize, intercept: f64, sigma: f64) -> Self {
        let mut alpha = vec![0.0; r];
        if r > 0 {
            alpha[0] = intercept;
        }
        Self { phi: vec![0.0; p], alpha, sigma }
    }

    pub fn intercept(&self) -> f64 {
        self.alpha.first().copied().unwrap_or(0.0)
    }
}

/// Regressors of one time step: `lags[k] = y_{t-1-k}` and the covariate row.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub lags: &'a [f64],
    pub covariates: &'a [f64],
}

impl<'a> Predictor<'a> {
    pub fn new(lags: &'a [f64], covariates: &'a [f64]) -> Self {
        Self { lags, covariates }
    }
}

impl EmissionFamily {
    /// Number of free parameters of one regime of this family.
    pub fn param_count(&self, p: usize, r: usize) -> usize {
        match self {
            EmissionFamily::GaussianAr => p + r + 1,
            EmissionFamily::PoissonAr { .. } => p + r,
            EmissionFamily::PointMassAtZero => 0,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, EmissionFamily::GaussianAr)
    }

    pub fn validate(&self, params: &EmissionParams, p: usize, r: usize) -> Result<()> {
        if matches!(self, EmissionFamily::PointMassAtZero) {
            return Ok(());
        }
        if params.phi.len() != p || params.alpha.len() != r {
            return Err(Error::Dimension(format!(
                "expected {p} AR and {r} covariate coefficients, got {} and {}",
                params.phi.len(),
                params.alpha.len()
            )));
        }
        if params.phi.iter().chain(&params.alpha).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite coefficient".into()));
        }
        match self {
            EmissionFamily::GaussianAr => {
                if !(params.sigma > 0.0 && params.sigma.is_finite()) {
                    return Err(Error::InvalidParams(format!(
                        "Gaussian sigma must be positive, got {}",
                        params.sigma
                    )));
                }
            }
            EmissionFamily::PoissonAr { link: Link::Linear } => {
                let phi_sum: f64 = params.phi.iter().sum();
                if params.phi.iter().any(|&v| v < 0.0) || phi_sum >= 1.0 {
                    return Err(Error::InvalidParams(format!(
                        "linear Poisson needs phi >= 0 with sum < 1, got {:?}",
                        params.phi
                    )));
                }
                if params.alpha.first().is_some_and(|&a| a <= 0.0)
                    || params.alpha.iter().skip(1).any(|&a| a < 0.0)
                {
                    return Err(Error::InvalidParams(format!(
                        "linear Poisson needs alpha[0] > 0 and alpha[k] >= 0, got {:?}",
                        params.alpha
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_dims(params: &EmissionParams, x: &Predictor<'_>) -> Result<()> {
    if params.phi.len() != x.lags.len() || params.alpha.len() != x.covariates.len() {
        return Err(Error::Dimension(format!(
            "parameters ({}, {}) vs predictor ({}, {})",
            params.phi.len(),
            params.alpha.len(),
            x.lags.len(),
            x.covariates.len()
        )));
    }
    Ok(())
}

fn linear_form(params: &EmissionParams, lags: impl Iterator<Item = f64>, z: &[f64]) -> f64 {
    let ar: f64 = params.phi.iter().zip(lags).map(|(a, b)| a * b).sum();
    let cov: f64 = params.alpha.iter().zip(z).map(|(a, b)| a * b).sum();
    ar + cov
}

/// Conditional mean without dimension checks; linear Poisson means are
/// clamped at [`POISSON_MEAN_FLOOR`].
pub(crate) fn mean_unchecked(family: EmissionFamily, params: &EmissionParams, x: &Predictor<'_>) -> f64 {
    match family {
        EmissionFamily::GaussianAr => linear_form(params, x.lags.iter().copied(), x.covariates),
        EmissionFamily::PoissonAr { link: Link::LogLinear } => {
            linear_form(params, x.lags.iter().map(|y| (1.0 + y).ln()), x.covariates).exp()
        }
        EmissionFamily::PoissonAr { link: Link::Linear } => {
            linear_form(params, x.lags.iter().copied(), x.covariates).max(POISSON_MEAN_FLOOR)
        }
        EmissionFamily::PointMassAtZero => 0.0,
    }
}

/// Conditional mean of the emission given the regressors.
pub fn emission_mean(family: EmissionFamily, params: &EmissionParams, x: &Predictor<'_>) -> Result<f64> {
    if matches!(family, EmissionFamily::PointMassAtZero) {
        return Ok(0.0);
    }
    check_dims(params, x)?;
    if let EmissionFamily::PoissonAr { link: Link::Linear } = family {
        let mu = linear_form(params, x.lags.iter().copied(), x.covariates);
        if mu <= 0.0 {
            return Err(Error::InvalidParams(format!("nonpositive linear Poisson mean {mu}")));
        }
        return Ok(mu);
    }
    Ok(mean_unchecked(family, params, x))
}

pub fn normal_pdf(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * SQRT_2PI)
}

pub fn normal_cdf(mu: f64, sigma: f64, y: f64) -> f64 {
    0.5 * erfc(-(y - mu) / (sigma * std::f64::consts::SQRT_2))
}

fn as_count(y: f64) -> Option<u64> {
    if y >= 0.0 && y.fract() == 0.0 && y < 9.0e15 {
        Some(y as u64)
    } else {
        None
    }
}

fn poisson_ln_pmf(mu: f64, k: u64) -> f64 {
    if mu <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * mu.ln() - mu - ln_factorial(k)
}

pub fn poisson_pmf(mu: f64, k: u64) -> f64 {
    poisson_ln_pmf(mu, k).exp()
}

/// `P(Y <= k)` for `Y ~ Poisson(mu)`.
///
/// Summed with the ratio recurrence `pmf(j) = pmf(j - 1) mu / j` anchored at
/// `pmf(k)` in log space: downward towards 0 when `k <= mu`, otherwise the
/// upper tail is summed and subtracted. Summation stops once the geometric
/// bound on the remaining terms is below `1e-15` of the running sum.
pub fn poisson_cdf(mu: f64, k: u64) -> f64 {
    if mu <= 0.0 {
        return 1.0;
    }
    if (k as f64) <= mu {
        let mut term = poisson_pmf(mu, k);
        let mut sum = term;
        let mut j = k;
        while j > 0 && term > 0.0 {
            term *= j as f64 / mu;
            j -= 1;
            sum += term;
            let ratio = j as f64 / mu;
            if term * ratio / (1.0 - ratio) < TAIL_CUTOFF * sum {
                break;
            }
        }
        sum.min(1.0)
    } else {
        let mut j = k + 1;
        let mut term = poisson_pmf(mu, j);
        let mut tail = term;
        while term > 0.0 {
            j += 1;
            term *= mu / j as f64;
            tail += term;
            let ratio = mu / (j + 1) as f64;
            if term * ratio / (1.0 - ratio) < TAIL_CUTOFF * tail.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        (1.0 - tail).clamp(0.0, 1.0)
    }
}

/// Density of the emission with conditional mean `mu` at `y`.
pub fn density_at(family: EmissionFamily, mu: f64, sigma: f64, y: f64) -> f64 {
    match family {
        EmissionFamily::GaussianAr => normal_pdf(mu, sigma, y),
        EmissionFamily::PoissonAr { .. } => as_count(y).map_or(0.0, |k| poisson_pmf(mu, k)),
        EmissionFamily::PointMassAtZero => {
            if y == 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn cdf_at(family: EmissionFamily, mu: f64, sigma: f64, y: f64) -> f64 {
    match family {
        EmissionFamily::GaussianAr => normal_cdf(mu, sigma, y),
        EmissionFamily::PoissonAr { .. } => {
            if y < 0.0 {
                0.0
            } else {
                poisson_cdf(mu, y.floor() as u64)
            }
        }
        EmissionFamily::PointMassAtZero => {
            if y >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn cdf_left_at(family: EmissionFamily, mu: f64, sigma: f64, y: f64) -> f64 {
    match family {
        EmissionFamily::GaussianAr => normal_cdf(mu, sigma, y),
        EmissionFamily::PoissonAr { .. } => match as_count(y) {
            Some(0) => 0.0,
            Some(k) => poisson_cdf(mu, k - 1),
            None => cdf_at(family, mu, sigma, y),
        },
        EmissionFamily::PointMassAtZero => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn density(family: EmissionFamily, params: &EmissionParams, x: &Predictor<'_>, y: f64) -> f64 {
    density_at(family, mean_unchecked(family, params, x), params.sigma, y)
}

/// `P(Y <= y | x)`.
pub fn cdf(family: EmissionFamily, params: &EmissionParams, x: &Predictor<'_>, y: f64) -> f64 {
    cdf_at(family, mean_unchecked(family, params, x), params.sigma, y)
}

/// `P(Y < y | x)`.
pub fn cdf_left(family: EmissionFamily, params: &EmissionParams, x: &Predictor<'_>, y: f64) -> f64 {
    cdf_left_at(family, mean_unchecked(family, params, x), params.sigma, y)
}

/// `P(Y = y | x)`.
pub fn jump(family: EmissionFamily, params: &EmissionParams, x: &Predictor<'_>, y: f64) -> f64 {
    match family {
        EmissionFamily::GaussianAr => 0.0,
        _ => {
            let mu = mean_unchecked(family, params, x);
            (cdf_at(family, mu, params.sigma, y) - cdf_left_at(family, mu, params.sigma, y)).max(0.0)
        }
    }
}

pub fn sample_at<R: Rng + ?Sized>(family: EmissionFamily, mu: f64, sigma: f64, rng: &mut R) -> f64 {
    match family {
        EmissionFamily::GaussianAr => Normal::new(mu, sigma)
            .expect("validated Gaussian parameters")
            .sample(rng),
        EmissionFamily::PoissonAr { .. } => {
            if mu <= POISSON_MEAN_FLOOR {
                0.0
            } else {
                Poisson::new(mu).expect("finite positive Poisson mean").sample(rng)
            }
        }
        EmissionFamily::PointMassAtZero => 0.0,
    }
}

/// Draw one response from the emission law given the regressors.
pub fn sample<R: Rng + ?Sized>(
    family: EmissionFamily,
    params: &EmissionParams,
    x: &Predictor<'_>,
    rng: &mut R,
) -> f64 {
    sample_at(family, mean_unchecked(family, params, x), params.sigma, rng)
}

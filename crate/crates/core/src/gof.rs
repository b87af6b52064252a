//! Goodness-of-fit: randomized Rosenblatt pseudo-observations, Cramér–von
//! Mises and Kolmogorov–Smirnov statistics, the averaged Cramér–von Mises
//! statistic and parametric-bootstrap P-values.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp;
use crate::dists::Predictor;
use crate::em::{self, EmConfig, FamilySpec, FitResult};
use crate::error::{Error, Result};
use crate::markov::{self, HmmModel, SeriesData};
use crate::rng::{self, Stream};

pub const MAX_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoObs {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Left limits and values of the one-step predictive mixture cdf at the
/// observed responses.
#[derive(Debug, Clone)]
pub struct CdfBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl CdfBounds {
    pub fn new(model: &HmmModel, data: &SeriesData) -> Result<Self> {
        let p = model.p();
        let m = data.len().saturating_sub(p);
        let fwd = markov::forward_filter(model, data)?;
        let mut lags = Vec::with_capacity(p);
        let (mut lo, mut hi) = (Vec::with_capacity(m), Vec::with_capacity(m));
        for s in 0..m {
            let t = p + s;
            data.lags_into(t, p, &mut lags);
            let x = Predictor::new(&lags, data.z_row(t));
            let w = fwd.weights.row(s);
            let w = w.as_slice().expect("standard layout");
            let y = data.y()[t];
            hi.push(markov::conditional_cdf(model, w, &x, y));
            lo.push(markov::conditional_cdf_left(model, w, &x, y));
        }
        Ok(Self { lo, hi })
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    /// `u_t = (1 - v_t) F_t(y_t-) + v_t F_t(y_t)`.
    pub fn randomize(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.len() {
            return Err(Error::Dimension(format!("{} randomization draws for {} effective observations", v.len(), self.len())));
        }
        Ok(self.lo.iter().zip(&self.hi).zip(v).map(|((lo, hi), v)| ((1.0 - v) * lo + v * hi).clamp(0.0, 1.0)).collect())
    }
}

/// Randomized PIT values under the one-step predictive mixture.
pub fn pseudo_observations(model: &HmmModel, data: &SeriesData, v: &[f64]) -> Result<PseudoObs> {
    let m = data.len().saturating_sub(model.p());
    if v.len() != m {
        return Err(Error::Dimension(format!("{} randomization draws for {m} effective observations", v.len())));
    }
    let u = CdfBounds::new(model, data)?.randomize(v)?;
    Ok(PseudoObs { u, v: v.to_vec() })
}

fn sorted(u: &[f64]) -> Vec<f64> {
    let mut s = u.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s
}

pub fn cvm_statistic(u: &[f64]) -> f64 {
    let m = u.len() as f64;
    let s = sorted(u);
    let sum: f64 = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = v - (i as f64 + 0.5) / m;
            d * d
        })
        .sum();
    sum + 1.0 / (12.0 * m)
}

pub fn ks_statistic(u: &[f64]) -> f64 {
    let m = u.len() as f64;
    let s = sorted(u);
    let dev = s.iter().enumerate().fold(0.0f64, |acc, (i, &v)| {
        let i = i as f64;
        acc.max((v - (i + 1.0) / m).abs()).max((v - i / m).abs())
    });
    m.sqrt() * dev
}

/// Averaged Cramér–von Mises statistic over `M` randomizations, given the
/// pseudo-observation columns. Uses
/// `sum_{a,b} max(x_a, x_b) = sum_i x_(i) (2i - 1)` over the pooled sample.
pub fn averaged_cvm_from(columns: &[Vec<f64>]) -> f64 {
    if let [single] = columns {
        return cvm_statistic(single);
    }
    let big_m = columns.len() as f64;
    let m = columns[0].len() as f64;
    let squares: f64 = columns.iter().flatten().map(|v| v * v).sum();
    let pooled = sorted(&columns.concat());
    let pair_max: f64 = pooled.iter().enumerate().map(|(i, &v)| v * (2.0 * i as f64 + 1.0)).sum();
    m / 3.0 + squares / big_m - pair_max / (big_m * big_m * m)
}

fn uniform_draws(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..m).map(|_| rng.random::<f64>()).collect()
}

/// Draws `big_m` randomization vectors and evaluates the averaged statistic.
pub fn averaged_cvm(model: &HmmModel, data: &SeriesData, big_m: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if big_m == 0 {
        return Err(Error::InvalidSpec("averaged statistic needs M >= 1".into()));
    }
    let bounds = CdfBounds::new(model, data)?;
    let cols = (0..big_m).map(|_| bounds.randomize(&uniform_draws(bounds.len(), rng))).collect::<Result<Vec<_>>>()?;
    Ok(averaged_cvm_from(&cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    Cvm,
    Ks,
    AvgCvm(usize),
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statistic::Cvm => write!(f, "CvM"),
            Statistic::Ks => write!(f, "KS"),
            Statistic::AvgCvm(m) => write!(f, "AvgCvM-{m}"),
        }
    }
}

impl Statistic {
    pub fn compute(&self, model: &HmmModel, data: &SeriesData, rng: &mut ChaCha8Rng) -> Result<f64> {
        let m = data.len().saturating_sub(model.p());
        match *self {
            Statistic::Cvm => Ok(cvm_statistic(&pseudo_observations(model, data, &uniform_draws(m, rng))?.u)),
            Statistic::Ks => Ok(ks_statistic(&pseudo_observations(model, data, &uniform_draws(m, rng))?.u)),
            Statistic::AvgCvm(big_m) => averaged_cvm(model, data, big_m, rng),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GofConfig {
    pub statistic: Statistic,
    pub bootstrap: usize,
    pub seed: u64,
    pub em: EmConfig,
    /// Restarts for bootstrap refits, which are warm-started from the fit.
    pub refit_restarts: usize,
    pub retain_bootstrap: bool,
}

impl Default for GofConfig {
    fn default() -> Self {
        Self {
            statistic: Statistic::AvgCvm(50),
            bootstrap: 100,
            seed: 0,
            em: EmConfig::default(),
            refit_restarts: 3,
            retain_bootstrap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub statistic: String,
    pub ell: usize,
    pub p: usize,
    pub observed: f64,
    pub bootstrap: usize,
    pub p_value: f64,
    /// Replicates whose refit failed on every attempt; counted as exceedances.
    pub failed_replicates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_statistics: Option<Vec<Option<f64>>>,
}

impl GofReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fraction of bootstrap statistics at least as large as the observed one;
/// missing replicates count as exceedances.
pub fn exceedance_pvalue(observed: f64, boot: &[Option<f64>]) -> f64 {
    let hits = boot.iter().filter(|s| s.is_none_or(|v| v >= observed)).count();
    hits as f64 / boot.len() as f64
}

fn bootstrap_replicate(
    spec: &FamilySpec,
    data: &SeriesData,
    fit: &FitResult,
    config: &GofConfig,
    k: u64,
) -> Option<f64> {
    let (ell, p) = (fit.model.ell(), fit.model.p());
    for attempt in 0..MAX_ATTEMPTS as u64 {
        let mut data_rng = rng::substream(config.seed, Stream::BootstrapData, &[k, attempt]);
        let refit_cfg = EmConfig {
            restarts: config.refit_restarts.max(1),
            seed: rng::stream_seed(config.seed, Stream::BootstrapRefit, &[k, attempt]),
            ..config.em.clone()
        };
        let result = dgp::simulate_conditional(&fit.model, data, &mut data_rng).and_then(|boot| {
            let refit = em::em_fit_with(spec, &boot, ell, p, &refit_cfg, Some(&fit.model))?;
            let mut v_rng = rng::substream(config.seed, Stream::PitDraw, &[k + 1, attempt]);
            config.statistic.compute(&refit.model, &boot, &mut v_rng)
        });
        match result {
            Ok(s) => return Some(s),
            Err(e) => log::debug!("bootstrap replicate {k} attempt {attempt}: {e}"),
        }
    }
    log::warn!("bootstrap replicate {k} failed {MAX_ATTEMPTS} times; counted as an exceedance");
    None
}

/// Parametric-bootstrap P-value of the fitted model `fit` on `data`.
pub fn bootstrap_from_fit(spec: &FamilySpec, data: &SeriesData, fit: &FitResult, config: &GofConfig) -> Result<GofReport> {
    if config.bootstrap == 0 {
        return Err(Error::InvalidSpec("B must be at least 1".into()));
    }
    let mut v_rng = rng::substream(config.seed, Stream::PitDraw, &[0, 0]);
    let observed = config.statistic.compute(&fit.model, data, &mut v_rng)?;
    let boot: Vec<Option<f64>> = (0..config.bootstrap as u64)
        .into_par_iter()
        .map(|k| bootstrap_replicate(spec, data, fit, config, k))
        .collect();
    Ok(GofReport {
        statistic: config.statistic.to_string(),
        ell: fit.model.ell(),
        p: fit.model.p(),
        observed,
        bootstrap: config.bootstrap,
        p_value: exceedance_pvalue(observed, &boot),
        failed_replicates: boot.iter().filter(|s| s.is_none()).count(),
        bootstrap_statistics: config.retain_bootstrap.then_some(boot),
    })
}

/// Fits an `ell`-regime model and tests it by parametric bootstrap.
pub fn bootstrap_pvalue(spec: &FamilySpec, data: &SeriesData, ell: usize, p: usize, config: &GofConfig) -> Result<GofReport> {
    let fit = em::em_fit(spec, data, ell, p, &EmConfig { seed: config.seed, ..config.em.clone() })?;
    bootstrap_from_fit(spec, data, &fit, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::{EmissionFamily, EmissionParams, Link};
    use crate::markov::Regime;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn statistic_examples() {
        assert_relative_eq!(cvm_statistic(&[0.5]), 1.0 / 12.0, epsilon = 1e-15);
        assert_relative_eq!(ks_statistic(&[0.5]), 0.5, epsilon = 1e-15);
        let m = 40;
        let grid: Vec<f64> = (0..m).map(|t| (t as f64 + 0.5) / m as f64).collect();
        assert_relative_eq!(cvm_statistic(&grid), 1.0 / (12.0 * m as f64), epsilon = 1e-15);
        assert_relative_eq!(ks_statistic(&grid), 1.0 / (2.0 * (m as f64).sqrt()), epsilon = 1e-14);
    }

    #[test]
    fn pvalue_counting() {
        let boot: Vec<Option<f64>> = (0..100).map(|k| Some(if k < 7 { 2.0 } else { 0.5 })).collect();
        assert_relative_eq!(exceedance_pvalue(1.0, &boot), 0.07);
        assert_eq!(exceedance_pvalue(0.1, &boot), 1.0);
        let with_failure = vec![None, Some(0.0)];
        assert_eq!(exceedance_pvalue(1.0, &with_failure), 0.5);
    }

    #[test]
    fn degenerate_zero_model_gives_u_equal_v() {
        let model = HmmModel::new(vec![Regime::point_mass()], Array2::ones((1, 1)), 0, 1).unwrap();
        let data = SeriesData::intercept_only(vec![0.0; 4]).unwrap();
        let v = [0.1, 0.7, 0.3, 0.99];
        assert_eq!(pseudo_observations(&model, &data, &v).unwrap().u, v.to_vec());
    }

    #[test]
    fn continuous_model_ignores_randomization() {
        let model = HmmModel::new(
            vec![
                Regime::new(EmissionFamily::GaussianAr, EmissionParams::intercept_only(0, 1, 0.0, 1.0)),
                Regime::new(EmissionFamily::GaussianAr, EmissionParams::intercept_only(0, 1, 2.0, 0.5)),
            ],
            ndarray::array![[0.9, 0.1], [0.2, 0.8]],
            0,
            1,
        )
        .unwrap();
        let data = SeriesData::intercept_only(vec![0.3, -1.0, 2.2, 1.9, 0.4]).unwrap();
        let a = pseudo_observations(&model, &data, &[0.0; 5]).unwrap();
        let b = pseudo_observations(&model, &data, &[0.9; 5]).unwrap();
        assert_eq!(a.u, b.u);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s1 = averaged_cvm(&model, &data, 1, &mut rng).unwrap();
        let s7 = averaged_cvm(&model, &data, 7, &mut rng).unwrap();
        assert_relative_eq!(s1, cvm_statistic(&a.u), epsilon = 1e-12);
        assert_relative_eq!(s7, s1, epsilon = 1e-12);
    }

    #[test]
    fn count_model_pseudo_obs_in_unit_interval() {
        let model = HmmModel::new(
            vec![Regime::new(
                EmissionFamily::PoissonAr { link: Link::LogLinear },
                EmissionParams::intercept_only(0, 1, 0.5, 0.0),
            )],
            Array2::ones((1, 1)),
            0,
            1,
        )
        .unwrap();
        let data = SeriesData::intercept_only(vec![0.0, 1.0, 4.0, 2.0]).unwrap();
        let po = pseudo_observations(&model, &data, &[0.5; 4]).unwrap();
        assert!(po.u.iter().all(|&u| (0.0..=1.0).contains(&u)));
        assert!(pseudo_observations(&model, &data, &[0.5; 3]).is_err());
    }

    #[test]
    fn report_serializes() {
        let r = GofReport {
            statistic: Statistic::AvgCvm(50).to_string(),
            ell: 1,
            p: 2,
            observed: 0.1,
            bootstrap: 10,
            p_value: 0.3,
            failed_replicates: 0,
            bootstrap_statistics: None,
        };
        let json = r.to_json().unwrap();
        assert!(json.contains("\"statistic\": \"AvgCvM-50\""));
        let back: GofReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn statistics_are_permutation_invariant_and_bounded(mut u in prop::collection::vec(0.0f64..=1.0, 1..60), seed in any::<u64>()) {
            let m = u.len() as f64;
            let c = cvm_statistic(&u);
            let k = ks_statistic(&u);
            prop_assert!(c >= 1.0 / (12.0 * m) - 1e-12);
            prop_assert!(k >= 1.0 / (2.0 * m.sqrt()) - 1e-12);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..u.len()).rev() {
                let j = rand::Rng::random_range(&mut rng, 0..=i);
                u.swap(i, j);
            }
            prop_assert!((cvm_statistic(&u) - c).abs() < 1e-12);
            prop_assert!((ks_statistic(&u) - k).abs() < 1e-12);
            prop_assert!((averaged_cvm_from(std::slice::from_ref(&u)) - c).abs() < 1e-10);
        }
    }
}

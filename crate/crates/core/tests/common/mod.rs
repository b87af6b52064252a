//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use arxhmm::dists::{EmissionFamily, EmissionParams, Link};
use arxhmm::markov::{HmmModel, Regime, SeriesData};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Poisson};
use rand_chacha::ChaCha8Rng;

fn ln_factorial(k: u64) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

/// Emission density written out from the model definition, without any of
/// the library's density helpers.
pub fn reference_density(model: &HmmModel, j: usize, lags: &[f64], z: &[f64], y: f64) -> f64 {
    let reg = model.regime(j);
    let par = &reg.params;
    let lin = |lagv: &dyn Fn(f64) -> f64| -> f64 {
        let mut s = 0.0;
        for (k, &phi) in par.phi.iter().enumerate() {
            s += phi * lagv(lags[k]);
        }
        for (k, &a) in par.alpha.iter().enumerate() {
            s += a * z[k];
        }
        s
    };
    let zero_atom = model.regimes().iter().any(|r| r.family == EmissionFamily::PointMassAtZero);
    match reg.family {
        EmissionFamily::PointMassAtZero => {
            if y == 0.0 {
                1.0
            } else {
                0.0
            }
        }
        EmissionFamily::GaussianAr => {
            if zero_atom && y == 0.0 {
                return 0.0;
            }
            let mu = lin(&|v| v);
            let s = par.sigma;
            (-(y - mu) * (y - mu) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        }
        EmissionFamily::PoissonAr { link } => {
            let mu = match link {
                Link::LogLinear => lin(&|v| (1.0 + v).ln()).exp(),
                Link::Linear => lin(&|v| v),
            };
            let k = y as u64;
            (k as f64 * mu.ln() - mu - ln_factorial(k)).exp()
        }
    }
}

pub struct Enumerated {
    pub loglik: f64,
    /// P(state at step s | observations up to s)
    pub filtered: Array2<f64>,
    pub lambda: Array2<f64>,
    pub pair: Array3<f64>,
    pub lambda_init: Vec<f64>,
}

/// Sums the joint law over every hidden path, including the initial state
/// preceding the first effective observation.
pub fn enumerate(model: &HmmModel, data: &SeriesData) -> Enumerated {
    let (ell, p) = (model.ell(), model.p());
    let m = data.len() - p;
    let q = model.transition();
    let dens: Vec<Vec<f64>> = (0..m)
        .map(|s| {
            let t = p + s;
            let lags: Vec<f64> = (1..=p).map(|k| data.y()[t - k]).collect();
            (0..ell).map(|j| reference_density(model, j, &lags, data.z_row(t), data.y()[t])).collect()
        })
        .collect();

    let mut total = 0.0;
    let mut prefix = vec![vec![0.0; ell]; m];
    let mut prefix_norm = vec![0.0; m];
    let mut lambda = Array2::zeros((m, ell));
    let mut pair = Array3::zeros((m, ell, ell));
    let mut lambda_init = vec![0.0; ell];
    let n_paths = ell.pow(m as u32 + 1);
    let mut path = vec![0usize; m + 1];
    for code in 0..n_paths {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % ell;
            c /= ell;
        }
        let mut w = model.eta0()[path[0]];
        for s in 0..m {
            w *= q[(path[s], path[s + 1])] * dens[s][path[s + 1]];
            prefix[s][path[s + 1]] += w / ell.pow((m - 1 - s) as u32) as f64;
            prefix_norm[s] += w / ell.pow((m - 1 - s) as u32) as f64;
        }
        total += w;
        lambda_init[path[0]] += w;
        for s in 0..m {
            lambda[(s, path[s + 1])] += w;
            pair[(s, path[s], path[s + 1])] += w;
        }
    }
    let filtered = Array2::from_shape_fn((m, ell), |(s, j)| prefix[s][j] / prefix_norm[s]);
    lambda.mapv_inplace(|v| v / total);
    pair.mapv_inplace(|v| v / total);
    lambda_init.iter_mut().for_each(|v| *v /= total);
    Enumerated { loglik: total.ln(), filtered, lambda, pair, lambda_init }
}

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    Gaussian,
    PoissonLog,
    PoissonLinear,
    ZeroGaussian,
    ZeroPoisson,
}

pub const KINDS: [Kind; 5] = [Kind::Gaussian, Kind::PoissonLog, Kind::PoissonLinear, Kind::ZeroGaussian, Kind::ZeroPoisson];

fn random_stochastic(rng: &mut ChaCha8Rng, ell: usize) -> Array2<f64> {
    let mut q = Array2::from_shape_fn((ell, ell), |_| 0.05 + rng.random::<f64>());
    for mut row in q.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    q
}

/// Random model of the given kind together with a compatible series of
/// `m` effective observations.
pub fn random_instance(rng: &mut ChaCha8Rng, kind: Kind, ell: usize, m: usize) -> (HmmModel, SeriesData) {
    let p = rng.random_range(0..=1usize);
    let n = m + p;
    let mut z = Array2::ones((n, 2));
    for t in 0..n {
        z[(t, 1)] = rng.random::<f64>();
    }
    let zero = matches!(kind, Kind::ZeroGaussian | Kind::ZeroPoisson) && ell >= 2;
    let count = !matches!(kind, Kind::Gaussian | Kind::ZeroGaussian);
    let y: Vec<f64> = (0..n)
        .map(|_| {
            if matches!(kind, Kind::ZeroGaussian | Kind::ZeroPoisson) && rng.random::<f64>() < 0.3 {
                0.0
            } else if count {
                rng.random_range(0..7u32) as f64
            } else {
                rng.random::<f64>() * 4.0 - 1.0
            }
        })
        .collect();
    let regimes = (0..ell)
        .map(|j| {
            if zero && j == 0 {
                return Regime::point_mass();
            }
            match kind {
                Kind::Gaussian | Kind::ZeroGaussian => Regime::new(
                    EmissionFamily::GaussianAr,
                    EmissionParams::new(
                        (0..p).map(|_| rng.random::<f64>() - 0.5).collect(),
                        vec![rng.random::<f64>() * 2.0, rng.random::<f64>()],
                        0.5 + rng.random::<f64>(),
                    ),
                ),
                Kind::PoissonLog => Regime::new(
                    EmissionFamily::PoissonAr { link: Link::LogLinear },
                    EmissionParams::new(
                        (0..p).map(|_| rng.random::<f64>() * 0.5).collect(),
                        vec![rng.random::<f64>() * 1.5 - 0.5, rng.random::<f64>() * 0.5],
                        0.0,
                    ),
                ),
                Kind::PoissonLinear | Kind::ZeroPoisson => Regime::new(
                    EmissionFamily::PoissonAr { link: Link::Linear },
                    EmissionParams::new(
                        (0..p).map(|_| rng.random::<f64>() * 0.5).collect(),
                        vec![0.3 + rng.random::<f64>() * 3.0, rng.random::<f64>()],
                        0.0,
                    ),
                ),
            }
        })
        .collect();
    let model = HmmModel::new(regimes, random_stochastic(rng, ell), p, 2).unwrap();
    (model, SeriesData::new(y, z).unwrap())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(a.abs())
    }
}

/// Two-regime Gaussian ARX(1) series with a uniform covariate.
pub fn switching_gaussian(n: usize, seed: u64) -> SeriesData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut y = vec![0.0; n];
    let mut z = Array2::ones((n, 2));
    let mut state = 0usize;
    for t in 0..n {
        if rng.random::<f64>() < 0.05 {
            state = 1 - state;
        }
        z[(t, 1)] = rng.random::<f64>();
        let lag = if t > 0 { y[t - 1] } else { 0.0 };
        let (phi, a0, s) = if state == 0 { (0.3, 0.0, 0.6) } else { (0.2, 3.0, 0.4) };
        y[t] = phi * lag + a0 + 0.5 * z[(t, 1)] + s * noise.sample(&mut rng);
    }
    SeriesData::new(y, z).unwrap()
}

/// Two-regime linear Poisson ARX(1) counts with a uniform covariate.
pub fn switching_counts(n: usize, seed: u64) -> SeriesData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![0.0; n];
    let mut z = Array2::ones((n, 2));
    let mut state = 0usize;
    for t in 0..n {
        if rng.random::<f64>() < 0.05 {
            state = 1 - state;
        }
        z[(t, 1)] = rng.random::<f64>();
        let lag = if t > 0 { y[t - 1] } else { 0.0 };
        let mu: f64 = if state == 0 { 0.2 * lag + 1.0 + z[(t, 1)] } else { 0.3 * lag + 6.0 + 2.0 * z[(t, 1)] };
        y[t] = Poisson::new(mu).unwrap().sample(&mut rng);
    }
    SeriesData::new(y, z).unwrap()
}

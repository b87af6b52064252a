//! Data-generating processes of the simulation study and a generic sampler
//! from any fitted model.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::dists::{self, EmissionFamily, EmissionParams, Link, Predictor};
use crate::em::FamilySpec;
use crate::error::{Error, Result};
use crate::markov::{HmmModel, Regime, SeriesData};
use crate::rng::{self, Stream};

/// Means above this bound abort a simulation.
pub const OVERFLOW_MEAN: f64 = 1e9;
pub const DEFAULT_BURN_IN: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DgpModel {
    /// Gaussian ARX regimes.
    M1,
    /// Linear Poisson ARX regimes.
    M2,
    /// Zero-inflated Gaussian ARX.
    M3,
    /// Zero-inflated linear Poisson ARX.
    M4,
    /// Poisson regimes with constant means and no covariates.
    PoissonConstant { lambdas: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    /// Stationary AR(2) with an Exp(1) covariate.
    Exp1,
    /// AR(1) with a linear trend.
    Exp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub model: DgpModel,
    pub experiment: Experiment,
    /// Number of non-zero regimes.
    pub ell1: usize,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

/// A ready-to-simulate process: the true model, the family it belongs to and
/// how its covariates and presample are produced.
#[derive(Debug, Clone)]
pub struct BuiltinDgp {
    pub model: HmmModel,
    pub family: FamilySpec,
    pub experiment: Experiment,
    pub burn_in: usize,
    constant_means: bool,
}

pub fn q_two() -> Array2<f64> {
    ndarray::array![[0.94, 0.06], [0.03, 0.97]]
}

pub fn q_three() -> Array2<f64> {
    ndarray::array![[0.25, 0.25, 0.5], [0.375, 0.5875, 0.0375], [0.375, 0.01875, 0.60625]]
}

fn transition_for(ell: usize) -> Result<Array2<f64>> {
    match ell {
        1 => Ok(Array2::ones((1, 1))),
        2 => Ok(q_two()),
        3 => Ok(q_three()),
        _ => Err(Error::InvalidSpec(format!("no built-in transition matrix with {ell} regimes"))),
    }
}

impl DgpSpec {
    pub fn zero_inflated(&self) -> bool {
        matches!(self.model, DgpModel::M3 | DgpModel::M4)
    }

    /// Total number of regimes including the zero regime.
    pub fn ell(&self) -> usize {
        self.ell1 + usize::from(self.zero_inflated())
    }

    pub fn family(&self) -> FamilySpec {
        match self.model {
            DgpModel::M1 => FamilySpec::gaussian(),
            DgpModel::M2 => FamilySpec::poisson(Link::Linear),
            DgpModel::M3 => FamilySpec::gaussian().zero_inflated(),
            DgpModel::M4 => FamilySpec::poisson(Link::Linear).zero_inflated(),
            DgpModel::PoissonConstant { .. } => FamilySpec::poisson(Link::LogLinear),
        }
    }

    /// AR order of the data-generating process.
    pub fn p(&self) -> usize {
        match (&self.model, self.experiment) {
            (DgpModel::PoissonConstant { .. }, _) => 0,
            (_, Experiment::Exp1) => 2,
            (_, Experiment::Exp2) => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be positive".into()));
        }
        match &self.model {
            DgpModel::PoissonConstant { lambdas } => {
                if lambdas.len() != self.ell1 || lambdas.iter().any(|&l| !(l > 0.0)) {
                    return Err(Error::InvalidSpec("constant Poisson means must be positive, one per regime".into()));
                }
                if !(1..=3).contains(&self.ell1) {
                    return Err(Error::InvalidSpec("constant-mean process supports 1 to 3 regimes".into()));
                }
            }
            _ => {
                if !(1..=2).contains(&self.ell1) {
                    return Err(Error::InvalidSpec("built-in processes have 1 or 2 non-zero regimes".into()));
                }
            }
        }
        Ok(())
    }
}

/// Regime coefficients `(phi, alpha)` of the k-th non-zero regime.
fn paper_regime(model: &DgpModel, experiment: Experiment, k: usize) -> (Vec<f64>, Vec<f64>) {
    let poisson = matches!(model, DgpModel::M2 | DgpModel::M4);
    match (experiment, k) {
        (Experiment::Exp1, 0) if poisson => (vec![0.5, 0.1], vec![2.0, 0.1]),
        (Experiment::Exp1, 0) => (vec![0.5, 0.1], vec![-0.5, 0.1]),
        (Experiment::Exp1, _) => (vec![0.3, 0.6], vec![1.0, 0.5]),
        (Experiment::Exp2, 0) => (vec![0.5], vec![10.0, 5.0]),
        (Experiment::Exp2, _) => (vec![0.75], vec![8.0, 4.0]),
    }
}

const SIGMAS: [f64; 2] = [0.8, 0.1];

pub fn builtin_model(spec: &DgpSpec) -> Result<BuiltinDgp> {
    spec.validate()?;
    let family = spec.family();
    if let DgpModel::PoissonConstant { lambdas } = &spec.model {
        let regimes = lambdas
            .iter()
            .map(|&l| {
                Regime::new(
                    EmissionFamily::PoissonAr { link: Link::LogLinear },
                    EmissionParams::intercept_only(0, 1, l.ln(), 0.0),
                )
            })
            .collect();
        let model = HmmModel::new(regimes, transition_for(spec.ell1)?, 0, 1)?;
        return Ok(BuiltinDgp { model, family, experiment: spec.experiment, burn_in: 0, constant_means: true });
    }
    let ell = spec.ell();
    let emission = family.emission_family();
    let mut regimes = Vec::with_capacity(ell);
    if spec.zero_inflated() {
        regimes.push(Regime::point_mass());
    }
    for k in 0..spec.ell1 {
        let (phi, alpha) = paper_regime(&spec.model, spec.experiment, k);
        let sigma = if emission == EmissionFamily::GaussianAr { SIGMAS[k] } else { 0.0 };
        regimes.push(Regime::new(emission, EmissionParams::new(phi, alpha, sigma)));
    }
    let model = HmmModel::new(regimes, transition_for(ell)?, spec.p(), 2)?;
    let burn_in = match spec.experiment {
        Experiment::Exp1 => DEFAULT_BURN_IN,
        Experiment::Exp2 => 0,
    };
    Ok(BuiltinDgp { model, family, experiment: spec.experiment, burn_in, constant_means: false })
}

impl BuiltinDgp {
    /// Covariate rows for `len` simulated steps of which the last `n` are kept.
    pub fn covariates(&self, len: usize, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        if self.constant_means {
            return Array2::ones((len, 1));
        }
        let mut z = Array2::ones((len, 2));
        let offset = len - n;
        for t in 0..len {
            z[(t, 1)] = match self.experiment {
                Experiment::Exp1 => Exp1.sample(rng),
                Experiment::Exp2 => (t + 1).saturating_sub(offset) as f64 / n as f64,
            };
        }
        z
    }

    /// Draws a series of length `n` with its hidden regime path.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<Simulation> {
        let mut rng = rng::stream(seed, Stream::Simulate, 0);
        let len = n + self.burn_in;
        let z = self.covariates(len, n, &mut rng);
        let presample = vec![0.0; self.model.p()];
        let mut sim = simulate(&self.model, z.view(), &presample, &mut rng)?;
        if self.burn_in > 0 {
            sim = sim.drop_first(self.burn_in)?;
        }
        Ok(sim)
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: SeriesData,
    pub states: Vec<usize>,
}

impl Simulation {
    fn drop_first(self, k: usize) -> Result<Self> {
        let y = self.data.y()[k..].to_vec();
        let z = self.data.z().slice(s![k.., ..]).to_owned();
        Ok(Self { data: SeriesData::new(y, z)?, states: self.states[k..].to_vec() })
    }

    /// CSV with columns `t, y, z1..zr, true_regime`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let r = self.data.r();
        let mut header = vec!["t".to_string(), "y".to_string()];
        header.extend((1..=r).map(|k| format!("z{k}")));
        header.push("true_regime".into());
        w.write_record(&header)?;
        for t in 0..self.data.len() {
            let mut row = vec![t.to_string(), self.data.y()[t].to_string()];
            row.extend(self.data.z_row(t).iter().map(|v| v.to_string()));
            row.push(self.states[t].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn draw_index(probs: impl IntoIterator<Item = f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        acc += p;
        if p > 0.0 {
            last = i;
        }
        if u < acc {
            return i;
        }
    }
    last
}

fn draw_response(model: &HmmModel, state: usize, lags: &[f64], z: &[f64], t: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let reg = model.regime(state);
    let x = Predictor::new(lags, z);
    let mu = model.regime_mean(state, &x);
    if !mu.is_finite() || mu.abs() > OVERFLOW_MEAN {
        return Err(Error::SimulationOverflow { t, mean: mu });
    }
    Ok(dists::sample_at(reg.family, mu, reg.params.sigma, rng))
}

/// Simulates one response per covariate row. `presample` holds
/// `y_{-p}, ..., y_{-1}`; the state before the first row is drawn from the
/// model's initial distribution.
pub fn simulate(model: &HmmModel, z: ArrayView2<'_, f64>, presample: &[f64], rng: &mut ChaCha8Rng) -> Result<Simulation> {
    let p = model.p();
    if presample.len() != p || z.ncols() != model.r() {
        return Err(Error::Dimension("presample or covariate width does not match the model".into()));
    }
    let n = z.nrows();
    let q = model.transition();
    let mut hist: Vec<f64> = presample.to_vec();
    let mut states = Vec::with_capacity(n);
    let mut state = draw_index(model.eta0().iter().copied(), rng);
    let mut lags = vec![0.0; p];
    for t in 0..n {
        state = draw_index(q.row(state).iter().copied(), rng);
        let len = hist.len();
        for k in 0..p {
            lags[k] = hist[len - 1 - k];
        }
        let zr = z.row(t);
        let y = draw_response(model, state, &lags, zr.as_slice().expect("standard layout"), t, rng)?;
        hist.push(y);
        states.push(state);
    }
    let y = hist[p..].to_vec();
    Ok(Simulation { data: SeriesData::new(y, z.to_owned())?, states })
}

/// Bootstrap replicate: keeps the covariates and the first `p` observed
/// responses, and redraws the rest from `model`.
pub fn simulate_conditional(model: &HmmModel, data: &SeriesData, rng: &mut ChaCha8Rng) -> Result<SeriesData> {
    let p = model.p();
    if data.len() < p {
        return Err(Error::Dimension("series shorter than the AR order".into()));
    }
    let z = data.z();
    let sim = simulate(model, z.slice(s![p.., ..]), &data.y()[..p], rng)?;
    let mut y = data.y()[..p].to_vec();
    y.extend_from_slice(sim.data.y());
    data.with_response(y)
}

/// Stationary distribution of an irreducible stochastic matrix.
pub fn stationary_distribution(q: &Array2<f64>) -> Result<Vec<f64>> {
    let ell = q.nrows();
    let mut a = nalgebra::DMatrix::<f64>::zeros(ell, ell);
    let mut b = nalgebra::DVector::<f64>::zeros(ell);
    for i in 0..ell - 1 {
        for j in 0..ell {
            a[(i, j)] = q[(j, i)] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..ell {
        a[(ell - 1, j)] = 1.0;
    }
    b[ell - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidParams("transition matrix is not irreducible".into()))?;
    Ok(pi.iter().copied().collect())
}

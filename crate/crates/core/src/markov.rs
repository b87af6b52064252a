//! The ARX hidden Markov model and its filtering/smoothing recursions.
//!
//! The first `p` observations condition the likelihood: effective steps run
//! over data indices `t = p..n` (0-based) and the hidden state at index
//! `p - 1` plays the role of the initial state, distributed as `eta0`. All
//! recursions carry normalized probability rows; the forward normalizers
//! accumulate into the log-likelihood and the backward weights are
//! renormalized at every step so long series never underflow.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dists::{self, EmissionFamily, EmissionParams, Predictor};
use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Response vector and covariate matrix (first column identically one).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesData {
    y: Vec<f64>,
    z: Array2<f64>,
}

impl SeriesData {
    pub fn new(y: Vec<f64>, z: Array2<f64>) -> Result<Self> {
        if z.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "{} responses but {} covariate rows",
                y.len(),
                z.nrows()
            )));
        }
        if z.ncols() == 0 {
            return Err(Error::Dimension("at least the constant covariate is required".into()));
        }
        if z.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::Data("first covariate column must be identically 1".into()));
        }
        if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("missing or non-finite value".into()));
        }
        Ok(Self { y, z })
    }

    /// Series whose only covariate is the constant.
    pub fn intercept_only(y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(y, Array2::ones((n, 1)))
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Number of covariates, constant included.
    pub fn r(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn z_row(&self, t: usize) -> &[f64] {
        let r = self.z.ncols();
        &self.z.as_slice().expect("standard layout")[t * r..(t + 1) * r]
    }

    /// Fills `buf` with `y_{t-1}, ..., y_{t-p}`.
    pub fn lags_into(&self, t: usize, p: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend((1..=p).map(|k| self.y[t - k]));
    }

    /// Same covariate path with a different response.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.z.clone())
    }

    /// Reads a table with a `y` column and optional `z1..zr` columns; without
    /// `z` columns the constant is the only covariate. Other columns are ignored.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let col = |name: &str| header.iter().position(|h| h.trim() == name);
        let yi = col("y").ok_or_else(|| Error::Data("missing column y".into()))?;
        let mut zi = Vec::new();
        while let Some(i) = col(&format!("z{}", zi.len() + 1)) {
            zi.push(i);
        }
        let parse = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|e| Error::Data(format!("bad value {:?}: {e}", &rec[i])))
        };
        let (mut y, mut zflat) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            y.push(parse(&rec, yi)?);
            if zi.is_empty() {
                zflat.push(1.0);
            }
            for &i in &zi {
                zflat.push(parse(&rec, i)?);
            }
        }
        let r = zi.len().max(1);
        let z = Array2::from_shape_vec((y.len(), r), zflat).map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(y, z)
    }

    /// Sub-series of the first `len` observations.
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            y: self.y[..len].to_vec(),
            z: self.z.slice(ndarray::s![..len, ..]).to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub family: EmissionFamily,
    pub params: EmissionParams,
}

impl Regime {
    pub fn new(family: EmissionFamily, params: EmissionParams) -> Self {
        Self { family, params }
    }

    pub fn point_mass() -> Self {
        Self::new(EmissionFamily::PointMassAtZero, EmissionParams::empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    regimes: Vec<Regime>,
    transition: Array2<f64>,
    p: usize,
    r: usize,
    eta0: Vec<f64>,
}

fn check_probability_row(row: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if row.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
        return Err(Error::InvalidParams(format!("{what} has a negative or non-finite entry")));
    }
    let s = row.sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidParams(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl HmmModel {
    /// Builds a model with the uniform initial distribution.
    pub fn new(regimes: Vec<Regime>, transition: Array2<f64>, p: usize, r: usize) -> Result<Self> {
        let ell = regimes.len();
        if ell == 0 {
            return Err(Error::InvalidSpec("at least one regime is required".into()));
        }
        if r == 0 {
            return Err(Error::InvalidSpec("r >= 1 (constant covariate)".into()));
        }
        if transition.dim() != (ell, ell) {
            return Err(Error::Dimension(format!(
                "transition matrix is {:?}, expected {ell}x{ell}",
                transition.dim()
            )));
        }
        for (j, row) in transition.rows().into_iter().enumerate() {
            check_probability_row(row, &format!("transition row {j}"))?;
        }
        for (j, reg) in regimes.iter().enumerate() {
            if reg.family == EmissionFamily::PointMassAtZero && j != 0 {
                return Err(Error::InvalidSpec("the point mass at zero must be the first regime".into()));
            }
            reg.family.validate(&reg.params, p, r)?;
        }
        Ok(Self { regimes, transition, p, r, eta0: vec![1.0 / ell as f64; ell] })
    }

    pub fn with_eta0(mut self, eta0: Vec<f64>) -> Result<Self> {
        if eta0.len() != self.ell() {
            return Err(Error::Dimension("eta0 length differs from the number of regimes".into()));
        }
        check_probability_row(ArrayView1::from(&eta0), "eta0")?;
        self.eta0 = eta0;
        Ok(self)
    }

    pub fn ell(&self) -> usize {
        self.regimes.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn regimes(&self) -> &[Regime] {
        &self.regimes
    }

    pub fn regime(&self, j: usize) -> &Regime {
        &self.regimes[j]
    }

    pub fn transition(&self) -> ArrayView2<'_, f64> {
        self.transition.view()
    }

    /// Transition matrix in force at data index `t`. Constant for now.
    pub fn transition_at(&self, _t: usize) -> ArrayView2<'_, f64> {
        self.transition.view()
    }

    pub fn eta0(&self) -> &[f64] {
        &self.eta0
    }

    /// True when zero is an atom of the reference measure.
    pub fn has_zero_atom(&self) -> bool {
        self.regimes.iter().any(|r| r.family == EmissionFamily::PointMassAtZero)
    }

    pub fn n_params(&self) -> usize {
        let ell = self.ell();
        let emission: usize = self.regimes.iter().map(|r| r.family.param_count(self.p, self.r)).sum();
        emission + ell * (ell - 1)
    }

    /// Density of regime `j` w.r.t. the model's reference measure. On an
    /// atom, absolutely continuous regimes contribute zero.
    pub fn regime_density(&self, j: usize, x: &Predictor<'_>, y: f64) -> f64 {
        let reg = &self.regimes[j];
        if reg.family.is_continuous() && y == 0.0 && self.has_zero_atom() {
            return 0.0;
        }
        dists::density(reg.family, &reg.params, x, y)
    }

    pub fn regime_mean(&self, j: usize, x: &Predictor<'_>) -> f64 {
        let reg = &self.regimes[j];
        dists::mean_unchecked(reg.family, &reg.params, x)
    }

    /// Relabels regimes: new regime `i` is old regime `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let ell = self.ell();
        assert_eq!(perm.len(), ell);
        let regimes = perm.iter().map(|&j| self.regimes[j].clone()).collect();
        let transition = Array2::from_shape_fn((ell, ell), |(a, b)| self.transition[(perm[a], perm[b])]);
        let eta0 = perm.iter().map(|&j| self.eta0[j]).collect();
        Self { regimes, transition, p: self.p, r: self.r, eta0 }
    }

    pub(crate) fn set_params(&mut self, j: usize, params: EmissionParams) {
        self.regimes[j].params = params;
    }

    pub(crate) fn set_transition(&mut self, q: Array2<f64>) {
        self.transition = q;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        doc.try_into()
    }

    fn check_data(&self, data: &SeriesData) -> Result<()> {
        if data.r() != self.r {
            return Err(Error::Dimension(format!(
                "model expects {} covariates, data has {}",
                self.r,
                data.r()
            )));
        }
        if data.len() <= self.p {
            return Err(Error::Dimension(format!(
                "series of length {} is too short for AR order {}",
                data.len(),
                self.p
            )));
        }
        Ok(())
    }
}

/// Serialized form of [`HmmModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    ell: usize,
    p: usize,
    r: usize,
    families: Vec<EmissionFamily>,
    params: Vec<EmissionParams>,
    #[serde(rename = "Q")]
    q: Vec<f64>,
    eta0: Vec<f64>,
}

impl From<&HmmModel> for ModelDoc {
    fn from(m: &HmmModel) -> Self {
        Self {
            ell: m.ell(),
            p: m.p,
            r: m.r,
            families: m.regimes.iter().map(|r| r.family).collect(),
            params: m.regimes.iter().map(|r| r.params.clone()).collect(),
            q: m.transition.iter().copied().collect(),
            eta0: m.eta0.clone(),
        }
    }
}

impl TryFrom<ModelDoc> for HmmModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        if doc.families.len() != doc.ell || doc.params.len() != doc.ell {
            return Err(Error::Dimension("families/params length differs from ell".into()));
        }
        let q = Array2::from_shape_vec((doc.ell, doc.ell), doc.q)
            .map_err(|e| Error::Dimension(format!("Q: {e}")))?;
        let regimes = doc.families.into_iter().zip(doc.params).map(|(f, p)| Regime::new(f, p)).collect();
        HmmModel::new(regimes, q, doc.p, doc.r)?.with_eta0(doc.eta0)
    }
}

/// Emission densities `g_j(y_t, x_t)` for the effective steps (rows) and
/// regimes (columns).
pub fn emission_densities(model: &HmmModel, data: &SeriesData) -> Result<Array2<f64>> {
    model.check_data(data)?;
    let (n, p, ell) = (data.len(), model.p(), model.ell());
    let mut out = Array2::zeros((n - p, ell));
    let mut lags = Vec::with_capacity(p);
    for t in p..n {
        data.lags_into(t, p, &mut lags);
        let x = Predictor::new(&lags, data.z_row(t));
        let y = data.y()[t];
        for j in 0..ell {
            out[(t - p, j)] = model.regime_density(j, &x, y);
        }
    }
    Ok(out)
}

/// Output of the forward recursion.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Filtered probabilities, one row per effective step.
    pub eta: Array2<f64>,
    /// One-step predictive regime weights `W_{t-1} = eta_{t-1} Q`.
    pub weights: Array2<f64>,
    pub loglik: f64,
}

/// `W = eta_prev Q`.
pub fn predictive_weights(model: &HmmModel, eta_prev: &[f64]) -> Vec<f64> {
    let q = model.transition();
    let ell = model.ell();
    (0..ell).map(|j| (0..ell).map(|k| eta_prev[k] * q[(k, j)]).sum()).collect()
}

fn forward_from(model: &HmmModel, dens: &Array2<f64>) -> Result<ForwardPass> {
    let (m, ell) = dens.dim();
    let q = model.transition();
    let mut eta = Array2::zeros((m, ell));
    let mut weights = Array2::zeros((m, ell));
    let mut prev = Array1::from(model.eta0().to_vec());
    let mut loglik = 0.0;
    for s in 0..m {
        let w = prev.dot(&q);
        let mut c = 0.0;
        for j in 0..ell {
            let v = w[j] * dens[(s, j)];
            eta[(s, j)] = v;
            c += v;
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::LikelihoodUnderflow { t: s + model.p() });
        }
        eta.row_mut(s).mapv_inplace(|v| v / c);
        weights.row_mut(s).assign(&w);
        loglik += c.ln();
        prev = eta.row(s).to_owned();
    }
    Ok(ForwardPass { eta, weights, loglik })
}

/// Normalized backward weights for the effective steps plus the weights of
/// the initial state.
fn backward_from(model: &HmmModel, dens: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let (m, ell) = dens.dim();
    let q = model.transition();
    let mut bar = Array2::zeros((m, ell));
    bar.row_mut(m - 1).fill(1.0 / ell as f64);
    let step = |next: ArrayView1<'_, f64>, s_next: usize| -> Result<Array1<f64>> {
        let gb: Array1<f64> = (0..ell).map(|k| dens[(s_next, k)] * next[k]).collect();
        let mut b = q.dot(&gb);
        let c = b.sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::LikelihoodUnderflow { t: s_next + model.p() });
        }
        b.mapv_inplace(|v| v / c);
        Ok(b)
    };
    for s in (0..m - 1).rev() {
        let b = step(bar.row(s + 1), s + 1)?;
        bar.row_mut(s).assign(&b);
    }
    let init = step(bar.row(0), 0)?;
    Ok((bar, init.to_vec()))
}

/// Filtered probabilities and the observed-data log-likelihood.
pub fn forward_filter(model: &HmmModel, data: &SeriesData) -> Result<ForwardPass> {
    let dens = emission_densities(model, data)?;
    forward_from(model, &dens)
}

/// Observed-data log-likelihood of `y_{p+1..n}` given the presample.
pub fn log_likelihood(model: &HmmModel, data: &SeriesData) -> Result<f64> {
    Ok(forward_filter(model, data)?.loglik)
}

/// Normalized backward weights, one row per effective step.
pub fn backward_weights(model: &HmmModel, data: &SeriesData) -> Result<Array2<f64>> {
    let dens = emission_densities(model, data)?;
    Ok(backward_from(model, &dens)?.0)
}

/// Filter, backward weights, marginal and pair posteriors.
#[derive(Debug, Clone)]
pub struct FilterSmoother {
    /// Data index of the first effective step (equals `p`).
    pub start: usize,
    pub eta: Array2<f64>,
    pub weights: Array2<f64>,
    pub eta_bar_star: Array2<f64>,
    /// `lambda[(s, j)] = P(tau_{start+s} = j | data)`.
    pub lambda: Array2<f64>,
    /// `pair[(s, i, j)] = P(tau_{start+s-1} = i, tau_{start+s} = j | data)`.
    pub pair: Array3<f64>,
    /// Posterior of the initial hidden state (data index `start - 1`).
    pub lambda_init: Vec<f64>,
    pub loglik: f64,
}

impl FilterSmoother {
    /// Marginal posterior of the state one step before effective step `s`.
    pub fn lambda_prev(&self, s: usize) -> ArrayView1<'_, f64> {
        if s == 0 {
            ArrayView1::from(&self.lambda_init[..])
        } else {
            self.lambda.row(s - 1)
        }
    }
}

pub(crate) fn smooth_from(model: &HmmModel, dens: &Array2<f64>) -> Result<FilterSmoother> {
    let fwd = forward_from(model, dens)?;
    let (bar, init_bar) = backward_from(model, dens)?;
    let (m, ell) = dens.dim();
    let q = model.transition();

    let mut lambda = Array2::zeros((m, ell));
    for s in 0..m {
        let mut row: Array1<f64> = &fwd.eta.row(s) * &bar.row(s);
        let c = row.sum();
        row.mapv_inplace(|v| v / c);
        lambda.row_mut(s).assign(&row);
    }
    let mut lambda_init: Vec<f64> = model.eta0().iter().zip(&init_bar).map(|(a, b)| a * b).collect();
    let c: f64 = lambda_init.iter().sum();
    lambda_init.iter_mut().for_each(|v| *v /= c);

    let mut pair = Array3::zeros((m, ell, ell));
    for s in 0..m {
        let prev = if s == 0 { ArrayView1::from(model.eta0()) } else { fwd.eta.row(s - 1) };
        let mut total = 0.0;
        for i in 0..ell {
            for j in 0..ell {
                let v = prev[i] * q[(i, j)] * dens[(s, j)] * bar[(s, j)];
                pair[(s, i, j)] = v;
                total += v;
            }
        }
        pair.index_axis_mut(ndarray::Axis(0), s).mapv_inplace(|v| v / total);
    }

    Ok(FilterSmoother {
        start: model.p(),
        eta: fwd.eta,
        weights: fwd.weights,
        eta_bar_star: bar,
        lambda,
        pair,
        lambda_init,
        loglik: fwd.loglik,
    })
}

pub fn smooth(model: &HmmModel, data: &SeriesData) -> Result<FilterSmoother> {
    let dens = emission_densities(model, data)?;
    smooth_from(model, &dens)
}

/// Mixture cdf `F_t(y) = sum_j W(j) G_j(y, x)`.
pub fn conditional_cdf(model: &HmmModel, w: &[f64], x: &Predictor<'_>, y: f64) -> f64 {
    model
        .regimes()
        .iter()
        .zip(w)
        .map(|(reg, &wj)| wj * dists::cdf(reg.family, &reg.params, x, y))
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Left limit `F_t(y-) = P(Y_t < y | past)`.
pub fn conditional_cdf_left(model: &HmmModel, w: &[f64], x: &Predictor<'_>, y: f64) -> f64 {
    model
        .regimes()
        .iter()
        .zip(w)
        .map(|(reg, &wj)| wj * dists::cdf_left(reg.family, &reg.params, x, y))
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

pub fn conditional_density(model: &HmmModel, w: &[f64], x: &Predictor<'_>, y: f64) -> f64 {
    (0..model.ell()).map(|j| w[j] * model.regime_density(j, x, y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::Link;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn gauss(intercept: f64, sigma: f64) -> Regime {
        Regime::new(EmissionFamily::GaussianAr, EmissionParams::new(vec![], vec![intercept], sigma))
    }

    fn pois(mu: f64) -> Regime {
        Regime::new(
            EmissionFamily::PoissonAr { link: Link::LogLinear },
            EmissionParams::new(vec![], vec![mu.ln()], 0.0),
        )
    }

    #[test]
    fn series_csv_round_trip() {
        let text = "t,y,z1,z2,true_regime\n0,1.5,1,0.25,0\n1,-2,1,3,1\n";
        let s = SeriesData::read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.y(), &[1.5, -2.0]);
        assert_eq!(s.z_row(1), &[1.0, 3.0]);
        let plain = SeriesData::read_csv("y\n3\n4\n".as_bytes()).unwrap();
        assert_eq!(plain.r(), 1);
        assert!(SeriesData::read_csv("x\n1\n".as_bytes()).is_err());
        assert!(SeriesData::read_csv("y,z1\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn single_regime_filter() {
        let model = HmmModel::new(vec![gauss(0.3, 1.1)], array![[1.0]], 0, 1).unwrap();
        let data = SeriesData::intercept_only(vec![0.1, -0.4, 2.0, 1.0]).unwrap();
        let fs = smooth(&model, &data).unwrap();
        let expected: f64 = data.y().iter().map(|&y| dists::normal_pdf(0.3, 1.1, y).ln()).sum();
        assert_relative_eq!(fs.loglik, expected, epsilon = 1e-12);
        assert!(fs.eta.iter().all(|&v| v == 1.0));
        assert!(fs.eta_bar_star.iter().all(|&v| v == 1.0));
        assert!(fs.lambda.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(fs.pair.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn absorbing_chain_stays_put() {
        let model = HmmModel::new(vec![gauss(0.0, 1.0), gauss(3.0, 1.0)], Array2::eye(2), 0, 1)
            .unwrap()
            .with_eta0(vec![1.0, 0.0])
            .unwrap();
        let data = SeriesData::intercept_only(vec![3.0, 2.5, 4.0]).unwrap();
        let fwd = forward_filter(&model, &data).unwrap();
        for row in fwd.eta.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn backward_terminal_is_uniform() {
        let model = HmmModel::new(
            vec![gauss(0.0, 1.0), gauss(3.0, 1.0), gauss(-2.0, 0.5)],
            Array2::from_elem((3, 3), 1.0 / 3.0),
            0,
            1,
        )
        .unwrap();
        let data = SeriesData::intercept_only(vec![0.5, 3.0, -1.0, 0.2]).unwrap();
        let bar = backward_weights(&model, &data).unwrap();
        for v in bar.row(3) {
            assert_relative_eq!(*v, 1.0 / 3.0);
        }
    }

    #[test]
    fn predictive_weights_examples() {
        let q = array![[0.94, 0.06], [0.03, 0.97]];
        let model = HmmModel::new(vec![gauss(0.0, 1.0), gauss(1.0, 1.0)], q, 0, 1).unwrap();
        let w = predictive_weights(&model, &[1.0, 0.0]);
        assert_relative_eq!(w[0], 0.94);
        assert_relative_eq!(w[1], 0.06);

        let id = HmmModel::new(vec![gauss(0.0, 1.0), gauss(1.0, 1.0)], Array2::eye(2), 0, 1).unwrap();
        assert_eq!(predictive_weights(&id, &[0.3, 0.7]), vec![0.3, 0.7]);

        let ds = array![[0.2, 0.5, 0.3], [0.5, 0.1, 0.4], [0.3, 0.4, 0.3]];
        let m3 = HmmModel::new(vec![gauss(0.0, 1.0), gauss(1.0, 1.0), gauss(2.0, 1.0)], ds, 0, 1).unwrap();
        for v in predictive_weights(&m3, &[1.0 / 3.0; 3]) {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn mixture_cdf_examples() {
        let x = Predictor::new(&[], &[1.0]);
        let m1 = HmmModel::new(vec![gauss(0.5, 2.0)], array![[1.0]], 0, 1).unwrap();
        assert_relative_eq!(conditional_cdf(&m1, &[1.0], &x, 1.3), dists::normal_cdf(0.5, 2.0, 1.3));

        let zi = HmmModel::new(vec![Regime::point_mass(), gauss(1.0, 1.0)], Array2::from_elem((2, 2), 0.5), 0, 1)
            .unwrap();
        let w = [0.37, 0.63];
        let jump = conditional_cdf(&zi, &w, &x, 0.0) - conditional_cdf_left(&zi, &w, &x, 0.0);
        assert_relative_eq!(jump, 0.37, epsilon = 1e-15);
        assert_eq!(conditional_density(&zi, &w, &x, 0.0), 0.37);

        let pp = HmmModel::new(vec![pois(1.0), pois(5.0)], Array2::from_elem((2, 2), 0.5), 0, 1).unwrap();
        let f0 = conditional_cdf(&pp, &[0.5, 0.5], &x, 0.0);
        assert_relative_eq!(f0, 0.5 * (-1.0f64).exp() + 0.5 * (-5.0f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(f0, 0.187_309, epsilon = 1e-6);
    }

    #[test]
    fn mixture_cdf_limits_and_monotone() {
        let zi = HmmModel::new(
            vec![gauss(1.0, 1.0), Regime::point_mass()],
            Array2::from_elem((2, 2), 0.5),
            0,
            1,
        );
        assert!(zi.is_err(), "families after the first may not be point masses");
        let m = HmmModel::new(vec![Regime::point_mass(), gauss(1.0, 1.0), gauss(-3.0, 0.2)], Array2::from_elem((3, 3), 1.0 / 3.0), 0, 1)
            .unwrap();
        let x = Predictor::new(&[], &[1.0]);
        let w = [0.2, 0.5, 0.3];
        assert!(conditional_cdf(&m, &w, &x, -1e6) < 1e-300);
        assert_relative_eq!(conditional_cdf(&m, &w, &x, 1e6), 1.0);
        let mut last = 0.0;
        for i in -500..500 {
            let y = i as f64 * 0.02;
            let f = conditional_cdf(&m, &w, &x, y);
            assert!(f >= last);
            last = f;
        }
    }

    #[test]
    fn zero_atom_switches_off_gaussian_density() {
        let x = Predictor::new(&[], &[1.0]);
        let zi = HmmModel::new(vec![Regime::point_mass(), gauss(0.0, 1.0)], Array2::from_elem((2, 2), 0.5), 0, 1)
            .unwrap();
        assert_eq!(zi.regime_density(1, &x, 0.0), 0.0);
        assert!(zi.regime_density(1, &x, 1e-9) > 0.3);
        let plain = HmmModel::new(vec![gauss(0.0, 1.0)], array![[1.0]], 0, 1).unwrap();
        assert!(plain.regime_density(0, &x, 0.0) > 0.3);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let q = array![[0.1 + 0.2, 0.7 - 1e-17], [1.0 / 3.0, 2.0 / 3.0]];
        let q = q.clone() / q.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let model = HmmModel::new(
            vec![
                Regime::new(EmissionFamily::GaussianAr, EmissionParams::new(vec![0.123456789012345678], vec![-0.5, 1e-300], 0.8)),
                Regime::new(EmissionFamily::GaussianAr, EmissionParams::new(vec![std::f64::consts::PI], vec![1.0, 2.0], 0.1)),
            ],
            q,
            1,
            2,
        )
        .unwrap();
        let json = model.to_json().unwrap();
        let back = HmmModel::from_json(&json).unwrap();
        assert_eq!(back, model);
        assert!(json.contains("\"Q\""));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(HmmModel::new(vec![gauss(0.0, 1.0)], array![[0.9]], 0, 1).is_err());
        assert!(HmmModel::new(vec![gauss(0.0, 1.0)], array![[1.0]], 0, 2).is_err());
        assert!(SeriesData::new(vec![1.0, 2.0], array![[1.0], [2.0]]).is_err());
        assert!(SeriesData::new(vec![1.0, f64::NAN], array![[1.0], [1.0]]).is_err());
        let ar3 = Regime::new(EmissionFamily::GaussianAr, EmissionParams::new(vec![0.0; 3], vec![0.0], 1.0));
        let model = HmmModel::new(vec![ar3], array![[1.0]], 3, 1).unwrap();
        let short = SeriesData::intercept_only(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(forward_filter(&model, &short), Err(Error::Dimension(_))));
    }

    #[test]
    fn underflow_is_reported_with_index() {
        let model = HmmModel::new(vec![pois(2.0)], array![[1.0]], 0, 1).unwrap();
        let data = SeriesData::intercept_only(vec![1.0, 2.0, 0.5]).unwrap();
        assert!(matches!(forward_filter(&model, &data), Err(Error::LikelihoodUnderflow { t: 2 })));
    }
}

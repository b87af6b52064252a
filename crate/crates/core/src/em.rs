//! Maximum-likelihood estimation by EM.
//!
//! Each iteration runs the smoother of [`crate::markov`] and then maximizes
//! the expected complete-data log-likelihood separately for every regime's
//! emission parameters and for the transition matrix.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dists::{EmissionFamily, EmissionParams, Link};
use crate::error::{Error, Result};
use crate::markov::{self, FilterSmoother, HmmModel, Regime, SeriesData};
use crate::rng::{self, Stream};

/// Residual degrees of freedom a fitted Gaussian regime must retain.
pub const MIN_RESIDUAL_DF: f64 = 2.0;
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const RIDGE: f64 = 1e-8;
pub const DEGENERATE_WEIGHT: f64 = 1e-8;
pub const LOG_INTERCEPT_FLOOR: f64 = -30.0;
pub const MAX_INNER_ITERS: usize = 200;
const SCORE_TOL: f64 = 1e-8;
const LINEAR_SUM_MARGIN: f64 = 1e-6;
const LINEAR_INTERCEPT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family", content = "link")]
pub enum BaseFamily {
    Gaussian,
    Poisson(Link),
}

/// The family of models being fitted: the non-zero regimes' law and whether
/// the first regime is a point mass at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FamilySpec {
    pub base: BaseFamily,
    #[serde(default)]
    pub zero_inflated: bool,
}

impl FamilySpec {
    pub fn gaussian() -> Self {
        Self { base: BaseFamily::Gaussian, zero_inflated: false }
    }

    pub fn poisson(link: Link) -> Self {
        Self { base: BaseFamily::Poisson(link), zero_inflated: false }
    }

    pub fn zero_inflated(mut self) -> Self {
        self.zero_inflated = true;
        self
    }

    pub fn emission_family(&self) -> EmissionFamily {
        match self.base {
            BaseFamily::Gaussian => EmissionFamily::GaussianAr,
            BaseFamily::Poisson(link) => EmissionFamily::PoissonAr { link },
        }
    }

    /// A zero-inflated family with a single regime is the plain family.
    pub fn has_zero_regime(&self, ell: usize) -> bool {
        self.zero_inflated && ell >= 2
    }

    pub fn families(&self, ell: usize) -> Vec<EmissionFamily> {
        let base = self.emission_family();
        (0..ell)
            .map(|j| if j == 0 && self.has_zero_regime(ell) { EmissionFamily::PointMassAtZero } else { base })
            .collect()
    }

    pub fn n_params(&self, ell: usize, p: usize, r: usize) -> usize {
        let emission: usize = self.families(ell).iter().map(|f| f.param_count(p, r)).sum();
        emission + ell * (ell - 1)
    }

    /// Smallest `ell` the regime-selection procedures start from.
    pub fn min_ell(&self) -> usize {
        if self.zero_inflated {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    pub loglik_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub label_ordering: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 500, loglik_tol: 1e-8, restarts: 10, seed: 0, label_ordering: true }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.loglik_tol > 0.0) || self.restarts == 0 {
            return Err(Error::InvalidSpec("EM needs max_iters >= 1, loglik_tol > 0, restarts >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: HmmModel,
    pub loglik: f64,
    pub iters: usize,
    pub converged: bool,
    pub n_params: usize,
    /// Observed-data log-likelihood at every E-step of the winning run.
    pub loglik_trace: Vec<f64>,
    pub failed_restarts: usize,
}

/// Regressor rows of the effective steps.
#[derive(Debug, Clone)]
pub struct Design {
    p: usize,
    d: usize,
    /// `(y_{t-1..t-p}, z_t)` rows.
    raw: Vec<f64>,
    /// `(log(1 + y_{t-1..t-p}), z_t)` rows.
    logged: Vec<f64>,
    y: Vec<f64>,
}

impl Design {
    pub fn new(data: &SeriesData, p: usize) -> Self {
        let (n, r) = (data.len(), data.r());
        let d = p + r;
        let m = n.saturating_sub(p);
        let mut raw = Vec::with_capacity(m * d);
        let mut logged = Vec::with_capacity(m * d);
        for t in p..n {
            for k in 1..=p {
                raw.push(data.y()[t - k]);
                logged.push((1.0 + data.y()[t - k]).ln());
            }
            raw.extend_from_slice(data.z_row(t));
            logged.extend_from_slice(data.z_row(t));
        }
        Self { p, d, raw, logged, y: data.y()[p.min(n)..].to_vec() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    fn rows(&self, logged: bool) -> impl Iterator<Item = &[f64]> {
        let src = if logged { &self.logged } else { &self.raw };
        src.chunks_exact(self.d)
    }

    fn split(&self, beta: &[f64], sigma: f64) -> EmissionParams {
        EmissionParams::new(beta[..self.p].to_vec(), beta[self.p..].to_vec(), sigma)
    }
}

fn total_weight(weights: &[f64], regime: usize) -> Result<f64> {
    let w: f64 = weights.iter().sum();
    if !(w >= DEGENERATE_WEIGHT) {
        return Err(Error::DegenerateRegime { regime, weight: w });
    }
    Ok(w)
}

fn solve_spd(mut a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    for i in 0..a.nrows() {
        a[(i, i)] += RIDGE;
    }
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    a.lu().solve(b)
}

fn gaussian_wls(design: &Design, weights: &[f64], regime: usize) -> Result<EmissionParams> {
    let wsum = total_weight(weights, regime)?;
    let d = design.d;
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    for ((row, &y), &w) in design.rows(false).zip(&design.y).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for a in 0..d {
            let wa = w * row[a];
            xty[a] += wa * y;
            for b in 0..=a {
                xtx[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let beta = solve_spd(xtx, &xty).ok_or_else(|| Error::MStepFailure {
        regime,
        reason: "singular weighted design".into(),
    })?;
    let rss: f64 = design
        .rows(false)
        .zip(&design.y)
        .zip(weights)
        .map(|((row, &y), &w)| {
            let mu: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            w * (y - mu) * (y - mu)
        })
        .sum();
    let sigma = (rss / wsum).sqrt().max(SIGMA_FLOOR);
    Ok(design.split(beta.as_slice(), sigma))
}

/// Weighted Gaussian ARX maximum-likelihood step: weighted least squares for
/// the mean coefficients, weighted residual variance for the scale.
pub fn m_step_gaussian(data: &SeriesData, p: usize, weights: &[f64]) -> Result<EmissionParams> {
    let design = Design::new(data, p);
    check_weights(&design, weights)?;
    gaussian_wls(&design, weights, 0)
}

fn check_weights(design: &Design, weights: &[f64]) -> Result<()> {
    if weights.len() != design.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} effective observations",
            weights.len(),
            design.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidParams("weights must be nonnegative".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn loglinear_objective(design: &Design, weights: &[f64], beta: &[f64]) -> f64 {
    design
        .rows(true)
        .zip(&design.y)
        .zip(weights)
        .map(|((row, &y), &w)| {
            let eta = dot(row, beta);
            w * (y * eta - eta.exp())
        })
        .sum()
}

/// Newton iterations on the concave weighted Poisson log-likelihood with the
/// log link.
fn poisson_loglinear(design: &Design, weights: &[f64], start: &[f64], regime: usize) -> Result<EmissionParams> {
    total_weight(weights, regime)?;
    let d = design.d;
    let wy: f64 = design.y.iter().zip(weights).map(|(y, w)| y * w).sum();
    if wy <= 0.0 {
        log::warn!("regime {regime}: weighted counts are all zero, clamping the log intercept at {LOG_INTERCEPT_FLOOR}");
        let mut beta = vec![0.0; d];
        beta[design.p] = LOG_INTERCEPT_FLOOR;
        return Ok(design.split(&beta, 0.0));
    }
    let mut beta = start.to_vec();
    let mut obj = loglinear_objective(design, weights, &beta);
    if !obj.is_finite() {
        beta.iter_mut().for_each(|b| *b = 0.0);
        let wsum: f64 = weights.iter().sum();
        beta[design.p] = (wy / wsum).ln();
        obj = loglinear_objective(design, weights, &beta);
    }
    for _ in 0..MAX_INNER_ITERS {
        let mut grad = DVector::<f64>::zeros(d);
        let mut info = DMatrix::<f64>::zeros(d, d);
        for ((row, &y), &w) in design.rows(true).zip(&design.y).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let mu = dot(row, &beta).exp();
            for a in 0..d {
                grad[a] += w * (y - mu) * row[a];
                for b in 0..=a {
                    info[(a, b)] += w * mu * row[a] * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        if grad.amax() < SCORE_TOL {
            return Ok(design.split(&beta, 0.0));
        }
        let step = solve_spd(info, &grad).ok_or_else(|| Error::MStepFailure {
            regime,
            reason: "singular Fisher information".into(),
        })?;
        let decrement = grad.dot(&step);
        if near_stationary(decrement, obj, step.as_slice(), &beta) {
            return Ok(design.split(&beta, 0.0));
        }
        let step: Vec<f64> = step.iter().copied().collect();
        let accepted = line_search(&mut beta, &mut obj, &step, 1.0, decrement, |c| {
            loglinear_objective(design, weights, c)
        });
        if beta[design.p] < LOG_INTERCEPT_FLOOR {
            log::warn!("regime {regime}: log intercept diverging, clamped at {LOG_INTERCEPT_FLOOR}");
            beta[design.p] = LOG_INTERCEPT_FLOOR;
            return Ok(design.split(&beta, 0.0));
        }
        if accepted.is_none() {
            return Ok(design.split(&beta, 0.0));
        }
    }
    Err(Error::MStepFailure { regime, reason: format!("Newton did not converge in {MAX_INNER_ITERS} iterations") })
}

/// Newton decrement or step too small to move the iterate in floating point.
fn near_stationary(decrement: f64, obj: f64, step: &[f64], beta: &[f64]) -> bool {
    let scale = 1.0 + beta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let size = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    decrement <= 1e-24 * (1.0 + obj.abs()) || size <= 1e-14 * scale
}

/// Backtracking Armijo search along `step` starting at `t_max`. Close to the
/// optimum the predicted gain is below the objective's rounding error, so the
/// full step is taken as long as the objective stays finite. Returns the
/// accepted step length.
fn line_search(
    beta: &mut Vec<f64>,
    obj: &mut f64,
    step: &[f64],
    t_max: f64,
    decrement: f64,
    objective: impl Fn(&[f64]) -> f64,
) -> Option<f64> {
    let local = decrement <= 1e-9 * (1.0 + obj.abs());
    let mut t = t_max;
    while t > 1e-14 {
        let cand: Vec<f64> = beta.iter().zip(step).map(|(b, s)| b + t * s).collect();
        let c_obj = objective(&cand);
        if c_obj.is_finite() && (local || c_obj >= *obj + 1e-4 * t * decrement) {
            *beta = cand;
            *obj = c_obj;
            return Some(t);
        }
        t *= 0.5;
    }
    None
}

/// Linear constraints `a . beta <= b` of the linear-link Poisson regime.
struct LinearConstraints {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl LinearConstraints {
    fn new(p: usize, d: usize) -> Self {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let unit = |i: usize, s: f64| {
            let mut v = vec![0.0; d];
            v[i] = s;
            v
        };
        for k in 0..p {
            a.push(unit(k, -1.0));
            b.push(0.0);
        }
        if p > 0 {
            let mut v = vec![0.0; d];
            v[..p].iter_mut().for_each(|x| *x = 1.0);
            a.push(v);
            b.push(1.0 - LINEAR_SUM_MARGIN);
        }
        a.push(unit(p, -1.0));
        b.push(-LINEAR_INTERCEPT_FLOOR);
        for k in p + 1..d {
            a.push(unit(k, -1.0));
            b.push(0.0);
        }
        Self { a, b }
    }

    fn slack(&self, i: usize, beta: &[f64]) -> f64 {
        self.b[i] - dot(&self.a[i], beta)
    }

    /// Moves `beta` onto the feasible set by clipping coordinates.
    fn repair(&self, p: usize, beta: &mut [f64]) {
        for v in beta[..p].iter_mut() {
            *v = v.max(0.0);
        }
        let s: f64 = beta[..p].iter().sum();
        if s > 1.0 - LINEAR_SUM_MARGIN {
            let f = (1.0 - LINEAR_SUM_MARGIN) / s;
            beta[..p].iter_mut().for_each(|v| *v *= f);
        }
        beta[p] = beta[p].max(LINEAR_INTERCEPT_FLOOR);
        for v in beta[p + 1..].iter_mut() {
            *v = v.max(0.0);
        }
    }
}

fn linear_objective(design: &Design, weights: &[f64], beta: &[f64]) -> f64 {
    let mut obj = 0.0;
    for ((row, &y), &w) in design.rows(false).zip(&design.y).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let mu = dot(row, beta);
        if mu <= 0.0 {
            return f64::NEG_INFINITY;
        }
        obj += w * (if y > 0.0 { y * mu.ln() } else { 0.0 } - mu);
    }
    obj
}

/// Active-set projected Newton for the linear-link Poisson regime.
fn poisson_linear(design: &Design, weights: &[f64], start: &[f64], regime: usize) -> Result<EmissionParams> {
    total_weight(weights, regime)?;
    let (p, d) = (design.p, design.d);
    if design.raw.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParams("linear Poisson link needs nonnegative regressors".into()));
    }
    let cons = LinearConstraints::new(p, d);
    let mut beta = start.to_vec();
    cons.repair(p, &mut beta);
    let mut obj = linear_objective(design, weights, &beta);
    let mut active: Vec<usize> = (0..cons.a.len()).filter(|&i| cons.slack(i, &beta) <= 1e-12).collect();

    for _ in 0..MAX_INNER_ITERS {
        let mut grad = DVector::<f64>::zeros(d);
        let mut curv = DMatrix::<f64>::zeros(d, d);
        for ((row, &y), &w) in design.rows(false).zip(&design.y).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let mu = dot(row, &beta);
            for a in 0..d {
                grad[a] += w * (y / mu - 1.0) * row[a];
                for b in 0..=a {
                    curv[(a, b)] += w * y / (mu * mu) * row[a] * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                curv[(b, a)] = curv[(a, b)];
            }
        }
        let shift = 1e-10 * (curv.trace() + 1.0);
        for a in 0..d {
            curv[(a, a)] += shift;
        }

        // equality-constrained Newton step on the current working set
        let k = active.len();
        let mut kkt = DMatrix::<f64>::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(&curv);
        for (r, &ci) in active.iter().enumerate() {
            for c in 0..d {
                kkt[(d + r, c)] = cons.a[ci][c];
                kkt[(c, d + r)] = cons.a[ci][c];
            }
        }
        let mut rhs = DVector::<f64>::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&grad);
        let sol = kkt.lu().solve(&rhs).ok_or_else(|| Error::MStepFailure {
            regime,
            reason: "singular KKT system".into(),
        })?;
        let step: Vec<f64> = sol.rows(0, d).iter().copied().collect();
        let mult: Vec<f64> = sol.rows(d, k).iter().copied().collect();
        let decrement = dot(grad.as_slice(), &step);

        if near_stationary(decrement, obj, &step, &beta) {
            // stationary on the working set; check multipliers
            let (worst, worst_mult) = mult
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            if worst != usize::MAX && worst_mult < -SCORE_TOL {
                active.remove(worst);
                continue;
            }
            return Ok(design.split(&beta, 0.0));
        }

        // ratio test against inactive constraints
        let mut t_max = 1.0;
        let mut blocking = None;
        for i in 0..cons.a.len() {
            if active.contains(&i) {
                continue;
            }
            let ad = dot(&cons.a[i], &step);
            if ad > 1e-15 {
                let t = cons.slack(i, &beta).max(0.0) / ad;
                if t < t_max {
                    t_max = t;
                    blocking = Some(i);
                }
            }
        }
        let Some(t) = line_search(&mut beta, &mut obj, &step, t_max, decrement, |c| {
            let mut c = c.to_vec();
            cons.repair(p, &mut c);
            linear_objective(design, weights, &c)
        }) else {
            return Ok(design.split(&beta, 0.0));
        };
        cons.repair(p, &mut beta);
        if t == t_max {
            if let Some(i) = blocking {
                active.push(i);
            }
        }
    }
    Err(Error::MStepFailure { regime, reason: format!("projected Newton did not converge in {MAX_INNER_ITERS} iterations") })
}

fn poisson_start(design: &Design, weights: &[f64], link: Link) -> Vec<f64> {
    let wsum: f64 = weights.iter().sum();
    let wy: f64 = design.y.iter().zip(weights).map(|(y, w)| y * w).sum();
    let mean = if wsum > 0.0 { wy / wsum } else { 1.0 };
    let mut beta = vec![0.0; design.d];
    beta[design.p] = match link {
        Link::LogLinear => mean.max(1e-8).ln(),
        Link::Linear => mean.max(LINEAR_INTERCEPT_FLOOR),
    };
    beta
}

fn poisson_step(
    design: &Design,
    weights: &[f64],
    link: Link,
    start: Option<&EmissionParams>,
    regime: usize,
) -> Result<EmissionParams> {
    let beta: Vec<f64> = match start {
        Some(s) => s.phi.iter().chain(&s.alpha).copied().collect(),
        None => poisson_start(design, weights, link),
    };
    match link {
        Link::LogLinear => poisson_loglinear(design, weights, &beta, regime),
        Link::Linear => poisson_linear(design, weights, &beta, regime),
    }
}

/// Weighted Poisson ARX maximum-likelihood step.
pub fn m_step_poisson(data: &SeriesData, p: usize, weights: &[f64], link: Link) -> Result<EmissionParams> {
    let design = Design::new(data, p);
    check_weights(&design, weights)?;
    poisson_step(&design, weights, link, None, 0)
}

/// Closed-form transition update from pair posteriors; rows without mass
/// keep their previous values.
pub fn m_step_transition(pair: &Array3<f64>, previous: &Array2<f64>) -> Array2<f64> {
    let counts = pair.sum_axis(Axis(0));
    let mut q = previous.clone();
    for (j, row) in counts.rows().into_iter().enumerate() {
        let total = row.sum();
        if total > 0.0 && total.is_finite() {
            q.row_mut(j).assign(&row.mapv(|v| v / total));
        } else {
            log::warn!("transition row {j} has no posterior mass; keeping previous values");
        }
    }
    q
}

/// E-step: marginal and pair posteriors under the current parameters.
pub fn e_step(model: &HmmModel, data: &SeriesData) -> Result<FilterSmoother> {
    markov::smooth(model, data)
}

/// Expected complete-data log-likelihood of `candidate` under the posteriors
/// in `fs` (the initial-state term is omitted).
pub fn expected_complete_loglik(candidate: &HmmModel, fs: &FilterSmoother, data: &SeriesData) -> Result<f64> {
    let dens = markov::emission_densities(candidate, data)?;
    let q = candidate.transition();
    let mut total = 0.0;
    for ((s, i, j), &v) in fs.pair.indexed_iter() {
        if v > 0.0 {
            total += v * q[(i, j)].ln();
        }
        if i == 0 {
            let lam = fs.lambda[(s, j)];
            if lam > 0.0 {
                total += lam * dens[(s, j)].ln();
            }
        }
    }
    Ok(total)
}

/// One M-step: new emission parameters for every free regime and a new
/// transition matrix.
fn m_step(model: &HmmModel, fs: &FilterSmoother, design: &Design) -> Result<HmmModel> {
    let mut next = model.clone();
    for j in 0..model.ell() {
        let reg = model.regime(j);
        let weights: Vec<f64> = fs.lambda.column(j).to_vec();
        let params = match reg.family {
            EmissionFamily::PointMassAtZero => continue,
            EmissionFamily::GaussianAr => gaussian_wls(design, &weights, j)?,
            EmissionFamily::PoissonAr { link } => poisson_step(design, &weights, link, Some(&reg.params), j)?,
        };
        next.set_params(j, params);
    }
    let q = m_step_transition(&fs.pair, &model.transition().to_owned());
    next.set_transition(q);
    Ok(next)
}

fn band_moments(sorted: &[f64]) -> (f64, f64) {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Quantile-band initial model. With `rng`, band boundaries and the
/// transition diagonal are randomized.
pub fn initial_model(
    spec: &FamilySpec,
    data: &SeriesData,
    ell: usize,
    p: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<HmmModel> {
    let r = data.r();
    let families = spec.families(ell);
    let zero = spec.has_zero_regime(ell);
    let free = if zero { ell - 1 } else { ell };
    let eff = &data.y()[p..];
    let mut pool: Vec<f64> = if zero { eff.iter().copied().filter(|&v| v != 0.0).collect() } else { eff.to_vec() };
    if pool.len() < 2 * free {
        pool = eff.to_vec();
    }
    if pool.len() < free.max(1) {
        return Err(Error::InvalidSpec("too few observations to initialize".into()));
    }
    pool.sort_by(|a, b| a.total_cmp(b));
    let (_, overall_sd) = band_moments(&pool);

    let mut cuts: Vec<usize> = (0..=free).map(|b| b * pool.len() / free).collect();
    let mut diag = 0.9;
    if let Some(rng) = rng {
        let min_band = (pool.len() / (4 * free)).max(1);
        let mut inner: Vec<usize> = (1..free)
            .map(|_| rng.random_range(min_band..=pool.len() - min_band))
            .collect();
        inner.sort_unstable();
        cuts = std::iter::once(0).chain(inner).chain(std::iter::once(pool.len())).collect();
        for b in 1..cuts.len() {
            if cuts[b] <= cuts[b - 1] {
                cuts[b] = (cuts[b - 1] + 1).min(pool.len());
            }
        }
        diag = rng.random_range(0.6..0.95);
    }

    let mut regimes = Vec::with_capacity(ell);
    let mut band = 0;
    for family in families {
        if family == EmissionFamily::PointMassAtZero {
            regimes.push(Regime::point_mass());
            continue;
        }
        let lo = cuts[band];
        let hi = cuts[band + 1].max(lo + 1).min(pool.len());
        let slice = &pool[lo.min(hi - 1)..hi];
        band += 1;
        let (mean, sd) = band_moments(slice);
        let params = match family {
            EmissionFamily::GaussianAr => {
                let sigma = if sd > 1e-3 * overall_sd && sd > SIGMA_FLOOR { sd } else { overall_sd.max(1e-3) };
                EmissionParams::intercept_only(p, r, mean, sigma)
            }
            EmissionFamily::PoissonAr { link: Link::LogLinear } => {
                EmissionParams::intercept_only(p, r, mean.max(0.05).ln(), 0.0)
            }
            EmissionFamily::PoissonAr { link: Link::Linear } => EmissionParams::intercept_only(p, r, mean.max(0.05), 0.0),
            EmissionFamily::PointMassAtZero => unreachable!(),
        };
        regimes.push(Regime::new(family, params));
    }
    let q = if ell == 1 {
        Array2::ones((1, 1))
    } else {
        let off = (1.0 - diag) / (ell - 1) as f64;
        Array2::from_shape_fn((ell, ell), |(a, b)| if a == b { diag } else { off })
    };
    HmmModel::new(regimes, q, p, r)
}

/// Canonical labelling: non-zero regimes sorted by ascending intercept.
pub fn canonical_order(model: &HmmModel) -> HmmModel {
    let ell = model.ell();
    let first = usize::from(model.regime(0).family == EmissionFamily::PointMassAtZero);
    let mut perm: Vec<usize> = (0..ell).collect();
    perm[first..].sort_by(|&a, &b| {
        model.regime(a).params.intercept().total_cmp(&model.regime(b).params.intercept())
    });
    model.permuted(&perm)
}

/// Rejects mixture limits where a Gaussian regime sits on too few observations to
/// leave two residual degrees of freedom; there the likelihood grows without
/// bound as the scale shrinks.
fn check_spurious(model: &HmmModel, fs: &FilterSmoother) -> Result<()> {
    if model.ell() == 1 {
        return Ok(());
    }
    let dim = (model.p() + model.r()) as f64;
    for (j, reg) in model.regimes().iter().enumerate() {
        if reg.family != EmissionFamily::GaussianAr {
            continue;
        }
        let weight = fs.lambda.column(j).sum();
        if weight < dim + MIN_RESIDUAL_DF || reg.params.sigma <= 10.0 * SIGMA_FLOOR {
            return Err(Error::DegenerateRegime { regime: j, weight });
        }
    }
    Ok(())
}

/// Runs EM from `init` until the log-likelihood change drops below the
/// tolerance or the iteration budget is spent.
pub fn em_run(data: &SeriesData, init: HmmModel, config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    let design = Design::new(data, init.p());
    let mut model = init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut fs;
    loop {
        let dens = markov::emission_densities(&model, data)?;
        fs = markov::smooth_from(&model, &dens)?;
        let ll = fs.loglik;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() < config.loglik_tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if trace.len() > config.max_iters {
            break;
        }
        model = m_step(&model, &fs, &design)?;
    }
    check_spurious(&model, &fs)?;
    let model = if config.label_ordering { canonical_order(&model) } else { model };
    Ok(FitResult {
        n_params: model.n_params(),
        loglik: fs.loglik,
        iters: trace.len() - 1,
        converged,
        loglik_trace: trace,
        model,
        failed_restarts: 0,
    })
}

/// Best-of-restarts EM fit of an `ell`-regime model with AR order `p`.
pub fn em_fit(spec: &FamilySpec, data: &SeriesData, ell: usize, p: usize, config: &EmConfig) -> Result<FitResult> {
    em_fit_with(spec, data, ell, p, config, None)
}

/// As [`em_fit`], with an optional warm start used as the first run.
pub fn em_fit_with(
    spec: &FamilySpec,
    data: &SeriesData,
    ell: usize,
    p: usize,
    config: &EmConfig,
    warm: Option<&HmmModel>,
) -> Result<FitResult> {
    config.validate()?;
    if ell == 0 {
        return Err(Error::InvalidSpec("ell >= 1".into()));
    }
    let r = data.r();
    let dim = spec.emission_family().param_count(p, r);
    if data.len() <= p + ell * dim {
        return Err(Error::InvalidSpec(format!(
            "n = {} is too small for ell = {ell}, p = {p} ({dim} parameters per regime)",
            data.len()
        )));
    }
    let runs = if ell == 1 { 1 } else { config.restarts };
    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    for run in 0..runs {
        let init = match (run, warm) {
            (0, Some(w)) => Ok(w.clone()),
            (0, None) => initial_model(spec, data, ell, p, None),
            (1, Some(_)) => initial_model(spec, data, ell, p, None),
            _ => {
                let mut rng = rng::stream(config.seed, Stream::Restart, run as u64);
                initial_model(spec, data, ell, p, Some(&mut rng))
            }
        };
        match init.and_then(|m| em_run(data, m, config)) {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                log::debug!("EM run {run} failed: {e}");
                failures.push(e.to_string());
            }
        }
    }
    match best {
        Some(mut fit) => {
            fit.failed_restarts = failures.len();
            Ok(fit)
        }
        None => Err(Error::FitFailure(failures.join("; "))),
    }
}

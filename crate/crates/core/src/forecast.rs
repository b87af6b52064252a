//! Spatial count forecasting: neighbour covariates, weekly seasonal
//! differencing, a GoF-gated scan over `(ell, p)` and median predictions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dists::Predictor;
use crate::em::{self, FamilySpec, FitResult};
use crate::error::{Error, Result};
use crate::gof::{self, GofConfig};
use crate::markov::{self, HmmModel, SeriesData};

pub const SEASON: usize = 7;
const MEDIAN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub population: f64,
}

/// Aligned incidence series (cases per 1000 inhabitants) with a symmetric
/// 0/1 adjacency matrix.
#[derive(Debug, Clone)]
pub struct PanelData {
    units: Vec<Unit>,
    dates: Vec<NaiveDate>,
    /// `incidence[(t, j)]`
    incidence: Array2<f64>,
    adjacency: Array2<f64>,
}

#[derive(Debug, Deserialize)]
struct CaseRow {
    date: String,
    unit_id: String,
    cases: f64,
    population: f64,
}

#[derive(Debug, Deserialize)]
struct EdgeRow {
    unit_id_a: String,
    unit_id_b: String,
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Data(format!("bad date {s:?}: {e}")))
}

impl PanelData {
    pub fn new(units: Vec<Unit>, dates: Vec<NaiveDate>, incidence: Array2<f64>, adjacency: Array2<f64>) -> Result<Self> {
        let u = units.len();
        if incidence.dim() != (dates.len(), u) || adjacency.dim() != (u, u) {
            return Err(Error::Dimension("panel arrays do not match the unit and date counts".into()));
        }
        for a in 0..u {
            if adjacency[(a, a)] != 0.0 {
                return Err(Error::Data(format!("unit {} is adjacent to itself", units[a].id)));
            }
            for b in 0..u {
                let v = adjacency[(a, b)];
                if (v != 0.0 && v != 1.0) || v != adjacency[(b, a)] {
                    return Err(Error::Data("adjacency must be a symmetric 0/1 matrix".into()));
                }
            }
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("dates must be strictly increasing".into()));
        }
        if incidence.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite incidence".into()));
        }
        Ok(Self { units, dates, incidence, adjacency })
    }

    /// Reads the long case table `(date, unit_id, cases, population)` and the
    /// edge list `(unit_id_a, unit_id_b)`.
    pub fn from_csv<R1: Read, R2: Read>(cases: R1, adjacency: R2) -> Result<Self> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(cases).deserialize() {
            let r: CaseRow = rec?;
            if !(r.population > 0.0) {
                return Err(Error::Data(format!("unit {} has nonpositive population", r.unit_id)));
            }
            rows.push((parse_date(&r.date)?, r));
        }
        let dates: Vec<NaiveDate> = rows.iter().map(|(d, _)| *d).collect::<BTreeSet<_>>().into_iter().collect();
        let mut pops: BTreeMap<String, f64> = BTreeMap::new();
        for (_, r) in &rows {
            pops.entry(r.unit_id.clone()).or_insert(r.population);
        }
        let units: Vec<Unit> = pops.into_iter().map(|(id, population)| Unit { id, population }).collect();
        let unit_ix: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
        let date_ix: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let mut incidence = Array2::from_elem((dates.len(), units.len()), f64::NAN);
        for (d, r) in &rows {
            let cell = &mut incidence[(date_ix[d], unit_ix[r.unit_id.as_str()])];
            if !cell.is_nan() {
                return Err(Error::Data(format!("duplicate row for unit {} on {d}", r.unit_id)));
            }
            *cell = r.cases * 1000.0 / r.population;
        }
        if let Some(((t, j), _)) = incidence.indexed_iter().find(|(_, v)| v.is_nan()) {
            return Err(Error::Data(format!("unit {} has no row for {}", units[j].id, dates[t])));
        }
        let mut adj = Array2::zeros((units.len(), units.len()));
        for rec in csv::Reader::from_reader(adjacency).deserialize() {
            let e: EdgeRow = rec?;
            let (a, b) = match (unit_ix.get(e.unit_id_a.as_str()), unit_ix.get(e.unit_id_b.as_str())) {
                (Some(&a), Some(&b)) => (a, b),
                _ => return Err(Error::Data(format!("edge {}-{} names an unknown unit", e.unit_id_a, e.unit_id_b))),
            };
            adj[(a, b)] = 1.0;
            adj[(b, a)] = 1.0;
        }
        Self::new(units, dates, incidence, adj)
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn incidence(&self, t: usize, j: usize) -> f64 {
        self.incidence[(t, j)]
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn date_index(&self, date: &str) -> Result<usize> {
        let d = parse_date(date)?;
        self.dates.binary_search(&d).map_err(|_| Error::Data(format!("date {d} is not in the panel")))
    }

    fn neighbours(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.row(j).into_iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(k, _)| k).collect::<Vec<_>>().into_iter()
    }

    /// Previous-day incidence summed over neighbours; zero on the first day.
    pub fn neighbour_lag_sum(&self, j: usize, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.neighbours(j).map(|k| self.incidence[(t - 1, k)]).sum()
    }
}

/// Seasonal differences `y_t - y_{t-7}` of unit `j` over days `7..end`, with
/// covariates `(1, neighbour lag sum)`.
pub fn build_covariates(panel: &PanelData, j: usize, end: usize) -> Result<SeriesData> {
    if end > panel.len() || end < SEASON + 1 {
        return Err(Error::Data(format!("need at least {} observations, got {end}", SEASON + 1)));
    }
    let n = end - SEASON;
    let mut y = Vec::with_capacity(n);
    let mut z = Array2::ones((n, 2));
    for (s, t) in (SEASON..end).enumerate() {
        y.push(panel.incidence(t, j) - panel.incidence(t - SEASON, j));
        z[(s, 1)] = panel.neighbour_lag_sum(j, t);
    }
    SeriesData::new(y, z)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub ell_range: Vec<usize>,
    pub p_range: Vec<usize>,
    pub threshold: f64,
    pub gof: GofConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self { ell_range: vec![2, 3, 4], p_range: (0..=14).collect(), threshold: 0.05, gof: GofConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct ScanEntry {
    pub ell: usize,
    pub p: usize,
    pub p_value: f64,
    /// False when no candidate reached the threshold; the entry is then the
    /// candidate with the largest P-value.
    pub adequate: bool,
    pub gof_runs: usize,
    pub fit: FitResult,
}

/// Fits Gaussian candidates in lexicographic `(ell, p)` order and keeps the
/// first whose P-value reaches the threshold.
pub fn scan_models(series: &SeriesData, cfg: &ScanConfig) -> Result<ScanEntry> {
    let spec = FamilySpec::gaussian();
    let mut best: Option<ScanEntry> = None;
    let mut runs = 0;
    for &ell in &cfg.ell_range {
        for &p in &cfg.p_range {
            let seed = crate::rng::derive_seed(cfg.gof.seed, &[ell as u64, p as u64]);
            let em_cfg = em::EmConfig { seed, ..cfg.gof.em.clone() };
            let res = em::em_fit(&spec, series, ell, p, &em_cfg).and_then(|fit| {
                runs += 1;
                gof::bootstrap_from_fit(&spec, series, &fit, &GofConfig { seed, ..cfg.gof.clone() }).map(|r| (fit, r))
            });
            let (fit, report) = match res {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("candidate ({ell}, {p}) skipped: {e}");
                    continue;
                }
            };
            let entry = ScanEntry { ell, p, p_value: report.p_value, adequate: true, gof_runs: runs, fit };
            if report.p_value >= cfg.threshold {
                return Ok(entry);
            }
            if best.as_ref().is_none_or(|b| entry.p_value > b.p_value) {
                best = Some(entry);
            }
        }
    }
    let mut fallback = best.ok_or_else(|| Error::FitFailure("no candidate model could be fitted".into()))?;
    fallback.adequate = false;
    fallback.gof_runs = runs;
    Ok(fallback)
}

/// Median of the one-step predictive mixture by bisection on its cdf.
pub fn mixture_median(model: &HmmModel, w: &[f64], x: &Predictor<'_>, day: usize) -> Result<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (j, &wj) in w.iter().enumerate() {
        if wj <= 0.0 {
            continue;
        }
        let mu = model.regime_mean(j, x);
        let sd = model.regime(j).params.sigma.max(1.0);
        lo = lo.min(mu - 10.0 * sd);
        hi = hi.max(mu + 10.0 * sd);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::BracketFailure { day });
    }
    let cdf = |v: f64| markov::conditional_cdf(model, w, x, v);
    let mut widen = 0;
    while cdf(lo) > 0.5 || cdf(hi) < 0.5 {
        let span = hi - lo;
        lo -= span;
        hi += span;
        widen += 1;
        if widen > 60 || !span.is_finite() {
            return Err(Error::BracketFailure { day });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = cdf(mid);
        if (f - 0.5).abs() < MEDIAN_TOL {
            return Ok(mid);
        }
        if f < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
            // a jump straddles one half: the generalized inverse
            return Ok(hi);
        }
    }
    Err(Error::BracketFailure { day })
}

/// Multi-step predictor: the regime weights are propagated through the
/// transition matrix and unseen lags are replaced by earlier predictions.
#[derive(Debug, Clone)]
pub struct PredictiveState {
    model: HmmModel,
    eta: Vec<f64>,
    /// Most recent response last.
    history: Vec<f64>,
    day: usize,
}

impl PredictiveState {
    pub fn new(model: &HmmModel, train: &SeriesData) -> Result<Self> {
        let fwd = markov::forward_filter(model, train)?;
        let eta = match fwd.eta.nrows() {
            0 => model.eta0().to_vec(),
            m => fwd.eta.row(m - 1).to_vec(),
        };
        Ok(Self { model: model.clone(), eta, history: train.y().to_vec(), day: 0 })
    }

    /// Predictive median of the next response given its covariates.
    pub fn step(&mut self, z: &[f64]) -> Result<f64> {
        let p = self.model.p();
        let w = markov::predictive_weights(&self.model, &self.eta);
        let lags: Vec<f64> = (1..=p).map(|k| self.history[self.history.len() - k]).collect();
        let x = Predictor::new(&lags, z);
        let m = mixture_median(&self.model, &w, &x, self.day)?;
        self.eta = w;
        self.history.push(m);
        self.day += 1;
        Ok(m)
    }
}

/// Medians for consecutive days with known covariates.
pub fn predict_median(model: &HmmModel, train: &SeriesData, future_z: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut st = PredictiveState::new(model, train)?;
    future_z.iter().map(|z| st.step(z)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitForecast {
    pub unit: String,
    pub ell: usize,
    pub p: usize,
    pub p_value: f64,
    pub adequate: bool,
    pub daily: Vec<f64>,
    pub weekly_prediction: f64,
    pub observed: Vec<Option<f64>>,
}

/// Scans every unit on data up to and including `train_end` and predicts the
/// next `horizon` days of incidence.
pub fn forecast_panel(panel: &PanelData, train_end: usize, horizon: usize, cfg: &ScanConfig) -> Result<Vec<UnitForecast>> {
    let end = train_end + 1;
    if horizon == 0 || end > panel.len() {
        return Err(Error::InvalidSpec("train end must lie inside the panel and horizon must be positive".into()));
    }
    let u = panel.units().len();
    let fitted: Vec<(ScanEntry, PredictiveState)> = (0..u)
        .into_par_iter()
        .map(|j| {
            let series = build_covariates(panel, j, end)?;
            let entry = scan_models(&series, &ScanConfig { gof: GofConfig { seed: cfg.gof.seed ^ j as u64, ..cfg.gof.clone() }, ..cfg.clone() })?;
            let state = PredictiveState::new(&entry.fit.model, &series)?;
            Ok((entry, state))
        })
        .collect::<Result<_>>()?;
    let (entries, mut states): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();

    // predicted levels, filled one day at a time across all units
    let mut level = vec![vec![0.0; u]; horizon];
    let value = |level: &Vec<Vec<f64>>, t: usize, k: usize| -> f64 {
        if t < end {
            panel.incidence(t, k)
        } else {
            level[t - end][k]
        }
    };
    for h in 0..horizon {
        let t = end + h;
        let today: Vec<f64> = states
            .par_iter_mut()
            .enumerate()
            .map(|(j, st)| {
                let nb: f64 = panel.neighbours(j).map(|k| value(&level, t - 1, k)).sum();
                st.step(&[1.0, nb]).map(|d| value(&level, t - SEASON, j) + d)
            })
            .collect::<Result<_>>()?;
        level[h] = today;
    }
    Ok(entries
        .into_iter()
        .enumerate()
        .map(|(j, e)| {
            let daily: Vec<f64> = (0..horizon).map(|h| level[h][j]).collect();
            UnitForecast {
                unit: panel.units()[j].id.clone(),
                ell: e.ell,
                p: e.p,
                p_value: e.p_value,
                adequate: e.adequate,
                weekly_prediction: daily.iter().sum(),
                observed: (0..horizon).map(|h| (end + h < panel.len()).then(|| panel.incidence(end + h, j))).collect(),
                daily,
            }
        })
        .collect())
}

pub fn write_scan_csv<W: Write>(out: W, rows: &[UnitForecast]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit", "ell", "p", "p_value", "adequate", "weekly_prediction"])?;
    for r in rows {
        w.write_record([
            r.unit.clone(),
            r.ell.to_string(),
            r.p.to_string(),
            r.p_value.to_string(),
            r.adequate.to_string(),
            r.weekly_prediction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Observed against predicted daily incidence for the held-out days.
pub fn write_scatter_csv<W: Write>(out: W, panel: &PanelData, train_end: usize, rows: &[UnitForecast]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit", "date", "observed", "predicted"])?;
    for r in rows {
        for (h, (obs, pred)) in r.observed.iter().zip(&r.daily).enumerate() {
            if let Some(obs) = obs {
                let date = panel.dates()[train_end + 1 + h];
                w.write_record([r.unit.clone(), date.to_string(), obs.to_string(), pred.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::{EmissionFamily, EmissionParams};
    use crate::markov::Regime;
    use ndarray::array;
    use proptest::prelude::*;

    fn two_unit_panel(days: usize, linked: bool) -> PanelData {
        let dates: Vec<NaiveDate> = (0..days)
            .map(|d| NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Days::new(d as u64))
            .collect();
        let inc = Array2::from_shape_fn((days, 2), |(t, j)| (t * (j + 2)) as f64 * 0.1 + (t % 7) as f64 + (t as f64 * (1.3 + j as f64)).sin());
        let adj = if linked { array![[0.0, 1.0], [1.0, 0.0]] } else { Array2::zeros((2, 2)) };
        let units = vec![Unit { id: "a".into(), population: 1000.0 }, Unit { id: "b".into(), population: 500.0 }];
        PanelData::new(units, dates, inc, adj).unwrap()
    }

    #[test]
    fn covariates_and_round_trip() {
        let panel = two_unit_panel(30, true);
        let s = build_covariates(&panel, 0, 30).unwrap();
        assert_eq!(s.len(), 23);
        for (i, t) in (SEASON..30).enumerate() {
            assert_eq!(panel.incidence(t - SEASON, 0) + s.y()[i], panel.incidence(t, 0));
            assert_eq!(s.z_row(i)[1], panel.incidence(t - 1, 1));
        }
        assert_eq!(panel.neighbour_lag_sum(0, 0), 0.0);
        let isolated = two_unit_panel(30, false);
        let s = build_covariates(&isolated, 1, 30).unwrap();
        assert!((0..s.len()).all(|i| s.z_row(i)[1] == 0.0));
        assert!(build_covariates(&panel, 0, 7).is_err());
    }

    #[test]
    fn csv_ingest() {
        let cases = "date,unit_id,cases,population\n2021-01-02,x,4,2000\n2021-01-01,x,2,2000\n2021-01-01,y,1,1000\n2021-01-02,y,3,1000\n";
        let adj = "unit_id_a,unit_id_b\nx,y\n";
        let panel = PanelData::from_csv(cases.as_bytes(), adj.as_bytes()).unwrap();
        assert_eq!(panel.len(), 2);
        assert_eq!(panel.incidence(0, 0), 1.0);
        assert_eq!(panel.incidence(1, 1), 3.0);
        assert_eq!(panel.neighbour_lag_sum(0, 1), 1.0);
        assert_eq!(panel.date_index("2021-01-02").unwrap(), 1);

        let missing = "date,unit_id,cases,population\n2021-01-01,x,2,2000\n2021-01-01,y,1,1000\n2021-01-02,y,3,1000\n";
        assert!(PanelData::from_csv(missing.as_bytes(), adj.as_bytes()).is_err());
        let bad_edge = "unit_id_a,unit_id_b\nx,z\n";
        assert!(PanelData::from_csv(cases.as_bytes(), bad_edge.as_bytes()).is_err());
    }

    fn gauss(intercept: f64, sigma: f64) -> Regime {
        Regime::new(EmissionFamily::GaussianAr, EmissionParams::intercept_only(0, 1, intercept, sigma))
    }

    #[test]
    fn median_examples() {
        let single = HmmModel::new(vec![gauss(2.5, 1.3)], array![[1.0]], 0, 1).unwrap();
        let x = Predictor::new(&[], &[1.0]);
        assert!((mixture_median(&single, &[1.0], &x, 0).unwrap() - 2.5).abs() < 1e-7);

        let sym = HmmModel::new(vec![gauss(-3.0, 1.0), gauss(3.0, 1.0)], array![[0.5, 0.5], [0.5, 0.5]], 0, 1).unwrap();
        assert!(mixture_median(&sym, &[0.5, 0.5], &x, 0).unwrap().abs() < 1e-7);
    }

    fn small_scan(threshold: f64) -> ScanConfig {
        ScanConfig {
            ell_range: vec![1, 2],
            p_range: vec![0, 1],
            threshold,
            gof: GofConfig { bootstrap: 9, statistic: gof::Statistic::Cvm, ..GofConfig::default() },
        }
    }

    #[test]
    fn scan_stops_at_first_adequate_candidate() {
        let panel = two_unit_panel(60, true);
        let series = build_covariates(&panel, 0, 60).unwrap();
        let first = scan_models(&series, &small_scan(0.0)).unwrap();
        assert_eq!((first.ell, first.p, first.gof_runs), (1, 0, 1));
        assert!(first.adequate);
        let none = scan_models(&series, &small_scan(2.0)).unwrap();
        assert!(!none.adequate);
        assert_eq!(none.gof_runs, 4);
    }

    #[test]
    fn panel_forecast_substitutes_neighbour_predictions() {
        let panel = two_unit_panel(60, true);
        let cfg = small_scan(0.0);
        let train_end = 49;
        let out = forecast_panel(&panel, train_end, 7, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        for r in &out {
            assert_eq!(r.daily.len(), 7);
            assert!((r.weekly_prediction - r.daily.iter().sum::<f64>()).abs() < 1e-9);
            assert!(r.observed.iter().all(|o| o.is_some()));
        }
        // replay unit 0 with the neighbour's predicted levels as covariates
        let series = build_covariates(&panel, 0, train_end + 1).unwrap();
        let entry = scan_models(&series, &ScanConfig { gof: GofConfig { seed: cfg.gof.seed, ..cfg.gof.clone() }, ..cfg.clone() }).unwrap();
        let mut st = PredictiveState::new(&entry.fit.model, &series).unwrap();
        for h in 0..7 {
            let t = train_end + 1 + h;
            let nb = if h == 0 { panel.incidence(t - 1, 1) } else { out[1].daily[h - 1] };
            let level = panel.incidence(t - SEASON, 0) + st.step(&[1.0, nb]).unwrap();
            assert!((level - out[0].daily[h]).abs() < 1e-12);
        }
        let mut scan = Vec::new();
        write_scan_csv(&mut scan, &out).unwrap();
        assert!(String::from_utf8(scan).unwrap().starts_with("unit,ell,p,p_value,adequate,weekly_prediction\n"));
        let mut scatter = Vec::new();
        write_scatter_csv(&mut scatter, &panel, train_end, &out).unwrap();
        assert_eq!(String::from_utf8(scatter).unwrap().lines().count(), 15);
    }

    proptest! {
        #[test]
        fn median_residual_and_shift(a in -5.0f64..5.0, b in -5.0f64..5.0, s1 in 0.2f64..3.0, s2 in 0.2f64..3.0, w in 0.05f64..0.95, c in -10.0f64..10.0) {
            let q = array![[0.5, 0.5], [0.5, 0.5]];
            let model = HmmModel::new(vec![gauss(a, s1), gauss(b, s2)], q.clone(), 0, 1).unwrap();
            let x = Predictor::new(&[], &[1.0]);
            let weights = [w, 1.0 - w];
            let m = mixture_median(&model, &weights, &x, 0).unwrap();
            prop_assert!((markov::conditional_cdf(&model, &weights, &x, m) - 0.5).abs() < 1e-8);
            let shifted = HmmModel::new(vec![gauss(a + c, s1), gauss(b + c, s2)], q, 0, 1).unwrap();
            let ms = mixture_median(&shifted, &weights, &x, 0).unwrap();
            prop_assert!((ms - m - c).abs() < 1e-6);
        }
    }
}

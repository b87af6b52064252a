//! Monte Carlo studies: power of the bootstrap test, regime-selection
//! frequencies and power curves for constant-mean Poisson models.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{self, Criterion, CriteriaRow};
use crate::dgp::{self, DgpModel, DgpSpec, Experiment};
use crate::em::{self, EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::gof::{self, GofConfig, Statistic};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct McScenario {
    pub dgp: DgpSpec,
    /// Numbers of regimes tested in a power study.
    pub ell_test: Vec<usize>,
    /// Candidate numbers of regimes in a selection study.
    pub ell_range: Vec<usize>,
    pub methods: Vec<Method>,
    pub statistic: Statistic,
    pub replications: usize,
    pub bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Worker threads; `None` uses all cores.
    pub workers: Option<usize>,
    pub em: EmConfig,
    pub refit_restarts: usize,
    /// Fitted AR order; defaults to the order of the data-generating process.
    pub ar_order: Option<usize>,
}

impl Default for McScenario {
    fn default() -> Self {
        Self {
            dgp: DgpSpec { model: DgpModel::M1, experiment: Experiment::Exp1, ell1: 1, n: 100, seed: 0 },
            ell_test: vec![1],
            ell_range: vec![1, 2, 3, 4],
            methods: vec![Method::Gof, Method::Aic, Method::Bic, Method::Icl],
            statistic: Statistic::AvgCvm(50),
            replications: 200,
            bootstrap: 100,
            alpha: 0.05,
            seed: 0,
            workers: None,
            em: EmConfig { restarts: 5, ..EmConfig::default() },
            refit_restarts: 3,
            ar_order: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gof,
    Aic,
    Bic,
    Icl,
}

impl Method {
    pub fn criterion(self) -> Option<Criterion> {
        match self {
            Method::Gof => None,
            Method::Aic => Some(Criterion::Aic),
            Method::Bic => Some(Criterion::Bic),
            Method::Icl => Some(Criterion::Icl),
        }
    }
}

impl McScenario {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.replications == 0 || self.bootstrap == 0 {
            return Err(Error::InvalidSpec("N and B must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidSpec("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn ar_order(&self) -> usize {
        self.ar_order.unwrap_or_else(|| self.dgp.p())
    }

    fn gof_config(&self, seed: u64) -> GofConfig {
        GofConfig {
            statistic: self.statistic,
            bootstrap: self.bootstrap,
            seed,
            em: self.em.clone(),
            refit_restarts: self.refit_restarts,
            retain_bootstrap: false,
        }
    }

    fn data_seed(&self, k: usize) -> u64 {
        rng::stream_seed(self.seed, Stream::Replication, &[k as u64])
    }

    fn fit_config(&self, k: usize, ell: usize) -> EmConfig {
        EmConfig { seed: rng::stream_seed(self.seed, Stream::Restart, &[k as u64, ell as u64]), ..self.em.clone() }
    }

    fn test_seed(&self, k: usize, ell: usize) -> u64 {
        rng::stream_seed(self.seed, Stream::BootstrapData, &[k as u64, ell as u64])
    }
}

fn binomial_se_pct(hits: usize, total: usize) -> f64 {
    if total == 0 {
        return f64::NAN;
    }
    let p = hits as f64 / total as f64;
    100.0 * (p * (1.0 - p) / total as f64).sqrt()
}

/// Runs `f` on a pool with the requested number of workers.
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::InvalidSpec(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRecord {
    pub replication: usize,
    pub ell: usize,
    pub p_value: Option<f64>,
    pub observed: Option<f64>,
    pub rejected: Option<bool>,
    pub failed_bootstrap: usize,
    pub loglik: Option<f64>,
    pub em_iters: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub ell: usize,
    pub valid: usize,
    pub failed: usize,
    pub rejections: usize,
    pub rejection_pct: f64,
    pub se_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerStudy {
    pub rows: Vec<PowerRow>,
    pub records: Vec<PowerRecord>,
}

impl PowerStudy {
    pub fn row(&self, ell: usize) -> Option<&PowerRow> {
        self.rows.iter().find(|r| r.ell == ell)
    }
}

fn power_replication(sc: &McScenario, k: usize) -> Vec<PowerRecord> {
    let failed = |ell: usize, e: String| PowerRecord {
        replication: k,
        ell,
        p_value: None,
        observed: None,
        rejected: None,
        failed_bootstrap: 0,
        loglik: None,
        em_iters: None,
        error: Some(e),
    };
    let built = match dgp::builtin_model(&sc.dgp) {
        Ok(b) => b,
        Err(e) => return sc.ell_test.iter().map(|&ell| failed(ell, e.to_string())).collect(),
    };
    let data = match built.simulate(sc.dgp.n, sc.data_seed(k)) {
        Ok(s) => s.data,
        Err(e) => {
            log::warn!("replication {k}: {e}");
            return sc.ell_test.iter().map(|&ell| failed(ell, e.to_string())).collect();
        }
    };
    let p = sc.ar_order();
    sc.ell_test
        .iter()
        .map(|&ell| {
            let run = em::em_fit(&built.family, &data, ell, p, &sc.fit_config(k, ell)).and_then(|fit| {
                gof::bootstrap_from_fit(&built.family, &data, &fit, &sc.gof_config(sc.test_seed(k, ell)))
                    .map(|rep| (fit, rep))
            });
            match run {
                Ok((fit, rep)) => PowerRecord {
                    replication: k,
                    ell,
                    p_value: Some(rep.p_value),
                    observed: Some(rep.observed),
                    rejected: Some(rep.p_value < sc.alpha),
                    failed_bootstrap: rep.failed_replicates,
                    loglik: Some(fit.loglik),
                    em_iters: Some(fit.iters),
                    error: None,
                },
                Err(e) => {
                    log::warn!("replication {k}, ell = {ell}: {e}");
                    failed(ell, e.to_string())
                }
            }
        })
        .collect()
}

pub fn power_rows(ells: &[usize], records: &[PowerRecord]) -> Vec<PowerRow> {
    ells.iter()
        .map(|&ell| {
            let mine: Vec<_> = records.iter().filter(|r| r.ell == ell).collect();
            let valid = mine.iter().filter(|r| r.rejected.is_some()).count();
            let rejections = mine.iter().filter(|r| r.rejected == Some(true)).count();
            PowerRow {
                ell,
                valid,
                failed: mine.len() - valid,
                rejections,
                rejection_pct: if valid > 0 { 100.0 * rejections as f64 / valid as f64 } else { f64::NAN },
                se_pct: binomial_se_pct(rejections, valid),
            }
        })
        .collect()
}

/// Rejection rates of the bootstrap test at each tested `ell`.
pub fn run_power_study(sc: &McScenario) -> Result<PowerStudy> {
    sc.validate()?;
    dgp::builtin_model(&sc.dgp)?;
    let records: Vec<PowerRecord> = with_workers(sc.workers, || {
        (0..sc.replications).into_par_iter().flat_map_iter(|k| power_replication(sc, k)).collect()
    })?;
    Ok(PowerStudy { rows: power_rows(&sc.ell_test, &records), records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub replication: usize,
    pub method: Method,
    pub selected: Option<usize>,
    /// For the sequential test: whether some `ell` passed.
    pub adequate: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub method: Method,
    pub ell: usize,
    pub count: usize,
    pub pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionStudy {
    pub rows: Vec<SelectionRow>,
    pub records: Vec<SelectionRecord>,
    pub criteria: Vec<(usize, CriteriaRow)>,
}

impl SelectionStudy {
    /// Percentage of valid replications in which `method` chose `ell`.
    pub fn pct(&self, method: Method, ell: usize) -> f64 {
        self.rows.iter().find(|r| r.method == method && r.ell == ell).map_or(0.0, |r| r.pct)
    }
}

fn selection_replication(sc: &McScenario, k: usize) -> (Vec<SelectionRecord>, Vec<(usize, CriteriaRow)>) {
    let record = |method, selected, adequate, error: Option<String>| SelectionRecord {
        replication: k,
        method,
        selected,
        adequate,
        error,
    };
    let sim = dgp::builtin_model(&sc.dgp).and_then(|b| b.simulate(sc.dgp.n, sc.data_seed(k)).map(|s| (b, s)));
    let (built, data) = match sim {
        Ok((b, s)) => (b, s.data),
        Err(e) => {
            log::warn!("replication {k}: {e}");
            return (sc.methods.iter().map(|&m| record(m, None, None, Some(e.to_string()))).collect(), vec![]);
        }
    };
    let p = sc.ar_order();
    let family = built.family;
    let fits: BTreeMap<usize, (CriteriaRow, FitResult)> = sc
        .ell_range
        .iter()
        .filter_map(|&ell| {
            let res = em::em_fit(&family, &data, ell, p, &sc.fit_config(k, ell))
                .and_then(|fit| criteria::information_criteria(&fit, &data).map(|row| (row, fit)));
            match res {
                Ok(v) => Some((ell, v)),
                Err(e) => {
                    log::warn!("replication {k}, ell = {ell}: {e}");
                    None
                }
            }
        })
        .collect();
    let rows: Vec<CriteriaRow> = fits.values().map(|(r, _)| r.clone()).collect();
    let mut out = Vec::new();
    for &method in &sc.methods {
        match method.criterion() {
            Some(c) => out.push(record(method, criteria::select_by_ic(&rows, c), None, None)),
            None => {
                let mut pvalues = Vec::new();
                for &ell in sc.ell_range.iter().filter(|&&l| l >= family.min_ell()) {
                    let pv = fits.get(&ell).and_then(|(_, fit)| {
                        gof::bootstrap_from_fit(&family, &data, fit, &sc.gof_config(sc.test_seed(k, ell)))
                            .map_err(|e| log::warn!("replication {k}, ell = {ell}: {e}"))
                            .ok()
                    });
                    let pv = pv.map(|r| r.p_value);
                    pvalues.push((ell, pv));
                    if pv.is_some_and(|v| v > sc.alpha) {
                        break;
                    }
                }
                let sel = criteria::first_adequate(&pvalues, sc.alpha);
                out.push(record(method, sel.selected, Some(sel.adequate), None));
            }
        }
    }
    (out, rows.into_iter().map(|r| (k, r)).collect())
}

pub fn selection_rows(methods: &[Method], ells: &[usize], records: &[SelectionRecord]) -> Vec<SelectionRow> {
    let mut rows = Vec::new();
    for &method in methods {
        let mine: Vec<_> = records.iter().filter(|r| r.method == method && r.selected.is_some()).collect();
        for &ell in ells {
            let count = mine.iter().filter(|r| r.selected == Some(ell)).count();
            let pct = if mine.is_empty() { f64::NAN } else { 100.0 * count as f64 / mine.len() as f64 };
            rows.push(SelectionRow { method, ell, count, pct });
        }
    }
    rows
}

/// Frequencies with which each method selects each number of regimes.
pub fn run_selection_study(sc: &McScenario) -> Result<SelectionStudy> {
    sc.validate()?;
    dgp::builtin_model(&sc.dgp)?;
    let per_rep: Vec<_> = with_workers(sc.workers, || {
        (0..sc.replications).into_par_iter().map(|k| selection_replication(sc, k)).collect()
    })?;
    let (records, criteria): (Vec<_>, Vec<_>) = per_rep.into_iter().unzip();
    let records: Vec<SelectionRecord> = records.into_iter().flatten().collect();
    Ok(SelectionStudy {
        rows: selection_rows(&sc.methods, &sc.ell_range, &records),
        records,
        criteria: criteria.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerCurveConfig {
    /// Number of regimes under the null: 1 varies the second mean of (1, x),
    /// 2 varies the third mean of (1, 5, x).
    pub null_ell: usize,
    pub lambda_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub bootstrap: usize,
    pub statistic: Statistic,
    pub alpha: f64,
    pub seed: u64,
    pub workers: Option<usize>,
    pub em: EmConfig,
    pub refit_restarts: usize,
}

impl Default for PowerCurveConfig {
    fn default() -> Self {
        Self {
            null_ell: 1,
            lambda_grid: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            n_grid: vec![250, 500],
            replications: 200,
            bootstrap: 100,
            statistic: Statistic::AvgCvm(50),
            alpha: 0.05,
            seed: 0,
            workers: None,
            em: EmConfig { restarts: 5, ..EmConfig::default() },
            refit_restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub lambda: f64,
    pub valid: usize,
    pub rejections: usize,
    pub rejection_pct: f64,
    pub se_pct: f64,
}

/// Rejection rate of the null `null_ell` as the varying Poisson mean moves
/// along `lambda_grid`, for each sample size.
pub fn power_curve(cfg: &PowerCurveConfig) -> Result<Vec<CurvePoint>> {
    let base: Vec<f64> = match cfg.null_ell {
        1 => vec![1.0],
        2 => vec![1.0, 5.0],
        _ => return Err(Error::InvalidSpec("power curves are defined for null ell 1 or 2".into())),
    };
    let mut out = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        for (li, &lambda) in cfg.lambda_grid.iter().enumerate() {
            let mut lambdas = base.clone();
            lambdas.push(lambda);
            let sc = McScenario {
                dgp: DgpSpec {
                    model: DgpModel::PoissonConstant { lambdas: lambdas.clone() },
                    experiment: Experiment::Exp1,
                    ell1: lambdas.len(),
                    n,
                    seed: 0,
                },
                ell_test: vec![cfg.null_ell],
                statistic: cfg.statistic,
                replications: cfg.replications,
                bootstrap: cfg.bootstrap,
                alpha: cfg.alpha,
                seed: rng::derive_seed(cfg.seed, &[ni as u64, li as u64]),
                workers: cfg.workers,
                em: cfg.em.clone(),
                refit_restarts: cfg.refit_restarts,
                ..McScenario::default()
            };
            let study = run_power_study(&sc)?;
            let row = &study.rows[0];
            out.push(CurvePoint {
                n,
                lambda,
                valid: row.valid,
                rejections: row.rejections,
                rejection_pct: row.rejection_pct,
                se_pct: row.se_pct,
            });
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub wall_time_secs: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<(Self, Instant)> {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok((
            Self {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: serde_json::to_value(config)?,
                started_unix,
                wall_time_secs: 0.0,
                outputs: vec![],
            },
            Instant::now(),
        ))
    }

    pub fn finish(mut self, started: Instant, dir: &Path) -> Result<()> {
        self.wall_time_secs = started.elapsed().as_secs_f64();
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(model: DgpModel, ell1: usize) -> McScenario {
        McScenario {
            dgp: DgpSpec { model, experiment: Experiment::Exp1, ell1, n: 60, seed: 0 },
            replications: 3,
            bootstrap: 4,
            statistic: Statistic::AvgCvm(3),
            em: EmConfig { restarts: 2, ..EmConfig::default() },
            refit_restarts: 1,
            seed: 42,
            ..McScenario::default()
        }
    }

    #[test]
    fn power_study_is_deterministic_and_recounts() {
        let sc = small(DgpModel::M1, 1);
        let a = run_power_study(&sc).unwrap();
        let b = run_power_study(&McScenario { workers: Some(2), ..sc.clone() }).unwrap();
        assert_eq!(a.records, b.records);
        let row = a.row(1).unwrap();
        assert_eq!(row.valid + row.failed, 3);
        let recount = a.records.iter().filter(|r| r.rejected == Some(true)).count();
        assert_eq!(recount, row.rejections);
    }

    #[test]
    fn single_replication_selection_is_one_hot() {
        let sc = McScenario {
            replications: 1,
            ell_range: vec![1, 2],
            methods: vec![Method::Aic, Method::Bic],
            ..small(DgpModel::M1, 1)
        };
        let st = run_selection_study(&sc).unwrap();
        for m in [Method::Aic, Method::Bic] {
            let pcts: Vec<f64> = [1, 2].iter().map(|&l| st.pct(m, l)).collect();
            assert_eq!(pcts.iter().filter(|&&v| v == 100.0).count(), 1);
            assert_eq!(pcts.iter().filter(|&&v| v == 0.0).count(), 1);
        }
    }

    #[test]
    fn zero_inflated_gof_starts_at_two() {
        let sc = McScenario {
            replications: 1,
            ell_range: vec![1, 2],
            methods: vec![Method::Gof],
            dgp: DgpSpec { model: DgpModel::M3, experiment: Experiment::Exp1, ell1: 1, n: 200, seed: 0 },
            ..small(DgpModel::M3, 1)
        };
        let st = run_selection_study(&sc).unwrap();
        assert_eq!(st.records[0].selected, Some(2));
    }

    #[test]
    fn scenario_json_round_trip() {
        let sc = small(DgpModel::PoissonConstant { lambdas: vec![1.0, 3.0] }, 2);
        let json = serde_json::to_string(&sc).unwrap();
        let back: McScenario = serde_json::from_str(&json).unwrap();
        assert_eq!(back.dgp, sc.dgp);
        let partial: McScenario = serde_json::from_str(r#"{"replications": 7}"#).unwrap();
        assert_eq!(partial.replications, 7);
        assert_eq!(partial.bootstrap, 100);
    }

    #[test]
    fn invalid_scenarios_rejected() {
        assert!(run_power_study(&McScenario { replications: 0, ..small(DgpModel::M1, 1) }).is_err());
        assert!(run_power_study(&small(DgpModel::M1, 3)).is_err());
        assert!(power_curve(&PowerCurveConfig { null_ell: 3, ..PowerCurveConfig::default() }).is_err());
    }

    #[test]
    fn csv_rows_have_headers() {
        let rows = power_rows(
            &[1],
            &[PowerRecord {
                replication: 0,
                ell: 1,
                p_value: Some(0.2),
                observed: Some(0.1),
                rejected: Some(false),
                failed_bootstrap: 0,
                loglik: Some(-3.0),
                em_iters: Some(2),
                error: None,
            }],
        );
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ell,valid,failed,rejections,rejection_pct,se_pct\n"));
    }
}

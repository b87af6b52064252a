//! Information criteria and the two regime-selection procedures.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::em::{self, EmConfig, FamilySpec, FitResult};
use crate::error::Result;
use crate::gof::{self, GofConfig};
use crate::markov::{self, SeriesData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaRow {
    pub ell: usize,
    pub loglik: f64,
    pub n_params: usize,
    pub aic: f64,
    pub bic: f64,
    pub icl: f64,
    pub gof_pvalue: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
    Icl,
}

impl CriteriaRow {
    pub fn value(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Aic => self.aic,
            Criterion::Bic => self.bic,
            Criterion::Icl => self.icl,
        }
    }
}

fn argmax(v: impl IntoIterator<Item = f64>) -> usize {
    v.into_iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// AIC, BIC and ICL of a fit. Penalties use the effective sample size
/// `m = n - p`; ICL plugs in the marginal most probable state at each step.
pub fn information_criteria(fit: &FitResult, data: &SeriesData) -> Result<CriteriaRow> {
    let model = &fit.model;
    let k = fit.n_params as f64;
    let m = (data.len() - model.p()) as f64;
    let dens = markov::emission_densities(model, data)?;
    let fs = markov::smooth(model, data)?;
    let q = model.transition();
    let mut prev = argmax(fs.lambda_init.iter().copied());
    let mut complete = 0.0;
    for s in 0..fs.lambda.nrows() {
        let cur = argmax(fs.lambda.row(s).iter().copied());
        complete += dens[(s, cur)].ln() + q[(prev, cur)].ln();
        prev = cur;
    }
    Ok(CriteriaRow {
        ell: model.ell(),
        loglik: fit.loglik,
        n_params: fit.n_params,
        aic: 2.0 * k - 2.0 * fit.loglik,
        bic: m.ln() * k - 2.0 * fit.loglik,
        icl: m.ln() * k - 2.0 * complete,
        gof_pvalue: None,
    })
}

/// Minimizer of the criterion; ties go to the smaller `ell`.
pub fn select_by_ic(rows: &[CriteriaRow], criterion: Criterion) -> Option<usize> {
    rows.iter()
        .filter(|r| r.value(criterion).is_finite())
        .fold(None::<&CriteriaRow>, |best, r| match best {
            Some(b) if b.value(criterion) < r.value(criterion) => Some(b),
            Some(b) if b.value(criterion) == r.value(criterion) && b.ell <= r.ell => Some(b),
            _ => Some(r),
        })
        .map(|r| r.ell)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofSelection {
    pub selected: Option<usize>,
    /// False when no tested `ell` had a P-value above the level; `selected` is
    /// then the `ell` with the largest P-value.
    pub adequate: bool,
    pub pvalues: Vec<(usize, Option<f64>)>,
}

/// Applies the sequential rule to P-values computed in ascending `ell`.
pub fn first_adequate(pvalues: &[(usize, Option<f64>)], alpha: f64) -> GofSelection {
    if let Some(&(ell, _)) = pvalues.iter().find(|(_, p)| p.is_some_and(|p| p > alpha)) {
        return GofSelection { selected: Some(ell), adequate: true, pvalues: pvalues.to_vec() };
    }
    let best = pvalues
        .iter()
        .filter_map(|&(ell, p)| p.map(|p| (ell, p)))
        .fold(None::<(usize, f64)>, |b, (ell, p)| if b.is_none_or(|b| p > b.1) { Some((ell, p)) } else { b });
    GofSelection { selected: best.map(|b| b.0), adequate: false, pvalues: pvalues.to_vec() }
}

/// Tests `ell = ells[0], ells[1], ...` in turn and stops at the first P-value
/// above `alpha`.
pub fn select_by_gof(
    spec: &FamilySpec,
    data: &SeriesData,
    ells: &[usize],
    p: usize,
    config: &GofConfig,
    alpha: f64,
) -> GofSelection {
    let mut pvalues = Vec::with_capacity(ells.len());
    for &ell in ells {
        let cfg = GofConfig { seed: crate::rng::derive_seed(config.seed, &[ell as u64]), ..config.clone() };
        match gof::bootstrap_pvalue(spec, data, ell, p, &cfg) {
            Ok(r) => {
                pvalues.push((ell, Some(r.p_value)));
                if r.p_value > alpha {
                    break;
                }
            }
            Err(e) => {
                log::warn!("skipping ell = {ell}: {e}");
                pvalues.push((ell, None));
            }
        }
    }
    first_adequate(&pvalues, alpha)
}

/// Fits every `ell` and tabulates the criteria; failed fits are skipped.
pub fn criteria_table(
    spec: &FamilySpec,
    data: &SeriesData,
    ells: &[usize],
    p: usize,
    em_config: &EmConfig,
) -> Vec<(CriteriaRow, FitResult)> {
    ells.iter()
        .filter_map(|&ell| {
            let fit = em::em_fit(spec, data, ell, p, em_config)
                .and_then(|fit| information_criteria(&fit, data).map(|row| (row, fit)));
            match fit {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("skipping ell = {ell}: {e}");
                    None
                }
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 7] = ["ell", "loglik", "n_params", "aic", "bic", "icl", "gof_pvalue"];

pub fn write_csv<W: Write>(out: W, rows: &[CriteriaRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.ell.to_string(),
            r.loglik.to_string(),
            r.n_params.to_string(),
            r.aic.to_string(),
            r.bic.to_string(),
            r.icl.to_string(),
            r.gof_pvalue.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(ell: usize, loglik: f64, n_params: usize, m: f64) -> CriteriaRow {
        let k = n_params as f64;
        CriteriaRow {
            ell,
            loglik,
            n_params,
            aic: 2.0 * k - 2.0 * loglik,
            bic: m.ln() * k - 2.0 * loglik,
            icl: f64::NAN,
            gof_pvalue: None,
        }
    }

    fn series(n: usize) -> SeriesData {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0).collect();
        let mut z = Array2::ones((n, 2));
        for t in 0..n {
            z[(t, 1)] = rng.random::<f64>();
        }
        SeriesData::new(y, z).unwrap()
    }

    #[test]
    fn single_regime_icl_equals_bic() {
        let data = series(80);
        let fit = em::em_fit(&FamilySpec::gaussian(), &data, 1, 2, &EmConfig::default()).unwrap();
        let r = information_criteria(&fit, &data).unwrap();
        assert_relative_eq!(r.icl, r.bic, epsilon = 1e-9);
        assert_relative_eq!(r.aic, 2.0 * 5.0 - 2.0 * fit.loglik, epsilon = 1e-12);
        assert_relative_eq!(r.bic, 78f64.ln() * 5.0 - 2.0 * fit.loglik, epsilon = 1e-12);
    }

    #[test]
    fn ic_ties_go_to_fewer_regimes() {
        let rows = vec![row(1, -100.0, 4, 100.0), row(2, -100.0, 10, 100.0)];
        assert_eq!(select_by_ic(&rows, Criterion::Bic), Some(1));
        let mut tie = rows.clone();
        tie[1].aic = tie[0].aic;
        assert_eq!(select_by_ic(&tie, Criterion::Aic), Some(1));
        let better = vec![row(1, -100.0, 4, 100.0), row(2, -80.0, 10, 100.0)];
        assert_eq!(select_by_ic(&better, Criterion::Aic), Some(2));
        assert_eq!(select_by_ic(&[], Criterion::Aic), None);
    }

    #[test]
    fn doubling_parameters_raises_aic() {
        let a = row(1, -50.0, 6, 90.0);
        let b = row(1, -50.0, 12, 90.0);
        assert_relative_eq!(b.aic - a.aic, 12.0);
    }

    #[test]
    fn sequential_rule_examples() {
        let sel = first_adequate(&[(1, Some(0.01)), (2, Some(0.30)), (3, Some(0.45))], 0.05);
        assert_eq!(sel.selected, Some(2));
        assert!(sel.adequate);
        let none = first_adequate(&[(1, Some(0.01)), (2, None), (3, Some(0.04))], 0.05);
        assert_eq!(none.selected, Some(3));
        assert!(!none.adequate);
    }

    #[test]
    fn gof_selection_stops_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = rand_distr::Normal::new(1.0, 2.0).unwrap();
        let y: Vec<f64> = (0..60).map(|_| rand_distr::Distribution::sample(&noise, &mut rng)).collect();
        let data = SeriesData::intercept_only(y).unwrap();
        let cfg = GofConfig { bootstrap: 20, statistic: gof::Statistic::Cvm, ..GofConfig::default() };
        let sel = select_by_gof(&FamilySpec::gaussian(), &data, &[1, 2, 3], 0, &cfg, 0.0);
        assert_eq!(sel.selected, Some(1));
        assert_eq!(sel.pvalues.len(), 1);
        let again = select_by_gof(&FamilySpec::gaussian(), &data, &[1, 2, 3], 0, &cfg, 0.0);
        assert_eq!(sel, again);
    }

    #[test]
    fn csv_has_fixed_header() {
        let mut buf = Vec::new();
        let mut r = row(2, -1.5, 3, 10.0);
        r.gof_pvalue = Some(0.25);
        write_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ell,loglik,n_params,aic,bic,icl,gof_pvalue\n"));
        assert!(text.trim_end().ends_with(",0.25"));
    }
}

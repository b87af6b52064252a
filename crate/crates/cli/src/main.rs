use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use arxhmm::criteria::{self, Criterion};
use arxhmm::dgp::{self, DgpModel, DgpSpec, Experiment};
use arxhmm::dists::Link;
use arxhmm::em::{self, EmConfig, FamilySpec};
use arxhmm::forecast::{self, PanelData, ScanConfig};
use arxhmm::gof::{self, GofConfig};
use arxhmm::markov::SeriesData;
use arxhmm::mc::{self, McScenario, PowerCurveConfig, RunManifest};

#[derive(Parser)]
#[command(name = "arxhmm", version, about = "Fit, test and select ARX hidden Markov models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    PoissonLog,
    PoissonLinear,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// CSV with a `y` column and optional `z1..zr` covariate columns.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    zero_inflated: bool,
    #[arg(long)]
    ell: Option<usize>,
    /// Autoregressive order.
    #[arg(long)]
    p: Option<usize>,
    /// Candidate numbers of regimes, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    ells: Option<Vec<usize>>,
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    M1,
    M2,
    M3,
    M4,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Exp1,
    Exp2,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    experiment: Option<ExperimentArg>,
    /// Number of non-zero regimes.
    #[arg(long)]
    ell1: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    /// Long table with columns date, unit_id, cases, population.
    #[arg(long)]
    data: PathBuf,
    /// Edge list with columns unit_id_a, unit_id_b.
    #[arg(long)]
    adjacency: PathBuf,
    /// Last training date (YYYY-MM-DD), inclusive.
    #[arg(long)]
    train_end: String,
    #[arg(long, default_value_t = 7)]
    horizon: usize,
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model by EM.
    Fit(DataArgs),
    /// Parametric bootstrap goodness-of-fit test.
    Gof(DataArgs),
    /// Choose the number of regimes by AIC, BIC, ICL and sequential testing.
    Select(DataArgs),
    /// Simulate a built-in data-generating process.
    Simulate(SimArgs),
    /// Monte Carlo level and power of the test.
    PowerStudy(McArgs),
    /// Monte Carlo frequencies of the selected number of regimes.
    SelectionStudy(McArgs),
    /// Power as a function of the alternative mean and sample size.
    PowerCurve(McArgs),
    /// Scan, fit and predict a panel of spatial count series.
    Forecast(ForecastArgs),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DataConfig {
    family: FamilySpec,
    ell: usize,
    p: usize,
    ell_range: Vec<usize>,
    alpha: f64,
    em: EmConfig,
    gof: GofConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            family: FamilySpec::gaussian(),
            ell: 1,
            p: 0,
            ell_range: vec![1, 2, 3, 4],
            alpha: 0.05,
            em: EmConfig::default(),
            gof: GofConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SimConfig {
    dgp: DgpSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dgp: DgpSpec { model: DgpModel::M1, experiment: Experiment::Exp1, ell1: 1, n: 100, seed: 0 } }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ForecastConfig {
    scan: ScanConfig,
    data: PathBuf,
    adjacency: PathBuf,
    train_end: String,
    horizon: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { scan: ScanConfig::default(), data: PathBuf::new(), adjacency: PathBuf::new(), train_end: String::new(), horizon: 7 }
    }
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn set_workers(workers: Option<usize>) -> Result<()> {
    if let Some(w) = workers {
        if w == 0 {
            bail!("--workers must be positive");
        }
        // Read by rayon when its global pool starts.
        std::env::set_var("RAYON_NUM_THREADS", w.to_string());
    }
    Ok(())
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), files: vec![] })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.into());
        let path = self.dir.join(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.files.push(name.into());
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }
}

fn run_with_manifest(command: &str, config: &impl Serialize, dir: &Path, body: impl FnOnce(&mut Outputs) -> Result<()>) -> Result<()> {
    let (mut manifest, started) = RunManifest::new(command, config)?;
    let mut out = Outputs::new(dir)?;
    body(&mut out)?;
    manifest.outputs = out.files;
    manifest.finish(started, dir)?;
    Ok(())
}

fn data_config(a: &DataArgs) -> Result<DataConfig> {
    let mut cfg: DataConfig = load(a.common.config.as_deref())?;
    if let Some(f) = a.family {
        cfg.family = match f {
            FamilyArg::Gaussian => FamilySpec::gaussian(),
            FamilyArg::PoissonLog => FamilySpec::poisson(Link::LogLinear),
            FamilyArg::PoissonLinear => FamilySpec::poisson(Link::Linear),
        };
    }
    if a.zero_inflated {
        cfg.family.zero_inflated = true;
    }
    if let Some(v) = a.ell {
        cfg.ell = v;
    }
    if let Some(v) = a.p {
        cfg.p = v;
    }
    if let Some(v) = &a.ells {
        cfg.ell_range = v.clone();
    }
    if let Some(v) = a.bootstrap {
        cfg.gof.bootstrap = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(s) = a.common.seed {
        cfg.em.seed = s;
        cfg.gof.seed = s;
    }
    cfg.gof.em = cfg.em.clone();
    Ok(cfg)
}

fn read_series(path: &Path) -> Result<SeriesData> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(SeriesData::read_csv(f)?)
}

#[derive(Serialize)]
struct FitRow {
    ell: usize,
    p: usize,
    loglik: f64,
    iters: usize,
    converged: bool,
    n_params: usize,
    aic: f64,
    bic: f64,
    icl: f64,
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    loglik: f64,
}

fn fit(a: DataArgs) -> Result<()> {
    set_workers(a.common.workers)?;
    let cfg = data_config(&a)?;
    let data = read_series(&a.data)?;
    run_with_manifest("fit", &cfg, &a.common.out, |out| {
        let fit = em::em_fit(&cfg.family, &data, cfg.ell, cfg.p, &cfg.em)?;
        let ic = criteria::information_criteria(&fit, &data)?;
        out.write_text("model.json", &fit.model.to_json()?)?;
        let row = FitRow {
            ell: cfg.ell,
            p: cfg.p,
            loglik: fit.loglik,
            iters: fit.iters,
            converged: fit.converged,
            n_params: fit.n_params,
            aic: ic.aic,
            bic: ic.bic,
            icl: ic.icl,
        };
        mc::write_csv(out.create("fit.csv")?, &[row])?;
        let trace: Vec<TraceRow> =
            fit.loglik_trace.iter().enumerate().map(|(i, &l)| TraceRow { iteration: i + 1, loglik: l }).collect();
        mc::write_csv(out.create("loglik_trace.csv")?, &trace)?;
        Ok(())
    })
}

fn gof_test(a: DataArgs) -> Result<()> {
    set_workers(a.common.workers)?;
    let cfg = data_config(&a)?;
    let data = read_series(&a.data)?;
    run_with_manifest("gof", &cfg, &a.common.out, |out| {
        let report = gof::bootstrap_pvalue(&cfg.family, &data, cfg.ell, cfg.p, &cfg.gof)?;
        out.write_text("gof.json", &report.to_json()?)?;
        let mut w = csv::Writer::from_writer(out.create("gof.csv")?);
        w.write_record(["statistic", "ell", "p", "observed", "bootstrap", "p_value", "failed_replicates"])?;
        w.write_record([
            report.statistic.clone(),
            report.ell.to_string(),
            report.p.to_string(),
            report.observed.to_string(),
            report.bootstrap.to_string(),
            report.p_value.to_string(),
            report.failed_replicates.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    })
}

#[derive(Serialize)]
struct SelectionOut {
    method: String,
    selected_ell: Option<usize>,
    adequate: Option<bool>,
}

fn select(a: DataArgs) -> Result<()> {
    set_workers(a.common.workers)?;
    let cfg = data_config(&a)?;
    let data = read_series(&a.data)?;
    run_with_manifest("select", &cfg, &a.common.out, |out| {
        let table = criteria::criteria_table(&cfg.family, &data, &cfg.ell_range, cfg.p, &cfg.em);
        let ells: Vec<usize> = cfg.ell_range.iter().copied().filter(|&l| l >= cfg.family.min_ell()).collect();
        let gof_sel = criteria::select_by_gof(&cfg.family, &data, &ells, cfg.p, &cfg.gof, cfg.alpha);
        let mut rows: Vec<_> = table.into_iter().map(|(r, _)| r).collect();
        for r in &mut rows {
            r.gof_pvalue = gof_sel.pvalues.iter().find(|(l, _)| *l == r.ell).and_then(|(_, p)| *p);
        }
        criteria::write_csv(out.create("criteria.csv")?, &rows)?;
        let mut sel: Vec<SelectionOut> = [("aic", Criterion::Aic), ("bic", Criterion::Bic), ("icl", Criterion::Icl)]
            .into_iter()
            .map(|(name, c)| SelectionOut { method: name.into(), selected_ell: criteria::select_by_ic(&rows, c), adequate: None })
            .collect();
        sel.push(SelectionOut { method: "gof".into(), selected_ell: gof_sel.selected, adequate: Some(gof_sel.adequate) });
        mc::write_csv(out.create("selection.csv")?, &sel)?;
        Ok(())
    })
}

fn simulate(a: SimArgs) -> Result<()> {
    let mut cfg: SimConfig = load(a.common.config.as_deref())?;
    if let Some(m) = a.model {
        cfg.dgp.model = match m {
            ModelArg::M1 => DgpModel::M1,
            ModelArg::M2 => DgpModel::M2,
            ModelArg::M3 => DgpModel::M3,
            ModelArg::M4 => DgpModel::M4,
        };
    }
    if let Some(e) = a.experiment {
        cfg.dgp.experiment = match e {
            ExperimentArg::Exp1 => Experiment::Exp1,
            ExperimentArg::Exp2 => Experiment::Exp2,
        };
    }
    if let Some(v) = a.ell1 {
        cfg.dgp.ell1 = v;
    }
    if let Some(v) = a.n {
        cfg.dgp.n = v;
    }
    if let Some(s) = a.common.seed {
        cfg.dgp.seed = s;
    }
    run_with_manifest("simulate", &cfg, &a.common.out, |out| {
        let built = dgp::builtin_model(&cfg.dgp)?;
        let sim = built.simulate(cfg.dgp.n, cfg.dgp.seed)?;
        sim.write_csv(out.create("data.csv")?)?;
        out.write_text("model.json", &built.model.to_json()?)?;
        Ok(())
    })
}

fn scenario(a: &McArgs) -> Result<McScenario> {
    let mut sc: McScenario = load(a.common.config.as_deref())?;
    if let Some(v) = a.replications {
        sc.replications = v;
    }
    if let Some(v) = a.bootstrap {
        sc.bootstrap = v;
    }
    if let Some(v) = a.n {
        sc.dgp.n = v;
    }
    if let Some(v) = a.common.seed {
        sc.seed = v;
    }
    if a.common.workers.is_some() {
        sc.workers = a.common.workers;
    }
    sc.validate()?;
    Ok(sc)
}

fn power_study(a: McArgs) -> Result<()> {
    let sc = scenario(&a)?;
    run_with_manifest("power-study", &sc, &a.common.out, |out| {
        let study = mc::run_power_study(&sc)?;
        mc::write_csv(out.create("power.csv")?, &study.rows)?;
        mc::write_csv(out.create("power_replications.csv")?, &study.records)?;
        Ok(())
    })
}

#[derive(Serialize)]
struct CriteriaRecord {
    replication: usize,
    ell: usize,
    loglik: f64,
    n_params: usize,
    aic: f64,
    bic: f64,
    icl: f64,
}

fn selection_study(a: McArgs) -> Result<()> {
    let sc = scenario(&a)?;
    run_with_manifest("selection-study", &sc, &a.common.out, |out| {
        let study = mc::run_selection_study(&sc)?;
        mc::write_csv(out.create("selection.csv")?, &study.rows)?;
        mc::write_csv(out.create("selection_replications.csv")?, &study.records)?;
        let crit: Vec<CriteriaRecord> = study
            .criteria
            .iter()
            .map(|(k, r)| CriteriaRecord {
                replication: *k,
                ell: r.ell,
                loglik: r.loglik,
                n_params: r.n_params,
                aic: r.aic,
                bic: r.bic,
                icl: r.icl,
            })
            .collect();
        mc::write_csv(out.create("criteria_replications.csv")?, &crit)?;
        Ok(())
    })
}

fn power_curve(a: McArgs) -> Result<()> {
    let mut cfg: PowerCurveConfig = load(a.common.config.as_deref())?;
    if let Some(v) = a.replications {
        cfg.replications = v;
    }
    if let Some(v) = a.bootstrap {
        cfg.bootstrap = v;
    }
    if let Some(v) = a.n {
        cfg.n_grid = vec![v];
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    if a.common.workers.is_some() {
        cfg.workers = a.common.workers;
    }
    run_with_manifest("power-curve", &cfg, &a.common.out, |out| {
        let points = mc::power_curve(&cfg)?;
        mc::write_csv(out.create("power_curve.csv")?, &points)?;
        Ok(())
    })
}

fn run_forecast(a: ForecastArgs) -> Result<()> {
    set_workers(a.common.workers)?;
    let mut cfg: ForecastConfig = load(a.common.config.as_deref())?;
    cfg.data = a.data.clone();
    cfg.adjacency = a.adjacency.clone();
    cfg.train_end = a.train_end.clone();
    cfg.horizon = a.horizon;
    if let Some(v) = a.bootstrap {
        cfg.scan.gof.bootstrap = v;
    }
    if let Some(s) = a.common.seed {
        cfg.scan.gof.seed = s;
        cfg.scan.gof.em.seed = s;
    }
    let open = |p: &Path| File::open(p).with_context(|| format!("opening {}", p.display()));
    let panel = PanelData::from_csv(open(&cfg.data)?, open(&cfg.adjacency)?)?;
    let train_end = panel.date_index(&cfg.train_end)?;
    run_with_manifest("forecast", &cfg, &a.common.out, |out| {
        let rows = forecast::forecast_panel(&panel, train_end, cfg.horizon, &cfg.scan)?;
        forecast::write_scan_csv(out.create("scan.csv")?, &rows)?;
        forecast::write_scatter_csv(out.create("scatter.csv")?, &panel, train_end, &rows)?;
        Ok(())
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Fit(a) => fit(a),
        Command::Gof(a) => gof_test(a),
        Command::Select(a) => select(a),
        Command::Simulate(a) => simulate(a),
        Command::PowerStudy(a) => power_study(a),
        Command::SelectionStudy(a) => selection_study(a),
        Command::PowerCurve(a) => power_curve(a),
        Command::Forecast(a) => run_forecast(a),
    }
}

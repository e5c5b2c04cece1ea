use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use deconflow::autodiff::Tensor;
use deconflow::checkpoint::{load_checkpoint_for, save_checkpoint, TrainMetadata};
use deconflow::deconfound::{naive_slopes, ols, DoSampler, ResampleMode};
use deconflow::eval::{read_ledger, rmse_do, rmse_naive, run_sweep, write_plot_data, EvalReport, SweepConfig};
use deconflow::flow::Architecture;
use deconflow::gmm::FactorShape;
use deconflow::io::Table;
use deconflow::sim::{make_scenario, GroundTruthOracle, OracleSettings, ScenarioSpec, SimScenario};
use deconflow::tabular::{run_tabular, TabularConfig};
use deconflow::train::{fit, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{
    AdjustArgs, Command, EvalArgs, ReportArgs, SimulateArgs, SweepArgs, TabularArgs, TrainArgs, TrainFlags,
};
use crate::error::CliError;

/// Default worker count for `sweep` when neither the flag nor the config
/// sets one.
pub const WORKERS_ENV: &str = "DECONFLOW_WORKERS";

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Adjust(a) => adjust(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
        Command::Tabular(a) => tabular(a),
    }
}

/// What a run will do, printed before it starts.
#[derive(Serialize)]
struct Resolved<'a, T: Serialize> {
    command: &'a str,
    paths: BTreeMap<&'a str, String>,
    config: &'a T,
}

fn announce<T: Serialize>(command: &str, paths: &[(&str, Option<&Path>)], config: &T) -> Result<(), CliError> {
    let resolved = Resolved {
        command,
        paths: paths
            .iter()
            .filter_map(|(k, p)| p.map(|p| (*k, p.display().to_string())))
            .collect(),
        config,
    };
    let text = toml::to_string(&resolved).map_err(|e| CliError::Usage(format!("cannot render config: {e}")))?;
    println!("# resolved configuration\n{text}");
    Ok(())
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn parse_config<T: DeserializeOwned>(table: toml::Table, path: &Path) -> Result<T, CliError> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        Some(p) => parse_config(read_table(p)?, p),
        None => Ok(T::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("output directory {} does not exist", dir.display())))
    }
}

fn ensure_parent(file: &Path) -> Result<(), CliError> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn non_empty(names: Vec<String>) -> Vec<String> {
    names.into_iter().filter(|s| !s.is_empty()).collect()
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) -> Result<(), CliError> {
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = self.restarts {
            c.restarts = v;
        }
        if let Some(v) = self.val_fraction {
            c.val_fraction = v;
        }
        if self.linear {
            c.architecture = Architecture::Linear;
        } else if self.blocks.is_some() || self.hidden.is_some() {
            let (count, hidden) = match (&c.architecture, Architecture::default()) {
                (Architecture::Blocks { count, hidden }, _) => (*count, hidden.clone()),
                (Architecture::Linear, Architecture::Blocks { count, hidden }) => (count, hidden),
                (Architecture::Linear, Architecture::Linear) => unreachable!("the default has blocks"),
            };
            c.architecture = Architecture::Blocks {
                count: self.blocks.unwrap_or(count),
                hidden: self.hidden.clone().unwrap_or(hidden),
            };
        }
        if let Some(spec) = &self.tied {
            let shape = parse_shape(spec)?;
            c.factors = Some(shape);
            c.components = shape.components();
        }
        if let Some(v) = self.components {
            c.components = v;
        }
        Ok(())
    }
}

fn parse_shape(spec: &str) -> Result<FactorShape, CliError> {
    let bad = || CliError::Usage(format!("--tied expects KLxKQ such as 2x2, got {spec:?}"));
    let (l, q) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let k_l = l.trim().parse().map_err(|_| bad())?;
    let k_q = q.trim().parse().map_err(|_| bad())?;
    if k_l == 0 || k_q == 0 {
        return Err(bad());
    }
    Ok(FactorShape { k_l, k_q })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub k_l: usize,
    pub k_q: usize,
    pub beta: f64,
    pub target_mi: f64,
    pub linear: bool,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n: 1,
            k_l: 2,
            k_q: 2,
            beta: 1.0,
            target_mi: 0.3,
            linear: false,
            samples: 10_000,
            seed: 0,
        }
    }
}

fn cause_headers(n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("x{j}")).collect()
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut c: SimulateConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.n {
        c.n = v;
    }
    if let Some(v) = a.k_l {
        c.k_l = v;
    }
    if let Some(v) = a.k_q {
        c.k_q = v;
    }
    if let Some(v) = a.beta {
        c.beta = v;
    }
    if let Some(v) = a.mi {
        c.target_mi = v;
    }
    if a.linear {
        c.linear = true;
    }
    if let Some(v) = a.samples {
        c.samples = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    announce("simulate", &[("out", Some(&a.out))], &c)?;
    ensure_dir(&a.out)?;
    if c.samples == 0 {
        return Err(CliError::Usage("samples must be positive".into()));
    }

    let spec = ScenarioSpec {
        n: c.n,
        k_l: c.k_l,
        k_q: c.k_q,
        beta: c.beta,
        target_mi: c.target_mi,
        identity_tau: c.linear,
    };
    let scenario = make_scenario(&spec, c.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    rng.set_stream(1);
    let sim = scenario.simulate(c.samples, &mut rng);

    let mut headers = cause_headers(c.n);
    headers.push("y".into());
    Table::from_tensor(headers, &sim.data)?.write(&a.out.join("data.csv"))?;
    let mut labels = csv::Writer::from_path(a.out.join("labels.csv"))?;
    labels.write_record(["l", "q"])?;
    for (l, q) in &sim.labels {
        labels.write_record([l.to_string(), q.to_string()])?;
    }
    labels.flush()?;
    scenario.save(&a.out.join("scenario.json"))?;
    println!(
        "wrote {} rows; mutual information {:.4} nats",
        c.samples,
        scenario.joint.mutual_information()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut c: TrainConfig = load_config(a.config.as_deref())?;
    a.train.apply(&mut c)?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    announce("train", &[("data", Some(&a.data)), ("out", Some(&a.out))], &c)?;
    c.validate()?;
    ensure_dir(&a.out)?;
    let table = Table::read(&a.data)?;
    let data = table.to_tensor();

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let (model, log) = fit(&data, &c, &mut rng)?;
    let meta = TrainMetadata {
        final_val_nll: log.best_val_nll(),
        seed: c.seed,
        config: c.clone(),
    };
    save_checkpoint(&model, Some(&meta), &a.out.join("checkpoint.json"))?;
    log.write_csv(fs::File::create(a.out.join("trainlog.csv"))?)?;
    for r in &log.restarts {
        let mark = if r.restart == log.best_restart { " (best)" } else { "" };
        match &r.failure {
            Some(f) => println!("restart {}: failed: {f}", r.restart),
            None => println!(
                "restart {}: {} epochs, best validation NLL {:.6} at epoch {}{mark}",
                r.restart,
                r.epochs.len(),
                r.best_val_nll,
                r.best_epoch
            ),
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjustConfig {
    pub n_p: usize,
    pub mode: ResampleMode,
    pub seed: u64,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        AdjustConfig {
            n_p: 1000,
            mode: ResampleMode::WithReplacement,
            seed: 0,
        }
    }
}

fn first_columns(t: &Tensor, n: usize) -> Tensor {
    t.select_cols(&(0..n).collect::<Vec<_>>()).expect("enough columns")
}

fn adjust(a: AdjustArgs) -> Result<(), CliError> {
    let mut c: AdjustConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.n_p {
        c.n_p = v;
    }
    if let Some(m) = &a.mode {
        c.mode = serde_json::from_value(serde_json::Value::String(m.clone()))
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    announce(
        "adjust",
        &[
            ("checkpoint", Some(&a.checkpoint)),
            ("data", Some(&a.data)),
            ("queries", a.queries.as_deref()),
            ("out", Some(&a.out)),
            ("slopes", a.slopes.as_deref()),
        ],
        &c,
    )?;
    ensure_parent(&a.out)?;
    if let Some(p) = &a.slopes {
        ensure_parent(p)?;
    }

    let table = Table::read(&a.data)?;
    if table.headers().len() < 2 {
        return Err(CliError::Data("data needs at least one cause and the effect".into()));
    }
    let n = table.headers().len() - 1;
    let (model, _) = load_checkpoint_for(&a.checkpoint, n)?;
    let data = table.to_tensor();
    let queries = match &a.queries {
        Some(p) => {
            let q = Table::read(p)?;
            let width = q.headers().len();
            if width != n && width != n + 1 {
                return Err(CliError::Data(format!(
                    "queries {} have {width} columns, expected {n} causes (optionally followed by the effect)",
                    p.display()
                )));
            }
            first_columns(&q.to_tensor(), n)
        }
        None => first_columns(&data, n),
    };

    let sampler = DoSampler::new(&model, &data)?;
    let estimates = sampler.estimate_many(&queries, c.n_p, c.mode, c.seed)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header: Vec<String> = table.headers()[..n].to_vec();
    header.extend(["theta_hat", "mc_stderr", "n_p", "out_of_support"].map(String::from));
    w.write_record(&header)?;
    let mut outside = 0;
    for e in &estimates {
        let mut rec: Vec<String> = e.x.iter().copied().map(fmt_f64).collect();
        rec.push(fmt_f64(e.theta_hat));
        rec.push(fmt_f64(e.mc_stderr));
        rec.push(e.n_p.to_string());
        rec.push(u8::from(e.out_of_support).to_string());
        outside += usize::from(e.out_of_support);
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("wrote {} estimates", estimates.len());
    if outside > 0 {
        eprintln!("warning: {outside} queries lie outside the observed range of the causes and are flagged");
    }

    if let Some(path) = &a.slopes {
        let theta: Vec<f64> = estimates.iter().map(|e| e.theta_hat).collect();
        let adjusted = ols(&queries, &theta)?.slopes;
        let naive = naive_slopes(&first_columns(&data, n), &data.column(n))?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cause", "beta_adjusted", "beta_naive"])?;
        for j in 0..n {
            let cause = &table.headers()[j];
            w.write_record([cause.clone(), fmt_f64(adjusted[j]), fmt_f64(naive[j])])?;
            println!("{cause}: adjusted slope {:.6}, naive slope {:.6}", adjusted[j], naive[j]);
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub oracle_draws: usize,
    pub bandwidth: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            oracle_draws: OracleSettings::default().draws,
            bandwidth: None,
            seed: 0,
        }
    }
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut c: EvalConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.oracle_draws {
        c.oracle_draws = v;
    }
    if a.bandwidth.is_some() {
        c.bandwidth = a.bandwidth.clone();
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    announce(
        "eval",
        &[
            ("estimates", Some(&a.estimates)),
            ("scenario", Some(&a.scenario)),
            ("data", a.data.as_deref()),
            ("out", Some(&a.out)),
            ("points", a.points.as_deref()),
        ],
        &c,
    )?;
    ensure_parent(&a.out)?;
    if let Some(p) = &a.points {
        ensure_parent(p)?;
    }

    let scenario = SimScenario::load(&a.scenario)?;
    let n = scenario.n();
    let oracle = GroundTruthOracle::new(
        &scenario,
        OracleSettings {
            draws: c.oracle_draws,
            seed: c.seed,
        },
    )?;
    let est = Table::read(&a.estimates)?;
    if est.headers().len() < n + 1 {
        return Err(CliError::Data(format!(
            "estimates {} need {n} cause columns and theta_hat",
            a.estimates.display()
        )));
    }
    let x = first_columns(&est.to_tensor(), n);
    let theta = est.to_tensor().column(est.column_index("theta_hat")?);
    let truth = oracle.theta_star_batch(&x)?;
    let rmse = rmse_do(&theta, &truth, None)?;

    let naive = match &a.data {
        Some(p) => {
            let data = Table::read(p)?.to_tensor();
            if data.cols() != n + 1 {
                return Err(CliError::Data(format!(
                    "data {} has {} columns, the scenario has {n} causes",
                    p.display(),
                    data.cols()
                )));
            }
            let truth = oracle.theta_star_batch(&first_columns(&data, n))?;
            Some(rmse_naive(&data, &truth, c.bandwidth.clone())?)
        }
        None => None,
    };

    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header = vec!["queries", "rmse"];
    let mut rec = vec![theta.len().to_string(), fmt_f64(rmse)];
    if let Some(v) = naive {
        header.push("rmse_naive");
        rec.push(fmt_f64(v));
    }
    w.write_record(&header)?;
    w.write_record(&rec)?;
    w.flush()?;
    match naive {
        Some(v) => println!("rmse {rmse:.6} over {} queries; conditional-mean baseline {v:.6}", theta.len()),
        None => println!("rmse {rmse:.6} over {} queries", theta.len()),
    }

    if let Some(p) = &a.points {
        let mut w = csv::Writer::from_path(p)?;
        let mut header: Vec<String> = est.headers()[..n].to_vec();
        header.extend(["theta_hat", "theta_star"].map(String::from));
        w.write_record(&header)?;
        for i in 0..theta.len() {
            let mut rec: Vec<String> = x.row(i).iter().copied().map(fmt_f64).collect();
            rec.push(fmt_f64(theta[i]));
            rec.push(fmt_f64(truth[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn env_workers() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let table = read_table(&a.config)?;
    let in_file = table.contains_key("workers");
    let mut c: SweepConfig = parse_config(table, &a.config)?;
    if let Some(w) = a.workers {
        c.workers = w;
    } else if !in_file {
        if let Some(w) = env_workers()? {
            c.workers = w;
        }
    }
    if let Some(l) = &a.ledger {
        c.ledger = l.clone();
    }
    announce(
        "sweep",
        &[("config", Some(&a.config)), ("plots", a.plots.as_deref())],
        &c,
    )?;
    if let Some(p) = &a.plots {
        ensure_dir(p)?;
    }
    ensure_parent(&c.ledger)?;

    let outcome = run_sweep(&c)?;
    println!(
        "{} cells in the ledger, {} skipped as already present, {} failed in this run",
        outcome.reports.len(),
        outcome.skipped,
        outcome.failures.len()
    );
    if let Some(p) = &a.plots {
        write_plot_data(&outcome.reports, p)?;
    }
    if !outcome.failures.is_empty() {
        let list: Vec<String> = outcome
            .failures
            .iter()
            .map(|f| format!("{} seed {}: {}", f.id, f.seed, f.error))
            .collect();
        return Err(CliError::Numeric(format!("failed cells:\n  {}", list.join("\n  "))));
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-id rows of `(id, seeds, mean mi, median rmse, median naive rmse)`.
fn summarize(reports: &[EvalReport]) -> Vec<(String, usize, f64, f64, f64)> {
    let mut ids: Vec<&str> = Vec::new();
    for r in reports {
        if !ids.contains(&r.id.as_str()) {
            ids.push(&r.id);
        }
    }
    ids.into_iter()
        .map(|id| {
            let rows: Vec<&EvalReport> = reports.iter().filter(|r| r.id == id).collect();
            let k = rows.len();
            (
                id.to_string(),
                k,
                rows.iter().map(|r| r.mi).sum::<f64>() / k as f64,
                median(rows.iter().map(|r| r.rmse).collect()),
                median(rows.iter().map(|r| r.rmse_naive).collect()),
            )
        })
        .collect()
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    announce(
        "report",
        &[("ledger", Some(&a.ledger)), ("out", Some(&a.out))],
        &BTreeMap::<String, String>::new(),
    )?;
    ensure_dir(&a.out)?;
    if !a.ledger.exists() {
        return Err(CliError::Data(format!("ledger {} does not exist", a.ledger.display())));
    }
    let (reports, failures) = read_ledger(&a.ledger)?;
    write_plot_data(&reports, &a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("summary.csv"))?;
    w.write_record(["id", "seeds", "mean_mi", "median_rmse", "median_rmse_naive"])?;
    println!("{:<16} {:>5} {:>8} {:>12} {:>12}", "id", "seeds", "mi", "rmse", "naive");
    for (id, k, mi, rmse, naive) in summarize(&reports) {
        w.write_record([id.clone(), k.to_string(), fmt_f64(mi), fmt_f64(rmse), fmt_f64(naive)])?;
        println!("{id:<16} {k:>5} {mi:>8.4} {rmse:>12.6} {naive:>12.6}");
    }
    w.flush()?;
    for f in &failures {
        println!("failed: {} seed {}: {}", f.id, f.seed, f.error);
    }
    Ok(())
}

fn tabular(a: TabularArgs) -> Result<(), CliError> {
    let mut c: TabularConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.causes.clone() {
        c.causes = non_empty(v);
    }
    if let Some(v) = a.confounders.clone() {
        c.confounders = non_empty(v);
    }
    if let Some(v) = a.target.clone() {
        c.target = v;
    }
    if let Some(v) = a.ordinal.clone() {
        c.ordinal = Some(non_empty(v));
    }
    if let Some(v) = a.jitter_amplitude {
        c.jitter_amplitude = v;
    }
    if let Some(v) = a.jitter_seed {
        c.jitter_seed = v;
    }
    if let Some(v) = a.n_p {
        c.n_p = v;
    }
    if let Some(v) = a.seed {
        c.train.seed = v;
    }
    a.train.apply(&mut c.train)?;
    announce("tabular", &[("data", Some(&a.data)), ("out", Some(&a.out))], &c)?;
    if c.target.is_empty() {
        return Err(CliError::Usage("no target column given".into()));
    }
    if !(c.jitter_amplitude >= 0.0 && c.jitter_amplitude.is_finite()) {
        return Err(CliError::Usage("jitter_amplitude must be finite and non-negative".into()));
    }
    c.train.validate()?;
    ensure_parent(&a.out)?;
    if c.confounders.is_empty() {
        eprintln!("note: no confounder columns given; the controlled slope column is omitted");
    }

    let table = Table::read(&a.data)?;
    let report = run_tabular(&table, &c)?;
    report.write_csv(fs::File::create(&a.out)?)?;
    if !report.jittered.is_empty() {
        println!("jittered {} with U(-{a}, {a})", report.jittered.join(", "), a = c.jitter_amplitude);
    }
    for (j, cause) in report.causes.iter().enumerate() {
        let controlled = report
            .beta_controlled
            .as_ref()
            .map(|b| format!(", controlled {:.6}", b[j]))
            .unwrap_or_default();
        println!(
            "{cause}: naive {:.6}, adjusted {:.6}{controlled}",
            report.beta_naive[j], report.beta_adjusted[j]
        );
    }
    Ok(())
}

//! Multi-seed sweeps over simulated scenarios.
//!
//! Ledger columns, one row per `(id, seed)`:
//!
//! | column | meaning |
//! |---|---|
//! | `id`, `seed` | cell key |
//! | `n`, `k_l`, `k_q`, `target_mi` | scenario |
//! | `mi` | exact `MI(L, Q)` of the sampled joint, nats |
//! | `label_mi` | plug-in MI of the simulated labels |
//! | `beta` | true effect coefficient |
//! | `rmse`, `rmse_naive` | deconfounded and conditional-mean error |
//! | `beta_adjusted`, `beta_naive`, `beta_controlled` | slope vectors, `;`-separated |
//! | `queries`, `n_p` | evaluation points and resamples per point |
//! | `val_nll` | best validation NLL of the fit |
//! | `config` | training configuration as JSON |
//! | `status`, `error` | `ok` or `failed` with the message |
//!
//! Wall-clock time goes to a sibling `*.timing.csv` so ledger rows stay
//! reproducible.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mutual_information_labels, rmse_do, KernelRegression};
use crate::autodiff::Tensor;
use crate::deconfound::{controlled_slopes, naive_slopes, slopes_at, DoSampler, ResampleMode};
use crate::sim::{make_scenario, GroundTruthOracle, OracleSettings, ScenarioSpec};
use crate::train::{fit, TrainConfig};

pub const LEDGER_HEADER: [&str; 20] = [
    "id",
    "seed",
    "n",
    "k_l",
    "k_q",
    "target_mi",
    "mi",
    "label_mi",
    "beta",
    "rmse",
    "rmse_naive",
    "beta_adjusted",
    "beta_naive",
    "beta_controlled",
    "queries",
    "n_p",
    "val_nll",
    "config",
    "status",
    "error",
];

/// One scenario of a sweep; every seed in [`SweepConfig::seeds`] runs it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub id: String,
    pub n: usize,
    #[serde(default = "two")]
    pub k_l: usize,
    #[serde(default = "two")]
    pub k_q: usize,
    /// Drawn uniformly from `[-2, 2]` per seed when absent.
    #[serde(default)]
    pub beta: Option<f64>,
    pub target_mi: f64,
    pub samples: usize,
    #[serde(default)]
    pub identity_tau: bool,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub cells: Vec<CellSpec>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Resamples per interventional query.
    pub n_p: usize,
    /// Evaluate at a random subset of at most this many observed rows.
    pub max_queries: Option<usize>,
    /// Kernel bandwidth for the conditional-mean baseline (Silverman if absent).
    pub bandwidth: Option<Vec<f64>>,
    pub oracle_draws: usize,
    pub ledger: PathBuf,
    /// Cells run concurrently on this many threads.
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            cells: Vec::new(),
            seeds: vec![0],
            train: TrainConfig::default(),
            n_p: 1000,
            max_queries: None,
            bandwidth: None,
            oracle_draws: OracleSettings::default().draws,
            ledger: PathBuf::from("ledger.csv"),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id: String,
    pub seed: u64,
    pub n: usize,
    pub k_l: usize,
    pub k_q: usize,
    pub target_mi: f64,
    pub mi: f64,
    pub label_mi: f64,
    pub beta: f64,
    pub rmse: f64,
    pub rmse_naive: f64,
    pub beta_adjusted: Vec<f64>,
    pub beta_naive: Vec<f64>,
    pub beta_controlled: Option<Vec<f64>>,
    pub queries: usize,
    pub n_p: usize,
    pub val_nll: f64,
    pub config: String,
    /// Not persisted in the ledger; `None` for rows read back from it.
    pub runtime_secs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub id: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    /// Successful cells, in `(cell, seed)` order, including rows already in
    /// the ledger.
    pub reports: Vec<EvalReport>,
    pub failures: Vec<CellFailure>,
    /// Keys skipped because the ledger already had them.
    pub skipped: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("ledger {path}: {detail}")]
    Ledger { path: String, detail: String },
    #[error("invalid sweep: {0}")]
    Config(String),
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

fn split(s: &str) -> Result<Vec<f64>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|t| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect()
}

impl EvalReport {
    fn record(&self) -> Vec<String> {
        vec![
            self.id.clone(),
            self.seed.to_string(),
            self.n.to_string(),
            self.k_l.to_string(),
            self.k_q.to_string(),
            format!("{:?}", self.target_mi),
            format!("{:?}", self.mi),
            format!("{:?}", self.label_mi),
            format!("{:?}", self.beta),
            format!("{:?}", self.rmse),
            format!("{:?}", self.rmse_naive),
            join(&self.beta_adjusted),
            join(&self.beta_naive),
            self.beta_controlled.as_deref().map(join).unwrap_or_default(),
            self.queries.to_string(),
            self.n_p.to_string(),
            format!("{:?}", self.val_nll),
            self.config.clone(),
            "ok".into(),
            String::new(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self, String> {
        let f = |i: usize| r[i].parse::<f64>().map_err(|e| format!("{}: {e}", LEDGER_HEADER[i]));
        let u = |i: usize| r[i].parse::<usize>().map_err(|e| format!("{}: {e}", LEDGER_HEADER[i]));
        Ok(EvalReport {
            id: r[0].to_string(),
            seed: r[1].parse().map_err(|e| format!("seed: {e}"))?,
            n: u(2)?,
            k_l: u(3)?,
            k_q: u(4)?,
            target_mi: f(5)?,
            mi: f(6)?,
            label_mi: f(7)?,
            beta: f(8)?,
            rmse: f(9)?,
            rmse_naive: f(10)?,
            beta_adjusted: split(&r[11])?,
            beta_naive: split(&r[12])?,
            beta_controlled: if r[13].is_empty() { None } else { Some(split(&r[13])?) },
            queries: u(14)?,
            n_p: u(15)?,
            val_nll: f(16)?,
            config: r[17].to_string(),
            runtime_secs: None,
        })
    }
}

fn failure_record(id: &str, seed: u64, cell: &CellSpec, config: &str, error: &str) -> Vec<String> {
    let mut rec = vec![String::new(); LEDGER_HEADER.len()];
    rec[0] = id.to_string();
    rec[1] = seed.to_string();
    rec[2] = cell.n.to_string();
    rec[3] = cell.k_l.to_string();
    rec[4] = cell.k_q.to_string();
    rec[5] = format!("{:?}", cell.target_mi);
    rec[17] = config.to_string();
    rec[18] = "failed".into();
    rec[19] = error.to_string();
    rec
}

/// Appends rows to a CSV file, writing the header when the file is new.
struct Appender {
    path: PathBuf,
    header: Vec<String>,
    lock: Mutex<()>,
}

impl Appender {
    fn new(path: PathBuf, header: Vec<String>) -> Self {
        Appender {
            path,
            header,
            lock: Mutex::new(()),
        }
    }

    fn append(&self, record: &[String]) -> Result<(), SweepError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let err = |e: &dyn std::fmt::Display| SweepError::Ledger {
            path: self.path.display().to_string(),
            detail: e.to_string(),
        };
        let fresh = fs::metadata(&self.path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(|e| err(&e))?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(&self.header).map_err(|e| err(&e))?;
        }
        w.write_record(record).map_err(|e| err(&e))?;
        w.flush().map_err(|e| err(&e))?;
        Ok(())
    }
}

fn ledger_header() -> Vec<String> {
    LEDGER_HEADER.iter().copied().map(String::from).collect()
}

/// Rows already in a ledger, keyed by `(id, seed)`.
pub fn read_ledger(path: &Path) -> Result<(Vec<EvalReport>, Vec<CellFailure>), SweepError> {
    let err = |detail: String| SweepError::Ledger {
        path: path.display().to_string(),
        detail,
    };
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    if !path.exists() {
        return Ok((reports, failures));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.iter().ne(ledger_header().iter().map(String::as_str)) {
        return Err(err("header does not match the ledger schema".into()));
    }
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if &rec[18] == "ok" {
            reports.push(EvalReport::from_record(&rec).map_err(|e| err(format!("row {}: {e}", i + 2)))?);
        } else {
            failures.push(CellFailure {
                id: rec[0].to_string(),
                seed: rec[1].parse().map_err(|e| err(format!("row {}: seed: {e}", i + 2)))?,
                error: rec[19].to_string(),
            });
        }
    }
    Ok((reports, failures))
}

fn effect_beta(cell: &CellSpec, seed: u64) -> f64 {
    cell.beta.unwrap_or_else(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        rng.random_range(-2.0..=2.0)
    })
}

/// Simulate, fit, estimate at observed causes and score one `(cell, seed)`.
pub fn run_cell(cell: &CellSpec, seed: u64, config: &SweepConfig) -> Result<EvalReport, String> {
    let start = Instant::now();
    let beta = effect_beta(cell, seed);
    let spec = ScenarioSpec {
        n: cell.n,
        k_l: cell.k_l,
        k_q: cell.k_q,
        beta,
        target_mi: cell.target_mi,
        identity_tau: cell.identity_tau,
    };
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let scenario = make_scenario(&spec, seed).map_err(|e| e.to_string())?;
    let sim = scenario.simulate(cell.samples, &mut stream(1));
    let n = cell.n;
    let cause_idx: Vec<usize> = (0..n).collect();
    let causes = sim.data.select_cols(&cause_idx).map_err(|e| e.to_string())?;
    let y = sim.data.column(n);

    let mut train = config.train.clone();
    train.seed = seed;
    let (model, log) = fit(&sim.data, &train, &mut stream(2)).map_err(|e| e.to_string())?;

    let query_rows: Vec<usize> = match config.max_queries {
        Some(m) if m < cell.samples => {
            let mut idx = index::sample(&mut stream(3), cell.samples, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..cell.samples).collect(),
    };
    let queries = causes.select_rows(&query_rows).map_err(|e| e.to_string())?;

    let oracle = GroundTruthOracle::new(
        &scenario,
        OracleSettings {
            draws: config.oracle_draws,
            seed,
        },
    )
    .map_err(|e| e.to_string())?;
    let truth = oracle.theta_star_batch(&queries).map_err(|e| e.to_string())?;

    let sampler = DoSampler::new(&model, &sim.data).map_err(|e| e.to_string())?;
    let (adjusted, estimates) = slopes_at(
        &sampler,
        &queries,
        config.n_p,
        ResampleMode::WithReplacement,
        seed ^ 0xD0D0_D0D0_D0D0_D0D0,
    )
    .map_err(|e| e.to_string())?;
    let theta: Vec<f64> = estimates.iter().map(|e| e.theta_hat).collect();
    let rmse = rmse_do(&theta, &truth, None).map_err(|e| e.to_string())?;

    let kr = KernelRegression::new(causes.clone(), y.clone(), config.bandwidth.clone()).map_err(|e| e.to_string())?;
    let cond: Vec<f64> = kr.predict_many(&queries).into_iter().map(|e| e.mean).collect();
    let rmse_naive = rmse_do(&cond, &truth, None).map_err(|e| e.to_string())?;

    let labels: Vec<f64> = sim.labels.iter().flat_map(|&(l, q)| [l as f64, q as f64]).collect();
    let labels = Tensor::from_vec(cell.samples, 2, labels).map_err(|e| e.to_string())?;
    let beta_naive = naive_slopes(&causes, &y).map_err(|e| e.to_string())?;
    let beta_controlled = controlled_slopes(&causes, &labels, &y).ok();

    Ok(EvalReport {
        id: cell.id.clone(),
        seed,
        n,
        k_l: cell.k_l,
        k_q: cell.k_q,
        target_mi: cell.target_mi,
        mi: scenario.joint.mutual_information(),
        label_mi: mutual_information_labels(&sim.labels),
        beta,
        rmse,
        rmse_naive,
        beta_adjusted: adjusted.slopes,
        beta_naive,
        beta_controlled,
        queries: query_rows.len(),
        n_p: config.n_p,
        val_nll: log.best_val_nll(),
        config: serde_json::to_string(&train).expect("config serializes"),
        runtime_secs: Some(start.elapsed().as_secs_f64()),
    })
}

fn timing_path(ledger: &Path) -> PathBuf {
    let stem = ledger.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ledger.with_file_name(format!("{stem}.timing.csv"))
}

/// Runs every `(cell, seed)` not yet in the ledger and appends its row.
///
/// A cell that fails is recorded with its error and does not stop the
/// sweep. Rerunning with the same ledger skips every key already present,
/// failed ones included.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutcome, SweepError> {
    if config.workers == 0 || config.n_p == 0 {
        return Err(SweepError::Config("workers and n_p must be positive".into()));
    }
    let mut ids = HashSet::new();
    if let Some(dup) = config.cells.iter().find(|c| !ids.insert(c.id.as_str())) {
        return Err(SweepError::Config(format!("duplicate cell id {:?}", dup.id)));
    }
    config.train.validate().map_err(|e| SweepError::Config(e.to_string()))?;

    let (prior, prior_failures) = read_ledger(&config.ledger)?;
    let done: HashSet<(String, u64)> = prior
        .iter()
        .map(|r| (r.id.clone(), r.seed))
        .chain(prior_failures.iter().map(|f| (f.id.clone(), f.seed)))
        .collect();
    let jobs: Vec<(&CellSpec, u64)> = config
        .cells
        .iter()
        .flat_map(|c| config.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pending: Vec<(&CellSpec, u64)> = jobs
        .iter()
        .copied()
        .filter(|(c, s)| !done.contains(&(c.id.clone(), *s)))
        .collect();

    let ledger = Appender::new(config.ledger.clone(), ledger_header());
    let timing = Appender::new(
        timing_path(&config.ledger),
        ["id", "seed", "runtime_secs"].map(String::from).to_vec(),
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| SweepError::Config(e.to_string()))?;
    let config_echo = serde_json::to_string(&config.train).expect("config serializes");
    let fresh: Vec<Result<Result<EvalReport, CellFailure>, SweepError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&(cell, seed)| {
                log::info!("sweep cell {} seed {seed}", cell.id);
                match run_cell(cell, seed, config) {
                    Ok(report) => {
                        ledger.append(&report.record())?;
                        if let Some(t) = report.runtime_secs {
                            timing.append(&[cell.id.clone(), seed.to_string(), format!("{t:.3}")])?;
                        }
                        Ok(Ok(report))
                    }
                    Err(error) => {
                        log::warn!("sweep cell {} seed {seed} failed: {error}", cell.id);
                        ledger.append(&failure_record(&cell.id, seed, cell, &config_echo, &error))?;
                        Ok(Err(CellFailure {
                            id: cell.id.clone(),
                            seed,
                            error,
                        }))
                    }
                }
            })
            .collect()
    });

    let mut outcome = SweepOutcome {
        skipped: jobs.len() - pending.len(),
        ..SweepOutcome::default()
    };
    let mut new_reports = Vec::new();
    for r in fresh {
        match r? {
            Ok(rep) => new_reports.push(rep),
            Err(f) => outcome.failures.push(f),
        }
    }
    for (cell, seed) in jobs {
        let key = |r: &&EvalReport| r.id == cell.id && r.seed == seed;
        if let Some(r) = new_reports.iter().find(key).or_else(|| prior.iter().find(key)) {
            outcome.reports.push(r.clone());
        }
        if let Some(f) = prior_failures.iter().find(|f| f.id == cell.id && f.seed == seed) {
            outcome.failures.push(f.clone());
        }
    }
    Ok(outcome)
}

/// Writes `mi_vs_rmse.csv` and `slopes.csv` for external plotting.
pub fn write_plot_data(reports: &[EvalReport], dir: &Path) -> std::io::Result<()> {
    let mut mi = csv::Writer::from_path(dir.join("mi_vs_rmse.csv"))?;
    mi.write_record(["id", "seed", "mi", "rmse", "rmse_naive"])?;
    for r in reports {
        mi.write_record([
            r.id.clone(),
            r.seed.to_string(),
            format!("{:?}", r.mi),
            format!("{:?}", r.rmse),
            format!("{:?}", r.rmse_naive),
        ])?;
    }
    mi.flush()?;
    let mut sl = csv::Writer::from_path(dir.join("slopes.csv"))?;
    sl.write_record(["id", "seed", "coordinate", "beta", "adjusted", "naive", "controlled"])?;
    for r in reports {
        for j in 0..r.beta_adjusted.len() {
            let controlled = r
                .beta_controlled
                .as_ref()
                .map(|c| format!("{:?}", c[j]))
                .unwrap_or_default();
            sl.write_record([
                r.id.clone(),
                r.seed.to_string(),
                j.to_string(),
                format!("{:?}", r.beta),
                format!("{:?}", r.beta_adjusted[j]),
                format!("{:?}", r.beta_naive[j]),
                controlled,
            ])?;
        }
    }
    sl.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Architecture;

    fn quick() -> SweepConfig {
        SweepConfig {
            cells: vec![CellSpec {
                id: "lin".into(),
                n: 1,
                k_l: 2,
                k_q: 2,
                beta: Some(1.0),
                target_mi: 0.3,
                samples: 600,
                identity_tau: true,
            }],
            seeds: vec![3],
            train: TrainConfig {
                architecture: Architecture::Linear,
                components: 2,
                max_epochs: 15,
                restarts: 1,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            n_p: 50,
            max_queries: Some(40),
            ..SweepConfig::default()
        }
    }

    #[test]
    fn rerun_is_idempotent_and_rows_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick();
        cfg.ledger = dir.path().join("ledger.csv");
        let first = run_sweep(&cfg).unwrap();
        assert_eq!(first.reports.len(), 1);
        assert!(first.reports[0].rmse >= 0.0 && first.reports[0].rmse_naive >= 0.0);
        let text = fs::read_to_string(&cfg.ledger).unwrap();
        let second = run_sweep(&cfg).unwrap();
        assert_eq!(second.skipped, 1);
        assert_eq!(fs::read_to_string(&cfg.ledger).unwrap(), text);
        let mut a = first.reports[0].clone();
        a.runtime_secs = None;
        assert_eq!(second.reports[0], a);

        let other = dir.path().join("again.csv");
        cfg.ledger = other.clone();
        run_sweep(&cfg).unwrap();
        let body = |t: &str| t.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert_eq!(body(&fs::read_to_string(&other).unwrap()), body(&text));
    }

    #[test]
    fn failures_are_recorded_and_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick();
        cfg.ledger = dir.path().join("ledger.csv");
        let mut bad = cfg.cells[0].clone();
        bad.id = "bad".into();
        bad.target_mi = 5.0;
        cfg.cells.push(bad);
        let out = run_sweep(&cfg).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.failures.len(), 1);
        let (_, failures) = read_ledger(&cfg.ledger).unwrap();
        assert_eq!(failures[0].id, "bad");
        assert!(failures[0].error.contains("out of reach"));
    }

    #[test]
    fn plot_data_has_one_row_per_coordinate() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick();
        cfg.ledger = dir.path().join("ledger.csv");
        let out = run_sweep(&cfg).unwrap();
        write_plot_data(&out.reports, dir.path()).unwrap();
        let slopes = fs::read_to_string(dir.path().join("slopes.csv")).unwrap();
        assert_eq!(slopes.lines().count(), 2);
        let mi = fs::read_to_string(dir.path().join("mi_vs_rmse.csv")).unwrap();
        assert!(mi.starts_with("id,seed,mi,rmse,rmse_naive"));
    }

    #[test]
    fn config_reads_from_toml() {
        let cfg: SweepConfig = toml::from_str(
            r#"
            seeds = [1, 2]
            n_p = 200
            ledger = "out.csv"
            [train]
            max_epochs = 5
            [[cells]]
            id = "a"
            n = 5
            target_mi = 0.3
            samples = 5000
            "#,
        )
        .unwrap();
        assert_eq!(cfg.cells[0].k_l, 2);
        assert_eq!(cfg.train.max_epochs, 5);
        assert_eq!(cfg.workers, 1);
    }
}

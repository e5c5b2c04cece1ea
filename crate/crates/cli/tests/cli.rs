use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deconflow::checkpoint::load_checkpoint;
use deconflow::flow::extract_linear_slope;
use deconflow::io::Table;
use deconflow::sim::tabular_standin;
use tempfile::TempDir;

fn deconflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deconflow"))
        .args(args)
        .env_remove("DECONFLOW_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate_linear(dir: &Path, seed: &str) -> Output {
    deconflow(&[
        "simulate", "--n", "1", "--linear", "--beta", "1.5", "--samples", "10000", "--seed", seed, "--out", p(dir),
    ])
}

#[test]
fn simulate_writes_data_and_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let out = simulate_linear(a.path(), "7");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("# resolved configuration\n"));
    let data = Table::read(&a.path().join("data.csv")).unwrap();
    assert_eq!(data.len(), 10_000);
    assert_eq!(data.headers(), ["x1", "y"]);
    assert_eq!(code(&simulate_linear(b.path(), "7")), 0);
    for f in ["data.csv", "labels.csv", "scenario.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_output_directory_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope");
    let out = simulate_linear(&missing, "1");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("does not exist"));
    assert!(!missing.exists());
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    assert_eq!(code(&deconflow(&["simulate", "--bogus"])), 1);
    assert_eq!(code(&deconflow(&["frobnicate"])), 1);
    assert_eq!(code(&deconflow(&["--help"])), 0);
    let dir = TempDir::new().unwrap();
    let out = deconflow(&["simulate", "--out", p(dir.path()), "--mi", "5"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn train_then_adjust_recovers_a_linear_effect() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&simulate_linear(d, "7")), 0);
    let data = d.join("data.csv");
    let out = deconflow(&["train", "--data", p(&data), "--out", p(d), "--linear", "--restarts", "4", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let (model, meta) = load_checkpoint(&d.join("checkpoint.json")).unwrap();
    let slope = extract_linear_slope(&model).unwrap();
    assert!(slope.is_finite());
    assert_eq!(meta.unwrap().seed, 3);
    let log = fs::read_to_string(d.join("trainlog.csv")).unwrap();
    let mut restarts: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    restarts.dedup();
    assert_eq!(restarts, ["0", "1", "2", "3"]);
    let best: Vec<&str> = log
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",1"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert!(!best.is_empty() && best.iter().all(|r| *r == best[0]));

    let est = d.join("do.csv");
    let slopes = d.join("slopes.csv");
    let out = deconflow(&[
        "adjust", "--checkpoint", p(&d.join("checkpoint.json")), "--data", p(&data), "--out", p(&est), "--slopes",
        p(&slopes), "--n-p", "200",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(Table::read(&est).unwrap().len(), 10_000);
    let s = Table::read(&slopes);
    // the cause column is a string, so read the slope by hand
    assert!(s.is_err());
    let text = fs::read_to_string(&slopes).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "x1");
    let adjusted: f64 = row[1].parse().unwrap();
    assert!((adjusted - 1.5).abs() <= 0.05 * 1.5, "adjusted slope {adjusted}");
}

#[test]
fn malformed_csv_names_row_and_column() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "x1,y\n1.0,2.0\n3.0,oops\n").unwrap();
    let out = deconflow(&["train", "--data", p(&data), "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("row 3") && err.contains("\"y\""), "{err}");
}

fn quick_linear_fit(d: &Path) {
    assert_eq!(
        code(&deconflow(&[
            "simulate", "--n", "1", "--linear", "--samples", "2000", "--seed", "2", "--out", p(d),
        ])),
        0
    );
    let out = deconflow(&[
        "train", "--data", p(&d.join("data.csv")), "--out", p(d), "--linear", "--restarts", "1", "--epochs", "20",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn queries_outside_the_support_are_flagged() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    quick_linear_fit(d);
    let queries = d.join("q.csv");
    fs::write(&queries, "x1\n2.0\n100.0\n").unwrap();
    let est = d.join("do.csv");
    let out = deconflow(&[
        "adjust", "--checkpoint", p(&d.join("checkpoint.json")), "--data", p(&d.join("data.csv")), "--queries",
        p(&queries), "--out", p(&est), "--n-p", "50",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("outside the observed range"));
    let t = Table::read(&est).unwrap();
    assert_eq!(t.headers(), ["x1", "theta_hat", "mc_stderr", "n_p", "out_of_support"]);
    let flag = t.column_index("out_of_support").unwrap();
    assert_eq!(t.rows()[1][flag], 1.0);

    // one query cannot support a regression
    let one = d.join("one.csv");
    fs::write(&one, "x1\n2.0\n").unwrap();
    let out = deconflow(&[
        "adjust", "--checkpoint", p(&d.join("checkpoint.json")), "--data", p(&d.join("data.csv")), "--queries",
        p(&one), "--out", p(&est), "--slopes", p(&d.join("s.csv")), "--n-p", "10",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn eval_of_perfect_estimates_is_zero() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    quick_linear_fit(d);
    let est = d.join("do.csv");
    let out = deconflow(&[
        "adjust", "--checkpoint", p(&d.join("checkpoint.json")), "--data", p(&d.join("data.csv")), "--out", p(&est),
        "--n-p", "20",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let points = d.join("points.csv");
    let out = deconflow(&[
        "eval", "--estimates", p(&est), "--scenario", p(&d.join("scenario.json")), "--data", p(&d.join("data.csv")),
        "--out", p(&d.join("report.csv")), "--points", p(&points), "--oracle-draws", "2000",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = Table::read(&d.join("report.csv")).unwrap();
    assert_eq!(report.headers(), ["queries", "rmse", "rmse_naive"]);
    assert!(report.rows()[0][1] > 0.0);

    let pts = Table::read(&points).unwrap();
    let star = pts.column_index("theta_star").unwrap();
    let perfect: Vec<Vec<f64>> = pts.rows().iter().map(|r| vec![r[0], r[star]]).collect();
    let perfect = Table::new(vec!["x1".into(), "theta_hat".into()], perfect).unwrap();
    let perfect_path = d.join("perfect.csv");
    perfect.write(&perfect_path).unwrap();
    let out = deconflow(&[
        "eval", "--estimates", p(&perfect_path), "--scenario", p(&d.join("scenario.json")), "--out",
        p(&d.join("perfect_report.csv")), "--oracle-draws", "2000",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = Table::read(&d.join("perfect_report.csv")).unwrap();
    assert_eq!(report.rows()[0][1], 0.0);
}

const MINI_SWEEP: &str = r#"
seeds = [0, 1]
n_p = 20
max_queries = 50
ledger = "LEDGER"

[train]
max_epochs = 3
restarts = 1
architecture = { kind = "linear" }

[[cells]]
id = "low"
n = 1
target_mi = 0.1
samples = 300
identity_tau = true

[[cells]]
id = "high"
n = 1
target_mi = 0.5
samples = 300
identity_tau = true
"#;

#[test]
fn sweep_is_idempotent_and_reports() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let ledger = d.join("ledger.csv");
    let config = d.join("sweep.toml");
    fs::write(&config, MINI_SWEEP.replace("LEDGER", p(&ledger))).unwrap();

    let out = Command::new(env!("CARGO_BIN_EXE_deconflow"))
        .args(["sweep", "--config", p(&config), "--plots", p(d)])
        .env("DECONFLOW_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("workers = 2"));
    let first = fs::read(&ledger).unwrap();
    assert_eq!(fs::read_to_string(&ledger).unwrap().lines().count(), 5);
    assert!(d.join("mi_vs_rmse.csv").exists());

    let out = deconflow(&["sweep", "--config", p(&config), "--workers", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("4 skipped"));
    assert_eq!(fs::read(&ledger).unwrap(), first);

    let report_dir = d.join("report");
    fs::create_dir(&report_dir).unwrap();
    let out = deconflow(&["report", "--ledger", p(&ledger), "--out", p(&report_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = fs::read_to_string(report_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().any(|l| l.starts_with("low,2,")), "{summary}");
    assert!(summary.lines().any(|l| l.starts_with("high,2,")), "{summary}");
}

#[test]
fn tabular_omits_controlled_slopes_without_confounders_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let t = tabular_standin(600, 4);
    let data = d.join("records.csv");
    Table::new(t.headers, t.rows).unwrap().write(&data).unwrap();
    let run = |out: &Path, confounders: &str| {
        deconflow(&[
            "tabular", "--data", p(&data), "--out", p(out), "--causes", "mother_age,gestation", "--confounders",
            confounders, "--target", "birth_weight", "--epochs", "5", "--restarts", "1", "--n-p", "50",
            "--jitter-seed", "11",
        ])
    };
    let a = d.join("a.csv");
    let out = run(&a, "");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("controlled slope column is omitted"));
    assert!(fs::read_to_string(&a).unwrap().starts_with("cause,beta_naive,beta_adjusted\n"));

    let b = d.join("b.csv");
    let c = d.join("c.csv");
    assert_eq!(code(&run(&b, "v1,v2")), 0);
    assert_eq!(code(&run(&c, "v1,v2")), 0);
    let text = fs::read_to_string(&b).unwrap();
    assert!(text.starts_with("cause,beta_naive,beta_adjusted,beta_controlled\n"));
    assert_eq!(text, fs::read_to_string(&c).unwrap());

    let out = deconflow(&[
        "tabular", "--data", p(&data), "--out", p(&a), "--causes", "nope", "--target", "birth_weight",
    ]);
    assert_eq!(code(&out), 2);
}

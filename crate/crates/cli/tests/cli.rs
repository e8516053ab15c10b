use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use randset::dynamics::read_trajectory;
use randset::harness::{
    load_config, read_records, run_trials, summarize, trajectory, Experiment, SummaryReport, CONFIG_KEYS,
};

const SMALL: &str = r#"{
    "master_seed": 9,
    "distribution": {"kind": "gaussian_mixture", "means": [[-1.0, 0.0], [1.0, 0.0]],
                     "scale": 1.0, "class_priors": [0.5, 0.5]},
    "population_atoms": 128,
    "loss": {"kind": "clipped_logistic", "bound": 1.0, "margin": 0.5, "input_radius": 3.0},
    "n": 16,
    "dynamics": {"iterations": 8, "eta": 0.05, "beta": 10.0},
    "bounds": [{"formula": "sgld_upper", "zeta": 0.05},
               {"formula": "rademacher_lower", "zeta": 0.05}],
    "trials": 5,
    "replicates": 3,
    "sign_draws": 20
}"#;

fn randset(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_randset"))
        .args(args)
        .env_remove("RANDSET_THREADS")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_config_key() {
    let out = randset(&["--help"]);
    assert!(out.status.success());
    let help = text(&out.stdout);
    for (key, ty, default, _) in CONFIG_KEYS {
        let line = help.lines().find(|l| l.split_whitespace().next() == Some(key));
        let line = line.unwrap_or_else(|| panic!("{key} missing from --help"));
        assert!(line.contains(ty) && line.contains(default), "{line}");
    }
}

#[test]
fn oracle_suite_passes() {
    let out = randset(&["oracle-suite", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<String> = text(&out.stdout).lines().map(String::from).collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l.contains(" PASS ")));
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let out = randset(&["sgld-bound", "--config", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("/definitely/not/here.json"));
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_2() {
    let out = randset(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("master_seed"));
    assert_eq!(randset(&["oracle-suite"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(randset(&["sgld-bound", "--config", &cfg, "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(randset(&["sgld-bound", "--config", &cfg, "--set", "trials"]).status.code(), Some(2));
    let out = randset(&["cld-bound", "--config", &cfg, "--set", "pipeline=sgld"]);
    assert_eq!(out.status.code(), Some(2));
    let no_seed = dir.path().join("noseed.json");
    std::fs::write(&no_seed, SMALL.replace("\"master_seed\": 9,", "")).unwrap();
    let out = randset(&["sgld-bound", "--config", no_seed.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("master_seed"));
    let out = Command::new(env!("CARGO_BIN_EXE_randset"))
        .args(["sgld-bound", "--config", &cfg])
        .env("RANDSET_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_report_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    let out = randset(&["report", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("no records"));
}

#[test]
fn sgld_bound_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let rec_path = dir.path().join("out.jsonl");
    let sum_path = dir.path().join("summary.json");
    let traj_path = dir.path().join("traj.txt");
    let out = randset(&[
        "sgld-bound",
        "--config",
        &cfg_path,
        "--set",
        "dynamics.beta=12",
        "-o",
        rec_path.to_str().unwrap(),
        "--summary",
        sum_path.to_str().unwrap(),
        "--dump-traj",
        traj_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("coverage"));

    let cfg = load_config(Path::new(&cfg_path), &["dynamics.beta=12".into()]).unwrap();
    let direct = run_trials(&cfg).unwrap();
    let from_cli = read_records(&rec_path).unwrap();
    assert_eq!(direct.len(), from_cli.len());
    assert!(direct.iter().zip(&from_cli).all(|(a, b)| a.same_outcome(b)));

    let s: SummaryReport = serde_json::from_str(&std::fs::read_to_string(&sum_path).unwrap()).unwrap();
    let want = summarize(&direct, 0.05).unwrap();
    assert_eq!(serde_json::to_value(&s).unwrap(), serde_json::to_value(&want).unwrap());

    let dumped = read_trajectory::<f64, _>(BufReader::new(std::fs::File::open(&traj_path).unwrap())).unwrap();
    let again = trajectory(&Experiment::new(cfg).unwrap(), 0, 0).unwrap();
    assert_eq!(dumped.weights(), again.weights());
}

#[test]
fn report_writes_summary_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let rec_path = dir.path().join("out.jsonl");
    assert!(randset(&["sgld-bound", "--config", &cfg_path, "-o", rec_path.to_str().unwrap()]).status.success());
    let plots = dir.path().join("plots");
    let sum_path = dir.path().join("s.json");
    let out = randset(&[
        "report",
        rec_path.to_str().unwrap(),
        "--plots",
        plots.to_str().unwrap(),
        "-o",
        sum_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["bound-vs-gap.csv", "dim-fit.csv", "term-breakdown.csv"] {
        assert!(plots.join(name).exists(), "{name}");
    }
    let rows = std::fs::read_to_string(plots.join("bound-vs-gap.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5 * 2);
    let s: SummaryReport = serde_json::from_str(&std::fs::read_to_string(&sum_path).unwrap()).unwrap();
    assert_eq!(s.records_total, 5);
}

#[test]
fn divergent_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = randset(&[
        "sgld-bound",
        "--config",
        &cfg,
        "--set",
        "dynamics.beta=5e-324",
        "--set",
        "dynamics.eta=1e10",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("flagged"));
}

#[test]
fn zero_trials_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = randset(&["sgld-bound", "--config", &cfg, "--set", "trials=0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("no records"));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["sgld.json", "cld.json", "fractal.json"] {
        load_config(&root.join(name), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

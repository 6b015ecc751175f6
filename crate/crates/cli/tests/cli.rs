use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paneldml"))
        .args(args)
        .current_dir(crate_dir())
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn toy_estimate_matches_golden_file() {
    let o = run(&["estimate", "--config", "configs/toy_estimate.conf"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let golden = std::fs::read_to_string(crate_dir().join("tests/golden/toy_estimate.json")).unwrap();
    assert_eq!(stdout(&o), golden);
}

#[test]
fn config_path_is_independent_of_working_directory() {
    let config = crate_dir().join("configs/toy_estimate.conf");
    let o = Command::new(env!("CARGO_BIN_EXE_paneldml"))
        .args(["estimate", "--config", config.to_str().unwrap()])
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let o = run(&["estimate", "--config", "configs/toy_estimate.conf", "frobnicate=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`frobnicate`"));
    assert!(o.stdout.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "n_units = 10\nbogus_key = 1\n").unwrap();
    let o = run(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`bogus_key`"));
}

#[test]
fn missing_file_names_the_path() {
    let o = run(&["estimate", "data=no/such/file.csv", "covariates=x1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no/such/file.csv"));
    let o = run(&["simulate", "--config", "no/such.conf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no/such.conf"));
}

#[test]
fn missing_required_key_is_reported_before_work() {
    let o = run(&["estimate", "data=data/toy_panel.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`covariates`"));
}

#[test]
fn help_succeeds_and_lists_keys() {
    let o = run(&["simulate", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for k in ["n_units", "reps", "c_lambda", "bandwidth", "--threads", "--format"] {
        assert!(text.contains(k), "{k} missing from help");
    }
    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn estimation_failure_exits_with_two() {
    let o = run(&[
        "estimate",
        "data=tests/fixtures/treatment_equals_x1.csv",
        "covariates=x1,x2",
        "tau=0",
        "method=pols",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("identification"));
}

#[test]
fn weights_on_constant_outcome_are_degenerate() {
    let o = run(&["weights", "data=tests/fixtures/constant_outcome.csv", "covariates=x1,x2", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("all-zero scores"));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let cols = v["columns"].as_array().unwrap();
    assert_eq!(cols.len(), 8);
    assert!(cols.iter().all(|c| c["omega2"] == 0.0 && c["selected"] == false));
    assert_eq!(v["degenerate_columns"].as_array().unwrap().len(), 8);
}

#[test]
fn weights_table_lists_components() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.csv");
    let o = run(&[
        "weights",
        "--config",
        "configs/toy_estimate.conf",
        "--out",
        out.to_str().unwrap(),
        "target=treatment",
    ]);
    // The estimate config carries estimate-only keys.
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`method`"));

    let o = run(&[
        "weights",
        "data=data/toy_panel.csv",
        "covariates=x1,x2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("omega2_g"));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("column,omega2_a,omega2_g,omega2_e,omega2,weight,bandwidth,selected\n"));
    assert_eq!(csv.lines().count(), 9);
}

fn simulate_to(path: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "simulate",
        "n_units=10",
        "n_periods=10",
        "p=20",
        "reps=4",
        "K=2",
        "L=4",
        "--seed",
        "9",
        "--out",
        path.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn simulate_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    let oa = simulate_to(&a, &[]);
    assert_eq!(oa.status.code(), Some(0), "{}", stderr(&oa));
    assert!(stdout(&oa).contains("TW LASSO"));
    simulate_to(&b, &[]);
    simulate_to(&c, &["--threads", "1"]);
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_eq!(a, c);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 8);

    let j = dir.path().join("r.json");
    let o = simulate_to(&j, &["--format", "json", "methods=pols,tw_lasso", "crossfit=no"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(j).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["dgp"]["seed"], 9);
}

#[test]
fn shipped_configs_parse() {
    for name in ["sim_p200.conf", "sim_p600.conf", "sim_iid_p600.conf"] {
        // reps=0 fails validation after every key has been accepted.
        let o = run(&["simulate", "--config", &format!("configs/{name}"), "reps=0"]);
        assert_eq!(o.status.code(), Some(1), "{name}");
        assert!(stderr(&o).contains("replications"), "{name}: {}", stderr(&o));
    }
}

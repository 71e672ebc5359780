use std::path::Path;
use std::process::{Command, Output};

fn se3track(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_se3track")).args(args).output().expect("spawn se3track")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    let o = se3track(&["gen-seq", "--out", path(&seq), "--frames", "5", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = dir.path().join("report.json");
    let mesh = seq.join("model.obj");
    let o = se3track(&["eval", "--pred", path(&seq), "--gt", path(&seq), "--mesh", path(&mesh), "--out", path(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["auc_add"].as_f64(), Some(1.0));
    assert_eq!(v["auc_adds"].as_f64(), Some(1.0));
    assert_eq!(v["frames"].as_u64(), Some(5));
    let csv = std::fs::read_to_string(report.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn missing_required_flag_exits_one_and_names_it() {
    let o = se3track(&["eval", "--pred", "a", "--gt", "b", "--out", "c"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--mesh"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_lists_valid_flags() {
    let o = se3track(&["render", "--mesh", "m.obj", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("valid flags for render"), "{err}");
    for flag in ["--mesh", "--pose", "--intrinsics", "--out", "--config"] {
        assert!(err.contains(flag), "{flag} missing from {err}");
    }
}

#[test]
fn runtime_error_exits_two_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let mesh = dir.path().join("nothing.obj");
    let out = dir.path().join("r.json");
    let o = se3track(&["eval", "--pred", path(&missing), "--gt", path(&missing), "--mesh", path(&mesh), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("nothing.obj"), "{err}");
}

#[test]
fn net_estimator_without_weights_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    assert!(se3track(&["gen-seq", "--out", path(&seq), "--frames", "2"]).status.success());
    let o = se3track(&[
        "track",
        "--seq",
        path(&seq),
        "--mesh",
        path(&seq.join("model.obj")),
        "--init-pose",
        path(&seq.join("000000_gt.txt")),
        "--estimator",
        "net",
        "--out",
        path(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--weights"), "{}", stderr(&o));
}

#[test]
fn help_is_available_for_every_subcommand() {
    for sub in ["gen-data", "train", "track", "eval", "render", "gen-seq", "init-config"] {
        let o = se3track(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--out"), "{sub}");
    }
}

#[test]
fn init_config_matches_checked_in_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("config.toml");
    assert!(se3track(&["init-config", "--out", path(&out)]).status.success());
    let written = std::fs::read_to_string(&out).unwrap();
    let checked_in = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../config.example")).unwrap();
    assert_eq!(written, checked_in);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[perturbation]\nsigma_t = -1.0\n").unwrap();
    let o = se3track(&["gen-seq", "--config", path(&cfg), "--out", path(&dir.path().join("s"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("perturbation.sigma_t"), "{}", stderr(&o));
}

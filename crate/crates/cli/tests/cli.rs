use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_wmsn");

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo10.toml")
}

fn wmsn(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

const LINE3: &str = "# wmsn-scenario v1
duration_s = 600
[node_defaults]
sampling = false
[[node]]
id = 0
x = 0
y = 0
gateway = true
[[node]]
id = 1
x = 80
y = 0
[[node]]
id = 2
x = 160
y = 0
";

#[test]
fn demo_run_writes_consistent_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let o = wmsn(&["run", demo().to_str().unwrap(), "--out-dir", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("metrics.json")).unwrap()).unwrap();
    let totals = &metrics["metrics"]["totals"];

    let images = csv_rows(&out.path().join("images.csv"));
    assert_eq!(images.len() as u64, totals["images_triggered"].as_u64().unwrap());
    let complete = images.iter().filter(|r| r.last().unwrap() == "complete").count();
    assert_eq!(complete as u64, totals["images_complete"].as_u64().unwrap());

    let nodes = csv_rows(&out.path().join("nodes.csv"));
    assert_eq!(nodes.len(), 10);
    let consumed: f64 = nodes.iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
    assert!((consumed - totals["consumed_mah"].as_f64().unwrap()).abs() < 1e-5 * nodes.len() as f64);

    let routes = csv_rows(&out.path().join("routes.csv"));
    assert!(!routes.is_empty());
    assert_eq!(metrics["meta"]["seed"], 2024);
    assert_eq!(metrics["meta"]["scenario_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_override_changes_only_the_draws() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let path = demo();
    let path = path.to_str().unwrap();
    assert!(wmsn(&["run", path, "--out-dir", a.path().to_str().unwrap()]).status.success());
    assert!(wmsn(&["--seed", "7", "run", path, "--out-dir", b.path().to_str().unwrap()]).status.success());
    let ja: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("metrics.json")).unwrap()).unwrap();
    let jb: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(jb["meta"]["seed"], 7);
    assert_ne!(ja["meta"]["scenario_hash"], jb["meta"]["scenario_hash"]);
    assert_ne!(ja["metrics"]["totals"]["frames_lost"], jb["metrics"]["totals"]["frames_lost"]);
    // Topology and configuration are untouched.
    let ids = |j: &serde_json::Value| j["metrics"]["nodes"].as_array().unwrap().iter().map(|n| n["id"].clone()).collect::<Vec<_>>();
    assert_eq!(ids(&ja), ids(&jb));
    assert_eq!(ja["metrics"]["duration_s"], jb["metrics"]["duration_s"]);
}

#[test]
fn strict_clean_run_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let o = wmsn(&["--strict", "run", demo().to_str().unwrap(), "--out-dir", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn validation_errors_exit_one_and_list_everything() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "two_gw.toml",
        "# wmsn-scenario v1\nduration_s = -5\n[[node]]\nid = 3\nx = 0\ny = 0\ngateway = true\n[[node]]\nid = 8\nx = 1\ny = 0\ngateway = true\n",
    );
    let o = wmsn(&["validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("3, 8"), "{err}");
    assert!(err.contains("duration_s"), "{err}");
}

#[test]
fn unknown_keys_strict_or_lax() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write(dir.path(), "typo.toml", &LINE3.replace("duration_s = 600", "duration_s = 600\ndurration_s = 5"));
    let o = wmsn(&["validate", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("durration_s"));
    let o = wmsn(&["--lax-keys", "validate", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn missing_file_is_an_io_error() {
    let o = wmsn(&["run", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(3));
    let o = wmsn(&["validate", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn lifetime_table() {
    let o = wmsn(&["lifetime", "--capacity", "2900", "--profile", "idle:off=1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("hours 29000.000"), "{}", stdout(&o));
    assert!(stdout(&o).contains("years 3.308"));
    let o = wmsn(&["lifetime", "--profile", "wifi_on=1"]);
    assert!(stdout(&o).contains("hours 6.402"), "{}", stdout(&o));
    let o = wmsn(&["lifetime", "--capacity", "0"]);
    assert!(stdout(&o).contains("hours 0.000"));
    let o = wmsn(&["lifetime", "--profile", "active=0.3", "--profile", "idle=0.3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = wmsn(&["lifetime", "--profile", "bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = wmsn(&["lifetime", "--profile", "idle=1", "--sweep", "active=0:0.5:3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0.000000,29000.000"));
}

#[test]
fn routes_on_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "line.toml", LINE3);
    let o = wmsn(&["routes", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<Vec<String>> = stdout(&o).lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    let metrics: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(metrics, ["0", "1", "2"]);
    assert!(rows.iter().all(|r| r[4] == "ok"));
}

#[test]
fn routes_lone_gateway_and_disconnected() {
    let dir = tempfile::tempdir().unwrap();
    let lone = write(dir.path(), "lone.toml", "# wmsn-scenario v1\n[[node]]\nid = 0\nx = 0\ny = 0\ngateway = true\n");
    let o = wmsn(&["routes", lone.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "node,next_hop,metric,bfs_hops,status\n0,,0,0,ok\n");

    let split = write(dir.path(), "split.toml", &LINE3.replace("x = 160", "x = 900"));
    let o = wmsn(&["routes", split.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("2,,,,unreachable"), "{}", stdout(&o));
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn parallel_jobs_write_one_dir_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.toml", LINE3);
    let b = write(dir.path(), "b.toml", &LINE3.replace("duration_s = 600", "duration_s = 300"));
    let out = dir.path().join("out");
    let o = wmsn(&["--jobs", "2", "run", a.to_str().unwrap(), b.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in ["a", "b"] {
        for f in ["metrics.json", "nodes.csv", "images.csv", "routes.csv"] {
            assert!(out.join(s).join(f).exists(), "{s}/{f}");
        }
    }
}

#[test]
fn exit_codes() {
    use wmsn_cli::CliError;
    assert_eq!(CliError::Validation(String::new()).exit_code(), 1);
    assert_eq!(CliError::Invariant(String::new()).exit_code(), 2);
    let io = CliError::Io { path: "x".into(), source: std::io::Error::other("boom") };
    assert_eq!(io.exit_code(), 3);
    let e: CliError = wmsn_core::EngineError::InvariantViolation { time: 1.0, detail: "cycle".into() }.into();
    assert_eq!(e.exit_code(), 2);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mkv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn last_row(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn solve_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&mkv(&["solve", "--scenario", "lq", "--seed", "7"], &a));
    ok(&mkv(&["solve", "--scenario", "lq", "--seed", "7"], &b));
    for f in ["forward.csv", "reverse.csv", "control.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let head = fs::read_to_string(a.join("forward.csv")).unwrap();
    assert!(head.starts_with("t,m_1,C_11\n"));
    let head = fs::read_to_string(a.join("control.csv")).unwrap();
    assert!(head.starts_with("t,A_11,c_1\n"));
}

#[test]
fn pendulum_solve_then_simulate_reaches_upright() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(&mkv(&["solve", "--scenario", "pendulum"], out));
    let control = out.join("control.csv");
    let control = control.to_str().unwrap();
    ok(&mkv(&["simulate", "--scenario", "pendulum", "--rho", "0", "--control", control], out));
    let text = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(text.starts_with("t,x_1,x_2,u_1\n"));
    let row = last_row(&out.join("trajectory.csv"));
    assert_eq!(row[0], 1.0);
    assert!(row[1].abs() <= 0.2 && row[2].abs() <= 0.2, "{row:?}");
}

#[test]
fn rereading_control_reproduces_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    // Solves first, then simulates with the in-memory law.
    ok(&mkv(&["simulate", "--scenario", "lq", "--rho", "0"], &a));
    let control = a.join("control.csv");
    ok(&mkv(&["simulate", "--scenario", "lq", "--rho", "0", "--control", control.to_str().unwrap()], &b));
    assert_eq!(fs::read(a.join("trajectory.csv")).unwrap(), fs::read(b.join("trajectory.csv")).unwrap());
}

#[test]
fn manifest_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&mkv(&["solve", "--scenario", "langevin", "--seed", "3", "--dt", "0.02", "--ensemble-size", "6"], &a));
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 3"));
    ok(&mkv(&["solve", "--config", a.join("manifest.toml").to_str().unwrap()], &b));
    for f in ["forward.csv", "reverse.csv", "control.csv", "manifest.toml"] {
        let (x, y) = (fs::read_to_string(a.join(f)).unwrap(), fs::read_to_string(b.join(f)).unwrap());
        if f == "manifest.toml" {
            assert_eq!(x.replace(a.to_str().unwrap(), ""), y.replace(b.to_str().unwrap(), ""));
        } else {
            assert_eq!(x, y, "{f}");
        }
    }
}

#[test]
fn cost_with_control_beats_zero_control() {
    let tmp = tempfile::tempdir().unwrap();
    let parse = |dir: &Path| -> (f64, f64) {
        let text = fs::read_to_string(dir.join("cost.txt")).unwrap();
        let (j, se) = text.trim().split_once(" ± ").unwrap();
        (j.parse().unwrap(), se.parse().unwrap())
    };
    let (on, off) = (tmp.path().join("on"), tmp.path().join("off"));
    ok(&mkv(&["cost", "--scenario", "langevin", "--paths", "200"], &on));
    ok(&mkv(&["cost", "--scenario", "langevin", "--paths", "200", "--zero-control"], &off));
    let (j_on, se_on) = parse(&on);
    let (j_off, _) = parse(&off);
    assert!(se_on > 0.0);
    assert!(j_on < j_off, "{j_on} vs {j_off}");
}

#[test]
fn inline_problem_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("lq.toml");
    fs::write(
        &cfg,
        r#"
[solver]
dt = 0.01
ensemble_size = 32
seed = 5

[problem]
drift_matrix = [[-0.5]]
gain = [[1.0]]
noise = [[1.0]]
running_matrix = [[1.0]]
running_weight = [[1.0]]
terminal_matrix = [[1.0]]
terminal_weight = [[1.0]]
control_weight = [[1.0]]
horizon = 1.0
start = [1.0]
"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    ok(&mkv(&["solve", "--config", cfg.to_str().unwrap()], &out));
    let rows = fs::read_to_string(out.join("control.csv")).unwrap().lines().count();
    assert_eq!(rows, 102);
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("[problem]"));
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mkv(&["solve", "--scenario", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown scenario"));
    let o = mkv(&["solve", "--config", "/nonexistent/cfg.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    // A covariance that collapses: no inflation, no initial spread.
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "scenario = \"langevin\"\n[solver]\ninflation = 0.0\neps_forward_steps = 0\n").unwrap();
    let o = mkv(&["solve", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
}

#[test]
fn scenarios_are_listed() {
    let o = Command::new(env!("CARGO_BIN_EXE_mkv")).arg("scenarios").output().unwrap();
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["pendulum", "langevin", "lq", "ou_diffusion"]);
}

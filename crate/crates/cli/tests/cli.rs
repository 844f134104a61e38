use std::path::Path;
use std::process::{Command, Output};

use globule_core::io::{read_configuration, read_trajectory};
use globule_core::ModelParams;

const CONFIG: &str = r#"
[model]
sigma = 1.0
r_minus = 0.3
r_plus = 0.9
ell = 2

[run]
T = 0.25
dt = 0.001
seed = 11
n_globules = 3
n_trajectories = 2
stride = 1
burn_in = 200

[diagnostics]
delta = 0.0625
epsilon = 0.1
chain_len = 2
"#;

fn globules(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_globules"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let res = globules(&["run", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    for name in ["trajectory_0000.txt", "trajectory_0001.txt", "diagnostics.txt", "manifest.txt"] {
        let (a, b) = (read(&tmp.path().join("a").join(name)), read(&tmp.path().join("b").join(name)));
        if name == "manifest.txt" {
            // file lists differ by directory only
            let strip = |s: &str| s.lines().filter(|l| !l.starts_with("files")).collect::<Vec<_>>().join("\n");
            assert_eq!(strip(&a), strip(&b));
            assert!(a.contains("config_sha256 = "), "{a}");
        } else {
            assert_eq!(a, b, "{name} differs");
        }
    }
    let (traj, meta) = read_trajectory(&read(&tmp.path().join("a/trajectory_0000.txt"))).unwrap();
    assert_eq!(traj.states.len(), 251);
    assert!(meta.iter().any(|(k, v)| k == "seed" && v == "11"));

    let other = tmp.path().join("c");
    let res = globules(&["run", "--config", &cfg, "--seed", "12", "--out-dir", other.to_str().unwrap()]);
    assert!(res.status.success());
    assert_ne!(
        read(&tmp.path().join("a/trajectory_0000.txt")),
        read(&other.join("trajectory_0000.txt"))
    );
}

#[test]
fn missing_r_plus_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("r_plus = 0.9\n", ""));
    let res = globules(&["simulate", "--config", &cfg, "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("model.r_plus: missing"), "{err}");
}

#[test]
fn all_violations_are_reported_together() {
    let tmp = tempfile::tempdir().unwrap();
    let res = globules(&[
        "simulate",
        "--sigma=-1",
        "--rminus",
        "0.3",
        "--rplus",
        "0.4",
        "--ell",
        "1",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    for field in ["model.sigma", "model.ell", "run.T", "run.dt", "run.seed", "run.n_globules"] {
        assert!(err.contains(field), "{field} missing from:\n{err}");
    }
}

#[test]
fn stationary_sample_feeds_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let init = tmp.path().join("init.txt");
    let model = ["--sigma", "1.5", "--rminus", "0.3", "--rplus", "0.9", "--ell", "2", "--seed", "5"];
    let mut args = vec!["sample-stationary", "--n", "4", "--burn-in", "500", "--out", init.to_str().unwrap(), "--out-dir", dir];
    args.extend(model);
    let res = globules(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (c, _) = read_configuration(&read(&init)).unwrap();
    assert_eq!(c.len(), 4);
    assert!(globule_core::geometry::allowed(&c, &ModelParams::new(1.5, 0.3, 0.9, 2).unwrap()));

    let traj_path = tmp.path().join("traj.txt");
    let mut args = vec![
        "simulate",
        "--init",
        init.to_str().unwrap(),
        "--T",
        "0.1",
        "--dt",
        "0.001",
        "--out",
        traj_path.to_str().unwrap(),
        "--out-dir",
        dir,
    ];
    args.extend(model);
    let res = globules(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (traj, _) = read_trajectory(&read(&traj_path)).unwrap();
    assert_eq!(traj.states[0], c);
    assert_eq!(traj.states.len(), 101);

    let res = globules(&["diagnose", traj_path.to_str().unwrap(), "--out-dir", dir, "--delta", "0.05", "--seed", "1"]
        .into_iter()
        .chain(model.iter().copied().filter(|a| *a != "--seed" && *a != "5"))
        .collect::<Vec<_>>());
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = read(&tmp.path().join("diagnostics_traj.txt"));
    assert!(report.contains("max_modulus = "), "{report}");
    assert!(read(&tmp.path().join("manifest.txt")).contains("command = diagnose"));
}

#[test]
fn oversized_steps_exit_with_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("dt = 0.001", "dt = 0.5").replace("T = 0.25", "T = 1.0"));
    let res = globules(&["simulate", "--config", &cfg, "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

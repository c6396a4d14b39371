use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subfinsler")).args(args).arg("--out").arg(dir).output().expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn dist_on_diagonal_shift_gives_l1_radius() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["dist"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["results"]["max_finite"], 4.0);
    assert_eq!(r["results"]["infinite_nodes"], 0);
    assert_eq!(r["config"]["symbol"]["gallery"], "diagonal-shift");
    assert!(dir.path().join("dist.sfdf").exists() && dir.path().join("dist.csv").exists());
}

#[test]
fn empty_source_set_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["dist", "--set", "dist.sources=[]"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dist.sources"));
}

#[test]
fn grushin_source_where_u_vanishes_leaves_unreachable_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "dist",
            "--symbol",
            "grushin-rational",
            "--set",
            "grid.origin=[-0.5, -0.2]",
            "--set",
            "grid.spacing=[0.05, 0.05]",
            "--set",
            "grid.dims=[7, 9]",
            "--set",
            "dist.sources=[[-0.3, 0.0]]",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report(dir.path())["results"]["infinite_nodes"].as_u64().unwrap() > 0);
}

#[test]
fn propagate_on_diagonal_shift_follows_the_cone() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["propagate"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let h = 0.125;
    for row in csv_rows(&dir.path().join("series.csv")) {
        let (t, r): (f64, f64) = (row[0].parse().unwrap(), row[2].parse().unwrap());
        assert!((r - t).abs() <= h + 1e-12, "t = {t}, radius {r}");
    }
    assert!(dir.path().join("trajectory/state.toml").exists());
}

#[test]
fn oversized_step_names_the_stability_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["propagate", "--set", "propagate.dt=1.0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stability limit 0.125"), "{err}");
}

#[test]
fn zero_data_has_zero_radius() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["propagate", "--set", "propagate.initial.kind=\"zero\""]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(csv_rows(&dir.path().join("series.csv")).iter().all(|row| row[2] == "0"));
}

#[test]
fn wave2_conserves_energy() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["wave2", "--set", "wave2.t=0.5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report(dir.path())["results"]["max_relative_energy_drift"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn flowapprox_sweep_has_nonincreasing_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["flowapprox", "--set", "grid.lo=-1.0", "--set", "grid.hi=1.0", "--set", "grid.cells=16"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["25", "50", "100", "200"]);
    let errors: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(errors.windows(2).all(|w| w[1] <= w[0]), "{errors:?}");
}

#[test]
fn mollify_sweep_has_decreasing_commutators() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["mollify", "--symbol", "grushin-pair", "--set", "grid.cells=80"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let comm: Vec<f64> = csv_rows(&dir.path().join("sweep.csv")).iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(comm.len(), 4);
    assert!(comm.windows(2).all(|w| w[1] < w[0]), "{comm:?}");
}

#[test]
fn gallery_list_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gallery", "list"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let names: Vec<&str> = stdout.lines().take(5).collect();
    assert_eq!(names, ["diagonal-shift", "euclidean", "riemannian-anisotropic", "grushin-pair", "grushin-rational"]);

    let out = run(dir.path(), &["gallery", "export", "grushin-pair", "--set", "grid.cells=8"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("grushin-pair.toml").exists());
    assert_eq!(report(dir.path())["results"]["r"], 1);
}

#[test]
fn config_file_with_flags_overriding_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n\n[grid]\ncells = 16\n\n[dist]\nstencil_radius = 2\n").unwrap();
    let out = run(dir.path(), &["dist", "--config", cfg.to_str().unwrap(), "--seed", "9", "--set", "grid.cells=8"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["seed"], 9);
    assert_eq!(r["config"]["grid"]["cells"], 8);
    assert_eq!(r["results"]["stencil_radius"], 2);
}

#[test]
fn bad_config_reports_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[grid]\ncells = 16\nwidth = 3\n").unwrap();
    let out = run(dir.path(), &["dist", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("width"), "{err}");

    std::fs::write(&cfg, "[propagate]\nt = -1.0\n").unwrap();
    let out = run(dir.path(), &["propagate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("propagate.t"));
}

#[test]
fn unknown_command_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runs_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(run(d.path(), &["dist", "--symbol", "grushin-pair", "--set", "grid.cells=12"]).status.code(), Some(0));
    }
    let read = |d: &Path| std::fs::read(d.join("dist.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn cone_failure_exits_with_one() {
    // The centred scheme from a spike leaks ahead of the cone by several cells.
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["propagate", "--set", "propagate.scheme=\"centered-rk4\"", "--set", "propagate.t=0.5"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report(dir.path())["passed"], false);
}

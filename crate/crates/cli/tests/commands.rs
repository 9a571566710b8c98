use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn eit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eit")).args(args).output().expect("binary runs")
}

/// Writes `config.json` into a fresh directory, with output under `out/`.
fn setup(config: &str) -> (TempDir, String, String) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    (dir, cfg.display().to_string(), out.display().to_string())
}

const DISK: &str = r#"{
  "phantom": {"background": 1.0, "inclusions": [{"shape": "disk", "center": [0.5, 0.5], "radius": 0.25, "value": 2.0}]},
  "bounds": [0.5, 4.0],
  "mesh": {"level": 3},
  "layout": {"coarsen": 1, "active": 1, "impedance": 0.1}
}"#;

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn matrix(path: &Path) -> Vec<Vec<f64>> {
    read_csv(path).into_iter().map(|r| r.iter().map(|x| x.trim().parse().unwrap()).collect()).collect()
}

#[test]
fn mesh_reports_every_level() {
    let (_d, cfg, out) = setup(DISK);
    let o = eit(&["mesh", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&Path::new(&out).join("mesh_quality.csv"));
    assert_eq!(rows[0][0], "level");
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4][5], "128");
    let shape: Vec<&str> = rows[1..].iter().map(|r| r[2].as_str()).collect();
    assert!(shape.windows(2).all(|w| w[0] == w[1]), "{shape:?}");
    let dump = fs::read_to_string(Path::new(&out).join("mesh.txt")).unwrap();
    let mesh = eit_core::Mesh::from_dump(&dump).unwrap();
    assert_eq!(mesh.triangle_count(), 128);
    assert_eq!(mesh.to_dump(), dump);
}

#[test]
fn forward_matrices_have_zero_row_sums() {
    let (_d, cfg, out) = setup(DISK);
    let o = eit(&["forward", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = Path::new(&out);
    let r = matrix(&dir.join("r_full.csv"));
    let rh = matrix(&dir.join("r_simplified.csv"));
    assert_eq!(r.len(), 16);
    let mut diff = 0.0f64;
    for (a, b) in r.iter().zip(&rh) {
        assert!(a.iter().sum::<f64>().abs() < 1e-10);
        assert!(b.iter().sum::<f64>().abs() < 1e-10);
        diff += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    assert!(diff.sqrt() > 1e-6);
    let again = eit(&["forward", "--config", &cfg, "--out", &out]);
    assert!(again.status.success());
    assert_eq!(matrix(&dir.join("r_full.csv")), r);
    let stats = read_csv(&dir.join("layout_stats.csv"));
    assert_eq!(stats[0][0], "M");
    assert_eq!(stats[1][0], "16");
}

const CRIME: &str = r#"{
  "phantom": {"background": 1.0, "inclusions": [{"shape": "disk", "center": [0.5, 0.5], "radius": 0.3, "value": 2.0}]},
  "bounds": [0.5, 4.0],
  "mesh": {"level": 2},
  "layout": {"coarsen": 1, "active": 1, "impedance": 0.1},
  "inversion": {"epsilon": 1e-12, "noise_mode": "relative", "regularization": 1e-12, "data": {"model": "inverse_crime"}},
  "optimizer": {"max_iterations": 100}
}"#;

#[test]
fn inverse_crime_fits_the_data() {
    let (_d, cfg, out) = setup(CRIME);
    let o = eit(&["invert", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = Path::new(&out);
    let summary = read_csv(&dir.join("summary.csv"));
    let col = |name: &str| summary[0].iter().position(|c| c == name).unwrap();
    let misfit: f64 = summary[1][col("misfit_frobenius")].parse().unwrap();
    assert!(misfit <= 1e-8, "misfit {misfit}");
    let trace = read_csv(&dir.join("trace.csv"));
    assert_eq!(trace[0], ["iteration", "objective"]);
    let values: Vec<f64> = trace[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    assert!(dir.join("field.txt").exists() && dir.join("measured.csv").exists());
}

#[test]
fn seed_controls_the_noise() {
    let (_d, cfg, out) = setup(&CRIME.replace("\"epsilon\": 1e-12", "\"epsilon\": 1e-3"));
    let run = |seed: &str, sub: &str| {
        let o = eit(&["invert", "--config", &cfg, "--seed", seed, "--out", &format!("{out}/{sub}")]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(Path::new(&out).join(sub).join("measured.csv")).unwrap()
    };
    assert_eq!(run("5", "a"), run("5", "b"));
    assert_ne!(run("5", "a"), run("6", "c"));
}

#[test]
fn study_writes_one_row_per_run() {
    let config = r#"{
      "phantom": {"background": 1.0, "inclusions": [{"shape": "disk", "center": [0.5, 0.5], "radius": 0.25, "value": 2.0}]},
      "bounds": [0.5, 4.0],
      "mesh": {"max_level": 6},
      "schedule": {"mode": "relative", "c": 1e-3, "c0": 1.0, "c2": 2.0},
      "study": {"epsilons": [0.1, 0.05], "seeds": [0], "measurement_refinement": 1},
      "optimizer": {"max_iterations": 5},
      "l1_subdivision": 1
    }"#;
    let (_d, cfg, out) = setup(config);
    let o = eit(&["study", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&Path::new(&out).join("study.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[0].iter().any(|c| c == "epsilon") && rows[0].iter().any(|c| c == "l1_error"));
    assert!(rows.iter().all(|r| r.len() == rows[0].len()));
}

#[test]
fn quick_verification_passes() {
    let o = eit(&["verify", "--level", "quick"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn invalid_input_exits_with_one() {
    let (_d, cfg, out) = setup(&DISK.replace("\"bounds\": [0.5, 4.0]", "\"bounds\": [0.5, 1.5]"));
    assert_eq!(eit(&["forward", "--config", &cfg, "--out", &out]).status.code(), Some(1));
    let (_d, cfg, out) = setup(&DISK.replace("\"mesh\"", "\"meshes\""));
    assert_eq!(eit(&["mesh", "--config", &cfg, "--out", &out]).status.code(), Some(1));
    let (_d, cfg, out) = setup("{ not json");
    assert_eq!(eit(&["mesh", "--config", &cfg, "--out", &out]).status.code(), Some(1));
    assert_eq!(eit(&["mesh", "--config", "/nonexistent/config.json"]).status.code(), Some(1));
}

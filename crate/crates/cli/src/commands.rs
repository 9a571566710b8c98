//! The subcommands. Each writes its files under the output directory and
//! returns a short human-readable report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use eit_core::cem::{resistance_matrix, simplified_resistance_matrix, ElectrodeLayout};
use eit_core::conductivity::FieldKind;
use eit_core::fem::FeSpace;
use eit_core::inverse::{convergence_study, run_inversion};
use eit_core::linalg::spectral_norm;
use eit_core::mesh::build_initial_triangulation;
use eit_core::{EitError, Result};

use crate::config::RunConfig;

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)
        .map_err(|e| EitError::invalid(format!("cannot write {}: {e}", dir.join(name).display())))
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| EitError::invalid(format!("output directory {} is not writable: {e}", dir.display())))
}

/// Writes `mesh.txt` (the finest mesh) and `mesh_quality.csv` (one row per
/// level).
pub fn cmd_mesh(cfg: &RunConfig) -> Result<String> {
    let out = &cfg.output;
    prepare(out)?;
    let mut mesh = build_initial_triangulation(&cfg.polygon()?)?;
    let mut csv = String::from("level,h,s,h_min,vertices,triangles,boundary_edges\n");
    let mut report = String::new();
    for level in 0..=cfg.mesh.level {
        if level > 0 {
            mesh = mesh.refine();
        }
        mesh.check_topology()?;
        let q = mesh.quality();
        writeln!(
            csv,
            "{level},{:e},{:e},{:e},{},{},{}",
            q.h,
            q.s,
            q.h_min,
            mesh.vertex_count(),
            mesh.triangle_count(),
            mesh.boundary_edges().len()
        )
        .unwrap();
        writeln!(
            report,
            "level {level}: h = {:.4e}, s = {:.6}, {} vertices, {} triangles",
            q.h,
            q.s,
            mesh.vertex_count(),
            mesh.triangle_count()
        )
        .unwrap();
    }
    write(out, "mesh.txt", &mesh.to_dump())?;
    write(out, "mesh_quality.csv", &csv)?;
    Ok(report)
}

/// Writes the full and simplified resistance matrices of the phantom on
/// the configured mesh, the electrode layout and its statistics.
pub fn cmd_forward(cfg: &RunConfig) -> Result<String> {
    let out = &cfg.output;
    prepare(out)?;
    let [l0, l1] = cfg.bounds;
    let mesh = build_initial_triangulation(&cfg.polygon()?)?.refined(cfg.mesh.level);
    let layout = ElectrodeLayout::from_mesh(&mesh, cfg.layout.coarsen, cfg.layout.active, cfg.layout.impedance)?;
    let space = FeSpace::new(mesh);
    let field = cfg.phantom.interpolate(space.mesh(), l0, l1)?;
    debug_assert_eq!(field.kind(), FieldKind::Scalar);
    let stats = layout.stats(&space)?;
    let r = resistance_matrix(&space, &field, &layout)?;
    let r_hat = simplified_resistance_matrix(&space, &field, &layout)?;
    let diff = &r_hat.matrix - &r.matrix;
    write(out, "r_full.csv", &r.to_csv())?;
    write(out, "r_simplified.csv", &r_hat.to_csv())?;
    write(out, "layout.txt", &layout.to_dump())?;
    let stats_csv = format!(
        "M,delta,mu,theta,eta,perimeter,count_bound,diff_frobenius,diff_spectral\n{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
        stats.count,
        stats.delta,
        stats.mu,
        stats.theta,
        stats.eta,
        stats.perimeter,
        stats.count_bound(),
        diff.norm(),
        spectral_norm(&diff)
    );
    write(out, "layout_stats.csv", &stats_csv)?;
    Ok(format!(
        "M = {}, delta = {:.4e}, theta = {:.4}, mu = {:.4}\n|R_hat - R|_F = {:.4e}, |R_hat - R|_2 = {:.4e}\nzero-sum defects: R {:.2e}, R_hat {:.2e}\n",
        stats.count,
        stats.delta,
        stats.theta,
        stats.mu,
        diff.norm(),
        spectral_norm(&diff),
        r.zero_sum_defect(),
        r_hat.zero_sum_defect()
    ))
}

/// Runs one reconstruction and writes the field, its mesh, the data and
/// the objective trace.
pub fn cmd_invert(cfg: &RunConfig) -> Result<String> {
    let out = &cfg.output;
    prepare(out)?;
    let inv = cfg.inversion_config();
    let outcome = run_inversion(&cfg.polygon()?, &inv)?;
    let res = &outcome.result;
    write(out, "mesh.txt", &outcome.mesh.to_dump())?;
    write(out, "field.txt", &res.field.to_dump())?;
    write(out, "measured.csv", &outcome.measured.to_csv())?;
    write(out, "trace.csv", &res.trace_csv())?;
    let l1 = res.l1_error.unwrap_or(f64::NAN);
    let summary = format!(
        "iterations,converged,misfit_frobenius,misfit_spectral,tv,l1_error,tau,wall_time_s\n{},{},{:e},{:e},{:e},{:e},{:e},{:.3}\n",
        res.iterations,
        res.converged,
        res.misfit_frobenius,
        res.misfit_spectral,
        res.tv,
        l1,
        res.tau,
        outcome.wall_time_s
    );
    write(out, "summary.csv", &summary)?;
    let mut report = format!(
        "{} iterations (converged: {}), misfit_F = {:.4e}, tv = {:.4}, L1 error = {:.4e}, {:.2} s\n",
        res.iterations, res.converged, res.misfit_frobenius, res.tv, l1, outcome.wall_time_s
    );
    if let Some(w) = &res.warning {
        writeln!(report, "warning: {w}").unwrap();
    }
    Ok(report)
}

/// Runs the noise-level sweep and writes `study.csv`.
pub fn cmd_study(cfg: &RunConfig) -> Result<String> {
    let out = &cfg.output;
    prepare(out)?;
    let study = cfg.study_config();
    let report = convergence_study(&cfg.polygon()?, &study)?;
    write(out, "study.csv", &report.to_csv())?;
    let mut text = String::new();
    for (eps, l1) in report.mean_l1_by_epsilon() {
        writeln!(text, "epsilon = {eps:.4e}: mean L1 error {l1:.4e}").unwrap();
    }
    for (eps, seed, msg) in &report.failures {
        writeln!(text, "failed: epsilon = {eps:e}, seed = {seed}: {msg}").unwrap();
    }
    if report.rows.is_empty() {
        return Err(EitError::numerical("every study run failed"));
    }
    Ok(text)
}

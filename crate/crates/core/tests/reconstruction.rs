use eit_core::cem::ElectrodeLayout;
use eit_core::cem::{Provenance, ResistanceMatrix};
use eit_core::conductivity::{tv_seminorm, FieldKind, NodalField, Phantom};
use eit_core::fem::FeSpace;
use eit_core::inverse::{
    convergence_study, minimize, noise_inject, objective, run_inversion, smoothed_objective_gradient,
    smoothed_tv_gradient, DataModel, ForwardModel, InversionConfig, LayoutSpec, NoiseMode, OptimizerOptions, Schedule,
    StudyConfig,
};
use eit_core::linalg::spectral_norm;
use eit_core::mesh::{build_initial_triangulation, Polygon, TriMesh};

fn square(level: usize) -> TriMesh<f64> {
    build_initial_triangulation(&Polygon::unit_square()).unwrap().refined(level)
}

#[test]
fn schedule_conditions() {
    let ok = Schedule { a1: 1.0, ..Schedule::default() };
    assert!(ok.violations().is_empty());
    let bad = Schedule { gamma: 0.2, ..Schedule::default() };
    assert!(bad.violations().iter().any(|v| v == "γ<β1"));
    assert!(Schedule { gamma: 0.0, ..Schedule::default() }.validate().is_err());
    let rel = Schedule { mode: NoiseMode::Relative, c1: 0.0, ..Schedule::default() };
    assert!(rel.violations().is_empty(), "{:?}", rel.violations());
}

#[test]
fn halving_the_noise_halves_mesh_and_electrode_size() {
    let base = build_initial_triangulation(&Polygon::<f64>::unit_square()).unwrap();
    let s = Schedule {
        gamma: 0.05,
        a1: 1.0,
        a2: 1.0,
        c0: 0.5,
        c1: 0.25,
        c2: 1.0,
        alpha1: 0.5,
        beta1: 0.1,
        mode: NoiseMode::Relative,
        ..Schedule::default()
    };
    let layout = LayoutSpec::default();
    let a = s.apply(0.1, &base, &layout, 10).unwrap();
    let b = s.apply(0.05, &base, &layout, 10).unwrap();
    assert_eq!(b.mesh_level, a.mesh_level + 1);
    assert_eq!(b.layout_level, a.layout_level + 1);
    assert!((a.h / b.h - 2.0).abs() < 1e-12);
    assert!((a.delta / b.delta - 2.0).abs() < 1e-12);
    assert!(b.h <= s.c0 * 0.05 && b.delta <= s.c2 * 0.05);
    let abs = Schedule { mode: NoiseMode::Absolute, ..s.clone() };
    assert!(abs.violations().iter().any(|v| v == "γ+2(N-1)a2<2"));
    assert_eq!(s.regularization(1.0), s.c);
}

#[test]
fn schedule_reports_unreachable_resolution() {
    let base = build_initial_triangulation(&Polygon::<f64>::unit_square()).unwrap();
    assert!(Schedule::default().apply(1e-6, &base, &LayoutSpec::default(), 3).is_err());
    assert!(Schedule::default().apply(0.0, &base, &LayoutSpec::default(), 8).is_err());
}

#[test]
fn noise_has_the_requested_size_and_structure() {
    let s = FeSpace::new(square(3));
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1).unwrap();
    let f = NodalField::constant(FieldKind::Scalar, s.dim(), 1.0, 0.5, 4.0).unwrap();
    let r0 = ResistanceMatrix {
        matrix: ForwardModel::new(&s, &layout).unwrap().evaluate(&f).unwrap().r_hat,
        provenance: Provenance::Simplified,
    };
    let m = r0.size() as f64;
    let a = noise_inject(&r0, 0.01, 7, NoiseMode::Absolute).unwrap();
    assert!(((&a.matrix - &r0.matrix).norm() - m * 0.01).abs() < 1e-12);
    assert!(a.zero_sum_defect() < 1e-12);
    let b = noise_inject(&r0, 0.01, 7, NoiseMode::Relative).unwrap();
    assert!((spectral_norm(&(&b.matrix - &r0.matrix)) - 0.01).abs() < 1e-12);
    assert_eq!(noise_inject(&r0, 0.01, 7, NoiseMode::Absolute).unwrap().matrix, a.matrix);
    assert_ne!(noise_inject(&r0, 0.01, 8, NoiseMode::Absolute).unwrap().matrix, a.matrix);
    assert!(noise_inject(&r0, 1.5, 7, NoiseMode::Absolute).is_err());
}

#[test]
fn objective_parts_add_up() {
    let s = FeSpace::new(square(3));
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1).unwrap();
    let model = ForwardModel::new(&s, &layout).unwrap();
    let truth = Phantom::disk(1.0, [0.5, 0.5], 0.25, 2.0).interpolate(s.mesh(), 0.5, 4.0).unwrap();
    let meas = ResistanceMatrix { matrix: model.evaluate(&truth).unwrap().r_hat, provenance: Provenance::Measured };
    let at_truth = objective(&model, &truth, &meas, 0.1).unwrap();
    assert!(at_truth.misfit < 1e-20);
    assert!((at_truth.tv - tv_seminorm(s.mesh(), &truth).unwrap()).abs() < 1e-14);
    let flat = NodalField::constant(FieldKind::Scalar, s.dim(), 1.5, 0.5, 4.0).unwrap();
    let p = objective(&model, &flat, &meas, 0.1).unwrap();
    assert_eq!(p.tv, 0.0);
    assert!((p.total - p.misfit).abs() < 1e-14 && p.misfit > 0.0);
    let q = objective(&model, &flat, &meas, 0.2).unwrap();
    assert!((p.misfit / q.misfit - 2.0).abs() < 1e-10);
}

#[test]
fn gradient_matches_central_differences() {
    let s = FeSpace::new(square(2));
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1).unwrap();
    let model = ForwardModel::new(&s, &layout).unwrap();
    let truth = Phantom::disk(1.0, [0.5, 0.5], 0.3, 2.0).interpolate(s.mesh(), 0.5, 4.0).unwrap();
    let meas = ResistanceMatrix { matrix: model.evaluate(&truth).unwrap().r_hat, provenance: Provenance::Measured };
    let x = Phantom::disk(1.2, [0.4, 0.6], 0.2, 2.5).interpolate(s.mesh(), 0.5, 4.0).unwrap();
    let (a, tau) = (0.05, 0.1);
    let (_, g) = smoothed_objective_gradient(&model, &x, &meas, a, tau).unwrap();
    let h = 1e-6;
    for i in (0..s.dim()).step_by(3) {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let fp = smoothed_objective_gradient(&model, &p, &meas, a, tau).unwrap().0;
        let fm = smoothed_objective_gradient(&model, &m, &meas, a, tau).unwrap().0;
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-5 * g[i].abs().max(1.0), "node {i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn tv_gradient_of_a_constant_vanishes() {
    let s = FeSpace::new(square(3));
    let f = NodalField::constant(FieldKind::Scalar, s.dim(), 2.0, 0.5, 4.0).unwrap();
    assert!(smoothed_tv_gradient(&s, &f, 1e-3).iter().all(|g| *g == 0.0));
}

/// For constant conductivity `c` the simplified matrix is `R_hat(1) / c`,
/// so the best constant fit has a closed form.
#[test]
fn recovers_the_best_constant() {
    let s = FeSpace::new(square(3));
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1).unwrap();
    let model = ForwardModel::new(&s, &layout).unwrap();
    let one = NodalField::constant(FieldKind::Scalar, s.dim(), 1.0, 0.5, 4.0).unwrap();
    let r1 = model.evaluate(&one).unwrap().r_hat;
    let exact = ResistanceMatrix { matrix: &r1 / 2.0, provenance: Provenance::Simplified };
    let meas = noise_inject(&exact, 1e-6, 3, NoiseMode::Relative).unwrap();
    let best = r1.norm_squared() / r1.dot(&meas.matrix);
    let init = NodalField::constant(FieldKind::Scalar, s.dim(), 1.0, 0.5, 4.0).unwrap();
    let res = minimize(&model, &meas, 1.0, &init, &OptimizerOptions::default()).unwrap();
    let mean = res.field.data().iter().sum::<f64>() / s.dim() as f64;
    assert!((mean - best).abs() < 1e-3, "{mean} vs {best}");
    assert!(res.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
}

#[test]
fn stronger_regularization_flattens_the_reconstruction() {
    let s = FeSpace::new(square(3));
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1).unwrap();
    let model = ForwardModel::new(&s, &layout).unwrap();
    let truth = Phantom::disk(1.0, [0.5, 0.5], 0.25, 3.0).interpolate(s.mesh(), 0.5, 4.0).unwrap();
    let meas = ResistanceMatrix { matrix: model.evaluate(&truth).unwrap().r_hat, provenance: Provenance::Measured };
    let init = NodalField::constant(FieldKind::Scalar, s.dim(), 1.5, 0.5, 4.0).unwrap();
    let opts = OptimizerOptions { max_iterations: 30, ..OptimizerOptions::default() };
    let weak = minimize(&model, &meas, 1e-5, &init, &opts).unwrap();
    let strong = minimize(&model, &meas, 10.0, &init, &opts).unwrap();
    assert!(strong.tv < weak.tv, "{} vs {}", strong.tv, weak.tv);
    assert!(weak.misfit_frobenius < strong.misfit_frobenius);
    for r in [&weak, &strong] {
        assert!(r.field.is_admissible());
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}

#[test]
fn inverse_crime_run_is_reproducible() {
    let cfg = InversionConfig {
        phantom: Phantom::disk(1.0, [0.5, 0.5], 0.25, 2.0),
        bounds: [0.5, 4.0],
        mesh_level: 2,
        layout: LayoutSpec { coarsen: 1, active: 1, impedance: 0.1 },
        epsilon: 1e-3,
        noise_mode: NoiseMode::Relative,
        regularization: 1e-3,
        data: DataModel::InverseCrime,
        optimizer: OptimizerOptions { max_iterations: 20, ..OptimizerOptions::default() },
        seed: 4,
        l1_subdivision: 2,
    };
    let a = run_inversion::<f64>(&Polygon::unit_square(), &cfg).unwrap();
    let b = run_inversion::<f64>(&Polygon::unit_square(), &cfg).unwrap();
    assert_eq!(a.result.field.data(), b.result.field.data());
    assert_eq!(a.measured.matrix, b.measured.matrix);
    assert!(a.result.l1_error.unwrap().is_finite());
    let bad = InversionConfig { regularization: 0.0, ..cfg };
    assert!(run_inversion::<f64>(&Polygon::unit_square(), &bad).is_err());
}

#[test]
fn single_level_study_is_well_formed() {
    let cfg = StudyConfig {
        phantom: Phantom::disk(1.0, [0.5, 0.5], 0.25, 2.0),
        bounds: [0.5, 4.0],
        layout: LayoutSpec::default(),
        schedule: Schedule { mode: NoiseMode::Relative, c: 1e-3, c0: 1.0, c2: 2.0, ..Schedule::default() },
        epsilons: vec![0.1],
        seeds: vec![0, 1],
        measurement_refinement: 1,
        max_level: 4,
        optimizer: OptimizerOptions { max_iterations: 10, ..OptimizerOptions::default() },
        l1_subdivision: 2,
    };
    let rep = convergence_study::<f64>(&Polygon::unit_square(), &cfg).unwrap();
    let csv = rep.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    let cols = lines[0].split(',').count();
    assert!(lines[1..].iter().all(|l| l.split(',').count() == cols));
    assert_eq!(rep.mean_l1_by_epsilon().len(), 1);
    let unordered = StudyConfig { epsilons: vec![0.05, 0.1], ..cfg };
    assert!(convergence_study::<f64>(&Polygon::unit_square(), &unordered).is_err());
}

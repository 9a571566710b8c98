//! Invariant suites run by `eit verify`.
//!
//! `quick` covers the algebraic identities of every module on small meshes;
//! `full` adds the rate checks (layout refinement, FEM convergence,
//! mollification and discretization of the unknown).

use std::fmt;
use std::time::Instant;

use eit_core::cem::{resistance_matrix, simplified_resistance_matrix, BoundaryOps, CemSolver, ElectrodeLayout};
use eit_core::conductivity::{
    discretize_bv, l1_between_sources, l1_to_source, mollify, tv_seminorm, FieldKind, NodalField, Phantom, PointSource,
    Sym2,
};
use eit_core::fem::{FeSpace, NeumannSolver};
use eit_core::inverse::{noise_inject, smoothed_objective_gradient, ForwardModel, NoiseMode, Schedule};
use eit_core::linalg::loglog_slope;
use eit_core::mesh::{build_initial_triangulation, Polygon, TriMesh};
use eit_core::ntd::{fem_convergence_check, ntd_assemble};
use eit_core::{EitError, Result};
use nalgebra::{DVector, Point2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl std::str::FromStr for Level {
    type Err = EitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Level::Quick),
            "full" => Ok(Level::Full),
            other => Err(EitError::invalid(format!("unknown verification level '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {:<44} {} ({:.2} s)", c.name, c.detail, c.seconds)?;
        }
        writeln!(f, "{} checks, {} failed", self.checks.len(), self.failures())
    }
}

type CheckFn = fn() -> Result<(bool, String)>;

fn run(name: &'static str, f: CheckFn) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

pub fn cmd_verify(level: Level) -> VerifyReport {
    let mut suites: Vec<(&'static str, CheckFn)> = vec![
        ("mesh: triangle counts", mesh_counts),
        ("mesh: topology, conformity, quality", mesh_quality),
        ("mesh: dump round trip", mesh_round_trip),
        ("fem: stiffness symmetry and kernel", fem_stiffness),
        ("fem: linear solutions are exact", fem_linear_exact),
        ("fem: conductivity scaling", fem_scaling),
        ("conductivity: projection", conductivity_projection),
        ("conductivity: mollified constant", conductivity_mollify_constant),
        ("cem: adjoint identity", cem_adjoint),
        ("cem: operator norm bounds", cem_norm_bounds),
        ("cem: currents and zero sums", cem_currents),
        ("cem: electrode count bound", cem_count_bound),
        ("ntd: self-adjoint, zero mean, scaling", ntd_invariants),
        ("inverse: noise level and determinism", inverse_noise),
        ("inverse: gradient vs finite differences", inverse_gradient),
        ("inverse: default schedule", inverse_schedule),
    ];
    if level == Level::Full {
        suites.extend([
            ("cem: layout refinement rates", cem_rates as CheckFn),
            ("ntd: FEM convergence", ntd_convergence),
            ("conductivity: mollification rate", conductivity_mollification_rate),
            ("conductivity: discretization of the unknown", conductivity_discretization),
        ]);
    }
    VerifyReport { checks: suites.into_iter().map(|(n, f)| run(n, f)).collect() }
}

fn square(level: usize) -> TriMesh<f64> {
    build_initial_triangulation(&Polygon::unit_square()).expect("unit square").refined(level)
}

fn constant(space: &FeSpace<f64>, c: f64) -> Result<NodalField<f64>> {
    NodalField::constant(FieldKind::Scalar, space.dim(), c, 0.5, 4.0)
}

fn disk() -> Phantom {
    Phantom::disk(1.0, [0.5, 0.5], 0.25, 3.0)
}

fn mesh_counts() -> Result<(bool, String)> {
    let counts: Vec<usize> = (0..4).map(|l| square(l).triangle_count()).collect();
    let expect: Vec<usize> = (0..4).map(|l| 2 * 4usize.pow(l as u32)).collect();
    Ok((counts == expect, format!("{counts:?}")))
}

fn mesh_quality() -> Result<(bool, String)> {
    let l_shape = Polygon::new(
        [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]]
            .iter()
            .map(|p| Point2::new(p[0], p[1]))
            .collect(),
    )?;
    let mut worst: f64 = 0.0;
    for base in [build_initial_triangulation(&Polygon::<f64>::unit_square())?, build_initial_triangulation(&l_shape)?] {
        let s0 = base.quality().s;
        for l in 0..4 {
            let m = base.refined(l);
            m.check_topology()?;
            m.check_conforming()?;
            worst = worst.max((m.quality().s - s0).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max quality drift {worst:.1e}")))
}

fn mesh_round_trip() -> Result<(bool, String)> {
    let m = square(2);
    let back = TriMesh::<f64>::from_dump(&m.to_dump())?;
    let same = back.vertices() == m.vertices() && back.triangles() == m.triangles();
    Ok((same, format!("{} vertices", m.vertex_count())))
}

fn fem_stiffness() -> Result<(bool, String)> {
    let s = FeSpace::new(square(3));
    let f = disk().interpolate(s.mesh(), 0.5, 4.0)?;
    let k = s.stiffness(&f)?;
    let ones = k.mul_vec(&vec![1.0; s.dim()]);
    let kernel = ones.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let asym = k.asymmetry();
    Ok((kernel < 1e-12 && asym < 1e-14, format!("|K1| = {kernel:.1e}, asymmetry {asym:.1e}")))
}

/// Flux of `u = x + 2y` with unit conductivity, exactly representable.
fn linear_load(space: &FeSpace<f64>) -> Vec<f64> {
    let flux: Vec<f64> =
        space.mesh().boundary_triangulation().iter().map(|e| e.normal[0] + 2.0 * e.normal[1]).collect();
    space.edge_constant_load(&flux)
}

fn fem_linear_exact() -> Result<(bool, String)> {
    let s = FeSpace::new(square(3));
    let sol = NeumannSolver::new(&s, &constant(&s, 1.0)?)?.solve_load(&linear_load(&s))?;
    let exact: Vec<f64> = s.mesh().vertices().iter().map(|p| p.x + 2.0 * p.y).collect();
    let trace: Vec<f64> = s.boundary_nodes().iter().map(|&v| exact[v]).collect();
    let mean = s.boundary_mean(&trace);
    let err = sol.values.iter().zip(&exact).fold(0.0f64, |a, (u, e)| a.max((u - (e - mean)).abs()));
    Ok((err < 1e-10, format!("max nodal error {err:.1e}")))
}

fn fem_scaling() -> Result<(bool, String)> {
    let s = FeSpace::new(square(3));
    let load = linear_load(&s);
    let u1 = NeumannSolver::new(&s, &constant(&s, 1.0)?)?.solve_load(&load)?.values;
    let u2 = NeumannSolver::new(&s, &constant(&s, 2.0)?)?.solve_load(&load)?.values;
    let err = u1.iter().zip(&u2).fold(0.0f64, |a, (x, y)| a.max((x / 2.0 - y).abs()));
    Ok((err < 1e-10, format!("max |u(1)/2 - u(2)| = {err:.1e}")))
}

fn conductivity_projection() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..300).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let f = NodalField::from_raw(FieldKind::Tensor, data, 0.5, 2.0)?;
    let p = f.project_to_admissible();
    let ok = p.is_admissible() && p.project_to_admissible() == p;
    Ok((ok, "100 random tensors".into()))
}

fn conductivity_mollify_constant() -> Result<(bool, String)> {
    let r = mollify(&Phantom::constant(2.0), &Polygon::unit_square(), (1.0, 3.0), 0.1, None)?;
    let err = r.values.iter().fold(0.0f64, |a, v: &Sym2<f64>| a.max((v[0] - 2.0).abs()).max(v[1].abs()));
    Ok((err < 1e-12, format!("max deviation {err:.1e}")))
}

fn random_pair(ops: &BoundaryOps<f64>, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
    let f = DVector::from_fn(ops.dim(), |_, _| rng.gen_range(-1.0..1.0));
    let g = DVector::from_fn(ops.dim(), |_, _| rng.gen_range(-1.0..1.0));
    (&ops.p_star * f, &ops.p_star * g)
}

fn cem_adjoint() -> Result<(bool, String)> {
    let s = FeSpace::new(square(4));
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1)?;
    let ops = BoundaryOps::new(&s, &layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (f, g) = random_pair(&ops, &mut rng);
        let lhs = ops.inner(&(&ops.e * (&ops.p * &f)), &g);
        let rhs = ops.inner(&f, &(&ops.q * &g));
        worst = worst.max((lhs - rhs).abs());
    }
    Ok((worst <= 1e-12, format!("max defect {worst:.1e}")))
}

fn cem_norm_bounds() -> Result<(bool, String)> {
    let s = FeSpace::new(square(4));
    let mut worst = f64::NEG_INFINITY;
    for (m, k) in [(1, 1), (2, 1), (2, 3), (3, 2)] {
        let layout = ElectrodeLayout::from_mesh(s.mesh(), m, k, 0.1)?;
        let ops = BoundaryOps::new(&s, &layout)?;
        let bound = layout.stats(&s)?.theta.sqrt() + 1e-9;
        worst = worst.max(ops.q_norm() - bound).max(ops.e_norm() - bound);
    }
    Ok((worst <= 0.0, format!("max excess over theta^1/2 {worst:.1e}")))
}

fn cem_currents() -> Result<(bool, String)> {
    let s = FeSpace::new(square(3));
    let f = disk().interpolate(s.mesh(), 0.5, 4.0)?;
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 2, 2, 0.1)?;
    let solver = CemSolver::new(&s, &f, &layout)?;
    let m = layout.count();
    let i: Vec<f64> = (0..m)
        .map(|j| {
            if j == 0 {
                1.0
            } else if j == m / 2 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let sol = solver.solve(&i)?;
    let rec = solver.recovered_currents(&sol);
    let cur = rec.iter().zip(&i).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let zs = resistance_matrix(&s, &f, &layout)?.zero_sum_defect();
    let zh = simplified_resistance_matrix(&s, &f, &layout)?.zero_sum_defect();
    let ok = cur < 1e-8 && zs < 1e-10 && zh < 1e-10;
    Ok((ok, format!("current error {cur:.1e}, zero-sum defects {zs:.1e} / {zh:.1e}")))
}

fn cem_count_bound() -> Result<(bool, String)> {
    let s = FeSpace::new(square(4));
    let mut ok = true;
    for (m, k) in [(1, 1), (2, 1), (3, 5), (4, 16)] {
        ok &= ElectrodeLayout::from_mesh(s.mesh(), m, k, 0.1)?.stats(&s)?.count_bound_holds();
    }
    Ok((ok, "4 layouts".into()))
}

fn ntd_invariants() -> Result<(bool, String)> {
    let s = FeSpace::new(square(3));
    let n1 = ntd_assemble(&s, &disk().interpolate(s.mesh(), 0.5, 4.0)?)?;
    let doubled =
        NodalField::scalar(disk().interpolate(s.mesh(), 0.5, 4.0)?.data().iter().map(|v| 2.0 * v).collect(), 0.5, 8.0)?;
    let n2 = ntd_assemble(&s, &doubled)?;
    let sa = n1.self_adjointness_defect();
    let zm = n1.zero_mean_defect();
    let sc = (n1.matrix() / 2.0 - n2.matrix()).abs().max();
    let ok = sa <= 1e-9 && zm <= 1e-10 && sc <= 1e-10;
    Ok((ok, format!("adjointness {sa:.1e}, mean {zm:.1e}, scaling {sc:.1e}")))
}

fn inverse_noise() -> Result<(bool, String)> {
    let s = FeSpace::new(square(3));
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1)?;
    let r = simplified_resistance_matrix(&s, &constant(&s, 1.0)?, &layout)?;
    let a = noise_inject(&r, 0.01, 3, NoiseMode::Absolute)?;
    let b = noise_inject(&r, 0.01, 3, NoiseMode::Absolute)?;
    let level = ((&a.matrix - &r.matrix).norm() - r.size() as f64 * 0.01).abs();
    let ok = a == b && level < 1e-12 && a.zero_sum_defect() < 1e-12;
    Ok((ok, format!("level defect {level:.1e}")))
}

fn inverse_gradient() -> Result<(bool, String)> {
    let s = FeSpace::new(square(2));
    let layout = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1)?;
    let model = ForwardModel::new(&s, &layout)?;
    let truth = disk().interpolate(s.mesh(), 0.5, 4.0)?;
    let meas = simplified_resistance_matrix(&s, &truth, &layout)?;
    let x = NodalField::scalar(s.mesh().vertices().iter().map(|p| 1.5 + 0.3 * p.x - 0.2 * p.y).collect(), 0.5, 4.0)?;
    let (a, tau) = (1e-2, 5e-2);
    let (_, g) = smoothed_objective_gradient(&model, &x, &meas, a, tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let d: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-5;
        let shifted = |t: f64| -> Result<f64> {
            let data = x.data().iter().zip(&d).map(|(v, e)| v + t * e).collect();
            let f = NodalField::from_raw(FieldKind::Scalar, data, 0.5, 4.0)?;
            Ok(smoothed_objective_gradient(&model, &f, &meas, a, tau)?.0)
        };
        let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let an: f64 = g.iter().zip(&d).map(|(x, y)| x * y).sum();
        worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.1e}")))
}

fn inverse_schedule() -> Result<(bool, String)> {
    let v = Schedule::default().violations();
    Ok((v.is_empty(), if v.is_empty() { "valid".into() } else { v.join(", ") }))
}

fn cem_rates() -> Result<(bool, String)> {
    let s = FeSpace::new(square(6));
    let f = disk().interpolate(s.mesh(), 0.5, 4.0)?;
    let n = ntd_assemble(&s, &f)?;
    let (mut ds, mut e1, mut e2, mut e3) = (vec![], vec![], vec![], vec![]);
    for layout_level in 2..=5usize {
        let coarsen = 6 - layout_level;
        let layout = ElectrodeLayout::from_mesh(s.mesh(), coarsen, 1 << (coarsen - 1), 0.1)?;
        let ops = BoundaryOps::new(&s, &layout)?;
        let smooth = DVector::from_fn(ops.dim(), |i, _| {
            let [a, b] = s.mesh().boundary_edges()[i / 2];
            let p = s.mesh().vertices()[if i % 2 == 0 { a } else { b }];
            (3.0 * p.x).cos() + p.y * p.y
        });
        let g = &ops.p_star * smooth;
        let defect = &g - &ops.e * (&ops.p * &g);
        let r = resistance_matrix(&s, &f, &layout)?;
        let r_hat = simplified_resistance_matrix(&s, &f, &layout)?;
        ds.push(layout.stats(&s)?.delta);
        e1.push(ops.inner(&defect, &defect).sqrt());
        e2.push(ops.norm(&(ops.ntd_operator(n.matrix()) - ops.extended_operator(&r.matrix))));
        e3.push(ops.lifted_norm(&(&r_hat.matrix - &r.matrix)));
    }
    let slopes = [loglog_slope(&ds, &e1), loglog_slope(&ds, &e2), loglog_slope(&ds, &e3)];
    Ok((slopes.iter().all(|&x| x >= 0.4), format!("slopes {:.2} {:.2} {:.2}", slopes[0], slopes[1], slopes[2])))
}

struct Smooth;

impl PointSource<f64> for Smooth {
    fn eval(&self, p: &Point2<f64>) -> Option<Sym2<f64>> {
        let s = 1.0 + 0.5 * (std::f64::consts::PI * p.x).sin() * (std::f64::consts::PI * p.y).sin();
        Some([s, 0.0, s])
    }
}

fn ntd_convergence() -> Result<(bool, String)> {
    let base = square(0);
    let rep = fem_convergence_check(&base, &Smooth, FieldKind::Scalar, (0.5, 2.0), &[2, 3, 4, 5], 7)?;
    Ok((rep.slope >= 0.5 && rep.monotone, format!("slope {:.2}, monotone {}", rep.slope, rep.monotone)))
}

fn conductivity_mollification_rate() -> Result<(bool, String)> {
    let quad = square(6);
    let dom = Polygon::unit_square();
    let gammas = [0.08, 0.04, 0.02, 0.01];
    let mut errs = Vec::new();
    for g in gammas {
        let r = mollify(&disk(), &dom, (1.0, 3.0), g, None)?;
        errs.push(l1_between_sources(&quad, &r, &disk(), 3));
    }
    let slope = loglog_slope(&gammas, &errs);
    Ok(((0.8..=1.2).contains(&slope), format!("slope {slope:.3}")))
}

fn conductivity_discretization() -> Result<(bool, String)> {
    let dom = Polygon::unit_square();
    let exact = disk().exact_tv();
    let (mut l1, mut tv) = (vec![], vec![]);
    for level in 3..=6 {
        let m = square(level);
        let f = discretize_bv(&disk(), &dom, FieldKind::Scalar, (1.0, 3.0), &m, 0.45)?;
        l1.push(l1_to_source(&m, &f, &disk(), 3)?);
        tv.push((tv_seminorm(&m, &f)? - exact).abs());
    }
    let ok =
        l1.windows(2).all(|w| w[1] < w[0]) && tv.windows(2).all(|w| w[1] < w[0]) && tv[tv.len() - 1] <= 0.15 * exact;
    Ok((ok, format!("final L1 {:.3e}, final TV error {:.1}%", l1[3], 100.0 * tv[3] / exact)))
}

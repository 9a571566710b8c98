use eit_core::conductivity::{FieldKind, NodalField};
use eit_core::fem::{gauss7, solve_dirichlet, solve_neumann, BoundaryFunction, FeSpace, NeumannSolver};
use eit_core::mesh::{build_initial_triangulation, Polygon, TriMesh};
use nalgebra::Point2;

fn square(level: usize) -> TriMesh<f64> {
    build_initial_triangulation(&Polygon::unit_square()).unwrap().refined(level)
}

fn constant(s: &FeSpace<f64>, c: f64) -> NodalField<f64> {
    NodalField::constant(FieldKind::Scalar, s.dim(), c, 0.1, 10.0).unwrap()
}

/// Barycentric points of the `4^k` congruent sub-triangles' centroids.
fn sub_centroids(k: usize) -> Vec<[f64; 3]> {
    let n = 1usize << k;
    let s = 1.0 / n as f64;
    let mut pts = Vec::new();
    for i in 0..n {
        for j in 0..n - i {
            let (a, b) = (i as f64, j as f64);
            pts.push([(a + 1.0 / 3.0) * s, (b + 1.0 / 3.0) * s, 1.0 - (a + b + 2.0 / 3.0) * s]);
            if i + j + 1 < n {
                pts.push([(a + 2.0 / 3.0) * s, (b + 2.0 / 3.0) * s, 1.0 - (a + b + 4.0 / 3.0) * s]);
            }
        }
    }
    pts
}

fn at(mesh: &TriMesh<f64>, t: usize, b: &[f64; 3]) -> Point2<f64> {
    let [p, q, r] = mesh.triangles()[t].map(|v| mesh.vertices()[v]);
    Point2::from(p.coords * b[0] + q.coords * b[1] + r.coords * b[2])
}

#[test]
fn interpolation_error_of_x_squared_drops_fourfold() {
    let mut errs = Vec::new();
    for level in 3..=6 {
        let mesh = square(level);
        let s = FeSpace::new(mesh.clone());
        let u = s.interpolate(|p| p.x * p.x).unwrap();
        let pts = sub_centroids(4);
        let mut e2 = 0.0;
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let w = mesh.triangle_area(t) / pts.len() as f64;
            for b in &pts {
                let x = at(&mesh, t, b).x;
                let uh = b[0] * u[tri[0]] + b[1] * u[tri[1]] + b[2] * u[tri[2]];
                e2 += w * (uh - x * x).powi(2);
            }
        }
        errs.push(e2.sqrt());
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn interpolation_reproduces_affine_functions() {
    let mesh = square(3);
    let s = FeSpace::new(mesh.clone());
    let three = s.interpolate(|_| 3.0).unwrap();
    assert!(three.iter().all(|&v| v == 3.0));
    let u = s.interpolate(|p| p.x + 2.0 * p.y).unwrap();
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let c = at(&mesh, t, &[1.0 / 3.0; 3]);
        let uh = (u[tri[0]] + u[tri[1]] + u[tri[2]]) / 3.0;
        assert!((uh - (c.x + 2.0 * c.y)).abs() < 1e-12);
    }
}

#[test]
fn tensor_stiffness_matches_seven_point_quadrature() {
    let mesh = square(3);
    let s = FeSpace::new(mesh.clone());
    let vals: Vec<[f64; 3]> =
        mesh.vertices().iter().map(|p| [1.0 + p.x, 0.3 * p.y - 0.1, 2.0 - p.x * 0.5 + p.y]).collect();
    let field = NodalField::tensor(vals.clone(), 0.2, 5.0).unwrap();
    let k = s.stiffness(&field).unwrap().to_dense();
    let mut oracle = nalgebra::DMatrix::<f64>::zeros(s.dim(), s.dim());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = s.basis_gradients(t);
        for (b, w) in gauss7::<f64>() {
            let a: Vec<f64> =
                (0..3).map(|c| b[0] * vals[tri[0]][c] + b[1] * vals[tri[1]][c] + b[2] * vals[tri[2]][c]).collect();
            for i in 0..3 {
                for j in 0..3 {
                    let ag = [a[0] * g[j][0] + a[1] * g[j][1], a[1] * g[j][0] + a[2] * g[j][1]];
                    oracle[(tri[i], tri[j])] += w * mesh.triangle_area(t) * (g[i][0] * ag[0] + g[i][1] * ag[1]);
                }
            }
        }
    }
    assert!((k - oracle).abs().max() < 1e-10);
}

#[test]
fn stiffness_kernel_and_linearity() {
    let s = FeSpace::new(square(0));
    let k1 = s.stiffness(&constant(&s, 1.0)).unwrap();
    assert!(k1.mul_vec(&[1.0; 4]).iter().all(|v| *v == 0.0));
    let k3 = s.stiffness(&constant(&s, 3.0)).unwrap().to_dense();
    assert!((k1.to_dense() * 3.0 - k3).abs().max() < 1e-12);
}

/// `int_{dOmega} g phi_i` by 5-point Gauss-Legendre on each boundary edge.
fn exact_flux_load(s: &FeSpace<f64>, grad: impl Fn(f64, f64) -> [f64; 2]) -> Vec<f64> {
    let gl = [
        (0.0, 0.5688888888888889),
        (-0.5384693101056831, 0.4786286704993665),
        (0.5384693101056831, 0.4786286704993665),
        (-0.9061798459386640, 0.2369268850561891),
        (0.9061798459386640, 0.2369268850561891),
    ];
    let mut load = vec![0.0; s.dim()];
    for e in s.mesh().boundary_triangulation() {
        let [a, b] = e.nodes;
        let (pa, pb) = (s.mesh().vertices()[a], s.mesh().vertices()[b]);
        for (x, w) in gl {
            let t = 0.5 * (x + 1.0);
            let p = pa + (pb - pa) * t;
            let g = grad(p.x, p.y);
            let flux = g[0] * e.normal[0] + g[1] * e.normal[1];
            load[a] += 0.5 * w * e.length * flux * (1.0 - t);
            load[b] += 0.5 * w * e.length * flux * t;
        }
    }
    load
}

#[test]
fn galerkin_error_beats_interpolation_error() {
    // u = e^x cos y is harmonic
    let u = |x: f64, y: f64| x.exp() * y.cos();
    let grad = |x: f64, y: f64| [x.exp() * y.cos(), -x.exp() * y.sin()];
    for level in 2..=4 {
        let mesh = square(level);
        let s = FeSpace::new(mesh.clone());
        let load = exact_flux_load(&s, grad);
        let total: f64 = load.iter().sum();
        assert!(total.abs() < 1e-12);
        let uh = NeumannSolver::new(&s, &constant(&s, 1.0)).unwrap().solve_load(&load).unwrap().values;
        let pi = s.interpolate(|p| u(p.x, p.y)).unwrap();
        let pts = sub_centroids(3);
        let (mut eg, mut ei) = (0.0, 0.0);
        for t in 0..mesh.triangle_count() {
            let (gh, gi) = (s.gradient(&uh, t), s.gradient(&pi, t));
            let w = mesh.triangle_area(t) / pts.len() as f64;
            for b in &pts {
                let p = at(&mesh, t, b);
                let g = grad(p.x, p.y);
                eg += w * ((g[0] - gh[0]).powi(2) + (g[1] - gh[1]).powi(2));
                ei += w * ((g[0] - gi[0]).powi(2) + (g[1] - gi[1]).powi(2));
            }
        }
        assert!(eg <= ei * (1.0 + 1e-9), "level {level}: {eg} > {ei}");
    }
}

#[test]
fn neumann_solution_for_unit_flux() {
    let s = FeSpace::new(square(3));
    let per_edge: Vec<f64> = s.mesh().boundary_triangulation().iter().map(|e| e.normal[0]).collect();
    let v = NeumannSolver::new(&s, &constant(&s, 1.0)).unwrap().solve_load(&s.edge_constant_load(&per_edge)).unwrap();
    for (p, u) in s.mesh().vertices().iter().zip(&v.values) {
        assert!((u - (p.x - 0.5)).abs() < 1e-10);
    }
    let trace = s.trace(&v.values);
    assert!(trace.zero_mean);
    assert!(s.boundary_mean(&trace.values).abs() < 1e-10);
}

#[test]
fn zero_flux_and_scaling() {
    let s = FeSpace::new(square(3));
    let zero = BoundaryFunction { values: vec![0.0; s.boundary_dim()], zero_mean: true };
    let v = solve_neumann(&s, &constant(&s, 1.0), &zero).unwrap();
    assert!(v.values.iter().all(|x| x.abs() < 1e-15));
    let g = s.centered(s.boundary_nodes().iter().map(|&i| s.mesh().vertices()[i].y.sin()).collect());
    let v1 = solve_neumann(&s, &constant(&s, 1.0), &g).unwrap();
    let v2 = solve_neumann(&s, &constant(&s, 2.0), &g).unwrap();
    for (a, b) in v1.values.iter().zip(&v2.values) {
        assert!((a / 2.0 - b).abs() < 1e-10);
    }
    assert!(s.boundary_mean(&s.trace(&v1.values).values).abs() < 1e-10);
}

#[test]
fn dirichlet_affine_and_zero_data() {
    let s = FeSpace::new(square(3));
    let phi = BoundaryFunction {
        values: s
            .boundary_nodes()
            .iter()
            .map(|&i| 1.0 - 2.0 * s.mesh().vertices()[i].x + s.mesh().vertices()[i].y)
            .collect(),
        zero_mean: false,
    };
    let u = solve_dirichlet(&s, &constant(&s, 1.0), &phi, None).unwrap();
    for (p, v) in s.mesh().vertices().iter().zip(&u.values) {
        assert!((v - (1.0 - 2.0 * p.x + p.y)).abs() < 1e-10);
    }
    let zero = BoundaryFunction { values: vec![0.0; s.boundary_dim()], zero_mean: true };
    let u0 = solve_dirichlet(&s, &constant(&s, 1.0), &zero, None).unwrap();
    assert!(u0.values.iter().all(|v| *v == 0.0));
}

#[test]
fn trace_of_constants_and_of_x() {
    let s = FeSpace::new(square(2));
    let c = s.trace(&vec![4.0; s.dim()]);
    assert!(c.values.iter().all(|&v| v == 4.0));
    assert!((s.boundary_mean(&c.values) - 4.0).abs() < 1e-14);
    let x: Vec<f64> = s.mesh().vertices().iter().map(|p| p.x).collect();
    assert!((s.boundary_mean(&s.trace(&x).values) - 0.5).abs() < 1e-14);
}

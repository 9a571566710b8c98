//! P1 finite elements: interpolation, stiffness assembly, Neumann and
//! Dirichlet solves, boundary traces.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Point2};

use crate::conductivity::{triangle_gradients, NodalField, Sym2};
use crate::error::{EitError, Result};
use crate::linalg::{CsrMatrix, EnvelopeCholesky};
use crate::mesh::{parse_fields, TriMesh};
use crate::scalar::{lit, to_f64, Real};

/// P1 space on a mesh, with cached element geometry and boundary data.
#[derive(Clone, Debug)]
pub struct FeSpace<T: Real> {
    mesh: TriMesh<T>,
    areas: Vec<T>,
    grads: Vec<[[T; 2]; 3]>,
    boundary_nodes: Vec<usize>,
    boundary_pos: Vec<Option<usize>>,
    edge_lengths: Vec<T>,
    perimeter: T,
}

/// Piecewise-linear function on the boundary, by boundary position
/// (position `i` is the start node of boundary edge `i`).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryFunction<T> {
    pub values: Vec<T>,
    pub zero_mean: bool,
}

/// Nodal solution of a linear solve with its relative residual.
#[derive(Clone, Debug)]
pub struct FemSolution<T> {
    pub values: Vec<T>,
    pub residual: T,
}

impl<T: Real> FeSpace<T> {
    pub fn new(mesh: TriMesh<T>) -> Self {
        let nt = mesh.triangle_count();
        let mut areas = Vec::with_capacity(nt);
        let mut grads = Vec::with_capacity(nt);
        for k in 0..nt {
            let (a, g) = triangle_gradients(&mesh, k);
            areas.push(a);
            grads.push(g);
        }
        let boundary_nodes: Vec<usize> = mesh.boundary_edges().iter().map(|e| e[0]).collect();
        let mut boundary_pos = vec![None; mesh.vertex_count()];
        for (i, &v) in boundary_nodes.iter().enumerate() {
            boundary_pos[v] = Some(i);
        }
        let edge_lengths: Vec<T> =
            mesh.boundary_edges().iter().map(|e| (mesh.vertices()[e[1]] - mesh.vertices()[e[0]]).norm()).collect();
        let perimeter = edge_lengths.iter().fold(T::zero(), |a, &b| a + b);
        FeSpace { mesh, areas, grads, boundary_nodes, boundary_pos, edge_lengths, perimeter }
    }

    pub fn mesh(&self) -> &TriMesh<T> {
        &self.mesh
    }

    /// Number of P1 unknowns.
    pub fn dim(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    /// Boundary position of a vertex, if it lies on the boundary.
    pub fn boundary_position(&self, v: usize) -> Option<usize> {
        self.boundary_pos[v]
    }

    pub fn boundary_dim(&self) -> usize {
        self.boundary_nodes.len()
    }

    pub fn edge_lengths(&self) -> &[T] {
        &self.edge_lengths
    }

    pub fn perimeter(&self) -> T {
        self.perimeter
    }

    pub fn area(&self, k: usize) -> T {
        self.areas[k]
    }

    /// Gradients of the three local basis functions of triangle `k`.
    pub fn basis_gradients(&self, k: usize) -> &[[T; 2]; 3] {
        &self.grads[k]
    }

    /// Constant gradient of a P1 function on triangle `k`.
    pub fn gradient(&self, u: &[T], k: usize) -> [T; 2] {
        let t = &self.mesh.triangles()[k];
        let g = &self.grads[k];
        let mut out = [T::zero(); 2];
        for i in 0..3 {
            out[0] += g[i][0] * u[t[i]];
            out[1] += g[i][1] * u[t[i]];
        }
        out
    }

    /// Nodal interpolant `Pi_h f`.
    pub fn interpolate(&self, f: impl Fn(&Point2<T>) -> T) -> Result<Vec<T>> {
        let vals: Vec<T> = self.mesh.vertices().iter().map(f).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(EitError::invalid("interpolated function is not finite at every vertex"));
        }
        Ok(vals)
    }

    /// Boundary mass matrix on boundary positions (exact for P1 traces).
    pub fn boundary_mass(&self) -> DMatrix<T> {
        let nb = self.boundary_dim();
        let mut m = DMatrix::zeros(nb, nb);
        for (i, &l) in self.edge_lengths.iter().enumerate() {
            let j = (i + 1) % nb;
            let (d, o) = (l / lit(3.0), l / lit(6.0));
            m[(i, i)] += d;
            m[(j, j)] += d;
            m[(i, j)] += o;
            m[(j, i)] += o;
        }
        m
    }

    /// `M_b f` without forming the matrix.
    pub fn apply_boundary_mass(&self, f: &[T]) -> Vec<T> {
        let nb = self.boundary_dim();
        let mut out = vec![T::zero(); nb];
        for (i, &l) in self.edge_lengths.iter().enumerate() {
            let j = (i + 1) % nb;
            out[i] += l * (f[i] * lit(2.0) + f[j]) / lit(6.0);
            out[j] += l * (f[i] + f[j] * lit(2.0)) / lit(6.0);
        }
        out
    }

    /// `int_{dOmega} f` for a P1 boundary function.
    pub fn boundary_integral(&self, f: &[T]) -> T {
        let nb = self.boundary_dim();
        self.edge_lengths
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (i, &l)| acc + l * (f[i] + f[(i + 1) % nb]) * lit(0.5))
    }

    pub fn boundary_mean(&self, f: &[T]) -> T {
        self.boundary_integral(f) / self.perimeter
    }

    /// Boundary restriction of nodal values.
    pub fn trace(&self, u: &[T]) -> BoundaryFunction<T> {
        let values: Vec<T> = self.boundary_nodes.iter().map(|&v| u[v]).collect();
        let zero_mean = self.boundary_mean(&values).abs()
            <= lit::<T>(1e-10) * (values.iter().fold(T::zero(), |a, v| a.max(v.abs())) + T::one());
        BoundaryFunction { values, zero_mean }
    }

    /// Boundary function with its mean removed.
    pub fn centered(&self, mut values: Vec<T>) -> BoundaryFunction<T> {
        let m = self.boundary_mean(&values);
        for v in &mut values {
            *v -= m;
        }
        BoundaryFunction { values, zero_mean: true }
    }

    /// Load vector `int g phi_i` for a P1 boundary function.
    pub fn boundary_load(&self, g: &[T]) -> Vec<T> {
        let mg = self.apply_boundary_mass(g);
        let mut load = vec![T::zero(); self.dim()];
        for (i, &v) in self.boundary_nodes.iter().enumerate() {
            load[v] = mg[i];
        }
        load
    }

    /// Load vector for data constant on each boundary edge.
    pub fn edge_constant_load(&self, per_edge: &[T]) -> Vec<T> {
        let mut load = vec![T::zero(); self.dim()];
        for (e, &[a, b]) in self.mesh.boundary_edges().iter().enumerate() {
            let half = per_edge[e] * self.edge_lengths[e] * lit(0.5);
            load[a] += half;
            load[b] += half;
        }
        load
    }

    /// Element matrix `int_K A grad phi_j . grad phi_i` for a triangle-mean tensor.
    pub fn element_stiffness(&self, k: usize, a: &Sym2<T>) -> [[T; 3]; 3] {
        let g = &self.grads[k];
        let area = self.areas[k];
        let mut out = [[T::zero(); 3]; 3];
        for i in 0..3 {
            let ag = [a[0] * g[i][0] + a[1] * g[i][1], a[1] * g[i][0] + a[2] * g[i][1]];
            for j in 0..3 {
                out[i][j] = area * (ag[0] * g[j][0] + ag[1] * g[j][1]);
            }
        }
        out
    }

    /// Stiffness matrix of `b_A`. P1 coefficients times constant gradients
    /// are integrated exactly by the edge-midpoint rule, which reduces to
    /// the vertex mean of the coefficient on each triangle.
    pub fn stiffness(&self, field: &NodalField<T>) -> Result<CsrMatrix<T>> {
        if field.nodes() != self.dim() {
            return Err(EitError::invalid(format!("field has {} nodes, mesh has {}", field.nodes(), self.dim())));
        }
        let mut trip = Vec::with_capacity(9 * self.mesh.triangle_count());
        for (k, t) in self.mesh.triangles().iter().enumerate() {
            let a = field.triangle_mean(t);
            let ke = self.element_stiffness(k, &a);
            for i in 0..3 {
                for j in 0..3 {
                    trip.push((t[i], t[j], ke[i][j]));
                }
            }
        }
        Ok(CsrMatrix::from_triplets(self.dim(), trip))
    }

    /// Consistent mass load `int F phi_i` for P1 nodal data `F`.
    pub fn volume_load(&self, f: &[T]) -> Vec<T> {
        let mut load = vec![T::zero(); self.dim()];
        for (k, t) in self.mesh.triangles().iter().enumerate() {
            let a = self.areas[k] / lit(12.0);
            let s = f[t[0]] + f[t[1]] + f[t[2]];
            for &v in t {
                load[v] += a * (s + f[v]);
            }
        }
        load
    }

    /// `int_Omega u^2` for a P1 function.
    pub fn l2_norm_sq(&self, u: &[T]) -> T {
        let mut s = T::zero();
        for (k, t) in self.mesh.triangles().iter().enumerate() {
            let (a, b, c) = (u[t[0]], u[t[1]], u[t[2]]);
            s += self.areas[k] / lit(6.0) * (a * a + b * b + c * c + a * b + b * c + c * a);
        }
        s
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Energy `u^T K u`.
pub fn energy<T: Real>(k: &CsrMatrix<T>, u: &[T]) -> T {
    dot(&k.mul_vec(u), u)
}

/// Factored pure-Neumann problem. The singular stiffness matrix is made
/// definite by fixing one node; since compatible loads are orthogonal to
/// constants, the pinned solution solves the full system and the exact
/// zero boundary mean is then restored by a constant shift.
pub struct NeumannSolver<'a, T: Real> {
    space: &'a FeSpace<T>,
    stiffness: CsrMatrix<T>,
    factor: EnvelopeCholesky<T>,
    pin: usize,
}

impl<'a, T: Real> NeumannSolver<'a, T> {
    pub fn new(space: &'a FeSpace<T>, field: &NodalField<T>) -> Result<Self> {
        Self::from_stiffness(space, space.stiffness(field)?)
    }

    pub fn from_stiffness(space: &'a FeSpace<T>, stiffness: CsrMatrix<T>) -> Result<Self> {
        let pin = space.boundary_nodes()[0];
        let n = space.dim();
        let mut trip = Vec::with_capacity(stiffness.nnz());
        for i in 0..n {
            for (j, v) in stiffness.row(i) {
                if i != pin && j != pin {
                    trip.push((i, j, v));
                }
            }
        }
        trip.push((pin, pin, T::one()));
        let factor = EnvelopeCholesky::factor(&CsrMatrix::from_triplets(n, trip))?;
        Ok(NeumannSolver { space, stiffness, factor, pin })
    }

    pub fn stiffness(&self) -> &CsrMatrix<T> {
        &self.stiffness
    }

    /// Solves `K v = load` with `sum(load) = 0`, returning the solution
    /// with zero boundary mean.
    pub fn solve_load(&self, load: &[T]) -> Result<FemSolution<T>> {
        let total = load.iter().fold(T::zero(), |a, &b| a + b);
        let scale = load.iter().fold(T::zero(), |a, &b| a + b.abs());
        if total.abs() > lit::<T>(1e-9) * scale {
            return Err(EitError::invalid(format!("Neumann data is not balanced (net flux {})", to_f64(total))));
        }
        let mut rhs = load.to_vec();
        rhs[self.pin] = T::zero();
        let mut v = self.factor.solve(&rhs);
        let r: Vec<T> = self.stiffness.mul_vec(&v).iter().zip(load).map(|(a, b)| *a - *b).collect();
        let residual = if scale > T::zero() { norm(&r) / norm(load) } else { norm(&r) };
        let trace: Vec<T> = self.space.boundary_nodes().iter().map(|&i| v[i]).collect();
        let shift = self.space.boundary_mean(&trace);
        for x in &mut v {
            *x -= shift;
        }
        Ok(FemSolution { values: v, residual })
    }

    /// Solves with P1 boundary flux `g`, which must have zero mean.
    pub fn solve(&self, g: &BoundaryFunction<T>) -> Result<FemSolution<T>> {
        if g.values.len() != self.space.boundary_dim() {
            return Err(EitError::invalid("boundary data has the wrong length"));
        }
        self.solve_load(&self.space.boundary_load(&g.values))
    }
}

/// One-shot Neumann solve.
pub fn solve_neumann<T: Real>(
    space: &FeSpace<T>,
    field: &NodalField<T>,
    g: &BoundaryFunction<T>,
) -> Result<FemSolution<T>> {
    NeumannSolver::new(space, field)?.solve(g)
}

/// Dirichlet solve: `u = phi` on the boundary, `int A grad u . grad w =
/// int F w` for interior basis functions `w`. `volume` holds nodal values
/// of `F`.
pub fn solve_dirichlet<T: Real>(
    space: &FeSpace<T>,
    field: &NodalField<T>,
    phi: &BoundaryFunction<T>,
    volume: Option<&[T]>,
) -> Result<FemSolution<T>> {
    if phi.values.len() != space.boundary_dim() {
        return Err(EitError::invalid("boundary data has the wrong length"));
    }
    let k = space.stiffness(field)?;
    let n = space.dim();
    let mut u = vec![T::zero(); n];
    for (i, &v) in space.boundary_nodes().iter().enumerate() {
        u[v] = phi.values[i];
    }
    let interior: Vec<usize> = (0..n).filter(|&v| space.boundary_position(v).is_none()).collect();
    if interior.is_empty() {
        return Ok(FemSolution { values: u, residual: T::zero() });
    }
    let mut local = vec![usize::MAX; n];
    for (i, &v) in interior.iter().enumerate() {
        local[v] = i;
    }
    let load = match volume {
        Some(f) => space.volume_load(f),
        None => vec![T::zero(); n],
    };
    let lifted = k.mul_vec(&u);
    let rhs: Vec<T> = interior.iter().map(|&v| load[v] - lifted[v]).collect();
    let mut trip = Vec::new();
    for &v in &interior {
        for (j, val) in k.row(v) {
            if local[j] != usize::MAX {
                trip.push((local[v], local[j], val));
            }
        }
    }
    let kii = CsrMatrix::from_triplets(interior.len(), trip);
    let x = EnvelopeCholesky::factor(&kii)?.solve(&rhs);
    let r: Vec<T> = kii.mul_vec(&x).iter().zip(&rhs).map(|(a, b)| *a - *b).collect();
    let rn = norm(&rhs);
    let residual = if rn > T::zero() { norm(&r) / rn } else { norm(&r) };
    for (i, &v) in interior.iter().enumerate() {
        u[v] = x[i];
    }
    Ok(FemSolution { values: u, residual })
}

/// Text dump of nodal data: count, then one node per line.
pub fn field_to_dump<T: Real>(data: &[T], stride: usize) -> String {
    let mut s = String::new();
    writeln!(s, "{}", data.len() / stride).unwrap();
    for chunk in data.chunks(stride) {
        let line: Vec<String> = chunk.iter().map(|v| format!("{:e}", to_f64(*v))).collect();
        writeln!(s, "{}", line.join(" ")).unwrap();
    }
    s
}

pub fn field_from_dump<T: Real>(text: &str, stride: usize) -> Result<Vec<T>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let n: Vec<usize> = parse_fields(lines.next().ok_or_else(|| EitError::Parse("empty field file".into()))?)?;
    if n.len() != 1 {
        return Err(EitError::Parse("field header must be a single count".into()));
    }
    let mut out = Vec::with_capacity(n[0] * stride);
    for _ in 0..n[0] {
        let line = lines.next().ok_or_else(|| EitError::Parse("field file is truncated".into()))?;
        let vals: Vec<f64> = parse_fields(line)?;
        if vals.len() != stride {
            return Err(EitError::Parse(format!("expected {stride} values per line")));
        }
        out.extend(vals.into_iter().map(lit::<T>));
    }
    Ok(out)
}

/// Seven-point degree-5 rule on a triangle: barycentric points and weights
/// (summing to one, to be multiplied by the area).
pub fn gauss7<T: Real>() -> Vec<([T; 3], T)> {
    let (a1, b1) = (0.059715871789770, 0.470142064105115);
    let (a2, b2) = (0.797426985353087, 0.101286507323456);
    let (w0, w1, w2) = (0.225, 0.132394152788506, 0.125939180544827);
    let mut q = vec![([lit(1.0 / 3.0), lit(1.0 / 3.0), lit(1.0 / 3.0)], lit(w0))];
    for (a, b, w) in [(a1, b1, w1), (a2, b2, w2)] {
        q.push(([lit(a), lit(b), lit(b)], lit(w)));
        q.push(([lit(b), lit(a), lit(b)], lit(w)));
        q.push(([lit(b), lit(b), lit(a)], lit(w)));
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::FieldKind;
    use crate::mesh::{build_initial_triangulation, Polygon};

    fn space(level: usize) -> FeSpace<f64> {
        FeSpace::new(build_initial_triangulation(&Polygon::unit_square()).unwrap().refined(level))
    }

    fn unit(s: &FeSpace<f64>, c: f64) -> NodalField<f64> {
        NodalField::constant(FieldKind::Scalar, s.dim(), c, 0.1, 10.0).unwrap()
    }

    #[test]
    fn constants_in_kernel_and_linearity() {
        let s = space(0);
        let k = s.stiffness(&unit(&s, 1.0)).unwrap();
        assert!(k.mul_vec(&[1.0; 4]).iter().all(|v| v.abs() < 1e-12));
        let s = space(3);
        let k1 = s.stiffness(&unit(&s, 1.0)).unwrap();
        let k3 = s.stiffness(&unit(&s, 3.0)).unwrap();
        for i in 0..s.dim() {
            for (j, v) in k1.row(i) {
                assert!((k3.get(i, j) - 3.0 * v).abs() < 1e-12);
            }
        }
        assert!(k1.asymmetry() < 1e-14);
    }

    #[test]
    fn boundary_mass_integrates_exactly() {
        let s = space(2);
        let x: Vec<f64> = s.boundary_nodes().iter().map(|&v| s.mesh().vertices()[v].x).collect();
        // int_{dOmega} x = 2 (left 0, right 1, top/bottom 1/2 each)
        assert!((s.boundary_integral(&x) - 2.0).abs() < 1e-14);
        let mb = s.boundary_mass();
        let xv = nalgebra::DVector::from_vec(x.clone());
        // int x^2 = 1 + 2/3
        assert!(((xv.transpose() * &mb * &xv)[0] - 5.0 / 3.0).abs() < 1e-14);
        assert!(mb.clone().cholesky().is_some());
    }

    #[test]
    fn neumann_affine_solution() {
        let s = space(2);
        let per_edge: Vec<f64> = s.mesh().boundary_triangulation().iter().map(|e| e.normal[0]).collect();
        let load = s.edge_constant_load(&per_edge);
        let sol = NeumannSolver::new(&s, &unit(&s, 1.0)).unwrap().solve_load(&load).unwrap();
        for (v, p) in sol.values.iter().zip(s.mesh().vertices()) {
            assert!((v - (p.x - 0.5)).abs() < 1e-12);
        }
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn unbalanced_neumann_rejected() {
        let s = space(1);
        let g = BoundaryFunction { values: vec![1.0; s.boundary_dim()], zero_mean: false };
        assert!(matches!(solve_neumann(&s, &unit(&s, 1.0), &g), Err(EitError::Invalid(_))));
    }

    #[test]
    fn dirichlet_reproduces_affine() {
        let s = space(3);
        let f = |p: &Point2<f64>| 1.0 + 2.0 * p.x - p.y;
        let phi = BoundaryFunction {
            values: s.boundary_nodes().iter().map(|&v| f(&s.mesh().vertices()[v])).collect(),
            zero_mean: false,
        };
        let u = solve_dirichlet(&s, &unit(&s, 2.0), &phi, None).unwrap();
        for (v, p) in u.values.iter().zip(s.mesh().vertices()) {
            assert!((v - f(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn field_dump_round_trip() {
        let data = vec![1.0, -2.5e-7, 3.25];
        let back: Vec<f64> = field_from_dump(&field_to_dump(&data, 1), 1).unwrap();
        assert_eq!(back, data);
        assert!(field_from_dump::<f64>("3\n1\n2\n", 1).is_err());
    }

    #[test]
    fn gauss7_integrates_quintics() {
        // int over the reference triangle of l0^2 l1^3 = 2! 3! 0! 2! / 7! * area factor
        let q = gauss7::<f64>();
        let s: f64 = q.iter().map(|(b, w)| w * b[0].powi(2) * b[1].powi(3)).sum();
        let exact = 2.0 * 6.0 * 2.0 / 5040.0; // times area (1/2) divided by area
        assert!((s - exact).abs() < 1e-12);
    }
}

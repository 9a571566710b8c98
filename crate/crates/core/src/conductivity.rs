//! Conductivity fields: P1 nodal fields (scalar or symmetric 2x2 tensor),
//! their total variation, admissibility projection, L1 distances,
//! piecewise-constant phantoms and raster mollification.

use nalgebra::Point2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::mesh::{Locator, Polygon, TriMesh};
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Symmetric 2x2 tensor stored as `[a11, a12, a22]`.
pub type Sym2<T> = [T; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Scalar,
    Tensor,
}

impl FieldKind {
    /// Stored values per node.
    pub fn stride(self) -> usize {
        match self {
            FieldKind::Scalar => 1,
            FieldKind::Tensor => 3,
        }
    }
}

/// Eigenvalues `(min, max)` of a symmetric 2x2 tensor.
pub fn sym_eigenvalues<T: Real>(a: &Sym2<T>) -> (T, T) {
    let m = (a[0] + a[2]) * lit(0.5);
    let r = (((a[0] - a[2]) * lit(0.5)).powi(2) + a[1] * a[1]).sqrt();
    (m - r, m + r)
}

/// Largest absolute eigenvalue, i.e. the operator norm.
pub fn sym_norm<T: Real>(a: &Sym2<T>) -> T {
    let (lo, hi) = sym_eigenvalues(a);
    lo.abs().max(hi.abs())
}

/// Piecewise-linear conductivity on a mesh with ellipticity bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalField<T> {
    kind: FieldKind,
    data: Vec<T>,
    lambda0: T,
    lambda1: T,
}

impl<T: Real> NodalField<T> {
    pub fn scalar(values: Vec<T>, lambda0: T, lambda1: T) -> Result<Self> {
        Self::from_raw(FieldKind::Scalar, values, lambda0, lambda1)
    }

    pub fn tensor(values: Vec<Sym2<T>>, lambda0: T, lambda1: T) -> Result<Self> {
        let data = values.into_iter().flatten().collect();
        Self::from_raw(FieldKind::Tensor, data, lambda0, lambda1)
    }

    /// Raw storage, `stride` values per node. Bounds are checked for
    /// consistency; admissibility of the values is not enforced.
    pub fn from_raw(kind: FieldKind, data: Vec<T>, lambda0: T, lambda1: T) -> Result<Self> {
        if !(lambda0 > T::zero() && lambda0 <= lambda1) {
            return Err(EitError::invalid(format!(
                "need 0 < lambda0 <= lambda1, got [{}, {}]",
                to_f64(lambda0),
                to_f64(lambda1)
            )));
        }
        if data.len() % kind.stride() != 0 {
            return Err(EitError::invalid("field length is not a multiple of its stride"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EitError::invalid("field has non-finite values"));
        }
        Ok(NodalField { kind, data, lambda0, lambda1 })
    }

    pub fn constant(kind: FieldKind, nodes: usize, value: T, lambda0: T, lambda1: T) -> Result<Self> {
        let data = match kind {
            FieldKind::Scalar => vec![value; nodes],
            FieldKind::Tensor => (0..nodes).flat_map(|_| [value, T::zero(), value]).collect(),
        };
        Self::from_raw(kind, data, lambda0, lambda1)
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn nodes(&self) -> usize {
        self.data.len() / self.kind.stride()
    }

    pub fn bounds(&self) -> (T, T) {
        (self.lambda0, self.lambda1)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Tensor value at a node; scalars `s` map to `s I`.
    pub fn tensor_at(&self, node: usize) -> Sym2<T> {
        match self.kind {
            FieldKind::Scalar => {
                let s = self.data[node];
                [s, T::zero(), s]
            }
            FieldKind::Tensor => {
                let d = &self.data[3 * node..3 * node + 3];
                [d[0], d[1], d[2]]
            }
        }
    }

    /// Mean tensor over triangle `k`, equal to `(1/|K|) int_K A` for P1 data.
    pub fn triangle_mean(&self, tri: &[usize; 3]) -> Sym2<T> {
        let mut m = [T::zero(); 3];
        for &v in tri {
            let a = self.tensor_at(v);
            for c in 0..3 {
                m[c] += a[c];
            }
        }
        m.map(|x| x / lit(3.0))
    }

    /// Value interpolated from barycentric coordinates inside a triangle.
    pub fn interpolate_in(&self, tri: &[usize; 3], bary: &[T; 3]) -> Sym2<T> {
        let mut m = [T::zero(); 3];
        for (&v, &l) in tri.iter().zip(bary) {
            let a = self.tensor_at(v);
            for c in 0..3 {
                m[c] += a[c] * l;
            }
        }
        m
    }

    /// Same field and bounds scaled by `c > 0`.
    pub fn scaled(&self, c: T) -> Self {
        NodalField {
            kind: self.kind,
            data: self.data.iter().map(|&v| v * c).collect(),
            lambda0: self.lambda0 * c,
            lambda1: self.lambda1 * c,
        }
    }

    /// Same data with different bounds.
    pub fn with_bounds(&self, lambda0: T, lambda1: T) -> Result<Self> {
        Self::from_raw(self.kind, self.data.clone(), lambda0, lambda1)
    }

    fn tol(&self) -> T {
        self.lambda1 * lit(1e-12)
    }

    /// Ellipticity check at every node, with a relative slack of `1e-12`.
    pub fn is_admissible(&self) -> bool {
        let tol = self.tol();
        (0..self.nodes()).all(|v| {
            let (lo, hi) = sym_eigenvalues(&self.tensor_at(v));
            lo >= self.lambda0 - tol && hi <= self.lambda1 + tol
        })
    }

    /// Nodal clamp for scalars, eigenvalue clamp for tensors. Nodes that
    /// already lie in the admissible set (up to `1e-12` relative) are left
    /// untouched, which makes the projection idempotent.
    pub fn project_to_admissible(&self) -> Self {
        let mut out = self.clone();
        let (l0, l1) = (self.lambda0, self.lambda1);
        match self.kind {
            FieldKind::Scalar => {
                for v in &mut out.data {
                    *v = v.clamp(l0, l1);
                }
            }
            FieldKind::Tensor => {
                let tol = self.tol();
                for chunk in out.data.chunks_mut(3) {
                    let a = [chunk[0], chunk[1], chunk[2]];
                    let (lo, hi) = sym_eigenvalues(&a);
                    if lo >= l0 - tol && hi <= l1 + tol {
                        continue;
                    }
                    let p = clamp_sym(&a, l0, l1);
                    chunk.copy_from_slice(&p);
                }
            }
        }
        out
    }

    /// Text dump: node count, then one node per line.
    pub fn to_dump(&self) -> String {
        crate::fem::field_to_dump(&self.data, self.kind.stride())
    }

    pub fn from_dump(text: &str, kind: FieldKind, lambda0: T, lambda1: T) -> Result<Self> {
        let data = crate::fem::field_from_dump(text, kind.stride())?;
        Self::from_raw(kind, data, lambda0, lambda1)
    }
}

/// Eigenvalue clamp of a symmetric 2x2 tensor.
pub fn clamp_sym<T: Real>(a: &Sym2<T>, l0: T, l1: T) -> Sym2<T> {
    let (lo, hi) = sym_eigenvalues(a);
    let (clo, chi) = (lo.clamp(l0, l1), hi.clamp(l0, l1));
    let half_diff = (a[0] - a[2]) * lit(0.5);
    let r = (half_diff * half_diff + a[1] * a[1]).sqrt();
    if r <= T::eps() * (a[0].abs() + a[2].abs() + T::one()) {
        let m = (clo + chi) * lit(0.5);
        return [m, T::zero(), m];
    }
    // unit eigenvector of the top eigenvalue is (cos t, sin t) with
    // cos 2t = half_diff / r, sin 2t = a12 / r
    let (c2, s2) = (half_diff / r, a[1] / r);
    let m = (clo + chi) * lit(0.5);
    let d = (chi - clo) * lit(0.5);
    [m + d * c2, d * s2, m - d * c2]
}

/// Total variation of a P1 field: scalar `sum |K| |grad s|`; tensor: the
/// operator norm of the matrix of entrywise total variations.
pub fn tv_seminorm<T: Real>(mesh: &TriMesh<T>, field: &NodalField<T>) -> Result<T> {
    check_mesh(mesh, field)?;
    Ok(match field.kind() {
        FieldKind::Scalar => component_tv(mesh, field.data(), 1, 0),
        FieldKind::Tensor => {
            let t: Sym2<T> = [
                component_tv(mesh, field.data(), 3, 0),
                component_tv(mesh, field.data(), 3, 1),
                component_tv(mesh, field.data(), 3, 2),
            ];
            sym_norm(&t)
        }
    })
}

/// `sum_K |K| |grad f_K|` for component `c` of strided nodal data.
pub fn component_tv<T: Real>(mesh: &TriMesh<T>, data: &[T], stride: usize, c: usize) -> T {
    let mut tv = T::zero();
    for (k, t) in mesh.triangles().iter().enumerate() {
        let (area, grads) = triangle_gradients(mesh, k);
        let mut g = [T::zero(); 2];
        for i in 0..3 {
            let v = data[stride * t[i] + c];
            g[0] += grads[i][0] * v;
            g[1] += grads[i][1] * v;
        }
        tv += area * (g[0] * g[0] + g[1] * g[1]).sqrt();
    }
    tv
}

/// Area and gradients of the three barycentric basis functions of triangle `k`.
pub fn triangle_gradients<T: Real>(mesh: &TriMesh<T>, k: usize) -> (T, [[T; 2]; 3]) {
    let [a, b, c] = mesh.triangles()[k];
    let v = mesh.vertices();
    let (pa, pb, pc) = (v[a], v[b], v[c]);
    let det = (pb.x - pa.x) * (pc.y - pa.y) - (pb.y - pa.y) * (pc.x - pa.x);
    let g = [
        [(pb.y - pc.y) / det, (pc.x - pb.x) / det],
        [(pc.y - pa.y) / det, (pa.x - pc.x) / det],
        [(pa.y - pb.y) / det, (pb.x - pa.x) / det],
    ];
    (det * lit(0.5), g)
}

fn check_mesh<T: Real>(mesh: &TriMesh<T>, field: &NodalField<T>) -> Result<()> {
    if mesh.vertex_count() != field.nodes() {
        return Err(EitError::invalid(format!(
            "field has {} nodes but the mesh has {} vertices",
            field.nodes(),
            mesh.vertex_count()
        )));
    }
    Ok(())
}

/// `int_K |d|` for a linear function with vertex values `d`.
fn linear_abs_integral<T: Real>(area: T, d: [T; 3]) -> T {
    let total = (d[0] + d[1] + d[2]) * area / lit(3.0);
    // int d+ = int d - int d-; positive-part integral with the lone-sign formula
    let pos = positive_part_integral(area, d);
    pos * lit(2.0) - total
}

fn positive_part_integral<T: Real>(area: T, d: [T; 3]) -> T {
    let npos = d.iter().filter(|&&x| x > T::zero()).count();
    match npos {
        0 => T::zero(),
        3 => (d[0] + d[1] + d[2]) * area / lit(3.0),
        1 => {
            let i = d.iter().position(|&x| x > T::zero()).unwrap();
            let p = d[i];
            let q = d[(i + 1) % 3];
            let r = d[(i + 2) % 3];
            area * p * p * p / (lit::<T>(3.0) * (p - q) * (p - r))
        }
        _ => {
            let neg = [-d[0], -d[1], -d[2]];
            (d[0] + d[1] + d[2]) * area / lit(3.0) + positive_part_integral(area, neg)
        }
    }
}

/// `int_Omega ||A - B||_2` for fields on the same mesh. Exact for scalars;
/// tensors use a 64-cell subdivision of each triangle.
pub fn l1_distance<T: Real>(mesh: &TriMesh<T>, a: &NodalField<T>, b: &NodalField<T>) -> Result<T> {
    check_mesh(mesh, a)?;
    check_mesh(mesh, b)?;
    if a.kind() != b.kind() {
        return Err(EitError::invalid("cannot compare scalar and tensor fields"));
    }
    let mut total = T::zero();
    match a.kind() {
        FieldKind::Scalar => {
            for (k, t) in mesh.triangles().iter().enumerate() {
                let d = t.map(|v| a.data()[v] - b.data()[v]);
                total += linear_abs_integral(mesh.triangle_area(k), d);
            }
        }
        FieldKind::Tensor => {
            let pts = subdivision_centroids::<T>(3);
            for (k, t) in mesh.triangles().iter().enumerate() {
                let w = mesh.triangle_area(k) / from_usize(pts.len());
                for bary in &pts {
                    let x = a.interpolate_in(t, bary);
                    let y = b.interpolate_in(t, bary);
                    total += sym_norm(&[x[0] - y[0], x[1] - y[1], x[2] - y[2]]) * w;
                }
            }
        }
    }
    Ok(total)
}

/// Barycentric centroids of the `4^levels` cells of a uniformly
/// subdivided reference triangle.
pub fn subdivision_centroids<T: Real>(levels: usize) -> Vec<[T; 3]> {
    let mut tris: Vec<[[T; 3]; 3]> =
        vec![[[T::one(), T::zero(), T::zero()], [T::zero(), T::one(), T::zero()], [T::zero(), T::zero(), T::one()]]];
    let mid = |p: &[T; 3], q: &[T; 3]| [0, 1, 2].map(|i| (p[i] + q[i]) * lit(0.5));
    for _ in 0..levels {
        let mut next = Vec::with_capacity(tris.len() * 4);
        for [a, b, c] in tris {
            let (ab, bc, ca) = (mid(&a, &b), mid(&b, &c), mid(&c, &a));
            next.push([a, ab, ca]);
            next.push([ab, b, bc]);
            next.push([ca, bc, c]);
            next.push([ab, bc, ca]);
        }
        tris = next;
    }
    tris.iter().map(|[a, b, c]| [0, 1, 2].map(|i| (a[i] + b[i] + c[i]) / lit(3.0))).collect()
}

/// Anything that can be evaluated pointwise as a symmetric tensor
/// (scalars `s` as `s I`). `None` means the point is outside the support.
pub trait PointSource<T: Real>: Sync {
    fn eval(&self, p: &Point2<T>) -> Option<Sym2<T>>;
}

/// A nodal field together with its mesh, evaluable anywhere in the mesh.
pub struct MeshSource<'a, T: Real> {
    pub mesh: &'a TriMesh<T>,
    pub field: &'a NodalField<T>,
    locator: Locator<T>,
}

impl<'a, T: Real> MeshSource<'a, T> {
    pub fn new(mesh: &'a TriMesh<T>, field: &'a NodalField<T>) -> Result<Self> {
        check_mesh(mesh, field)?;
        Ok(MeshSource { mesh, field, locator: Locator::new(mesh) })
    }
}

impl<T: Real> PointSource<T> for MeshSource<'_, T> {
    fn eval(&self, p: &Point2<T>) -> Option<Sym2<T>> {
        let (k, bary) = self.locator.locate(self.mesh, p)?;
        Some(self.field.interpolate_in(&self.mesh.triangles()[k], &bary))
    }
}

/// `int_Omega ||A - S||_2` between a nodal field and a pointwise source,
/// by centroid quadrature on `4^subdiv` cells per triangle.
pub fn l1_to_source<T: Real>(
    mesh: &TriMesh<T>,
    field: &NodalField<T>,
    source: &dyn PointSource<T>,
    subdiv: usize,
) -> Result<T> {
    check_mesh(mesh, field)?;
    let pts = subdivision_centroids::<T>(subdiv);
    let parts: Vec<T> = (0..mesh.triangle_count())
        .into_par_iter()
        .map(|k| {
            let t = &mesh.triangles()[k];
            let v = mesh.vertices();
            let w = mesh.triangle_area(k) / from_usize(pts.len());
            let mut s = T::zero();
            for bary in &pts {
                let p = Point2::from(v[t[0]].coords * bary[0] + v[t[1]].coords * bary[1] + v[t[2]].coords * bary[2]);
                let a = field.interpolate_in(t, bary);
                let b = source.eval(&p).unwrap_or(a);
                s += sym_norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]) * w;
            }
            s
        })
        .collect();
    Ok(parts.into_iter().fold(T::zero(), |a, b| a + b))
}

/// `int_Omega ||S1 - S2||_2` over the triangles of a quadrature mesh.
pub fn l1_between_sources<T: Real>(
    mesh: &TriMesh<T>,
    a: &dyn PointSource<T>,
    b: &dyn PointSource<T>,
    subdiv: usize,
) -> T {
    let pts = subdivision_centroids::<T>(subdiv);
    let parts: Vec<T> = (0..mesh.triangle_count())
        .into_par_iter()
        .map(|k| {
            let t = &mesh.triangles()[k];
            let v = mesh.vertices();
            let w = mesh.triangle_area(k) / from_usize(pts.len());
            let mut s = T::zero();
            for bary in &pts {
                let p = Point2::from(v[t[0]].coords * bary[0] + v[t[1]].coords * bary[1] + v[t[2]].coords * bary[2]);
                if let (Some(x), Some(y)) = (a.eval(&p), b.eval(&p)) {
                    s += sym_norm(&[x[0] - y[0], x[1] - y[1], x[2] - y[2]]) * w;
                }
            }
            s
        })
        .collect();
    parts.into_iter().fold(T::zero(), |a, b| a + b)
}

/// Inclusion geometry of a phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Disk { center: [f64; 2], radius: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    #[serde(flatten)]
    pub shape: Shape,
    pub value: f64,
}

/// Piecewise-constant scalar conductivity: a background value plus
/// disjoint inclusions lying inside the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub background: f64,
    #[serde(default)]
    pub inclusions: Vec<Inclusion>,
}

impl Phantom {
    pub fn constant(value: f64) -> Self {
        Phantom { background: value, inclusions: Vec::new() }
    }

    pub fn disk(background: f64, center: [f64; 2], radius: f64, value: f64) -> Self {
        Phantom { background, inclusions: vec![Inclusion { shape: Shape::Disk { center, radius }, value }] }
    }

    pub fn validate(&self, lambda0: f64, lambda1: f64) -> Result<()> {
        let vals = std::iter::once(self.background).chain(self.inclusions.iter().map(|i| i.value));
        for v in vals {
            if !(v >= lambda0 && v <= lambda1) {
                return Err(EitError::invalid(format!("phantom value {v} outside [{lambda0}, {lambda1}]")));
            }
        }
        for inc in &self.inclusions {
            match &inc.shape {
                Shape::Disk { radius, .. } if !(*radius > 0.0) => {
                    return Err(EitError::invalid("disk radius must be positive"))
                }
                Shape::Polygon { vertices } => {
                    Polygon::<f64>::new(vertices.iter().map(|v| Point2::new(v[0], v[1])).collect())?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Scalar value at a point (last matching inclusion wins).
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let mut v = self.background;
        for inc in &self.inclusions {
            let inside = match &inc.shape {
                Shape::Disk { center, radius } => (x - center[0]).powi(2) + (y - center[1]).powi(2) < radius * radius,
                Shape::Polygon { vertices } => point_in_polygon(vertices, x, y),
            };
            if inside {
                v = inc.value;
            }
        }
        v
    }

    /// Exact total variation (jump times interface length), valid for
    /// disjoint inclusions strictly inside the domain.
    pub fn exact_tv(&self) -> f64 {
        self.inclusions
            .iter()
            .map(|inc| {
                let per = match &inc.shape {
                    Shape::Disk { radius, .. } => 2.0 * std::f64::consts::PI * radius,
                    Shape::Polygon { vertices } => {
                        let n = vertices.len();
                        (0..n)
                            .map(|i| {
                                let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
                            })
                            .sum()
                    }
                };
                (inc.value - self.background).abs() * per
            })
            .sum()
    }

    /// Smallest and largest value.
    pub fn range(&self) -> (f64, f64) {
        self.inclusions
            .iter()
            .fold((self.background, self.background), |(lo, hi), i| (lo.min(i.value), hi.max(i.value)))
    }

    /// Nodal interpolant on a mesh.
    pub fn interpolate<T: Real>(&self, mesh: &TriMesh<T>, lambda0: T, lambda1: T) -> Result<NodalField<T>> {
        let vals = mesh.vertices().iter().map(|p| lit(self.value_at(to_f64(p.x), to_f64(p.y)))).collect();
        NodalField::scalar(vals, lambda0, lambda1)
    }
}

fn point_in_polygon(v: &[[f64; 2]], x: f64, y: f64) -> bool {
    let n = v.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if (a[1] > y) != (b[1] > y) {
            let xi = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

impl<T: Real> PointSource<T> for Phantom {
    fn eval(&self, p: &Point2<T>) -> Option<Sym2<T>> {
        let s = lit(self.value_at(to_f64(p.x), to_f64(p.y)));
        Some([s, T::zero(), s])
    }
}

/// Values on a uniform grid of cell centers.
#[derive(Clone, Debug)]
pub struct RasterField<T: Real> {
    pub origin: Point2<T>,
    pub cell: T,
    pub nx: usize,
    pub ny: usize,
    /// Three tensor components per cell, row-major in `y`.
    pub values: Vec<Sym2<T>>,
}

impl<T: Real> RasterField<T> {
    pub fn center(&self, i: usize, j: usize) -> Point2<T> {
        Point2::new(
            self.origin.x + self.cell * (from_usize::<T>(i) + lit(0.5)),
            self.origin.y + self.cell * (from_usize::<T>(j) + lit(0.5)),
        )
    }

    /// Bilinear interpolation between cell centers, clamped at the border.
    pub fn sample(&self, p: &Point2<T>) -> Sym2<T> {
        let fx = to_f64((p.x - self.origin.x) / self.cell) - 0.5;
        let fy = to_f64((p.y - self.origin.y) / self.cell) - 0.5;
        let fx = fx.clamp(0.0, (self.nx - 1) as f64);
        let fy = fy.clamp(0.0, (self.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.nx.saturating_sub(2));
        let j0 = (fy.floor() as usize).min(self.ny.saturating_sub(2));
        let (tx, ty) = (lit::<T>(fx - i0 as f64), lit::<T>(fy - j0 as f64));
        let i1 = (i0 + 1).min(self.nx - 1);
        let j1 = (j0 + 1).min(self.ny - 1);
        let at = |i: usize, j: usize| self.values[j * self.nx + i];
        let (a, b, c, d) = (at(i0, j0), at(i1, j0), at(i0, j1), at(i1, j1));
        let one = T::one();
        [0, 1, 2].map(|k| (a[k] * (one - tx) + b[k] * tx) * (one - ty) + (c[k] * (one - tx) + d[k] * tx) * ty)
    }

    /// Componentwise `(min eigenvalue, max eigenvalue)` over all cells.
    pub fn eigen_range(&self) -> (T, T) {
        self.values.iter().fold((T::max_value().unwrap(), T::min_value().unwrap()), |(lo, hi), v| {
            let (a, b) = sym_eigenvalues(v);
            (lo.min(a), hi.max(b))
        })
    }
}

impl<T: Real> PointSource<T> for RasterField<T> {
    fn eval(&self, p: &Point2<T>) -> Option<Sym2<T>> {
        Some(self.sample(p))
    }
}

fn smoothstep<T: Real>(t: T) -> T {
    let t = t.clamp(T::zero(), T::one());
    t * t * (lit::<T>(3.0) - lit::<T>(2.0) * t)
}

/// Width `r3` of the collar outside a domain over which the extension is
/// blended to the midpoint value: the bounding box diagonal. It depends on
/// the domain only, so mollification adds no variation at the boundary once
/// the radius drops below `r3/2`.
pub fn extension_collar<T: Real>(domain: &Polygon<T>) -> T {
    let (lo, hi) = domain.bounding_box();
    (hi - lo).norm()
}

/// Extension of a source beyond the domain: inside, the source value;
/// outside, the value at the nearest boundary point up to distance
/// `collar/2`, then blended smoothly to `(lambda0 + lambda1)/2` at distance
/// `collar`.
pub fn extended_value<T: Real>(
    source: &dyn PointSource<T>,
    domain: &Polygon<T>,
    bounds: (T, T),
    collar: T,
    p: &Point2<T>,
) -> Sym2<T> {
    let mid = (bounds.0 + bounds.1) * lit(0.5);
    let mid_t = [mid, T::zero(), mid];
    if domain.contains(p) {
        if let Some(v) = source.eval(p) {
            return v;
        }
    }
    let (q, d) = domain.closest_boundary_point(p);
    let edge = source.eval(&q).unwrap_or(mid_t);
    let half = collar * lit(0.5);
    let w = smoothstep((d - half) / half);
    [0, 1, 2].map(|k| edge[k] * (T::one() - w) + mid_t[k] * w)
}

/// Convolution of the extended source with the normalized bump of radius
/// `gamma`, on a raster with the given cell size (default `gamma/8`)
/// covering the domain plus a margin of width `gamma`. Outside the domain
/// the source is extended with [`extended_value`] over [`extension_collar`].
pub fn mollify<T: Real>(
    source: &dyn PointSource<T>,
    domain: &Polygon<T>,
    bounds: (T, T),
    gamma: T,
    cell: Option<T>,
) -> Result<RasterField<T>> {
    if !(gamma > T::zero()) {
        return Err(EitError::invalid("mollification radius must be positive"));
    }
    let cell = cell.unwrap_or(gamma / lit(8.0));
    if !(cell > T::zero()) || cell > gamma / lit(4.0) {
        return Err(EitError::invalid(format!(
            "raster cell {} is coarser than gamma/4 = {}",
            to_f64(cell),
            to_f64(gamma / lit(4.0))
        )));
    }
    let r = to_f64(gamma / cell).ceil() as usize;
    let collar = extension_collar(domain);
    let mut weights = Vec::new();
    let mut mass = T::zero();
    let ri = r as isize;
    for dj in -ri..=ri {
        for di in -ri..=ri {
            let rho = to_f64(cell) * ((di * di + dj * dj) as f64).sqrt() / to_f64(gamma);
            if rho < 1.0 {
                let w: T = lit((-1.0 / (1.0 - rho * rho)).exp());
                mass += w;
                weights.push((di, dj, w));
            }
        }
    }
    for w in &mut weights {
        w.2 /= mass;
    }

    let (lo, hi) = domain.bounding_box();
    let nx_out = (to_f64((hi.x - lo.x + gamma * lit(2.0)) / cell).ceil() as usize).max(1);
    let ny_out = (to_f64((hi.y - lo.y + gamma * lit(2.0)) / cell).ceil() as usize).max(1);
    let origin_out = Point2::new(lo.x - gamma, lo.y - gamma);
    let (nx_in, ny_in) = (nx_out + 2 * r, ny_out + 2 * r);
    let origin_in = Point2::new(origin_out.x - cell * from_usize(r), origin_out.y - cell * from_usize(r));
    let input = RasterField { origin: origin_in, cell, nx: nx_in, ny: ny_in, values: Vec::new() };
    let values_in: Vec<Sym2<T>> = (0..ny_in)
        .into_par_iter()
        .flat_map_iter(|j| {
            let input = &input;
            (0..nx_in).map(move |i| extended_value(source, domain, bounds, collar, &input.center(i, j)))
        })
        .collect();
    let values: Vec<Sym2<T>> = (0..ny_out)
        .into_par_iter()
        .flat_map_iter(|j| {
            let values_in = &values_in;
            let weights = &weights;
            (0..nx_out).map(move |i| {
                let mut acc = [T::zero(); 3];
                for &(di, dj, w) in weights {
                    let ii = (i as isize + ri + di) as usize;
                    let jj = (j as isize + ri + dj) as usize;
                    let v = values_in[jj * nx_in + ii];
                    for k in 0..3 {
                        acc[k] += v[k] * w;
                    }
                }
                acc
            })
        })
        .collect();
    Ok(RasterField { origin: origin_out, cell, nx: nx_out, ny: ny_out, values })
}

/// `Pi_h(A_gamma)` with `gamma = h^alpha`, sampled at the target mesh
/// vertices and projected onto the admissible set.
pub fn discretize_bv<T: Real>(
    source: &dyn PointSource<T>,
    domain: &Polygon<T>,
    kind: FieldKind,
    bounds: (T, T),
    target: &TriMesh<T>,
    alpha: T,
) -> Result<NodalField<T>> {
    if !(alpha > T::zero() && alpha < lit(0.5)) {
        return Err(EitError::invalid("alpha must lie in (0, 1/2)"));
    }
    let h = target.quality().h;
    let gamma = h.powf(alpha);
    let raster = mollify(source, domain, bounds, gamma, None)?;
    sample_raster(&raster, target, kind, bounds)
}

/// Nodal samples of a point source, projected onto the admissible set.
pub fn sample_source<T: Real>(
    source: &dyn PointSource<T>,
    mesh: &TriMesh<T>,
    kind: FieldKind,
    bounds: (T, T),
) -> Result<NodalField<T>> {
    let mut data = Vec::with_capacity(mesh.vertex_count() * kind.stride());
    for p in mesh.vertices() {
        let v = source.eval(p).ok_or_else(|| EitError::invalid("source is undefined at a mesh vertex"))?;
        match kind {
            FieldKind::Scalar => data.push((v[0] + v[2]) * lit(0.5)),
            FieldKind::Tensor => data.extend_from_slice(&v),
        }
    }
    Ok(NodalField::from_raw(kind, data, bounds.0, bounds.1)?.project_to_admissible())
}

/// Samples a raster at mesh vertices and projects onto the admissible set.
pub fn sample_raster<T: Real>(
    raster: &RasterField<T>,
    mesh: &TriMesh<T>,
    kind: FieldKind,
    bounds: (T, T),
) -> Result<NodalField<T>> {
    let data: Vec<T> = mesh
        .vertices()
        .iter()
        .flat_map(|p| {
            let v = raster.sample(p);
            match kind {
                FieldKind::Scalar => vec![(v[0] + v[2]) * lit(0.5)],
                FieldKind::Tensor => v.to_vec(),
            }
        })
        .collect();
    Ok(NodalField::from_raw(kind, data, bounds.0, bounds.1)?.project_to_admissible())
}

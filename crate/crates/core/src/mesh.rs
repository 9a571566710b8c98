//! Conforming triangulations of 2D polygons.
//!
//! Meshes are produced by ear clipping a simple polygon and then applying
//! uniform midpoint ("red") refinement. Vertex indices are stable under
//! refinement: the vertices of a level-`l` mesh are the first vertices of
//! every descendant, and each vertex created by refinement remembers the
//! two endpoints of the edge it bisects. That makes prolongation between
//! nested levels a cheap index walk.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Point2;

use crate::error::{EitError, Result};
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Twice the signed area of the triangle `(a, b, c)`.
#[inline]
pub fn cross<T: Real>(a: &Point2<T>, b: &Point2<T>, c: &Point2<T>) -> T {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

#[inline]
fn dist<T: Real>(a: &Point2<T>, b: &Point2<T>) -> T {
    (b - a).norm()
}

/// Simple polygon, stored counterclockwise.
#[derive(Clone, Debug)]
pub struct Polygon<T: Real> {
    vertices: Vec<Point2<T>>,
}

impl<T: Real> Polygon<T> {
    /// Validates and stores a polygon. Clockwise input is reversed.
    pub fn new(mut vertices: Vec<Point2<T>>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(EitError::invalid(format!("polygon needs at least 3 vertices, got {n}")));
        }
        if vertices.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(EitError::invalid("polygon has non-finite coordinates"));
        }
        let scale = vertices.iter().map(|p| p.x.abs().max(p.y.abs())).fold(T::zero(), |a, b| a.max(b)).max(T::one());
        let tol = scale * lit::<T>(1e3) * T::eps();
        for i in 0..n {
            for j in (i + 1)..n {
                if dist(&vertices[i], &vertices[j]) <= tol {
                    return Err(EitError::invalid(format!("polygon repeats vertex {i} at {j}")));
                }
            }
        }
        let area = signed_area(&vertices);
        if area.abs() <= tol * scale {
            return Err(EitError::invalid("polygon has zero area"));
        }
        if area < T::zero() {
            vertices.reverse();
        }
        // non-adjacent edges must not touch
        for i in 0..n {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            for j in (i + 1)..n {
                if j == i || (j + 1) % n == i || j == (i + 1) % n {
                    continue;
                }
                let (c, d) = (vertices[j], vertices[(j + 1) % n]);
                if segments_intersect(&a, &b, &c, &d, tol) {
                    return Err(EitError::invalid(format!("polygon self-intersects: edges {i} and {j}")));
                }
            }
        }
        Ok(Polygon { vertices })
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rectangle(x0: T, y0: T, x1: T, y1: T) -> Result<Self> {
        Self::new(vec![Point2::new(x0, y0), Point2::new(x1, y0), Point2::new(x1, y1), Point2::new(x0, y1)])
    }

    pub fn unit_square() -> Self {
        Self::rectangle(T::zero(), T::zero(), T::one(), T::one()).expect("unit square is valid")
    }

    pub fn vertices(&self) -> &[Point2<T>] {
        &self.vertices
    }

    pub fn area(&self) -> T {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> T {
        let n = self.vertices.len();
        (0..n).map(|i| dist(&self.vertices[i], &self.vertices[(i + 1) % n])).fold(T::zero(), |a, b| a + b)
    }

    /// Even-odd point inclusion; points on the boundary count as inside.
    pub fn contains(&self, p: &Point2<T>) -> bool {
        let n = self.vertices.len();
        let tol = lit::<T>(1e-12);
        let mut inside = false;
        for i in 0..n {
            let a = &self.vertices[i];
            let b = &self.vertices[(i + 1) % n];
            let (q, _) = closest_on_segment(p, a, b);
            if dist(&q, p) <= tol {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Closest boundary point and its distance.
    pub fn closest_boundary_point(&self, p: &Point2<T>) -> (Point2<T>, T) {
        let n = self.vertices.len();
        let mut best = (self.vertices[0], T::max_value().unwrap());
        for i in 0..n {
            let (q, d) = closest_on_segment(p, &self.vertices[i], &self.vertices[(i + 1) % n]);
            if d < best.1 {
                best = (q, d);
            }
        }
        best
    }

    /// Bounding box as `(min, max)`.
    pub fn bounding_box(&self) -> (Point2<T>, Point2<T>) {
        bounding_box(&self.vertices)
    }
}

pub(crate) fn bounding_box<T: Real>(pts: &[Point2<T>]) -> (Point2<T>, Point2<T>) {
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in pts {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

fn signed_area<T: Real>(v: &[Point2<T>]) -> T {
    let n = v.len();
    let mut s = T::zero();
    for i in 0..n {
        let (a, b) = (&v[i], &v[(i + 1) % n]);
        s += a.x * b.y - b.x * a.y;
    }
    s * lit(0.5)
}

pub(crate) fn closest_on_segment<T: Real>(p: &Point2<T>, a: &Point2<T>, b: &Point2<T>) -> (Point2<T>, T) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > T::zero() { ((p - a).dot(&ab) / len2).clamp(T::zero(), T::one()) } else { T::zero() };
    let q = a + ab * t;
    (q, dist(&q, p))
}

fn segments_intersect<T: Real>(a: &Point2<T>, b: &Point2<T>, c: &Point2<T>, d: &Point2<T>, tol: T) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > tol && d2 < -tol) || (d1 < -tol && d2 > tol)) && ((d3 > tol && d4 < -tol) || (d3 < -tol && d4 > tol)) {
        return true;
    }
    // touching / collinear overlap
    closest_on_segment(a, c, d).1 <= tol
        || closest_on_segment(b, c, d).1 <= tol
        || closest_on_segment(c, a, b).1 <= tol
        || closest_on_segment(d, a, b).1 <= tol
}

/// Shape statistics of a triangulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshQuality<T> {
    /// Largest triangle diameter.
    pub h: T,
    /// Largest ratio `h_K / rho_K`, `rho_K` the inscribed circle diameter.
    pub s: T,
    /// Smallest triangle diameter.
    pub h_min: T,
}

/// One edge of the boundary loop.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryEdge<T> {
    pub nodes: [usize; 2],
    pub length: T,
    /// Arc-length position of the first node along the loop.
    pub arc_start: T,
    pub normal: [T; 2],
}

/// Conforming triangulation with an ordered boundary loop.
#[derive(Clone, Debug)]
pub struct TriMesh<T: Real> {
    vertices: Vec<Point2<T>>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<[usize; 2]>,
    level: usize,
    parents: Vec<Option<[usize; 2]>>,
    level_vertex_counts: Vec<usize>,
}

impl<T: Real> TriMesh<T> {
    /// Builds a mesh from raw arrays. Triangles are reoriented
    /// counterclockwise and the boundary loop is recovered from edges used
    /// by exactly one triangle.
    pub fn from_parts(vertices: Vec<Point2<T>>, mut triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(EitError::invalid("mesh has no triangles"));
        }
        for (k, t) in triangles.iter_mut().enumerate() {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(EitError::invalid(format!("triangle {k} references a missing vertex")));
            }
            let a = cross(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]);
            if a == T::zero() {
                return Err(EitError::invalid(format!("triangle {k} is degenerate")));
            }
            if a < T::zero() {
                t.swap(1, 2);
            }
        }
        let boundary = boundary_loop(&triangles)?;
        let n = vertices.len();
        let mesh =
            TriMesh { vertices, triangles, boundary, level: 0, parents: vec![None; n], level_vertex_counts: vec![n] };
        mesh.check_topology()?;
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point2<T>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Boundary edges as a closed counterclockwise loop.
    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary
    }

    /// Number of refinements applied since the initial triangulation.
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Endpoints of the bisected edge for vertices created by refinement.
    pub fn parents(&self) -> &[Option<[usize; 2]>] {
        &self.parents
    }

    /// Vertex count of each ancestor level, ending with this mesh.
    pub fn level_vertex_counts(&self) -> &[usize] {
        &self.level_vertex_counts
    }

    pub fn triangle_area(&self, k: usize) -> T {
        let [a, b, c] = self.triangles[k];
        cross(&self.vertices[a], &self.vertices[b], &self.vertices[c]) * lit(0.5)
    }

    pub fn area(&self) -> T {
        (0..self.triangles.len()).map(|k| self.triangle_area(k)).fold(T::zero(), |a, b| a + b)
    }

    pub fn perimeter(&self) -> T {
        self.boundary.iter().map(|e| dist(&self.vertices[e[0]], &self.vertices[e[1]])).fold(T::zero(), |a, b| a + b)
    }

    pub fn centroid(&self, k: usize) -> Point2<T> {
        let [a, b, c] = self.triangles[k];
        let v = &self.vertices;
        Point2::new((v[a].x + v[b].x + v[c].x) / lit(3.0), (v[a].y + v[b].y + v[c].y) / lit(3.0))
    }

    /// Uniform midpoint refinement: every triangle becomes four similar
    /// children and every boundary edge two halves, in loop order.
    pub fn refine(&self) -> TriMesh<T> {
        let mut vertices = self.vertices.clone();
        let mut parents = self.parents.clone();
        let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Point2<T>>| -> usize {
            let key = (a.min(b), a.max(b));
            *mids.entry(key).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                vertices.push(Point2::new((p.x + q.x) * lit(0.5), (p.y + q.y) * lit(0.5)));
                parents.push(Some([key.0, key.1]));
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        let mut boundary = Vec::with_capacity(2 * self.boundary.len());
        for &[a, b] in &self.boundary {
            let m = midpoint(a, b, &mut vertices);
            boundary.push([a, m]);
            boundary.push([m, b]);
        }
        let mut counts = self.level_vertex_counts.clone();
        counts.push(vertices.len());
        TriMesh { vertices, triangles, boundary, level: self.level + 1, parents, level_vertex_counts: counts }
    }

    /// Applies `k` refinements.
    pub fn refined(&self, k: usize) -> TriMesh<T> {
        let mut m = self.clone();
        for _ in 0..k {
            m = m.refine();
        }
        m
    }

    pub fn quality(&self) -> MeshQuality<T> {
        let mut q = MeshQuality { h: T::zero(), s: T::zero(), h_min: T::max_value().unwrap() };
        for k in 0..self.triangles.len() {
            let (hk, ratio) = self.shape(k);
            q.h = q.h.max(hk);
            q.h_min = q.h_min.min(hk);
            q.s = q.s.max(ratio);
        }
        q
    }

    /// Diameter and `h_K / rho_K` of triangle `k`, with `rho_K = 2 area / semiperimeter`.
    pub fn shape(&self, k: usize) -> (T, T) {
        let [a, b, c] = self.triangles[k];
        let v = &self.vertices;
        let (la, lb, lc) = (dist(&v[b], &v[c]), dist(&v[c], &v[a]), dist(&v[a], &v[b]));
        let hk = la.max(lb).max(lc);
        let semi = (la + lb + lc) * lit(0.5);
        let rho = lit::<T>(2.0) * self.triangle_area(k) / semi;
        (hk, hk / rho)
    }

    /// Boundary edges with lengths, arc positions and outward normals.
    pub fn boundary_triangulation(&self) -> Vec<BoundaryEdge<T>> {
        let mut arc = T::zero();
        self.boundary
            .iter()
            .map(|&[a, b]| {
                let d = self.vertices[b] - self.vertices[a];
                let len = d.norm();
                let e = BoundaryEdge { nodes: [a, b], length: len, arc_start: arc, normal: [d.y / len, -d.x / len] };
                arc += len;
                e
            })
            .collect()
    }

    /// Topological audit: positive orientation, every interior edge shared by
    /// exactly two oppositely oriented triangles, boundary edges by one, and
    /// the boundary a single closed loop.
    pub fn check_topology(&self) -> Result<()> {
        for k in 0..self.triangles.len() {
            if self.triangle_area(k) <= T::zero() {
                return Err(EitError::invalid(format!("triangle {k} has non-positive area")));
            }
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                let e = (t[i], t[(i + 1) % 3]);
                if directed.insert(e, 1).is_some() {
                    return Err(EitError::invalid(format!("edge {:?} used twice with the same orientation", e)));
                }
            }
        }
        let mut boundary_count = 0;
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) {
                boundary_count += 1;
            }
        }
        if boundary_count != self.boundary.len() {
            return Err(EitError::invalid("boundary loop does not match free edges"));
        }
        for (i, e) in self.boundary.iter().enumerate() {
            if !directed.contains_key(&(e[0], e[1])) || directed.contains_key(&(e[1], e[0])) {
                return Err(EitError::invalid(format!("boundary edge {i} is not a free edge")));
            }
            let next = self.boundary[(i + 1) % self.boundary.len()];
            if e[1] != next[0] {
                return Err(EitError::invalid(format!("boundary loop breaks after edge {i}")));
            }
        }
        Ok(())
    }

    /// Full conformity audit: topology plus a pairwise check that no two
    /// edges cross and no vertex lies inside another edge. Quadratic in the
    /// edge count; meant for small meshes.
    pub fn check_conforming(&self) -> Result<()> {
        self.check_topology()?;
        let mut edges: Vec<(usize, usize)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for t in &self.triangles {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                if seen.insert((a.min(b), a.max(b))) {
                    edges.push((a, b));
                }
            }
        }
        let v = &self.vertices;
        let q = self.quality();
        let tol = q.h_min * lit(1e-10);
        for i in 0..edges.len() {
            let (a, b) = edges[i];
            for &(c, d) in &edges[(i + 1)..] {
                let shared = a == c || a == d || b == c || b == d;
                if shared {
                    continue;
                }
                if segments_intersect(&v[a], &v[b], &v[c], &v[d], tol) {
                    return Err(EitError::invalid(format!("edges ({a},{b}) and ({c},{d}) intersect")));
                }
            }
        }
        Ok(())
    }

    /// Plain-text dump: `V T B`, then vertices, triangles, boundary edges.
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {} {}", self.vertices.len(), self.triangles.len(), self.boundary.len()).unwrap();
        for p in &self.vertices {
            writeln!(s, "{:e} {:e}", to_f64(p.x), to_f64(p.y)).unwrap();
        }
        for t in &self.triangles {
            writeln!(s, "{} {} {}", t[0], t[1], t[2]).unwrap();
        }
        for e in &self.boundary {
            writeln!(s, "{} {}", e[0], e[1]).unwrap();
        }
        s
    }

    /// Parses the format written by [`TriMesh::to_dump`].
    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| EitError::Parse("empty mesh file".into()))?;
        let counts: Vec<usize> = parse_fields(header)?;
        if counts.len() != 3 {
            return Err(EitError::Parse("mesh header must be `V T B`".into()));
        }
        let mut vertices = Vec::with_capacity(counts[0]);
        for _ in 0..counts[0] {
            let xy: Vec<f64> = parse_fields(next_line(&mut lines)?)?;
            if xy.len() != 2 {
                return Err(EitError::Parse("vertex line must hold 2 numbers".into()));
            }
            vertices.push(Point2::new(lit(xy[0]), lit(xy[1])));
        }
        let mut triangles = Vec::with_capacity(counts[1]);
        for _ in 0..counts[1] {
            let t: Vec<usize> = parse_fields(next_line(&mut lines)?)?;
            if t.len() != 3 {
                return Err(EitError::Parse("triangle line must hold 3 indices".into()));
            }
            triangles.push([t[0], t[1], t[2]]);
        }
        let mut boundary = Vec::with_capacity(counts[2]);
        for _ in 0..counts[2] {
            let e: Vec<usize> = parse_fields(next_line(&mut lines)?)?;
            if e.len() != 2 {
                return Err(EitError::Parse("boundary line must hold 2 indices".into()));
            }
            boundary.push([e[0], e[1]]);
        }
        let mut mesh = TriMesh::from_parts(vertices, triangles)?;
        // keep the stored loop order and starting edge
        if boundary.len() != mesh.boundary.len() {
            return Err(EitError::Parse("boundary edge count mismatch".into()));
        }
        mesh.boundary = boundary;
        mesh.check_topology()?;
        Ok(mesh)
    }
}

fn next_line<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<&'a str> {
    lines.next().ok_or_else(|| EitError::Parse("unexpected end of file".into()))
}

pub(crate) fn parse_fields<F: std::str::FromStr>(line: &str) -> Result<Vec<F>> {
    line.split_whitespace().map(|t| t.parse::<F>().map_err(|_| EitError::Parse(format!("bad token `{t}`")))).collect()
}

fn boundary_loop(triangles: &[[usize; 3]]) -> Result<Vec<[usize; 2]>> {
    let mut directed = std::collections::HashSet::new();
    for t in triangles {
        for i in 0..3 {
            directed.insert((t[i], t[(i + 1) % 3]));
        }
    }
    let mut next: HashMap<usize, usize> = HashMap::new();
    for &(a, b) in &directed {
        if !directed.contains(&(b, a)) && next.insert(a, b).is_some() {
            return Err(EitError::invalid(format!("boundary is not a simple loop at vertex {a}")));
        }
    }
    let start = *next.keys().min().ok_or_else(|| EitError::invalid("mesh has no boundary"))?;
    let mut out = Vec::with_capacity(next.len());
    let mut cur = start;
    loop {
        let b = next[&cur];
        out.push([cur, b]);
        cur = b;
        if cur == start {
            break;
        }
        if out.len() > next.len() {
            return Err(EitError::invalid("boundary does not close"));
        }
    }
    if out.len() != next.len() {
        return Err(EitError::invalid("boundary has more than one component"));
    }
    Ok(out)
}

/// Ear-clipping triangulation of a simple polygon. All polygon vertices are
/// mesh vertices and the boundary loop starts at the polygon's first edge.
pub fn build_initial_triangulation<T: Real>(polygon: &Polygon<T>) -> Result<TriMesh<T>> {
    let v = polygon.vertices().to_vec();
    let n = v.len();
    let mut ring: Vec<usize> = (0..n).collect();
    let mut triangles = Vec::with_capacity(n - 2);
    while ring.len() > 3 {
        let m = ring.len();
        let mut best: Option<(usize, T)> = None;
        for i in 0..m {
            let (p, c, q) = (ring[(i + m - 1) % m], ring[i], ring[(i + 1) % m]);
            if cross(&v[p], &v[c], &v[q]) <= T::zero() {
                continue;
            }
            let blocked =
                ring.iter().any(|&r| r != p && r != c && r != q && point_in_triangle(&v[r], &v[p], &v[c], &v[q]));
            if blocked {
                continue;
            }
            let score = min_angle_sine(&v[p], &v[c], &v[q]);
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (i, _) = best.ok_or_else(|| EitError::numerical("ear clipping found no ear"))?;
        let (p, c, q) = (ring[(i + m - 1) % m], ring[i], ring[(i + 1) % m]);
        triangles.push([p, c, q]);
        ring.remove(i);
    }
    if cross(&v[ring[0]], &v[ring[1]], &v[ring[2]]) <= T::zero() {
        return Err(EitError::numerical("ear clipping left a degenerate triangle"));
    }
    triangles.push([ring[0], ring[1], ring[2]]);
    let boundary: Vec<[usize; 2]> = (0..n).map(|i| [i, (i + 1) % n]).collect();
    let mesh =
        TriMesh { parents: vec![None; n], level_vertex_counts: vec![n], vertices: v, triangles, boundary, level: 0 };
    mesh.check_topology()?;
    Ok(mesh)
}

/// Initial triangulation refined until `h <= h_target` (or `max_level` is hit).
pub fn triangulate_to<T: Real>(polygon: &Polygon<T>, h_target: T, max_level: usize) -> Result<TriMesh<T>> {
    let mut mesh = build_initial_triangulation(polygon)?;
    while mesh.quality().h > h_target {
        if mesh.level() >= max_level {
            return Err(EitError::invalid(format!(
                "mesh size {} needs more than {max_level} refinements",
                to_f64(h_target)
            )));
        }
        mesh = mesh.refine();
    }
    Ok(mesh)
}

fn point_in_triangle<T: Real>(p: &Point2<T>, a: &Point2<T>, b: &Point2<T>, c: &Point2<T>) -> bool {
    cross(a, b, p) >= T::zero() && cross(b, c, p) >= T::zero() && cross(c, a, p) >= T::zero()
}

fn min_angle_sine<T: Real>(a: &Point2<T>, b: &Point2<T>, c: &Point2<T>) -> T {
    let area2 = cross(a, b, c).abs();
    let (la, lb, lc) = (dist(b, c), dist(c, a), dist(a, b));
    // sin of each angle = 2 area / (product of adjacent sides)
    let s1 = area2 / (lb * lc);
    let s2 = area2 / (lc * la);
    let s3 = area2 / (la * lb);
    s1.min(s2).min(s3)
}

/// Prolongs nodal values from an ancestor level to `fine` by repeated
/// midpoint averaging. `coarse_count` must be one of the fine mesh's
/// recorded level vertex counts.
pub fn prolong_nodal<T: Real>(fine: &TriMesh<T>, coarse_values: &[T]) -> Result<Vec<T>> {
    let nc = coarse_values.len();
    if !fine.level_vertex_counts().contains(&nc) {
        return Err(EitError::invalid(format!("{nc} values do not match an ancestor level of the fine mesh")));
    }
    let mut out = Vec::with_capacity(fine.vertex_count());
    out.extend_from_slice(coarse_values);
    for v in nc..fine.vertex_count() {
        let [a, b] = fine.parents()[v].expect("refinement vertex has parents");
        out.push((out[a] + out[b]) * lit(0.5));
    }
    Ok(out)
}

/// Bucket grid for locating points in triangles.
#[derive(Clone, Debug)]
pub struct Locator<T: Real> {
    lo: Point2<T>,
    cell: T,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl<T: Real> Locator<T> {
    pub fn new(mesh: &TriMesh<T>) -> Self {
        let (lo, hi) = bounding_box(mesh.vertices());
        let nt = mesh.triangle_count();
        let side = (hi.x - lo.x).max(hi.y - lo.y);
        let per_side = (to_f64(from_usize::<T>(nt)).sqrt().ceil() as usize).max(1);
        let cell = side / from_usize(per_side) * lit(1.0000001);
        let nx = (to_f64((hi.x - lo.x) / cell).floor() as usize + 1).max(1);
        let ny = (to_f64((hi.y - lo.y) / cell).floor() as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        for (k, t) in mesh.triangles().iter().enumerate() {
            let pts: Vec<Point2<T>> = t.iter().map(|&i| mesh.vertices()[i]).collect();
            let (a, b) = bounding_box(&pts);
            let (i0, j0) = Self::cell_of(lo, cell, nx, ny, &a);
            let (i1, j1) = Self::cell_of(lo, cell, nx, ny, &b);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(k);
                }
            }
        }
        Locator { lo, cell, nx, ny, buckets }
    }

    fn cell_of(lo: Point2<T>, cell: T, nx: usize, ny: usize, p: &Point2<T>) -> (usize, usize) {
        let fx = to_f64((p.x - lo.x) / cell).floor().max(0.0) as usize;
        let fy = to_f64((p.y - lo.y) / cell).floor().max(0.0) as usize;
        (fx.min(nx - 1), fy.min(ny - 1))
    }

    /// Triangle containing `p` and its barycentric coordinates. Points
    /// within `1e-9` (relative) of a triangle are accepted.
    pub fn locate(&self, mesh: &TriMesh<T>, p: &Point2<T>) -> Option<(usize, [T; 3])> {
        let (i, j) = Self::cell_of(self.lo, self.cell, self.nx, self.ny, p);
        let mut best: Option<(usize, [T; 3], T)> = None;
        for &k in &self.buckets[j * self.nx + i] {
            let [a, b, c] = mesh.triangles()[k];
            let v = mesh.vertices();
            let area = cross(&v[a], &v[b], &v[c]);
            let l0 = cross(&v[b], &v[c], p) / area;
            let l1 = cross(&v[c], &v[a], p) / area;
            let l2 = T::one() - l0 - l1;
            let worst = l0.min(l1).min(l2);
            if best.as_ref().map_or(true, |b| worst > b.2) {
                best = Some((k, [l0, l1, l2], worst));
            }
        }
        match best {
            Some((k, l, w)) if w >= lit(-1e-9) => Some((k, l)),
            _ => None,
        }
    }
}

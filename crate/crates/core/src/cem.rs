//! Complete Electrode Model: layouts, the coupled variational solve,
//! full and simplified resistance matrices, and the boundary operators
//! `Phi`, `P`, `Q`, `E` linking matrices to boundary maps.
//!
//! Boundary operators act on the space of discontinuous piecewise-linear
//! functions over the boundary edges (two values per edge). That space
//! contains both P1 traces and every function that is constant on unions
//! of boundary edges, so each operator is represented exactly.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::conductivity::NodalField;
use crate::error::{EitError, Result};
use crate::fem::{FeSpace, NeumannSolver};
use crate::linalg::{CsrMatrix, EnvelopeCholesky, MassGeometry};
use crate::mesh::{parse_fields, TriMesh};
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Default contact impedance.
pub const DEFAULT_IMPEDANCE: f64 = 0.1;
/// Default admissible impedance window.
pub const DEFAULT_IMPEDANCE_BOUNDS: (f64, f64) = (0.01, 10.0);

#[derive(Clone, Debug, PartialEq)]
pub struct Electrode<T> {
    /// Boundary edges under the electrode, contiguous along the loop.
    pub edges: Vec<usize>,
    /// Boundary edges of the extended electrode.
    pub extended: Vec<usize>,
    pub impedance: T,
}

/// Electrodes described by boundary edge indices of one mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeLayout<T> {
    electrodes: Vec<Electrode<T>>,
    boundary_edges: usize,
    impedance_bounds: (T, T),
}

/// Geometric statistics of a layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayoutStats<T> {
    pub delta: T,
    pub mu: T,
    pub theta: T,
    pub eta: T,
    pub count: usize,
    pub perimeter: T,
}

impl<T: Real> LayoutStats<T> {
    /// Upper bound `eta theta mu |dOmega| / delta` on the electrode count.
    pub fn count_bound(&self) -> T {
        self.eta * self.theta * self.mu * self.perimeter / self.delta
    }

    pub fn count_bound_holds(&self) -> bool {
        from_usize::<T>(self.count) <= self.count_bound() * (T::one() + lit(1e-12))
    }
}

impl<T: Real> ElectrodeLayout<T> {
    /// Validates disjointness, containment, coverage and impedance bounds.
    pub fn new(electrodes: Vec<Electrode<T>>, boundary_edges: usize, impedance_bounds: (T, T)) -> Result<Self> {
        if electrodes.len() < 2 {
            return Err(EitError::invalid("a layout needs at least two electrodes"));
        }
        let (z1, z2) = impedance_bounds;
        if !(z1 > T::zero() && z1 <= z2) {
            return Err(EitError::invalid("impedance bounds must satisfy 0 < Z1 <= Z2"));
        }
        let mut owner_e = vec![usize::MAX; boundary_edges];
        let mut owner_x = vec![usize::MAX; boundary_edges];
        for (m, el) in electrodes.iter().enumerate() {
            if el.edges.is_empty() {
                return Err(EitError::invalid(format!("electrode {m} has no edges")));
            }
            if !(el.impedance >= z1 && el.impedance <= z2) {
                return Err(EitError::invalid(format!(
                    "electrode {m} impedance {} outside [{}, {}]",
                    to_f64(el.impedance),
                    to_f64(z1),
                    to_f64(z2)
                )));
            }
            for &e in &el.extended {
                if e >= boundary_edges {
                    return Err(EitError::invalid(format!("electrode {m} references edge {e}")));
                }
                if owner_x[e] != usize::MAX {
                    return Err(EitError::invalid(format!("extended electrodes overlap at edge {e}")));
                }
                owner_x[e] = m;
            }
            for &e in &el.edges {
                if e >= boundary_edges {
                    return Err(EitError::invalid(format!("electrode {m} references edge {e}")));
                }
                if owner_e[e] != usize::MAX {
                    return Err(EitError::invalid(format!("electrodes overlap at edge {e}")));
                }
                owner_e[e] = m;
                if owner_x[e] != m {
                    return Err(EitError::invalid(format!(
                        "edge {e} of electrode {m} is outside its extended electrode"
                    )));
                }
            }
        }
        if let Some(e) = owner_x.iter().position(|&o| o == usize::MAX) {
            return Err(EitError::invalid(format!("extended electrodes do not cover edge {e}")));
        }
        Ok(ElectrodeLayout { electrodes, boundary_edges, impedance_bounds })
    }

    /// Dyadic layout: the extended electrodes are the boundary edges of the
    /// mesh `coarsen` levels up, and each electrode takes the first `active`
    /// of the `2^coarsen` fine edges of its extended electrode.
    pub fn from_mesh(mesh: &TriMesh<T>, coarsen: usize, active: usize, impedance: T) -> Result<Self> {
        Self::from_mesh_with_bounds(
            mesh,
            coarsen,
            active,
            impedance,
            (lit(DEFAULT_IMPEDANCE_BOUNDS.0), lit(DEFAULT_IMPEDANCE_BOUNDS.1)),
        )
    }

    pub fn from_mesh_with_bounds(
        mesh: &TriMesh<T>,
        coarsen: usize,
        active: usize,
        impedance: T,
        bounds: (T, T),
    ) -> Result<Self> {
        if coarsen > mesh.level() {
            return Err(EitError::invalid(format!(
                "cannot coarsen the boundary by {coarsen} levels on a level-{} mesh",
                mesh.level()
            )));
        }
        let per = 1usize << coarsen;
        if active == 0 || active > per {
            return Err(EitError::invalid(format!("active edge count {active} outside 1..={per}")));
        }
        let nb = mesh.boundary_edges().len();
        let electrodes = (0..nb / per)
            .map(|j| Electrode {
                edges: (j * per..j * per + active).collect(),
                extended: (j * per..(j + 1) * per).collect(),
                impedance,
            })
            .collect();
        Self::new(electrodes, nb, bounds)
    }

    /// The same layout on a mesh refined `levels` more times.
    pub fn refined(&self, levels: usize) -> Self {
        let f = 1usize << levels;
        let map = |edges: &[usize]| edges.iter().flat_map(|&e| e * f..(e + 1) * f).collect();
        ElectrodeLayout {
            electrodes: self
                .electrodes
                .iter()
                .map(|el| Electrode { edges: map(&el.edges), extended: map(&el.extended), impedance: el.impedance })
                .collect(),
            boundary_edges: self.boundary_edges * f,
            impedance_bounds: self.impedance_bounds,
        }
    }

    pub fn electrodes(&self) -> &[Electrode<T>] {
        &self.electrodes
    }

    pub fn count(&self) -> usize {
        self.electrodes.len()
    }

    pub fn boundary_edges(&self) -> usize {
        self.boundary_edges
    }

    pub fn impedance_bounds(&self) -> (T, T) {
        self.impedance_bounds
    }

    fn check_space(&self, space: &FeSpace<T>) -> Result<()> {
        if space.boundary_dim() != self.boundary_edges {
            return Err(EitError::invalid(format!(
                "layout refers to {} boundary edges, mesh has {}",
                self.boundary_edges,
                space.boundary_dim()
            )));
        }
        Ok(())
    }

    /// Electrode lengths `|e_m|`.
    pub fn measures(&self, space: &FeSpace<T>) -> Vec<T> {
        let l = space.edge_lengths();
        self.electrodes.iter().map(|el| el.edges.iter().fold(T::zero(), |a, &e| a + l[e])).collect()
    }

    /// Extended electrode lengths `|e~_m|`.
    pub fn extended_measures(&self, space: &FeSpace<T>) -> Vec<T> {
        let l = space.edge_lengths();
        self.electrodes.iter().map(|el| el.extended.iter().fold(T::zero(), |a, &e| a + l[e])).collect()
    }

    pub fn stats(&self, space: &FeSpace<T>) -> Result<LayoutStats<T>> {
        self.check_space(space)?;
        let meas = self.measures(space);
        let ext = self.extended_measures(space);
        let mesh = space.mesh();
        let diam = |edges: &[usize]| {
            let pts: Vec<_> =
                edges.iter().flat_map(|&e| mesh.boundary_edges()[e]).map(|v| mesh.vertices()[v]).collect();
            let mut d = T::zero();
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    d = d.max((pts[i] - pts[j]).norm());
                }
            }
            d
        };
        let mut s = LayoutStats {
            delta: T::zero(),
            mu: T::one(),
            theta: T::zero(),
            eta: T::zero(),
            count: self.count(),
            perimeter: space.perimeter(),
        };
        let (mut lo, mut hi) = (meas[0], meas[0]);
        for (m, el) in self.electrodes.iter().enumerate() {
            s.delta = s.delta.max(diam(&el.edges));
            s.theta = s.theta.max(ext[m] / meas[m]);
            s.eta = s.eta.max(diam(&el.extended) / ext[m]);
            lo = lo.min(meas[m]);
            hi = hi.max(meas[m]);
        }
        s.mu = hi / lo;
        Ok(s)
    }

    /// Text dump, one line per electrode: `m : z_m : edges : extended edges`.
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(" ");
        for (m, el) in self.electrodes.iter().enumerate() {
            writeln!(s, "{m} : {:e} : {} : {}", to_f64(el.impedance), join(&el.edges), join(&el.extended)).unwrap();
        }
        s
    }

    pub fn from_dump(text: &str, boundary_edges: usize, bounds: (T, T)) -> Result<Self> {
        let mut electrodes = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let parts: Vec<&str> = line.split(':').collect();
            if parts.len() != 4 {
                return Err(EitError::Parse(format!("layout line {i} needs 4 fields")));
            }
            let idx: Vec<usize> = parse_fields(parts[0])?;
            if idx != [i] {
                return Err(EitError::Parse(format!("layout line {i} has index {:?}", idx)));
            }
            let z: Vec<f64> = parse_fields(parts[1])?;
            if z.len() != 1 {
                return Err(EitError::Parse("impedance field must be a single number".into()));
            }
            electrodes.push(Electrode {
                impedance: lit(z[0]),
                edges: parse_fields(parts[2])?,
                extended: parse_fields(parts[3])?,
            });
        }
        Self::new(electrodes, boundary_edges, bounds)
    }
}

/// Per-electrode integrals of nodal basis functions.
#[derive(Clone, Debug)]
pub struct ElectrodeCoupling<T> {
    /// For each electrode, `(node, int_{e_m} phi_node)`.
    pub rows: Vec<Vec<(usize, T)>>,
    pub measures: Vec<T>,
    pub total: T,
}

impl<T: Real> ElectrodeCoupling<T> {
    pub fn new(space: &FeSpace<T>, layout: &ElectrodeLayout<T>) -> Result<Self> {
        layout.check_space(space)?;
        let mesh = space.mesh();
        let mut rows = Vec::with_capacity(layout.count());
        for el in layout.electrodes() {
            let mut acc: Vec<(usize, T)> = Vec::new();
            for &e in &el.edges {
                let half = space.edge_lengths()[e] * lit(0.5);
                for v in mesh.boundary_edges()[e] {
                    match acc.iter_mut().find(|(n, _)| *n == v) {
                        Some(entry) => entry.1 += half,
                        None => acc.push((v, half)),
                    }
                }
            }
            rows.push(acc);
        }
        let measures = layout.measures(space);
        let total = measures.iter().fold(T::zero(), |a, &b| a + b);
        Ok(ElectrodeCoupling { rows, measures, total })
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    /// Nodal load of the current density `Phi(I)`.
    pub fn load(&self, n: usize, currents: &[T]) -> Vec<T> {
        let mut load = vec![T::zero(); n];
        for (m, row) in self.rows.iter().enumerate() {
            let s = currents[m] / self.measures[m];
            for &(v, w) in row {
                load[v] += s * w;
            }
        }
        load
    }

    /// Nodal load `sum_m c_m int_{e_m} phi`.
    pub fn weighted_load(&self, n: usize, c: &[T]) -> Vec<T> {
        let mut load = vec![T::zero(); n];
        for (m, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                load[v] += c[m] * w;
            }
        }
        load
    }

    /// `int_{e_m} u` for each electrode.
    pub fn integrals(&self, u: &[T]) -> Vec<T> {
        self.rows.iter().map(|row| row.iter().fold(T::zero(), |a, &(v, w)| a + w * u[v])).collect()
    }

    /// Voltage pattern `V_m = int_{e_m} u + c |e_m|` with `sum V = 0`.
    pub fn voltages(&self, u: &[T]) -> Vec<T> {
        let ints = self.integrals(u);
        let c = -ints.iter().fold(T::zero(), |a, &b| a + b) / self.total;
        ints.iter().zip(&self.measures).map(|(&i, &l)| i + c * l).collect()
    }
}

/// Solution of the electrode model for one current pattern.
#[derive(Clone, Debug)]
pub struct CemSolution<T> {
    pub u: Vec<T>,
    pub potentials: Vec<T>,
    pub residual: T,
}

/// Factored electrode-model system for a fixed conductivity and layout.
pub struct CemSolver<'a, T: Real> {
    space: &'a FeSpace<T>,
    coupling: ElectrodeCoupling<T>,
    impedances: Vec<T>,
    system: CsrMatrix<T>,
    factor: EnvelopeCholesky<T>,
}

impl<'a, T: Real> CemSolver<'a, T> {
    pub fn new(space: &'a FeSpace<T>, field: &NodalField<T>, layout: &ElectrodeLayout<T>) -> Result<Self> {
        let coupling = ElectrodeCoupling::new(space, layout)?;
        let n = space.dim();
        let mm = layout.count();
        let impedances: Vec<T> = layout.electrodes().iter().map(|e| e.impedance).collect();
        let k = space.stiffness(field)?;
        let mut trip: Vec<(usize, usize, T)> = Vec::with_capacity(k.nnz() + 8 * n);
        for i in 0..n {
            for (j, v) in k.row(i) {
                trip.push((i, j, v));
            }
        }
        let mesh = space.mesh();
        for (m, el) in layout.electrodes().iter().enumerate() {
            let zi = T::one() / impedances[m];
            for &e in &el.edges {
                let [a, b] = mesh.boundary_edges()[e];
                let l = space.edge_lengths()[e];
                let (d, o) = (l / lit(3.0) * zi, l / lit(6.0) * zi);
                trip.extend([(a, a, d), (b, b, d), (a, b, o), (b, a, o)]);
            }
            for &(v, w) in &coupling.rows[m] {
                trip.push((v, n + m, -w * zi));
                trip.push((n + m, v, -w * zi));
            }
            trip.push((n + m, n + m, coupling.measures[m] * zi));
        }
        let system = CsrMatrix::from_triplets(n + mm, trip);
        // fix U_0 = 0; constants span the kernel
        let pin = n;
        let mut pinned: Vec<(usize, usize, T)> = Vec::with_capacity(system.nnz());
        for i in 0..n + mm {
            for (j, v) in system.row(i) {
                if i != pin && j != pin {
                    pinned.push((i, j, v));
                }
            }
        }
        pinned.push((pin, pin, T::one()));
        let factor = EnvelopeCholesky::factor_with_tail(&CsrMatrix::from_triplets(n + mm, pinned), mm)
            .map_err(|e| EitError::numerical(format!("electrode system is singular: {e}")))?;
        Ok(CemSolver { space, coupling, impedances, system, factor })
    }

    pub fn coupling(&self) -> &ElectrodeCoupling<T> {
        &self.coupling
    }

    /// Solves for a balanced current pattern and applies the
    /// normalization `sum (|e_m| U_m - z_m I_m) = 0`.
    pub fn solve(&self, currents: &[T]) -> Result<CemSolution<T>> {
        let mm = self.coupling.count();
        if currents.len() != mm {
            return Err(EitError::invalid(format!("expected {mm} currents, got {}", currents.len())));
        }
        let net = currents.iter().fold(T::zero(), |a, &b| a + b);
        let scale = currents.iter().fold(T::zero(), |a, &b| a + b.abs());
        if net.abs() > lit::<T>(1e-10) * scale {
            return Err(EitError::invalid(format!("current pattern is unbalanced (sum {})", to_f64(net))));
        }
        let n = self.space.dim();
        let mut rhs = vec![T::zero(); n + mm];
        rhs[n..].copy_from_slice(currents);
        let full_rhs = rhs.clone();
        rhs[n] = T::zero();
        let x = self.factor.solve(&rhs);
        let r = self.system.mul_vec(&x);
        let rn = r.iter().zip(&full_rhs).fold(T::zero(), |a, (p, q)| a + (*p - *q) * (*p - *q)).sqrt();
        let bn = full_rhs.iter().fold(T::zero(), |a, v| a + *v * *v).sqrt();
        let residual = if bn > T::zero() { rn / bn } else { rn };
        let mut u = x[..n].to_vec();
        let mut pot = x[n..].to_vec();
        let zi: T = (0..mm).fold(T::zero(), |a, m| a + self.impedances[m] * currents[m]);
        let eu: T = (0..mm).fold(T::zero(), |a, m| a + self.coupling.measures[m] * pot[m]);
        let shift = (zi - eu) / self.coupling.total;
        u.iter_mut().for_each(|v| *v += shift);
        pot.iter_mut().for_each(|v| *v += shift);
        Ok(CemSolution { u, potentials: pot, residual })
    }

    /// Currents recovered from a solution: `I_m = (1/z_m) int_{e_m} (U_m - u)`.
    pub fn recovered_currents(&self, sol: &CemSolution<T>) -> Vec<T> {
        let ints = self.coupling.integrals(&sol.u);
        (0..self.coupling.count())
            .map(|m| (self.coupling.measures[m] * sol.potentials[m] - ints[m]) / self.impedances[m])
            .collect()
    }

    /// `sum_m (|e_m| U_m - z_m I_m)`.
    pub fn normalization_defect(&self, sol: &CemSolution<T>, currents: &[T]) -> T {
        (0..self.coupling.count()).fold(T::zero(), |a, m| {
            a + self.coupling.measures[m] * sol.potentials[m] - self.impedances[m] * currents[m]
        })
    }

    /// Energy `b_A((u,U),(u,U)) = sum I_m U_m`.
    pub fn energy(&self, sol: &CemSolution<T>) -> T {
        let mut x = sol.u.clone();
        x.extend_from_slice(&sol.potentials);
        let y = self.system.mul_vec(&x);
        x.iter().zip(&y).fold(T::zero(), |a, (p, q)| a + *p * *q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    FullModel,
    Simplified,
    Measured,
}

/// Map from current patterns to voltage patterns, with `R 1 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResistanceMatrix<T: Real> {
    pub matrix: DMatrix<T>,
    pub provenance: Provenance,
}

impl<T: Real> ResistanceMatrix<T> {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// Largest row or column sum in absolute value.
    pub fn zero_sum_defect(&self) -> T {
        let m = &self.matrix;
        let rows = (0..m.nrows()).map(|i| m.row(i).sum().abs());
        let cols = (0..m.ncols()).map(|j| m.column(j).sum().abs());
        rows.chain(cols).fold(T::zero(), |a, b| a.max(b))
    }

    /// Row-major CSV, one matrix row per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.matrix.nrows() {
            let row: Vec<String> = self.matrix.row(i).iter().map(|v| format!("{:e}", to_f64(*v))).collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str, provenance: Provenance) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|t| t.trim().parse::<f64>().map_err(|_| EitError::Parse(format!("bad number `{t}`"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let m = rows.len();
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(EitError::Parse("resistance matrix CSV must be square".into()));
        }
        let matrix = DMatrix::from_fn(m, m, |i, j| lit(rows[i][j]));
        Ok(ResistanceMatrix { matrix, provenance })
    }
}

/// Builds `R` from its values on the patterns `e_j - e_M`, completing it
/// with `R 1 = 0`.
pub fn complete_from_differences<T: Real>(columns: &[Vec<T>]) -> DMatrix<T> {
    let mm = columns.len() + 1;
    let mut r = DMatrix::zeros(mm, mm);
    for i in 0..mm {
        let sum = columns.iter().fold(T::zero(), |a, c| a + c[i]);
        let last = -sum / from_usize(mm);
        for (j, c) in columns.iter().enumerate() {
            r[(i, j)] = c[i] + last;
        }
        r[(i, mm - 1)] = last;
    }
    r
}

fn difference_pattern<T: Real>(mm: usize, j: usize) -> Vec<T> {
    let mut i = vec![T::zero(); mm];
    i[j] = T::one();
    i[mm - 1] = -T::one();
    i
}

/// Resistance matrix of the full electrode model.
pub fn resistance_matrix<T: Real>(
    space: &FeSpace<T>,
    field: &NodalField<T>,
    layout: &ElectrodeLayout<T>,
) -> Result<ResistanceMatrix<T>> {
    let solver = CemSolver::new(space, field, layout)?;
    let mm = layout.count();
    let cols: Vec<Vec<T>> = (0..mm - 1)
        .into_par_iter()
        .map(|j| {
            let sol = solver.solve(&difference_pattern(mm, j))?;
            Ok(solver.coupling.voltages(&sol.u))
        })
        .collect::<Result<_>>()?;
    Ok(ResistanceMatrix { matrix: complete_from_differences(&cols), provenance: Provenance::FullModel })
}

/// Simplified resistance matrix `Phi^-1 P N_h(A) Phi`, from a factored
/// Neumann problem.
pub fn simplified_from_solver<T: Real>(
    solver: &NeumannSolver<'_, T>,
    coupling: &ElectrodeCoupling<T>,
    n: usize,
) -> Result<ResistanceMatrix<T>> {
    let mm = coupling.count();
    let cols: Vec<Vec<T>> = (0..mm - 1)
        .into_par_iter()
        .map(|j| {
            let load = coupling.load(n, &difference_pattern(mm, j));
            let v = solver.solve_load(&load)?;
            Ok(coupling.voltages(&v.values))
        })
        .collect::<Result<_>>()?;
    Ok(ResistanceMatrix { matrix: complete_from_differences(&cols), provenance: Provenance::Simplified })
}

pub fn simplified_resistance_matrix<T: Real>(
    space: &FeSpace<T>,
    field: &NodalField<T>,
    layout: &ElectrodeLayout<T>,
) -> Result<ResistanceMatrix<T>> {
    let coupling = ElectrodeCoupling::new(space, layout)?;
    let solver = NeumannSolver::new(space, field)?;
    simplified_from_solver(&solver, &coupling, space.dim())
}

/// Dense representations of the boundary operators on the space of
/// discontinuous piecewise-linear boundary functions (dof `2e` is the value
/// at the start of edge `e`, dof `2e+1` at its end).
#[derive(Clone, Debug)]
pub struct BoundaryOps<T: Real> {
    pub mass: DMatrix<T>,
    pub geometry: MassGeometry<T>,
    /// Continuous P1 traces (by boundary position) into the edge space.
    pub embed: DMatrix<T>,
    pub phi: DMatrix<T>,
    pub phi_inv: DMatrix<T>,
    pub p_e: DMatrix<T>,
    pub p_star: DMatrix<T>,
    pub p_estar: DMatrix<T>,
    pub p: DMatrix<T>,
    pub q: DMatrix<T>,
    pub e: DMatrix<T>,
    pub measures: Vec<T>,
}

impl<T: Real> BoundaryOps<T> {
    pub fn new(space: &FeSpace<T>, layout: &ElectrodeLayout<T>) -> Result<Self> {
        layout.check_space(space)?;
        let nb = space.boundary_dim();
        let nd = 2 * nb;
        let mm = layout.count();
        let len = space.edge_lengths();
        let integrate = |edges: &mut dyn Iterator<Item = usize>| {
            let mut row = DVector::zeros(nd);
            for e in edges {
                row[2 * e] += len[e] * lit(0.5);
                row[2 * e + 1] += len[e] * lit(0.5);
            }
            row
        };
        let indicator = |edges: &mut dyn Iterator<Item = usize>| {
            let mut v = DVector::zeros(nd);
            for e in edges {
                v[2 * e] = T::one();
                v[2 * e + 1] = T::one();
            }
            v
        };
        let mut mass = DMatrix::zeros(nd, nd);
        for e in 0..nb {
            let (d, o) = (len[e] / lit(3.0), len[e] / lit(6.0));
            mass[(2 * e, 2 * e)] = d;
            mass[(2 * e + 1, 2 * e + 1)] = d;
            mass[(2 * e, 2 * e + 1)] = o;
            mass[(2 * e + 1, 2 * e)] = o;
        }
        let mut embed = DMatrix::zeros(nd, nb);
        for e in 0..nb {
            embed[(2 * e, e)] = T::one();
            embed[(2 * e + 1, (e + 1) % nb)] = T::one();
        }
        let measures = layout.measures(space);
        let mut phi = DMatrix::zeros(nd, mm);
        let mut phi_inv = DMatrix::zeros(mm, nd);
        let mut ext_int = DMatrix::zeros(mm, nd);
        let mut ext_ind = DMatrix::zeros(nd, mm);
        for (m, el) in layout.electrodes().iter().enumerate() {
            phi.set_column(m, &(indicator(&mut el.edges.iter().copied()) / measures[m]));
            phi_inv.set_row(m, &integrate(&mut el.edges.iter().copied()).transpose());
            ext_int.set_row(m, &integrate(&mut el.extended.iter().copied()).transpose());
            ext_ind.set_column(m, &(indicator(&mut el.extended.iter().copied()) / measures[m]));
        }
        let id = DMatrix::<T>::identity(nd, nd);
        let ones = DVector::from_element(nd, T::one());
        let all = integrate(&mut (0..nb)) / space.perimeter();
        let p_star = &id - &ones * all.transpose();
        let union: Vec<usize> = layout.electrodes().iter().flat_map(|el| el.edges.iter().copied()).collect();
        let e_total = measures.iter().fold(T::zero(), |a, &b| a + b);
        let chi_e = indicator(&mut union.iter().copied());
        let mean_e = integrate(&mut union.iter().copied()) / e_total;
        let p_estar = &id - &chi_e * mean_e.transpose();
        let p_e = &phi * &phi_inv;
        let p = &p_estar * &p_e;
        let q = &phi * &ext_int;
        let e = &p_star * &ext_ind * &phi_inv;
        let geometry = MassGeometry::new(&mass)?;
        Ok(BoundaryOps { mass, geometry, embed, phi, phi_inv, p_e, p_star, p_estar, p, q, e, measures })
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    /// `<f, g>` in L2 of the boundary.
    pub fn inner(&self, f: &DVector<T>, g: &DVector<T>) -> T {
        (f.transpose() * &self.mass * g)[0]
    }

    /// L2 operator norm of a map on the edge space.
    pub fn norm(&self, op: &DMatrix<T>) -> T {
        self.geometry.operator_norm(op, &self.geometry)
    }

    /// `||Q||` on zero-mean functions.
    pub fn q_norm(&self) -> T {
        self.norm(&(&self.q * &self.p_star))
    }

    /// `||E||` on `PC_*`, computed as `||E P||` since `P` is the orthogonal
    /// projection onto `PC_*`.
    pub fn e_norm(&self) -> T {
        self.norm(&(&self.e * &self.p))
    }

    /// `Phi R Phi^-1`.
    pub fn lift(&self, r: &DMatrix<T>) -> DMatrix<T> {
        &self.phi * r * &self.phi_inv
    }

    /// `||Phi R Phi^-1||` on `PC_*`.
    pub fn lifted_norm(&self, r: &DMatrix<T>) -> T {
        self.norm(&(self.lift(r) * &self.p))
    }

    /// `E (Phi R Phi^-1) Q` on zero-mean functions.
    pub fn extended_operator(&self, r: &DMatrix<T>) -> DMatrix<T> {
        &self.e * self.lift(r) * &self.q * &self.p_star
    }

    /// Neumann-to-Dirichlet map on the edge space from its matrix `G`
    /// (boundary loads to zero-mean traces): `C G C^T W P_*`.
    pub fn ntd_operator(&self, g: &DMatrix<T>) -> DMatrix<T> {
        &self.embed * g * self.embed.transpose() * &self.mass * &self.p_star
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::FieldKind;
    use crate::mesh::{build_initial_triangulation, Polygon};

    fn setup(level: usize) -> FeSpace<f64> {
        FeSpace::new(build_initial_triangulation(&Polygon::unit_square()).unwrap().refined(level))
    }

    fn sigma(space: &FeSpace<f64>, c: f64) -> NodalField<f64> {
        NodalField::constant(FieldKind::Scalar, space.dim(), c, 0.5, 4.0).unwrap()
    }

    #[test]
    fn dyadic_layout_stats() {
        let s = setup(1);
        let l = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1).unwrap();
        let st = l.stats(&s).unwrap();
        assert_eq!(st.count, 4);
        assert!((st.delta - 0.5).abs() < 1e-15);
        assert!((st.mu - 1.0).abs() < 1e-15);
        assert!((st.theta - 2.0).abs() < 1e-15);
        assert!(st.count_bound_holds());
        let g = ElectrodeLayout::from_mesh(s.mesh(), 0, 1, 0.1).unwrap();
        assert!((g.stats(&s).unwrap().theta - 1.0).abs() < 1e-15);
        assert!(ElectrodeLayout::from_mesh(s.mesh(), 1, 3, 0.1).is_err());
        assert!(ElectrodeLayout::from_mesh(s.mesh(), 2, 1, 0.1).is_err());
    }

    #[test]
    fn layout_validation() {
        let bad = ElectrodeLayout::new(
            vec![
                Electrode { edges: vec![0], extended: vec![0, 1], impedance: 0.1 },
                Electrode { edges: vec![1], extended: vec![2, 3], impedance: 0.1 },
            ],
            4,
            (0.01, 10.0),
        );
        assert!(bad.is_err());
        let gap = ElectrodeLayout::new(
            vec![
                Electrode { edges: vec![0], extended: vec![0, 1], impedance: 0.1 },
                Electrode { edges: vec![2], extended: vec![2], impedance: 0.1 },
            ],
            4,
            (0.01, 10.0),
        );
        assert!(gap.is_err());
        let z = ElectrodeLayout::new(
            vec![
                Electrode { edges: vec![0], extended: vec![0, 1], impedance: 100.0 },
                Electrode { edges: vec![2], extended: vec![2, 3], impedance: 0.1 },
            ],
            4,
            (0.01, 10.0),
        );
        assert!(z.is_err());
    }

    #[test]
    fn layout_dump_round_trip() {
        let s = setup(2);
        let l = ElectrodeLayout::from_mesh(s.mesh(), 2, 3, 0.25).unwrap();
        let back = ElectrodeLayout::from_dump(&l.to_dump(), 16, (0.01, 10.0)).unwrap();
        assert_eq!(back, l);
        assert!(l.to_dump().starts_with("0 : 2.5e-1 : 0 1 2 : 0 1 2 3"));
    }

    #[test]
    fn refined_layout_has_same_geometry() {
        let s2 = setup(2);
        let s4 = setup(4);
        let l = ElectrodeLayout::from_mesh(s2.mesh(), 1, 1, 0.1).unwrap();
        let a = l.stats(&s2).unwrap();
        let b = l.refined(2).stats(&s4).unwrap();
        assert!((a.delta - b.delta).abs() < 1e-14 && (a.theta - b.theta).abs() < 1e-14);
    }

    #[test]
    fn zero_current_gives_zero_pair() {
        let s = setup(2);
        let l = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1).unwrap();
        let solver = CemSolver::new(&s, &sigma(&s, 1.0), &l).unwrap();
        let sol = solver.solve(&vec![0.0; l.count()]).unwrap();
        assert!(sol.u.iter().chain(&sol.potentials).all(|v| v.abs() < 1e-14));
        assert!(solver.solve(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn currents_are_recovered() {
        let s = setup(3);
        let l = ElectrodeLayout::from_mesh(s.mesh(), 2, 2, 0.1).unwrap();
        let solver = CemSolver::new(&s, &sigma(&s, 1.5), &l).unwrap();
        let i: Vec<f64> = (0..l.count()).map(|m| (m as f64 * 0.7).sin()).collect();
        let mean = i.iter().sum::<f64>() / i.len() as f64;
        let i: Vec<f64> = i.iter().map(|v| v - mean).collect();
        let sol = solver.solve(&i).unwrap();
        for (a, b) in solver.recovered_currents(&sol).iter().zip(&i) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(solver.normalization_defect(&sol, &i).abs() < 1e-12);
        assert!(sol.residual < 1e-10);
    }

    #[test]
    fn resistance_matrix_zero_sums_and_completion() {
        let s = setup(3);
        let l = ElectrodeLayout::from_mesh(s.mesh(), 2, 1, 0.1).unwrap();
        let r = resistance_matrix(&s, &sigma(&s, 1.0), &l).unwrap();
        assert!(r.zero_sum_defect() < 1e-10);
        let rh = simplified_resistance_matrix(&s, &sigma(&s, 1.0), &l).unwrap();
        assert!(rh.zero_sum_defect() < 1e-10);
        let back = ResistanceMatrix::from_csv(&r.to_csv(), Provenance::FullModel).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn phi_round_trip_and_norm() {
        let s = setup(1);
        let l = ElectrodeLayout::new(
            vec![
                Electrode { edges: vec![0], extended: vec![0, 1, 2, 3], impedance: 0.1 },
                Electrode { edges: vec![4], extended: vec![4, 5, 6, 7], impedance: 0.1 },
            ],
            8,
            (0.01, 10.0),
        )
        .unwrap();
        let ops = BoundaryOps::new(&s, &l).unwrap();
        let i = DVector::from_vec(vec![1.0, -1.0]);
        let f = &ops.phi * &i;
        assert!((ops.inner(&f, &f).sqrt() - 2.0).abs() < 1e-14);
        assert!((&ops.phi_inv * &f - &i).norm() < 1e-14);
        assert!((ops.phi.clone() * DVector::zeros(2)).norm() == 0.0);
    }

    #[test]
    fn projections_are_idempotent() {
        let s = setup(2);
        let l = ElectrodeLayout::from_mesh(s.mesh(), 1, 1, 0.1).unwrap();
        let ops = BoundaryOps::new(&s, &l).unwrap();
        for p in [&ops.p_e, &ops.p_star, &ops.p] {
            assert!((p * p - p).abs().max() < 1e-12);
        }
        let c = DVector::from_element(ops.dim(), 3.0);
        assert!((&ops.p * &c).norm() < 1e-12);
        // Q is the identity on PC_*
        let f = &ops.p * DVector::from_fn(ops.dim(), |i, _| ((i * 13) % 7) as f64);
        assert!((&ops.q * &f - &f).norm() < 1e-12);
        assert!((&ops.p * &f - &f).norm() < 1e-12);
    }
}

//! Discrete Neumann-to-Dirichlet maps and their L2-L2 distances.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::conductivity::{l1_distance, sample_source, FieldKind, NodalField, PointSource};
use crate::error::{EitError, Result};
use crate::fem::{FeSpace, NeumannSolver};
use crate::linalg::{loglog_slope, MassGeometry};
use crate::mesh::TriMesh;
use crate::scalar::{to_f64, Real};

/// `N_h(A)` on P1 boundary functions, stored as the matrix `G` taking
/// boundary loads `int g phi_i` to zero-mean traces, so `N_h g = G M_b g`.
#[derive(Clone, Debug)]
pub struct NtdRep<T: Real> {
    g: DMatrix<T>,
    mass: DMatrix<T>,
    geometry: MassGeometry<T>,
    level: usize,
}

impl<T: Real> NtdRep<T> {
    pub fn from_parts(g: DMatrix<T>, mass: DMatrix<T>, level: usize) -> Result<Self> {
        if !g.is_square() || g.shape() != mass.shape() {
            return Err(EitError::invalid("operator and mass matrix shapes differ"));
        }
        let geometry = MassGeometry::new(&mass)?;
        Ok(NtdRep { g, mass, geometry, level })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.g
    }

    pub fn mass(&self) -> &DMatrix<T> {
        &self.mass
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    /// `N_h f` for nodal boundary values `f`.
    pub fn apply(&self, f: &DVector<T>) -> DVector<T> {
        &self.g * (&self.mass * f)
    }

    /// Operator matrix acting on nodal boundary values.
    pub fn operator(&self) -> DMatrix<T> {
        &self.g * &self.mass
    }

    /// L2-L2 operator norm.
    pub fn norm(&self) -> T {
        self.geometry.operator_norm(&self.operator(), &self.geometry)
    }

    /// Relative defect of `<N f, g> = <f, N g>`.
    pub fn self_adjointness_defect(&self) -> T {
        let d = (&self.g - self.g.transpose()).abs().max();
        d / self.g.abs().max().max(T::default_epsilon())
    }

    /// Largest of `||N 1||` and `|int N f|` over the nodal basis, relative
    /// to the largest entry.
    pub fn zero_mean_defect(&self) -> T {
        let n = self.dim();
        let w = &self.mass * DVector::from_element(n, T::one());
        let out = (&self.g * &w).abs().max();
        let means = (w.transpose() * &self.g).abs().max();
        out.max(means) / self.g.abs().max().max(T::default_epsilon())
    }

    /// The same operator on the boundary of a mesh refined `levels` more
    /// times, with that mesh's boundary mass matrix.
    pub fn prolonged(&self, fine_mass: &DMatrix<T>, levels: usize) -> Result<Self> {
        let f = 1usize << levels;
        if fine_mass.nrows() != self.dim() * f {
            return Err(EitError::invalid(format!(
                "boundary of size {} is not a {levels}-level refinement of size {}",
                fine_mass.nrows(),
                self.dim()
            )));
        }
        let p = boundary_prolongation::<T>(self.dim(), levels);
        Self::from_parts(&p * &self.g * p.transpose(), fine_mass.clone(), self.level + levels)
    }

    /// Row-major CSV of the operator matrix on nodal boundary values.
    pub fn to_csv(&self) -> String {
        let op = self.operator();
        let mut s = String::new();
        for i in 0..op.nrows() {
            let row: Vec<String> = op.row(i).iter().map(|v| format!("{:e}", to_f64(*v))).collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        s
    }
}

/// Linear interpolation from boundary positions of a mesh to those of its
/// `levels`-fold refinement.
pub fn boundary_prolongation<T: Real>(coarse: usize, levels: usize) -> DMatrix<T> {
    let f = 1usize << levels;
    let mut p = DMatrix::zeros(coarse * f, coarse);
    for i in 0..coarse {
        for s in 0..f {
            let t = T::from_usize(s).unwrap() / T::from_usize(f).unwrap();
            p[(i * f + s, i)] = T::one() - t;
            if s > 0 {
                p[(i * f + s, (i + 1) % coarse)] = t;
            }
        }
    }
    p
}

/// Assembles `N_h(A)`: column `i` is the trace for the balanced load
/// `e_i - w / |dOmega|` with `w = M_b 1`, which agrees with `G` on every
/// balanced load and annihilates `w`.
pub fn ntd_assemble<T: Real>(space: &FeSpace<T>, field: &NodalField<T>) -> Result<NtdRep<T>> {
    let solver = NeumannSolver::new(space, field)?;
    let nb = space.boundary_dim();
    let n = space.dim();
    let ones = vec![T::one(); nb];
    let w = space.apply_boundary_mass(&ones);
    let per = space.perimeter();
    let cols: Vec<Vec<T>> = (0..nb)
        .into_par_iter()
        .map(|i| {
            let mut load = vec![T::zero(); n];
            for (j, &v) in space.boundary_nodes().iter().enumerate() {
                load[v] = -w[j] / per;
            }
            load[space.boundary_nodes()[i]] += T::one();
            let sol = solver.solve_load(&load)?;
            Ok(space.trace(&sol.values).values)
        })
        .collect::<Result<_>>()?;
    let g = DMatrix::from_fn(nb, nb, |i, j| cols[j][i]);
    NtdRep::from_parts(g, space.boundary_mass(), space.mesh().level())
}

/// L2-L2 distance; operators on nested boundaries are compared on the finer one.
pub fn l2l2_distance<T: Real>(a: &NtdRep<T>, b: &NtdRep<T>) -> Result<T> {
    let (coarse, fine) = if a.dim() <= b.dim() { (a, b) } else { (b, a) };
    let lifted;
    let coarse = if coarse.dim() == fine.dim() {
        coarse
    } else {
        if fine.level < coarse.level {
            return Err(EitError::invalid("operators do not live on nested boundaries"));
        }
        lifted = coarse.prolonged(&fine.mass, fine.level - coarse.level)?;
        &lifted
    };
    let mass_gap = (&coarse.mass - &fine.mass).abs().max();
    if mass_gap > T::default_epsilon().sqrt() * fine.mass.abs().max() {
        return Err(EitError::invalid("operators live on different boundary meshes"));
    }
    let d = (&coarse.g - &fine.g) * &fine.mass;
    Ok(fine.geometry.operator_norm(&d, &fine.geometry))
}

#[derive(Clone, Debug)]
pub struct HolderReport {
    pub t: Vec<f64>,
    pub ntd_distance: Vec<f64>,
    pub l1_distance: Vec<f64>,
    pub slope: f64,
    pub monotone: bool,
}

/// Sweeps `A(t) = A1 + t (A2 - A1)` and fits `log ||N(A(t)) - N(A1)||`
/// against `log ||A(t) - A1||_L1`.
pub fn holder_check<T: Real>(
    space: &FeSpace<T>,
    a1: &NodalField<T>,
    a2: &NodalField<T>,
    sweep: &[T],
) -> Result<HolderReport> {
    if a1.kind() != a2.kind() || a1.nodes() != a2.nodes() {
        return Err(EitError::invalid("endpoints of the homotopy must have the same layout"));
    }
    let (l0, l1) = a1.bounds();
    let base = ntd_assemble(space, a1)?;
    let mut rep =
        HolderReport { t: vec![], ntd_distance: vec![], l1_distance: vec![], slope: f64::NAN, monotone: true };
    for &t in sweep {
        let data: Vec<T> = a1.data().iter().zip(a2.data()).map(|(&x, &y)| x + t * (y - x)).collect();
        let at = NodalField::from_raw(a1.kind(), data, l0, l1)?;
        if !at.is_admissible() {
            return Err(EitError::invalid(format!("homotopy leaves the admissible set at t = {}", to_f64(t))));
        }
        rep.t.push(to_f64(t));
        rep.ntd_distance.push(to_f64(l2l2_distance(&ntd_assemble(space, &at)?, &base)?));
        rep.l1_distance.push(to_f64(l1_distance(space.mesh(), &at, a1)?));
    }
    rep.monotone = rep.ntd_distance.windows(2).all(|w| w[1] >= w[0]);
    rep.slope = loglog_slope(&rep.l1_distance, &rep.ntd_distance);
    Ok(rep)
}

#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub levels: Vec<usize>,
    pub h: Vec<f64>,
    pub errors: Vec<f64>,
    pub reference_level: usize,
    pub slope: f64,
    pub monotone: bool,
}

/// `||N_h - N_ref||` for the given levels of `base`, with the source
/// sampled at each level's vertices.
pub fn fem_convergence_check<T: Real>(
    base: &TriMesh<T>,
    source: &dyn PointSource<T>,
    kind: FieldKind,
    bounds: (T, T),
    levels: &[usize],
    reference_level: usize,
) -> Result<ConvergenceReport> {
    if levels.len() < 3 {
        return Err(EitError::invalid("a convergence check needs at least three levels"));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) || levels.iter().any(|&l| l > reference_level) {
        return Err(EitError::invalid("levels must increase and not exceed the reference level"));
    }
    let assemble = |level: usize| -> Result<(T, NtdRep<T>)> {
        let space = FeSpace::new(base.refined(level));
        let field = sample_source(source, space.mesh(), kind, bounds)?;
        Ok((space.mesh().quality().h, ntd_assemble(&space, &field)?))
    };
    let (_, reference) = assemble(reference_level)?;
    let mut rep = ConvergenceReport {
        levels: levels.to_vec(),
        h: vec![],
        errors: vec![],
        reference_level,
        slope: f64::NAN,
        monotone: true,
    };
    for &l in levels {
        let (h, n) = assemble(l)?;
        rep.h.push(to_f64(h));
        rep.errors.push(to_f64(l2l2_distance(&n, &reference)?));
    }
    rep.monotone = rep.errors.windows(2).all(|w| w[1] < w[0]);
    rep.slope = loglog_slope(&rep.h, &rep.errors);
    Ok(rep)
}

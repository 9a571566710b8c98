//! Regularized reconstruction from electrode data: noise model, parameter
//! schedules, the discrete objective with its adjoint gradient, and a
//! projected Gauss-Newton descent with Huber-smoothed total variation.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cem::{
    resistance_matrix, ElectrodeCoupling, ElectrodeLayout, Provenance, ResistanceMatrix, DEFAULT_IMPEDANCE,
};
use crate::conductivity::{l1_distance, l1_to_source, sym_eigenvalues, tv_seminorm, FieldKind, NodalField, Phantom};
use crate::error::{EitError, Result};
use crate::fem::{FeSpace, NeumannSolver};
use crate::linalg::spectral_norm;
use crate::mesh::{build_initial_triangulation, Polygon, TriMesh};
use crate::scalar::{from_usize, lit, to_f64, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// `||R_eps - R_0||_F = M eps`.
    #[default]
    Absolute,
    /// `||R_eps - R_0||_2 = eps`.
    Relative,
}

/// `P X P` with `P = I - 1 1^T / M`.
pub fn zero_sum_projection<T: Real>(x: &DMatrix<T>) -> DMatrix<T> {
    let m = x.nrows();
    let p = DMatrix::<T>::identity(m, m) - DMatrix::from_element(m, m, T::one() / from_usize(m));
    &p * x * &p
}

/// Adds seeded uniform noise, projected so that `R 1 = 0` and `1^T R = 0`,
/// then scaled to the exact noise level of `mode`.
pub fn noise_inject<T: Real>(
    r0: &ResistanceMatrix<T>,
    eps: f64,
    seed: u64,
    mode: NoiseMode,
) -> Result<ResistanceMatrix<T>> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(EitError::invalid(format!("noise level {eps} outside (0, 1]")));
    }
    let m = r0.size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            raw[(i, j)] = rng.gen_range(-1.0..=1.0);
        }
    }
    let noise = zero_sum_projection(&raw);
    let (size, target) = match mode {
        NoiseMode::Absolute => (noise.norm(), m as f64 * eps),
        NoiseMode::Relative => (spectral_norm(&noise), eps),
    };
    if size <= 0.0 {
        return Err(EitError::numerical("noise draw vanished after projection"));
    }
    let scaled = noise * (target / size);
    let matrix = DMatrix::from_fn(m, m, |i, j| r0.matrix[(i, j)] + lit(scaled[(i, j)]));
    Ok(ResistanceMatrix { matrix, provenance: Provenance::Measured })
}

/// Electrode layout relative to a layout level `L`: the extended
/// electrodes are the boundary edges of level `L`, and each electrode is
/// the first `active` of the `2^coarsen` edges of level `L + coarsen`
/// inside its extended electrode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub coarsen: usize,
    pub active: usize,
    #[serde(default = "default_impedance")]
    pub impedance: f64,
}

fn default_impedance() -> f64 {
    DEFAULT_IMPEDANCE
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec { coarsen: 1, active: 1, impedance: DEFAULT_IMPEDANCE }
    }
}

/// Choice of `a`, `h` and `delta` as powers of the noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub gamma: f64,
    pub a1: f64,
    pub a2: f64,
    pub c: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha1: f64,
    pub beta1: f64,
    pub dim: usize,
    pub mode: NoiseMode,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            gamma: 0.05,
            a1: 0.5,
            a2: 0.5,
            c: 1e-3,
            c0: 1.0,
            c1: 0.25,
            c2: 1.0,
            alpha1: 0.5,
            beta1: 0.1,
            dim: 2,
            mode: NoiseMode::Absolute,
        }
    }
}

/// Parameters chosen by a schedule for one noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleChoice {
    pub epsilon: f64,
    pub a: f64,
    pub h_target: f64,
    pub mesh_level: usize,
    pub h: f64,
    pub layout_level: usize,
    pub delta_bounds: (f64, f64),
    pub delta: f64,
    pub electrodes: usize,
    /// Layout on the chosen mesh, in the sense of `ElectrodeLayout::from_mesh`.
    pub coarsen: usize,
    pub active: usize,
}

impl Schedule {
    /// Names of the violated conditions; empty when the schedule is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("γ>0", self.gamma),
            ("a1>0", self.a1),
            ("a2>0", self.a2),
            ("c>0", self.c),
            ("c0>0", self.c0),
            ("c2>0", self.c2),
            ("α1>0", self.alpha1),
            ("β1>0", self.beta1),
        ];
        for (name, x) in positive {
            if !(x > 0.0) {
                v.push(name.to_string());
            }
        }
        if self.dim < 2 {
            v.push("N>=2".into());
        }
        let (g, n) = (self.gamma, self.dim as f64);
        if self.mode == NoiseMode::Absolute {
            if !(self.c1 > 0.0) {
                v.push("c1>0".into());
            }
            if !(self.c1 < self.c2) {
                v.push("c1<c2".into());
            }
        }
        if !(g < self.a2) {
            v.push("γ<a2".into());
        }
        match self.mode {
            NoiseMode::Absolute => {
                if !(g + 2.0 * (n - 1.0) * self.a2 < 2.0) {
                    v.push("γ+2(N-1)a2<2".into());
                }
            }
            NoiseMode::Relative => {
                if !(g < 2.0) {
                    v.push("γ<2".into());
                }
            }
        }
        if !(g < 2.0 * self.a1 * self.alpha1) {
            v.push("γ<2a1α1".into());
        }
        if !(g < self.beta1) {
            v.push("γ<β1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(EitError::invalid(format!("schedule violates {}", v.join(", "))))
        }
    }

    /// `a = c eps^gamma`.
    pub fn regularization(&self, eps: f64) -> f64 {
        self.c * eps.powf(self.gamma)
    }

    /// Picks the coarsest dyadic mesh with `h <= c0 eps^a1` and the
    /// coarsest dyadic layout with `delta <= c2 eps^a2`, then checks the
    /// lower bound `delta >= c1 eps^a2` (absolute mode only).
    pub fn apply<T: Real>(
        &self,
        eps: f64,
        base: &TriMesh<T>,
        layout: &LayoutSpec,
        max_level: usize,
    ) -> Result<ScheduleChoice> {
        self.validate()?;
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(EitError::invalid(format!("noise level {eps} outside (0, 1]")));
        }
        if layout.active == 0 || layout.active > 1 << layout.coarsen {
            return Err(EitError::invalid("layout needs 1 <= active <= 2^coarsen"));
        }
        let h0 = to_f64(base.quality().h);
        let h_target = self.c0 * eps.powf(self.a1);
        let n_h = (0..=max_level).find(|&n| h0 / (1u64 << n) as f64 <= h_target).ok_or_else(|| {
            EitError::invalid(format!("h <= {h_target:.3e} needs a mesh finer than level {max_level}"))
        })?;
        let scale = eps.powf(self.a2);
        let hi = self.c2 * scale;
        let lo = if self.mode == NoiseMode::Absolute { self.c1 * scale } else { 0.0 };
        let longest = base
            .boundary_edges()
            .iter()
            .map(|e| to_f64((base.vertices()[e[1]] - base.vertices()[e[0]]).norm()))
            .fold(0.0, f64::max);
        let delta_at = |l: usize| longest * layout.active as f64 / (1u64 << (l + layout.coarsen)) as f64;
        let layout_level = (0..=max_level.saturating_sub(layout.coarsen))
            .find(|&l| delta_at(l) <= hi)
            .ok_or_else(|| EitError::invalid(format!("delta <= {hi:.3e} needs a mesh finer than level {max_level}")))?;
        let delta = delta_at(layout_level);
        if delta < lo {
            return Err(EitError::invalid(format!(
                "no dyadic layout has delta in [{lo:.3e}, {hi:.3e}]; closest is {delta:.3e}"
            )));
        }
        let mesh_level = n_h.max(layout_level + layout.coarsen);
        Ok(ScheduleChoice {
            epsilon: eps,
            a: self.regularization(eps),
            h_target,
            mesh_level,
            h: h0 / (1u64 << mesh_level) as f64,
            layout_level,
            delta_bounds: (lo, hi),
            delta,
            electrodes: base.boundary_edges().len() << layout_level,
            coarsen: mesh_level - layout_level,
            active: layout.active << (mesh_level - layout_level - layout.coarsen),
        })
    }
}

/// `psi_tau(t)`: `t` for `t >= tau`, `(t^2 + tau^2) / (2 tau)` below.
/// A C1 upper bound of `t` that decreases to `t` as `tau -> 0`.
pub fn huber<T: Real>(t: T, tau: T) -> T {
    if t >= tau {
        t
    } else {
        (t * t + tau * tau) / (tau + tau)
    }
}

/// `psi_tau'(t) / t`.
fn huber_weight<T: Real>(t: T, tau: T) -> T {
    T::one() / t.max(tau)
}

fn component_gradients<T: Real>(space: &FeSpace<T>, data: &[T], stride: usize, c: usize, k: usize) -> [T; 2] {
    let t = &space.mesh().triangles()[k];
    let g = space.basis_gradients(k);
    let mut out = [T::zero(); 2];
    for i in 0..3 {
        let v = data[stride * t[i] + c];
        out[0] += g[i][0] * v;
        out[1] += g[i][1] * v;
    }
    out
}

fn smoothed_component<T: Real>(space: &FeSpace<T>, data: &[T], stride: usize, c: usize, tau: T) -> T {
    (0..space.mesh().triangle_count()).fold(T::zero(), |acc, k| {
        let g = component_gradients(space, data, stride, c, k);
        acc + space.area(k) * huber((g[0] * g[0] + g[1] * g[1]).sqrt(), tau)
    })
}

fn smoothed_component_gradient<T: Real>(
    space: &FeSpace<T>,
    data: &[T],
    stride: usize,
    c: usize,
    tau: T,
    weight: T,
    out: &mut [T],
) {
    for (k, t) in space.mesh().triangles().iter().enumerate() {
        let g = component_gradients(space, data, stride, c, k);
        let w = weight * space.area(k) * huber_weight((g[0] * g[0] + g[1] * g[1]).sqrt(), tau);
        let b = space.basis_gradients(k);
        for i in 0..3 {
            out[stride * t[i] + c] += w * (g[0] * b[i][0] + g[1] * b[i][1]);
        }
    }
}

fn top_eigenvector<T: Real>(a: &[T; 3]) -> (T, T) {
    let (_, hi) = sym_eigenvalues(a);
    // (A - hi I) v = 0
    let (x, y) = (a[1], hi - a[0]);
    let (p, q) = (hi - a[2], a[1]);
    let (vx, vy) = if x.abs() + y.abs() >= p.abs() + q.abs() { (x, y) } else { (p, q) };
    let n = (vx * vx + vy * vy).sqrt();
    if n > T::zero() {
        (vx / n, vy / n)
    } else if a[0] >= a[2] {
        (T::one(), T::zero())
    } else {
        (T::zero(), T::one())
    }
}

/// Huber-smoothed total variation; `tau = 0` gives the exact seminorm.
pub fn smoothed_tv<T: Real>(space: &FeSpace<T>, field: &NodalField<T>, tau: T) -> T {
    let s = field.kind().stride();
    match field.kind() {
        FieldKind::Scalar => smoothed_component(space, field.data(), 1, 0, tau),
        FieldKind::Tensor => {
            let c = [0, 1, 2].map(|i| smoothed_component(space, field.data(), s, i, tau));
            let (lo, hi) = sym_eigenvalues(&c);
            hi.abs().max(lo.abs())
        }
    }
}

/// Gradient of [`smoothed_tv`] with respect to the nodal data.
pub fn smoothed_tv_gradient<T: Real>(space: &FeSpace<T>, field: &NodalField<T>, tau: T) -> Vec<T> {
    let s = field.kind().stride();
    let mut out = vec![T::zero(); field.data().len()];
    match field.kind() {
        FieldKind::Scalar => smoothed_component_gradient(space, field.data(), 1, 0, tau, T::one(), &mut out),
        FieldKind::Tensor => {
            let c = [0, 1, 2].map(|i| smoothed_component(space, field.data(), s, i, tau));
            let (v1, v2) = top_eigenvector(&c);
            let w = [v1 * v1, lit::<T>(2.0) * v1 * v2, v2 * v2];
            for i in 0..3 {
                smoothed_component_gradient(space, field.data(), s, i, tau, w[i], &mut out);
            }
        }
    }
    out
}

/// Lagged-diffusivity approximation of the Hessian of [`smoothed_tv`].
fn tv_hessian<T: Real>(space: &FeSpace<T>, field: &NodalField<T>, tau: T) -> DMatrix<T> {
    let s = field.kind().stride();
    let n = field.data().len();
    let mut h = DMatrix::zeros(n, n);
    let weights = match field.kind() {
        FieldKind::Scalar => vec![T::one()],
        FieldKind::Tensor => {
            let c = [0, 1, 2].map(|i| smoothed_component(space, field.data(), s, i, tau));
            let (v1, v2) = top_eigenvector(&c);
            vec![v1 * v1, lit::<T>(2.0) * (v1 * v2).abs(), v2 * v2]
        }
    };
    for (c, &wc) in weights.iter().enumerate() {
        for (k, t) in space.mesh().triangles().iter().enumerate() {
            let g = component_gradients(space, field.data(), s, c, k);
            let w = wc * space.area(k) * huber_weight((g[0] * g[0] + g[1] * g[1]).sqrt(), tau);
            let b = space.basis_gradients(k);
            for i in 0..3 {
                for j in 0..3 {
                    h[(s * t[i] + c, s * t[j] + c)] += w * (b[i][0] * b[j][0] + b[i][1] * b[j][1]);
                }
            }
        }
    }
    h
}

/// Simplified resistance matrix as a function of the conductivity, with
/// the machinery for its derivatives.
pub struct ForwardModel<'a, T: Real> {
    space: &'a FeSpace<T>,
    coupling: ElectrodeCoupling<T>,
}

/// `R_hat(A)` with the Neumann factorization and the states
/// `u_j = K^+ S D^-1 P_M e_j` it was computed from.
pub struct ForwardState<'a, T: Real> {
    pub r_hat: DMatrix<T>,
    solver: NeumannSolver<'a, T>,
    states: Vec<Vec<T>>,
}

impl<'a, T: Real> ForwardModel<'a, T> {
    pub fn new(space: &'a FeSpace<T>, layout: &ElectrodeLayout<T>) -> Result<Self> {
        Ok(ForwardModel { space, coupling: ElectrodeCoupling::new(space, layout)? })
    }

    pub fn space(&self) -> &'a FeSpace<T> {
        self.space
    }

    pub fn electrodes(&self) -> usize {
        self.coupling.count()
    }

    pub fn evaluate(&self, field: &NodalField<T>) -> Result<ForwardState<'a, T>> {
        let solver = NeumannSolver::new(self.space, field)?;
        let m = self.electrodes();
        let n = self.space.dim();
        let inv = T::one() / from_usize(m);
        let states: Vec<Vec<T>> = (0..m)
            .into_par_iter()
            .map(|j| {
                let mut pattern = vec![-inv; m];
                pattern[j] += T::one();
                Ok(solver.solve_load(&self.coupling.load(n, &pattern))?.values)
            })
            .collect::<Result<_>>()?;
        let mut r_hat = DMatrix::zeros(m, m);
        for (j, u) in states.iter().enumerate() {
            r_hat.set_column(j, &DVector::from_vec(self.coupling.voltages(u)));
        }
        Ok(ForwardState { r_hat, solver, states })
    }

    /// Solutions `K^+ S Pi^T c_i` for the given electrode vectors.
    fn adjoint_states(&self, state: &ForwardState<'_, T>, vectors: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        let n = self.space.dim();
        let total = self.coupling.total;
        vectors
            .par_iter()
            .map(|r| {
                let shift = r.iter().zip(&self.coupling.measures).fold(T::zero(), |a, (x, l)| a + *x * *l) / total;
                let c: Vec<T> = r.iter().map(|&x| x - shift).collect();
                Ok(state.solver.solve_load(&self.coupling.weighted_load(n, &c))?.values)
            })
            .collect()
    }

    /// `d/dA_p (w^T K(A) u)` for every nodal parameter, accumulated into `out`
    /// with factor `scale`.
    fn contract(&self, kind: FieldKind, w: &[T], u: &[T], scale: T, out: &mut [T]) {
        let third = lit::<T>(1.0 / 3.0);
        for (k, t) in self.space.mesh().triangles().iter().enumerate() {
            let gw = self.space.gradient(w, k);
            let gu = self.space.gradient(u, k);
            let f = scale * self.space.area(k) * third;
            match kind {
                FieldKind::Scalar => {
                    let d = f * (gw[0] * gu[0] + gw[1] * gu[1]);
                    for &v in t {
                        out[v] += d;
                    }
                }
                FieldKind::Tensor => {
                    let d = [f * gw[0] * gu[0], f * (gw[0] * gu[1] + gw[1] * gu[0]), f * gw[1] * gu[1]];
                    for &v in t {
                        for c in 0..3 {
                            out[3 * v + c] += d[c];
                        }
                    }
                }
            }
        }
    }

    /// Gradient of `||R_hat(A) - R_meas||_F^2` by adjoint solves.
    pub fn misfit_gradient(
        &self,
        state: &ForwardState<'_, T>,
        kind: FieldKind,
        residual: &DMatrix<T>,
    ) -> Result<Vec<T>> {
        let m = self.electrodes();
        let cols: Vec<Vec<T>> = (0..m).map(|j| residual.column(j).iter().copied().collect()).collect();
        let adj = self.adjoint_states(state, &cols)?;
        let mut out = vec![T::zero(); self.space.dim() * kind.stride()];
        for j in 0..m {
            self.contract(kind, &adj[j], &state.states[j], lit(-2.0), &mut out);
        }
        Ok(out)
    }

    /// Jacobian of `vec(R_hat)` (column-major) with respect to the nodal data.
    pub fn jacobian(&self, state: &ForwardState<'_, T>, kind: FieldKind) -> Result<DMatrix<T>> {
        let m = self.electrodes();
        let units: Vec<Vec<T>> = (0..m)
            .map(|i| {
                let mut e = vec![T::zero(); m];
                e[i] = T::one();
                e
            })
            .collect();
        let ys = self.adjoint_states(state, &units)?;
        let np = self.space.dim() * kind.stride();
        let rows: Vec<Vec<T>> = (0..m * m)
            .into_par_iter()
            .map(|r| {
                let (i, j) = (r % m, r / m);
                let mut row = vec![T::zero(); np];
                self.contract(kind, &ys[i], &state.states[j], -T::one(), &mut row);
                row
            })
            .collect();
        Ok(DMatrix::from_fn(m * m, np, |r, p| rows[r][p]))
    }
}

/// Value of the objective split into its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveParts<T> {
    pub misfit: T,
    pub tv: T,
    pub total: T,
}

/// `||R_hat(A) - R_meas||_F^2 / a + tv(A)` with the exact total variation.
pub fn objective<T: Real>(
    model: &ForwardModel<'_, T>,
    field: &NodalField<T>,
    r_meas: &ResistanceMatrix<T>,
    a: T,
) -> Result<ObjectiveParts<T>> {
    let state = model.evaluate(field)?;
    let misfit = (&state.r_hat - &r_meas.matrix).norm_squared() / a;
    let tv = tv_seminorm(model.space().mesh(), field)?;
    Ok(ObjectiveParts { misfit, tv, total: misfit + tv })
}

/// Smoothed objective and its gradient, as minimized.
pub fn smoothed_objective_gradient<T: Real>(
    model: &ForwardModel<'_, T>,
    field: &NodalField<T>,
    r_meas: &ResistanceMatrix<T>,
    a: T,
    tau: T,
) -> Result<(T, Vec<T>)> {
    let state = model.evaluate(field)?;
    let res = &state.r_hat - &r_meas.matrix;
    let value = res.norm_squared() / a + smoothed_tv(model.space(), field, tau);
    let mut g = model.misfit_gradient(&state, field.kind(), &res)?;
    let tvg = smoothed_tv_gradient(model.space(), field, tau);
    for (x, t) in g.iter_mut().zip(tvg) {
        *x = *x / a + t;
    }
    Ok((value, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerOptions {
    pub max_iterations: usize,
    /// Initial Huber smoothing parameter.
    pub tau: f64,
    pub tau_min: f64,
    /// Factor applied to `tau` on stagnation.
    pub continuation: f64,
    /// Stop when the projected gradient step is below this (Euclidean).
    pub gradient_tol: f64,
    /// Relative objective decrease regarded as stagnation.
    pub stagnation_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Initial Levenberg-Marquardt damping of the Gauss-Newton step.
    pub damping: f64,
    pub gauss_newton: bool,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_iterations: 60,
            tau: 1e-2,
            tau_min: 1e-5,
            continuation: 0.5,
            gradient_tol: 1e-10,
            stagnation_tol: 1e-6,
            armijo: 1e-4,
            max_backtracks: 30,
            damping: 1e-3,
            gauss_newton: true,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_min > 0.0 && self.tau_min <= self.tau) {
            return Err(EitError::invalid("need 0 < tau_min <= tau"));
        }
        if !(self.continuation > 0.0 && self.continuation < 1.0) {
            return Err(EitError::invalid("continuation factor must lie in (0, 1)"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) || self.damping < 0.0 {
            return Err(EitError::invalid("bad line search parameters"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InversionResult<T: Real> {
    pub field: NodalField<T>,
    /// Smoothed objective after each accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub misfit_frobenius: f64,
    pub misfit_spectral: f64,
    pub tv: f64,
    pub l1_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warning: Option<String>,
    pub gradient_norm: f64,
    pub tau: f64,
}

impl<T: Real> InversionResult<T> {
    /// One line per trace entry: `iteration,objective`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,objective\n");
        for (i, v) in self.objective_trace.iter().enumerate() {
            writeln!(s, "{i},{v:e}").unwrap();
        }
        s
    }
}

fn projected_step<T: Real>(x: &NodalField<T>, d: &[T], t: T) -> Result<NodalField<T>> {
    let (l0, l1) = x.bounds();
    let data: Vec<T> = x.data().iter().zip(d).map(|(&a, &b)| a + t * b).collect();
    Ok(NodalField::from_raw(x.kind(), data, l0, l1)?.project_to_admissible())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

/// Projected descent on `||R_hat(A) - R_meas||_F^2 / a + tv_tau(A)`.
/// Directions are damped Gauss-Newton steps (data term) with a
/// lagged-diffusivity model of the smoothed total variation, falling
/// back to the scaled gradient; steps are accepted by Armijo
/// backtracking along the projected path.
pub fn minimize<T: Real>(
    model: &ForwardModel<'_, T>,
    r_meas: &ResistanceMatrix<T>,
    a: T,
    init: &NodalField<T>,
    opts: &OptimizerOptions,
) -> Result<InversionResult<T>> {
    opts.validate()?;
    if r_meas.size() != model.electrodes() {
        return Err(EitError::invalid("measurement size does not match the layout"));
    }
    if !(a > T::zero()) {
        return Err(EitError::invalid("regularization parameter must be positive"));
    }
    let space = model.space();
    let kind = init.kind();
    let (l0, l1) = init.bounds();
    let mut x = init.project_to_admissible();
    let mut tau: T = lit(opts.tau);
    let tau_min: T = lit(opts.tau_min);
    let eval = |f: &NodalField<T>, tau: T| -> Result<(T, ForwardState<'_, T>)> {
        let st = model.evaluate(f)?;
        let v = (&st.r_hat - &r_meas.matrix).norm_squared() / a + smoothed_tv(space, f, tau);
        Ok((v, st))
    };
    let (mut fx, mut state) = eval(&x, tau)?;
    let mut trace = vec![to_f64(fx)];
    let mut mu: T = lit(opts.damping);
    let mut converged = false;
    let mut warning = None;
    let mut iterations = 0;
    let mut gnorm = f64::NAN;
    let two: T = lit(2.0);
    while iterations < opts.max_iterations {
        let res = &state.r_hat - &r_meas.matrix;
        let mut g = model.misfit_gradient(&state, kind, &res)?;
        let tvg = smoothed_tv_gradient(space, &x, tau);
        for (gi, ti) in g.iter_mut().zip(&tvg) {
            *gi = *gi / a + *ti;
        }
        let neg: Vec<T> = g.iter().map(|v| -*v).collect();
        let pg = projected_step(&x, &neg, T::one())?;
        let pgn = x.data().iter().zip(pg.data()).fold(T::zero(), |s, (p, q)| s + (*p - *q) * (*p - *q)).sqrt();
        gnorm = to_f64(pgn);
        if gnorm <= opts.gradient_tol {
            converged = true;
            break;
        }
        let mut directions: Vec<(Vec<T>, bool)> = Vec::new();
        if opts.gauss_newton {
            let j = model.jacobian(&state, kind)?;
            let mut h = j.transpose() * &j * (two / a) + tv_hessian(space, &x, tau);
            let dmax = h.diagonal().iter().fold(T::zero(), |m, v| m.max(*v));
            for i in 0..h.nrows() {
                let d = h[(i, i)];
                h[(i, i)] = d + mu * (d + dmax * lit(1e-10));
            }
            if let Some(ch) = h.cholesky() {
                let d = ch.solve(&DVector::from_vec(neg.clone()));
                directions.push((d.iter().copied().collect(), true));
            }
        }
        let ginf = g.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let scale = (l1 - l0) * lit(0.1) / ginf.max(T::eps());
        directions.push((neg.iter().map(|v| *v * scale).collect(), false));
        let mut accepted = None;
        'dirs: for (d, newton) in &directions {
            let mut t = T::one();
            for _ in 0..opts.max_backtracks {
                let xn = projected_step(&x, d, t)?;
                let step: Vec<T> = xn.data().iter().zip(x.data()).map(|(p, q)| *p - *q).collect();
                let slope = dot(&g, &step);
                if slope < T::zero() {
                    let (fn_, st) = eval(&xn, tau)?;
                    if fn_ <= fx + lit::<T>(opts.armijo) * slope {
                        accepted = Some((xn, fn_, st, t, *newton));
                        break 'dirs;
                    }
                }
                t *= lit(0.5);
            }
        }
        iterations += 1;
        match accepted {
            Some((xn, fn_, st, t, newton)) => {
                let decrease = (fx - fn_) / fx.abs().max(T::eps());
                x = xn;
                fx = fn_;
                state = st;
                trace.push(to_f64(fx));
                if newton && t == T::one() {
                    mu = (mu / lit(3.0)).max(lit(1e-12));
                } else {
                    mu = (mu * lit(4.0)).min(lit(1e6));
                }
                if decrease < lit(opts.stagnation_tol) {
                    if tau > tau_min {
                        tau = (tau * lit(opts.continuation)).max(tau_min);
                        fx = (&state.r_hat - &r_meas.matrix).norm_squared() / a + smoothed_tv(space, &x, tau);
                    } else {
                        converged = true;
                        break;
                    }
                }
            }
            None => {
                if tau > tau_min {
                    tau = (tau * lit(opts.continuation)).max(tau_min);
                    fx = (&state.r_hat - &r_meas.matrix).norm_squared() / a + smoothed_tv(space, &x, tau);
                } else {
                    warning = Some("line search failed at the smallest smoothing parameter".to_string());
                    break;
                }
            }
        }
    }
    if !converged && warning.is_none() {
        warning = Some(format!("iteration cap of {} reached", opts.max_iterations));
    }
    let res = &state.r_hat - &r_meas.matrix;
    let tv = to_f64(tv_seminorm(space.mesh(), &x)?);
    debug_assert!(x.bounds() == (l0, l1));
    Ok(InversionResult {
        misfit_frobenius: to_f64(res.norm()),
        misfit_spectral: to_f64(spectral_norm(&res)),
        tv,
        field: x,
        objective_trace: trace,
        l1_error: None,
        iterations,
        converged,
        warning,
        gradient_norm: gnorm,
        tau: to_f64(tau),
    })
}

/// Where the measurements of an inversion come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataModel {
    /// Full electrode model on a mesh refined `refinement` more times.
    Cem { refinement: usize },
    /// Simplified model on the inversion mesh, with the phantom's nodal
    /// interpolant as ground truth.
    InverseCrime,
}

impl Default for DataModel {
    fn default() -> Self {
        DataModel::Cem { refinement: 2 }
    }
}

/// Everything needed for one reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub phantom: Phantom,
    pub bounds: [f64; 2],
    pub mesh_level: usize,
    /// Layout relative to the inversion mesh.
    pub layout: LayoutSpec,
    pub epsilon: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    /// Regularization parameter `a`.
    pub regularization: f64,
    #[serde(default)]
    pub data: DataModel,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default)]
    pub seed: u64,
    /// Cells per triangle edge, as a power of two, for L1 errors.
    #[serde(default = "default_subdivision")]
    pub l1_subdivision: usize,
}

fn default_subdivision() -> usize {
    3
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(EitError::invalid(format!("noise level {} outside (0, 1]", self.epsilon)));
        }
        if !(self.regularization > 0.0) {
            return Err(EitError::invalid("regularization must be positive"));
        }
        self.phantom.validate(self.bounds[0], self.bounds[1])?;
        self.optimizer.validate()
    }
}

/// Result of [`run_inversion`] with the inputs it was built from.
pub struct InversionOutcome<T: Real> {
    pub mesh: TriMesh<T>,
    pub layout: ElectrodeLayout<T>,
    pub measured: ResistanceMatrix<T>,
    pub result: InversionResult<T>,
    pub wall_time_s: f64,
}

/// Simulates data for the phantom, adds noise and reconstructs from the
/// constant initial guess `(lambda0 + lambda1) / 2`.
pub fn run_inversion<T: Real>(domain: &Polygon<T>, cfg: &InversionConfig) -> Result<InversionOutcome<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let (l0, l1): (T, T) = (lit(cfg.bounds[0]), lit(cfg.bounds[1]));
    let mesh = build_initial_triangulation(domain)?.refined(cfg.mesh_level);
    let z = lit(cfg.layout.impedance);
    let layout = ElectrodeLayout::from_mesh(&mesh, cfg.layout.coarsen, cfg.layout.active, z)?;
    let space = FeSpace::new(mesh.clone());
    let model = ForwardModel::new(&space, &layout)?;
    let truth = cfg.phantom.interpolate(&mesh, l0, l1)?;
    let exact = match cfg.data {
        DataModel::Cem { refinement } => {
            let fine = FeSpace::new(mesh.refined(refinement));
            let field = cfg.phantom.interpolate(fine.mesh(), l0, l1)?;
            resistance_matrix(&fine, &field, &layout.refined(refinement))?
        }
        DataModel::InverseCrime => {
            ResistanceMatrix { matrix: model.evaluate(&truth)?.r_hat, provenance: Provenance::Simplified }
        }
    };
    let measured = noise_inject(&exact, cfg.epsilon, cfg.seed, cfg.noise_mode)?;
    let init = NodalField::constant(FieldKind::Scalar, space.dim(), (l0 + l1) * lit(0.5), l0, l1)?;
    let mut result = minimize(&model, &measured, lit(cfg.regularization), &init, &cfg.optimizer)?;
    result.l1_error = Some(match cfg.data {
        DataModel::Cem { .. } => to_f64(l1_to_source(&mesh, &result.field, &cfg.phantom, cfg.l1_subdivision)?),
        DataModel::InverseCrime => to_f64(l1_distance(&mesh, &result.field, &truth)?),
    });
    Ok(InversionOutcome { mesh, layout, measured, result, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Inputs of a noise-level sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub phantom: Phantom,
    pub bounds: [f64; 2],
    #[serde(default)]
    pub layout: LayoutSpec,
    #[serde(default)]
    pub schedule: Schedule,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_refinement")]
    pub measurement_refinement: usize,
    #[serde(default = "default_max_level")]
    pub max_level: usize,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default = "default_subdivision")]
    pub l1_subdivision: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_refinement() -> usize {
    2
}

fn default_max_level() -> usize {
    6
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub epsilon: f64,
    pub seed: u64,
    pub a: f64,
    pub h: f64,
    pub delta: f64,
    pub electrodes: usize,
    pub iterations: usize,
    pub misfit_frobenius: f64,
    pub misfit_spectral: f64,
    pub tv: f64,
    pub l1_error: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    /// `(epsilon, seed, message)` for runs that failed.
    pub failures: Vec<(f64, u64, String)>,
}

pub const STUDY_COLUMNS: &str =
    "epsilon,a,h,delta,M,iterations,misfit_frobenius,misfit_spectral,tv,l1_error,wall_time_s";

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{STUDY_COLUMNS}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{:e},{:e},{:e},{:e},{},{},{:e},{:e},{:e},{:e},{:.3}",
                r.epsilon,
                r.a,
                r.h,
                r.delta,
                r.electrodes,
                r.iterations,
                r.misfit_frobenius,
                r.misfit_spectral,
                r.tv,
                r.l1_error,
                r.wall_time_s
            )
            .unwrap();
        }
        s
    }

    /// Mean L1 error per noise level, in study order.
    pub fn mean_l1_by_epsilon(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|e| e.0 == r.epsilon) {
                Some(e) => {
                    e.1 += r.l1_error;
                    e.2 += 1;
                }
                None => out.push((r.epsilon, r.l1_error, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }

    /// Whether each mean L1 error is at most `1 + slack` times the previous one.
    pub fn non_increasing_within(&self, slack: f64) -> bool {
        self.mean_l1_by_epsilon().windows(2).all(|w| w[1].1 <= (1.0 + slack) * w[0].1)
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.phantom.validate(self.bounds[0], self.bounds[1])?;
        self.optimizer.validate()?;
        if self.epsilons.is_empty() || self.seeds.is_empty() {
            return Err(EitError::invalid("a study needs at least one noise level and one seed"));
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(EitError::invalid("noise levels must lie in (0, 1]"));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(EitError::invalid("noise levels must be strictly decreasing"));
        }
        Ok(())
    }

    /// Inversion settings chosen by the schedule for one noise level.
    pub fn case<T: Real>(&self, base: &TriMesh<T>, eps: f64, seed: u64) -> Result<(ScheduleChoice, InversionConfig)> {
        let choice = self.schedule.apply(eps, base, &self.layout, self.max_level)?;
        let cfg = InversionConfig {
            phantom: self.phantom.clone(),
            bounds: self.bounds,
            mesh_level: choice.mesh_level,
            layout: LayoutSpec { coarsen: choice.coarsen, active: choice.active, impedance: self.layout.impedance },
            epsilon: eps,
            noise_mode: self.schedule.mode,
            regularization: choice.a,
            data: DataModel::Cem { refinement: self.measurement_refinement },
            optimizer: self.optimizer.clone(),
            seed,
            l1_subdivision: self.l1_subdivision,
        };
        Ok((choice, cfg))
    }
}

/// Runs the schedule over all noise levels and seeds. Failing runs are
/// recorded and the study continues.
pub fn convergence_study<T: Real>(domain: &Polygon<T>, cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let base = build_initial_triangulation(domain)?;
    let mut report = StudyReport::default();
    for &eps in &cfg.epsilons {
        for &seed in &cfg.seeds {
            let run = cfg.case(&base, eps, seed).and_then(|(choice, inv)| {
                let out = run_inversion(domain, &inv)?;
                Ok(StudyRow {
                    epsilon: eps,
                    seed,
                    a: choice.a,
                    h: to_f64(out.mesh.quality().h),
                    delta: choice.delta,
                    electrodes: out.layout.count(),
                    iterations: out.result.iterations,
                    misfit_frobenius: out.result.misfit_frobenius,
                    misfit_spectral: out.result.misfit_spectral,
                    tv: out.result.tv,
                    l1_error: out.result.l1_error.unwrap_or(f64::NAN),
                    wall_time_s: out.wall_time_s,
                })
            });
            match run {
                Ok(row) => report.rows.push(row),
                Err(e) => report.failures.push((eps, seed, e.to_string())),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = Schedule { a1: 1.0, ..Schedule::default() };
        assert!(s.violations().is_empty());
        let bad = Schedule { gamma: 0.2, ..Schedule::default() };
        assert!(bad.violations().contains(&"γ<β1".to_string()));
        let zero = Schedule { gamma: 0.0, ..Schedule::default() };
        assert!(zero.violations().contains(&"γ>0".to_string()));
    }

    #[test]
    fn huber_is_upper_bound() {
        for t in [0.0, 0.001, 0.01, 0.5] {
            assert!(huber(t, 0.01) >= t);
            assert!(huber(t, 0.005) <= huber(t, 0.01));
        }
        assert_eq!(huber(0.02, 0.01), 0.02);
    }

    #[test]
    fn top_eigenvector_is_eigenvector() {
        for a in [[2.0f64, 0.5, 1.0], [1.0, 0.0, 3.0], [1.0, 0.0, 1.0], [0.3, -0.7, 0.1]] {
            let (v1, v2) = top_eigenvector(&a);
            let (_, hi) = sym_eigenvalues(&a);
            assert!((a[0] * v1 + a[1] * v2 - hi * v1).abs() < 1e-12);
            assert!((a[1] * v1 + a[2] * v2 - hi * v2).abs() < 1e-12);
        }
    }
}

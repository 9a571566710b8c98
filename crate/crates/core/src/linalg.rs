//! Sparse storage, a profile (envelope) Cholesky factorization with
//! reverse Cuthill-McKee ordering, and small dense helpers on top of
//! nalgebra.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{EitError, Result};
use crate::scalar::{lit, Real};

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct CsrMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    /// Square `n x n` matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            assert!(i < n && j < n, "triplet ({i},{j}) outside {n}x{n}");
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => T::zero(),
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.n).map(|i| self.row(i).fold(T::zero(), |acc, (j, v)| acc + v * x[j])).collect()
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn scaled(&self, c: T) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= c;
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Reverse Cuthill-McKee ordering of the first `n_free` unknowns of a
/// structurally symmetric matrix. Returns `perm` with `perm[new] = old`;
/// unknowns `n_free..n` keep their relative order at the end.
pub fn rcm_ordering<T: Real>(a: &CsrMatrix<T>, n_free: usize) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n_free).map(|i| a.row(i).filter(|&(j, _)| j < n_free && j != i).count()).collect();
    let mut visited = vec![false; n_free];
    let mut order = Vec::with_capacity(n);
    while order.len() < n_free {
        // pseudo-peripheral start: lowest degree among unvisited
        let start = (0..n_free).filter(|&i| !visited[i]).min_by_key(|&i| degree[i]).unwrap();
        let start = peripheral(a, n_free, start, &degree);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = a.row(v).map(|(j, _)| j).filter(|&j| j < n_free && !visited[j]).collect();
            nbrs.sort_by_key(|&j| (degree[j], j));
            for j in nbrs {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order.extend(n_free..n);
    order
}

/// Walks to the last BFS level a few times to find a pseudo-peripheral node.
fn peripheral<T: Real>(a: &CsrMatrix<T>, n_free: usize, mut start: usize, degree: &[usize]) -> usize {
    let mut depth = 0;
    for _ in 0..4 {
        let mut dist = vec![usize::MAX; n_free];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut last = start;
        while let Some(v) = queue.pop_front() {
            last = v;
            for (j, _) in a.row(v) {
                if j < n_free && dist[j] == usize::MAX {
                    dist[j] = dist[v] + 1;
                    queue.push_back(j);
                }
            }
        }
        let ecc = dist[last];
        // among the farthest level pick the lowest degree
        let cand = (0..n_free).filter(|&i| dist[i] == ecc).min_by_key(|&i| degree[i]).unwrap_or(last);
        if ecc <= depth {
            break;
        }
        depth = ecc;
        start = cand;
    }
    start
}

/// Envelope Cholesky factor `P A P^T = L L^T` of a symmetric positive
/// definite matrix.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky<T> {
    perm: Vec<usize>,
    /// First column stored in row `i` of `L` (permuted numbering).
    first: Vec<usize>,
    /// Offset of row `i` in `data`; row `i` holds columns `first[i]..=i`.
    start: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> EnvelopeCholesky<T> {
    /// Factors `a` with RCM ordering of all unknowns.
    pub fn factor(a: &CsrMatrix<T>) -> Result<Self> {
        Self::factor_with_tail(a, 0)
    }

    /// Factors `a`, keeping the last `tail` unknowns last. Useful when a few
    /// dense rows (electrode potentials, say) would spoil the ordering.
    pub fn factor_with_tail(a: &CsrMatrix<T>, tail: usize) -> Result<Self> {
        let n = a.dim();
        let perm = rcm_ordering(a, n - tail);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            for (jo, _) in a.row(old) {
                let j = inv[jo];
                if j < i {
                    first[i] = first[i].min(j);
                }
            }
        }
        let mut start = vec![0usize; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut data = vec![T::zero(); start[n]];
        for old in 0..n {
            let i = inv[old];
            for (jo, v) in a.row(old) {
                let j = inv[jo];
                if j <= i {
                    data[start[i] + j - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = data[start[i] + j - fi];
                let ri = start[i] + k0 - fi;
                let rj = start[j] + k0 - fj;
                for k in 0..(j - k0) {
                    s -= data[ri + k] * data[rj + k];
                }
                if j < i {
                    data[start[i] + j - fi] = s / data[start[j] + j - fj];
                } else {
                    if !(s > T::zero()) {
                        return Err(EitError::numerical(format!("matrix is not positive definite (pivot {i})")));
                    }
                    data[start[i] + i - fi] = s.sqrt();
                }
            }
        }
        Ok(EnvelopeCholesky { perm, first, start, data })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut y: Vec<T> = self.perm.iter().map(|&o| b[o]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            let mut s = y[i];
            for (k, &l) in row[..i - fi].iter().enumerate() {
                s -= l * y[fi + k];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, &l) in row[..i - fi].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        let mut x = vec![T::zero(); n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

/// Largest singular value.
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.clone().svd(false, false).singular_values.iter().fold(T::zero(), |a, &b| a.max(b))
}

/// Symmetric square root of a symmetric positive semidefinite matrix and
/// its pseudo-inverse, via the eigendecomposition.
pub fn sym_sqrt_pair<T: Real>(m: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let sym = (m + m.transpose()) * lit::<T>(0.5);
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(T::zero(), |a, &b| a.max(b.abs()));
    let cut = top * lit(1e-13);
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| if l > cut { l.sqrt() } else { T::zero() }),
    );
    let di = d.map(|s| if s > T::zero() { T::one() / s } else { T::zero() });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&d) * v.transpose(), v * DMatrix::from_diagonal(&di) * v.transpose())
}

/// Operator norm of `x -> A x` when domain and codomain carry the inner
/// products `<x, y> = x^T W y` with Gram matrices `w_in`, `w_out`:
/// `|| W_out^{1/2} A W_in^{-1/2} ||_2`.
pub fn weighted_norm<T: Real>(a: &DMatrix<T>, w_in: &DMatrix<T>, w_out: &DMatrix<T>) -> T {
    let (_, in_isqrt) = sym_sqrt_pair(w_in);
    let (out_sqrt, _) = sym_sqrt_pair(w_out);
    spectral_norm(&(out_sqrt * a * in_isqrt))
}

/// Inner-product geometry `<x, y> = x^T W y` for a definite Gram matrix,
/// stored as `W = L L^T`.
#[derive(Clone, Debug)]
pub struct MassGeometry<T: Real> {
    l: DMatrix<T>,
    l_inv_t: DMatrix<T>,
}

impl<T: Real> MassGeometry<T> {
    pub fn new(w: &DMatrix<T>) -> Result<Self> {
        let chol = w.clone().cholesky().ok_or_else(|| EitError::numerical("Gram matrix is not positive definite"))?;
        let l = chol.l();
        let l_inv_t =
            l.clone().try_inverse().ok_or_else(|| EitError::numerical("Gram factor is singular"))?.transpose();
        Ok(MassGeometry { l, l_inv_t })
    }

    pub fn norm(&self, x: &DVector<T>) -> T {
        (self.l.transpose() * x).norm()
    }

    /// Norm of `A` from the geometry `domain` into `self`: `||L^T A L_in^{-T}||`.
    pub fn operator_norm(&self, a: &DMatrix<T>, domain: &MassGeometry<T>) -> T {
        spectral_norm(&(self.l.transpose() * a * &domain.l_inv_t))
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> =
        x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> CsrMatrix<f64> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, 5.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), 5.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn cholesky_matches_dense_solve() {
        // 2D grid Laplacian plus identity, shuffled numbering
        let side = 9;
        let n = side * side;
        let shuffle: Vec<usize> = (0..n).map(|i| (i * 37) % n).collect();
        let mut t = Vec::new();
        for y in 0..side {
            for x in 0..side {
                let i = shuffle[y * side + x];
                t.push((i, i, 5.0));
                if x + 1 < side {
                    let j = shuffle[y * side + x + 1];
                    t.push((i, j, -1.0));
                    t.push((j, i, -1.0));
                }
                if y + 1 < side {
                    let j = shuffle[(y + 1) * side + x];
                    t.push((i, j, -1.0));
                    t.push((j, i, -1.0));
                }
            }
        }
        let a = CsrMatrix::from_triplets(n, t);
        let f = EnvelopeCholesky::factor(&a).unwrap();
        let b: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let x = f.solve(&b);
        let dense = a.to_dense().cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        for i in 0..n {
            assert!((x[i] - dense[i]).abs() < 1e-12);
        }
        // RCM keeps the profile near bandwidth * n
        assert!(f.envelope_size() < n * 2 * side);
    }

    #[test]
    fn tail_rows_stay_last() {
        let a = laplacian_1d(6);
        let p = rcm_ordering(&a, 4);
        assert_eq!(&p[4..], &[4, 5]);
        let f = EnvelopeCholesky::factor_with_tail(&a, 2).unwrap();
        let x = f.solve(&[1.0; 6]);
        let r = a.mul_vec(&x);
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn indefinite_matrix_is_reported() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(EnvelopeCholesky::factor(&a), Err(EitError::Numerical(_))));
    }

    #[test]
    fn weighted_norm_of_identity_map() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let i = DMatrix::<f64>::identity(2, 2);
        assert!((weighted_norm(&i, &w, &w) - 1.0).abs() < 1e-12);
        // scaling the output geometry by 4 doubles the norm
        assert!((weighted_norm(&i, &w, &(w.clone() * 4.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 0.5, 0.25, 0.125];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn f32_factorization() {
        let n = 10;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0f32));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, t);
        let x = EnvelopeCholesky::factor(&a).unwrap().solve(&vec![1.0; n]);
        let r = a.mul_vec(&x);
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-4));
    }
}

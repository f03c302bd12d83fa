//! Small linear-algebra kernels: banded Cholesky, tridiagonal solves and a
//! Lanczos eigensolver for symmetric operators given as closures.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Symmetric positive definite matrix in lower band storage.
///
/// Entry `(i, j)` with `i - bw <= j <= i` lives at `data[i * (bw + 1) + (bw - (i - j))]`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
    factored: bool,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandedSpd {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
            factored: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (self.bw - (i - j))
    }

    /// Adds `v` to the symmetric pair `(i, j)`, `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        assert!(r - c <= self.bw, "entry ({i}, {j}) outside band {}", self.bw);
        let s = self.slot(r, c);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.bw {
            0.0
        } else {
            self.data[self.slot(r, c)]
        }
    }

    /// In-place Cholesky factorisation `A = L Lᵀ`.
    pub fn factor(&mut self) -> Result<()> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = self.data[i * w + (bw - (i - j))];
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                for k in k0..j {
                    s -= self.data[ri + k] * self.data[rj + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::LinearSolve(format!(
                            "matrix is not positive definite (pivot {s:e} at row {i})"
                        )));
                    }
                    self.data[ri + i] = s.sqrt();
                } else {
                    self.data[ri + j] = s / self.data[rj + j];
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves `A x = b` in place using the factor.
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        if !self.factored {
            return Err(Error::LinearSolve("matrix has not been factored".into()));
        }
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                actual: b.len(),
            });
        }
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let ri = i * w + bw - i;
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.data[ri + k] * b[k];
            }
            b[i] = s / self.data[ri + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.data[k * w + bw - k + i] * b[k];
            }
            b[i] = s / self.data[i * w + bw - i + i];
        }
        Ok(())
    }
}

/// Solves a tridiagonal system with sub-diagonal `a` (a[0] unused), diagonal
/// `b` and super-diagonal `c` (c[n-1] unused).
pub fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64]) -> Result<()> {
    let n = b.len();
    if a.len() != n || c.len() != n || d.len() != n {
        return Err(Error::InvalidInput("tridiagonal bands must have equal length".into()));
    }
    let mut cp = vec![0.0; n];
    let mut denom = b[0];
    for i in 0..n {
        if i > 0 {
            denom = b[i] - a[i] * cp[i - 1];
            d[i] -= a[i] * d[i - 1];
        }
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::LinearSolve(format!("zero pivot in tridiagonal solve at row {i}")));
        }
        cp[i] = c[i] / denom;
        d[i] /= denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= cp[i] * d[i + 1];
    }
    Ok(())
}

/// Largest `k` eigenpairs of a symmetric operator, by Lanczos with full
/// reorthogonalisation. Returns eigenvalues in descending order.
pub fn lanczos_largest<F>(n: usize, k: usize, mut apply: F, tol: f64, max_dim: usize, seed: u64) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("cannot extract {k} eigenpairs of an {n}x{n} operator")));
    }
    let max_dim = max_dim.min(n);
    let mut rng = stream_rng(seed, 0);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut v);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_dim);
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut last_residual = f64::INFINITY;
    loop {
        apply(&v, &mut w)?;
        let a = dot(&w, &v);
        basis.push(v.clone());
        alpha.push(a);
        // Full reorthogonalisation, twice.
        for _ in 0..2 {
            for q in &basis {
                let p = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= p * qi);
            }
        }
        let b = norm(&w);
        let m = basis.len();
        if m >= k && (m.is_multiple_of(5) || m == max_dim || b < 1e-300) {
            let (vals, vecs) = tridiag_eigen(&alpha, &beta);
            let scale = vals.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(f64::MIN_POSITIVE);
            let res = (0..k).map(|i| (b * vecs[(m - 1, i)]).abs()).fold(0.0, f64::max);
            last_residual = res / scale;
            if last_residual < tol || b < 1e-300 * scale || m == max_dim {
                if last_residual >= tol && m == max_dim && b >= 1e-300 * scale {
                    return Err(Error::NoConvergence {
                        iterations: m,
                        residual: last_residual,
                    });
                }
                let mut out = Vec::with_capacity(k);
                for i in 0..k {
                    let mut x = vec![0.0; n];
                    for (j, q) in basis.iter().enumerate() {
                        let c = vecs[(j, i)];
                        x.iter_mut().zip(q).for_each(|(xi, qi)| *xi += c * qi);
                    }
                    normalize(&mut x);
                    out.push(x);
                }
                return Ok((vals[..k].to_vec(), out));
            }
        }
        if m == max_dim {
            return Err(Error::NoConvergence {
                iterations: m,
                residual: last_residual,
            });
        }
        beta.push(b);
        v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / b);
    }
}

/// Eigen-decomposition of the Lanczos tridiagonal, sorted descending.
fn tridiag_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    sorted_eigen(t)
}

/// Symmetric eigen-decomposition with eigenvalues sorted descending; columns
/// of the returned matrix are the matching eigenvectors.
pub fn sorted_eigen(a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let m = a.nrows();
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Dense copy of a banded matrix, for small oracles.
pub fn dense_from_banded(a: &BandedSpd) -> DMatrix<f64> {
    DMatrix::from_fn(a.n, a.n, |i, j| a.get(i, j))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) {
    let s = norm(a);
    a.iter_mut().for_each(|x| *x /= s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::{prop_assert, proptest};

    fn random_banded(n: usize, bw: usize, seed: u64) -> BandedSpd {
        let mut rng = stream_rng(seed, 1);
        let mut a = BandedSpd::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                a.add(i, j, rng.random::<f64>() - 0.5);
            }
            a.add(i, i, bw as f64 + 1.0 + rng.random::<f64>());
        }
        a
    }

    #[test]
    fn banded_cholesky_matches_dense() {
        let a = random_banded(40, 6, 3);
        let dense = dense_from_banded(&a);
        let b: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        let mut f = a.clone();
        f.factor().unwrap();
        f.solve_in_place(&mut x).unwrap();
        let oracle = dense.cholesky().unwrap().solve(&DVector::from_vec(b));
        for i in 0..40 {
            assert!((x[i] - oracle[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut a = BandedSpd::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(matches!(a.factor(), Err(Error::LinearSolve(_))));
    }

    #[test]
    fn thomas_solves_poisson() {
        let n = 9;
        let a = vec![-1.0; n];
        let b = vec![2.0; n];
        let c = vec![-1.0; n];
        // Solution x_i = i + 1 of the 1D Laplacian with x_0 = x_{n+1} = 0 boundary terms folded in.
        let x: Vec<f64> = (0..n).map(|i| (i + 1) as f64).collect();
        let mut d: Vec<f64> = (0..n)
            .map(|i| {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                2.0 * x[i] - l - r
            })
            .collect();
        thomas(&a, &b, &c, &mut d).unwrap();
        for i in 0..n {
            assert!((d[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lanczos_matches_dense_eigen() {
        let a = random_banded(120, 3, 8);
        let dense = dense_from_banded(&a);
        let (vals, _) = sorted_eigen(dense.clone());
        let (lv, lvecs) = lanczos_largest(
            120,
            3,
            |x, y| {
                let r = &dense * DVector::from_column_slice(x);
                y.copy_from_slice(r.as_slice());
                Ok(())
            },
            1e-12,
            120,
            1,
        )
        .unwrap();
        for i in 0..3 {
            assert!((lv[i] - vals[i]).abs() < 1e-9 * vals[0].abs(), "{} vs {}", lv[i], vals[i]);
            let x = DVector::from_column_slice(&lvecs[i]);
            let r = &dense * &x - &x * lv[i];
            assert!(r.norm() < 1e-6 * vals[0].abs());
        }
    }

    proptest! {
        #[test]
        fn banded_solve_has_small_residual(n in 2usize..60, bw in 1usize..8, seed in 0u64..1000) {
            let a = random_banded(n, bw.min(n - 1), seed);
            let dense = dense_from_banded(&a);
            let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
            let mut x = b.clone();
            let mut f = a.clone();
            f.factor().unwrap();
            f.solve_in_place(&mut x).unwrap();
            let r = &dense * DVector::from_vec(x) - DVector::from_vec(b);
            prop_assert!(r.norm() < 1e-10);
        }
    }
}

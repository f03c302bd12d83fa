//! Square-root approximation of the generator on a regular grid, with
//! eigenpairs, committors and transition-path fields.
//!
//! For neighbouring cells `i ~ j` the rate is `Q_ij = k √(μ_j/μ_i)` with
//! `k = σ²/(2h²)` along the connecting axis and `μ ∝ exp(-βV)`, `β = 2/σ²`.
//! The symmetrised matrix `S = D^{1/2} Q D^{-1/2}` (with `D = diag(μ)`) has
//! constant off-diagonals `k`, so all eigen and linear problems are solved in
//! symmetric form.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cv::ChiTable;
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::linalg::{lanczos_largest, sorted_eigen, BandedSpd};
use crate::model::SystemSpec;

/// Below this cutoff of `μ_i / max μ` an eigenvector cannot be unscaled
/// reliably; such cells are filled in by a Dirichlet extension solve.
pub const RESOLVED_MASS: f64 = 1e-8;

/// Dense eigensolves are used up to this many cells under [`EigenMethod::Auto`].
pub const DENSE_LIMIT: usize = 2500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenMethod {
    Auto,
    Dense,
    Lanczos,
}

#[derive(Debug, Clone)]
pub struct GridOperator {
    pub grid: Grid2,
    pub sigma: f64,
    /// Potential at the cell centres.
    pub potential: Vec<f64>,
    /// `log μ_i` shifted so that the maximum is zero.
    log_mu: Vec<f64>,
    /// Stationary weights normalised to unit sum.
    pub mu: Vec<f64>,
    kx: f64,
    ky: f64,
    diag: Vec<f64>,
}

impl GridOperator {
    /// Builds the rate matrix for a 2D system (or a 1D system on a strip grid).
    pub fn build_sqra(spec: &SystemSpec, grid: Grid2) -> Result<Self> {
        grid.validate()?;
        let d = spec.dim();
        let one_d = grid.ny == 1;
        if !(d == 2 || (d == 1 && one_d)) {
            return Err(Error::InvalidInput(format!(
                "grid operators need a 2D system or a 1D system on a strip, got d = {d}"
            )));
        }
        let v = (0..grid.len())
            .map(|i| {
                let (x, y) = grid.center(i);
                if d == 1 {
                    spec.potential_unchecked(&[x])
                } else {
                    spec.potential_unchecked(&[x, y])
                }
            })
            .collect();
        Self::from_potential_values(grid, v, spec.sigma)
    }

    pub fn from_potential_values(grid: Grid2, potential: Vec<f64>, sigma: f64) -> Result<Self> {
        grid.validate()?;
        if grid.nx < 3 || !(grid.ny == 1 || grid.ny >= 3) {
            return Err(Error::Degenerate(format!(
                "need at least 3 cells per active axis, got {} x {}",
                grid.nx, grid.ny
            )));
        }
        if potential.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                actual: potential.len(),
            });
        }
        if !(sigma > 0.0) || potential.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("need sigma > 0 and a finite potential".into()));
        }
        let beta = 2.0 / (sigma * sigma);
        let vmin = potential.iter().cloned().fold(f64::INFINITY, f64::min);
        let log_mu: Vec<f64> = potential.iter().map(|v| -beta * (v - vmin)).collect();
        let z: f64 = log_mu.iter().map(|l| l.exp()).sum();
        let mu = log_mu.iter().map(|l| l.exp() / z).collect();
        let kx = sigma * sigma / (2.0 * grid.hx() * grid.hx());
        let ky = if grid.ny == 1 {
            0.0
        } else {
            sigma * sigma / (2.0 * grid.hy() * grid.hy())
        };
        let mut op = GridOperator {
            grid,
            sigma,
            potential,
            log_mu,
            mu,
            kx,
            ky,
            diag: Vec::new(),
        };
        op.diag = (0..op.grid.len())
            .map(|i| -op.grid.neighbors(i).map(|j| op.rate(i, j)).sum::<f64>())
            .collect();
        Ok(op)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn beta(&self) -> f64 {
        2.0 / (self.sigma * self.sigma)
    }

    #[inline]
    fn axis_rate(&self, i: usize, j: usize) -> f64 {
        let (ix, _) = self.grid.coords(i);
        let (jx, _) = self.grid.coords(j);
        if ix == jx {
            self.ky
        } else {
            self.kx
        }
    }

    /// Off-diagonal rate `Q_ij` for neighbours `i ~ j`.
    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.axis_rate(i, j) * (0.5 * (self.log_mu[j] - self.log_mu[i])).exp()
    }

    /// `μ_i Q_ij` up to the common normalisation of `μ` (symmetric in `i, j`).
    #[inline]
    fn weighted_rate(&self, i: usize, j: usize) -> f64 {
        self.axis_rate(i, j) * (0.5 * (self.log_mu[j] + self.log_mu[i])).exp()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// Matrix entry `Q_ij` (zero for non-neighbours).
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else if self.grid.neighbors(i).any(|n| n == j) {
            self.rate(i, j)
        } else {
            0.0
        }
    }

    /// `Q f`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.diag[i] * f[i] + self.grid.neighbors(i).map(|j| self.rate(i, j) * f[j]).sum::<f64>())
            .collect()
    }

    /// Largest `|Σ_j Q_ij| / max|Q_ii|` over all rows.
    pub fn max_row_sum_defect(&self) -> f64 {
        let scale = self.diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        (0..self.len())
            .map(|i| (self.diag[i] + self.grid.neighbors(i).map(|j| self.rate(i, j)).sum::<f64>()).abs())
            .fold(0.0, f64::max)
            / scale
    }

    /// Largest relative detailed-balance defect `|μ_i Q_ij - μ_j Q_ji|`.
    pub fn max_detailed_balance_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            for j in self.grid.neighbors(i) {
                let a = self.mu[i] * self.rate(i, j);
                let b = self.mu[j] * self.rate(j, i);
                let s = a.abs().max(b.abs());
                if s > 0.0 {
                    worst = worst.max((a - b).abs() / s);
                }
            }
        }
        worst
    }

    /// Symmetrised matrix `S` as a dense matrix (small grids only).
    pub fn symmetric_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            s[(i, i)] = self.diag[i];
            for j in self.grid.neighbors(i) {
                s[(i, j)] = self.axis_rate(i, j);
            }
        }
        s
    }

    /// Banded `shift·I - S`.
    fn shifted_negative_symmetric(&self, shift: f64) -> BandedSpd {
        let mut a = BandedSpd::zeros(self.len(), self.grid.ny);
        for i in 0..self.len() {
            a.add(i, i, shift - self.diag[i]);
            for j in self.grid.neighbors(i).filter(|&j| j < i) {
                a.add(i, j, -self.axis_rate(i, j));
            }
        }
        a
    }

    /// The `k` eigenvalues closest to zero with their right eigenvectors `φ`
    /// (`Qφ = λφ`), eigenvalues in descending order.
    pub fn dominant_eigenpairs(&self, k: usize, method: EigenMethod) -> Result<Eigenpairs> {
        let n = self.len();
        if k < 1 || k >= n {
            return Err(Error::InvalidInput(format!("cannot extract {k} eigenpairs from {n} cells")));
        }
        let shift = 1e-6 * self.kx.max(self.ky);
        let mut a = self.shifted_negative_symmetric(shift);
        a.factor()?;
        let method = match method {
            EigenMethod::Auto if n <= DENSE_LIMIT => EigenMethod::Dense,
            EigenMethod::Auto => EigenMethod::Lanczos,
            m => m,
        };
        let (theta, psi): (Vec<f64>, Vec<Vec<f64>>) = match method {
            EigenMethod::Dense => {
                let mut inv = DMatrix::zeros(n, n);
                let mut col = vec![0.0; n];
                for c in 0..n {
                    col.iter_mut().for_each(|x| *x = 0.0);
                    col[c] = 1.0;
                    a.solve_in_place(&mut col)?;
                    inv.set_column(c, &nalgebra::DVector::from_column_slice(&col));
                }
                let inv = (&inv + inv.transpose()) * 0.5;
                let (vals, vecs) = sorted_eigen(inv);
                let psi = (0..k).map(|c| vecs.column(c).iter().copied().collect()).collect();
                (vals[..k].to_vec(), psi)
            }
            _ => lanczos_largest(
                n,
                k,
                |x, y| {
                    y.copy_from_slice(x);
                    a.solve_in_place(y)
                },
                1e-13,
                n.min(400),
                7,
            )?,
        };
        let values: Vec<f64> = theta.iter().map(|t| shift - 1.0 / t).collect();
        let mut vectors = Vec::with_capacity(k);
        for (idx, p) in psi.iter().enumerate() {
            let phi = if idx == 0 {
                vec![1.0; n]
            } else {
                self.unscale_eigenvector(p, values[idx])?
            };
            vectors.push(phi);
        }
        Ok(Eigenpairs {
            values,
            vectors,
            symmetric_vectors: psi,
            shift,
        })
    }

    /// `φ = ψ/√μ` on well-resolved cells, extended to the rest by solving
    /// `(Q - λ)φ = 0` there with the resolved values as boundary data.
    fn unscale_eigenvector(&self, psi: &[f64], lambda: f64) -> Result<Vec<f64>> {
        let n = self.len();
        let resolved: Vec<bool> = self.log_mu.iter().map(|l| *l >= RESOLVED_MASS.ln()).collect();
        let mut phi = vec![0.0; n];
        for i in 0..n {
            if resolved[i] {
                phi[i] = psi[i] * (-0.5 * self.log_mu[i]).exp();
            }
        }
        if resolved.iter().all(|r| *r) {
            return Ok(phi);
        }
        let free: Vec<bool> = resolved.iter().map(|r| !r).collect();
        self.dirichlet_solve(&free, &phi, lambda)
    }

    /// Solves `(Q - s)f = 0` on the free cells with `f` fixed to `fixed` elsewhere.
    ///
    /// Rows are weighted by `μ`, which makes the system symmetric positive
    /// definite whenever `s` stays below the Dirichlet spectrum of `-Q`.
    fn dirichlet_solve(&self, free: &[bool], fixed: &[f64], s: f64) -> Result<Vec<f64>> {
        let n = self.len();
        let mut compact = vec![usize::MAX; n];
        let mut cells = Vec::new();
        for i in 0..n {
            if free[i] {
                compact[i] = cells.len();
                cells.push(i);
            }
        }
        let mut out = fixed.to_vec();
        if cells.is_empty() {
            return Ok(out);
        }
        let mut bw = 0;
        for &i in &cells {
            for j in self.grid.neighbors(i) {
                if free[j] {
                    bw = bw.max(compact[i].abs_diff(compact[j]));
                }
            }
        }
        let m = cells.len();
        let mut a = BandedSpd::zeros(m, bw);
        let mut rhs = vec![0.0; m];
        for (ci, &i) in cells.iter().enumerate() {
            let mut diag = s * self.log_mu[i].exp();
            for j in self.grid.neighbors(i) {
                let w = self.weighted_rate(i, j);
                diag += w;
                if free[j] {
                    if compact[j] < ci {
                        a.add(ci, compact[j], -w);
                    }
                } else {
                    rhs[ci] += w * fixed[j];
                }
            }
            a.add(ci, ci, diag);
        }
        a.factor()?;
        a.solve_in_place(&mut rhs)?;
        for (ci, &i) in cells.iter().enumerate() {
            out[i] = rhs[ci];
        }
        Ok(out)
    }

    /// Committor `q` with `q = 0` on `a` and `q = 1` on `b`.
    pub fn solve_committor(&self, a: &[bool], b: &[bool]) -> Result<Committor> {
        let n = self.len();
        if a.len() != n || b.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: a.len().min(b.len()),
            });
        }
        if !a.iter().any(|x| *x) || !b.iter().any(|x| *x) {
            return Err(Error::InvalidInput("committor sets must be nonempty".into()));
        }
        if a.iter().zip(b).any(|(x, y)| *x && *y) {
            return Err(Error::InvalidInput("committor sets must be disjoint".into()));
        }
        let fixed: Vec<f64> = b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        let free: Vec<bool> = a.iter().zip(b).map(|(x, y)| !x && !y).collect();
        let raw = self.dirichlet_solve(&free, &fixed, 0.0)?;
        let max_violation = raw
            .iter()
            .map(|&q| (-q).max(q - 1.0).max(0.0))
            .fold(0.0, f64::max);
        Ok(Committor {
            q: raw.iter().map(|q| q.clamp(0.0, 1.0)).collect(),
            in_a: a.to_vec(),
            in_b: b.to_vec(),
            max_violation,
        })
    }

    /// Reactive density `μ q(1-q)` and flux `½σ²μ∇q` (central differences),
    /// with `μ` normalised to unit mass over the cells.
    pub fn tpt_fields(&self, committor: &Committor) -> Result<TptFields> {
        let n = self.len();
        if committor.q.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: committor.q.len(),
            });
        }
        let q = &committor.q;
        let mu_ab = (0..n).map(|i| self.mu[i] * q[i] * (1.0 - q[i])).collect();
        let s2 = self.sigma * self.sigma;
        let mut flux = Vec::with_capacity(n);
        for i in 0..n {
            let (gx, gy) = self.grid.gradient(q, i);
            flux.push([0.5 * s2 * self.mu[i] * gx, 0.5 * s2 * self.mu[i] * gy]);
        }
        Ok(TptFields {
            grid: self.grid,
            mu: self.mu.clone(),
            q: q.clone(),
            mu_ab,
            flux,
            in_a: committor.in_a.clone(),
            in_b: committor.in_b.clone(),
        })
    }

    /// Writes `Q` as `i j value` lines, including the diagonal.
    pub fn write_coo(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut line = |i: usize, j: usize, v: f64| writeln!(w, "{i} {j} {v:e}").map_err(|e| Error::io(path, e));
        for i in 0..self.len() {
            let mut cols: Vec<usize> = self.grid.neighbors(i).chain(std::iter::once(i)).collect();
            cols.sort_unstable();
            for j in cols {
                line(i, j, self.entry(i, j))?;
            }
        }
        Ok(())
    }
}

/// Reads a coordinate-format matrix written by [`GridOperator::write_coo`].
pub fn read_coo(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let bad = || Error::InvalidInput(format!("{}: bad entry on line {}", path.display(), n + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        out.push((
            parts[0].parse().map_err(|_| bad())?,
            parts[1].parse().map_err(|_| bad())?,
            parts[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Eigenpairs {
    /// Eigenvalues of `Q`, descending (`values[0] ≈ 0`).
    pub values: Vec<f64>,
    /// Right eigenvectors `φ`; the first is the constant vector.
    pub vectors: Vec<Vec<f64>>,
    /// Unit eigenvectors `ψ` of the symmetrised matrix.
    pub symmetric_vectors: Vec<Vec<f64>>,
    /// Shift used for the shift-invert transformation.
    pub shift: f64,
}

/// A membership function obtained from an eigenvector by affine rescaling.
#[derive(Debug, Clone)]
pub struct Membership {
    pub table: ChiTable,
    /// Extremes of the (oriented) eigenvector before rescaling.
    pub phi_min: f64,
    pub phi_max: f64,
    pub lambda: f64,
}

impl Membership {
    /// Constant of the linear latent drift `c + λz`: `c = λ min φ / (max φ - min φ)`.
    pub fn drift_constant(&self) -> f64 {
        self.lambda * self.phi_min / (self.phi_max - self.phi_min)
    }
}

/// `χ = (φ - min φ)/(max φ - min φ)`, with the sign of `φ` chosen so that
/// `χ(low) < χ(high)`.
pub fn make_chi(grid: Grid2, phi: &[f64], lambda: f64, low: (f64, f64), high: (f64, f64)) -> Result<Membership> {
    if phi.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            actual: phi.len(),
        });
    }
    let flip = phi[grid.cell_of(high.0, high.1)] < phi[grid.cell_of(low.0, low.1)];
    let oriented: Vec<f64> = phi.iter().map(|&p| if flip { -p } else { p }).collect();
    let lo = oriented.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = oriented.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-14 * hi.abs().max(lo.abs())) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Degenerate("eigenvector is constant".into()));
    }
    let values = oriented.iter().map(|p| (p - lo) / (hi - lo)).collect();
    Ok(Membership {
        table: ChiTable::new(grid, values)?,
        phi_min: lo,
        phi_max: hi,
        lambda,
    })
}

#[derive(Debug, Clone)]
pub struct Committor {
    pub q: Vec<f64>,
    pub in_a: Vec<bool>,
    pub in_b: Vec<bool>,
    /// Largest excursion outside `[0, 1]` before clipping.
    pub max_violation: f64,
}

#[derive(Debug, Clone)]
pub struct TptFields {
    pub grid: Grid2,
    pub mu: Vec<f64>,
    pub q: Vec<f64>,
    pub mu_ab: Vec<f64>,
    pub flux: Vec<[f64; 2]>,
    pub in_a: Vec<bool>,
    pub in_b: Vec<bool>,
}

impl TptFields {
    /// Largest `h·|div j|` relative to `max |j|`, over cells whose two-cell
    /// neighbourhood (the footprint of the nested central differences) stays
    /// inside the box and away from `A ∪ B`.
    pub fn relative_flux_divergence(&self) -> f64 {
        let g = &self.grid;
        let jmax = self
            .flux
            .iter()
            .map(|f| f[0].hypot(f[1]))
            .fold(0.0, f64::max);
        let jx: Vec<f64> = self.flux.iter().map(|f| f[0]).collect();
        let jy: Vec<f64> = self.flux.iter().map(|f| f[1]).collect();
        let h = g.hx().min(g.hy());
        let mut worst = 0.0f64;
        for i in 0..g.len() {
            let (ix, iy) = g.coords(i);
            if ix < 2 || iy < 2 || ix + 2 >= g.nx || iy + 2 >= g.ny {
                continue;
            }
            let blocked = (ix - 2..=ix + 2)
                .flat_map(|a| (iy - 2..=iy + 2).map(move |b| (a, b)))
                .any(|(a, b)| {
                    let c = g.index(a, b);
                    self.in_a[c] || self.in_b[c]
                });
            if blocked {
                continue;
            }
            let div = g.gradient(&jx, i).0 + g.gradient(&jy, i).1;
            worst = worst.max(h * div.abs());
        }
        worst / jmax
    }

    /// Writes `x,y,mu,q,mu_ab,jx,jy` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "x,y,mu,q,mu_ab,jx,jy").map_err(|e| Error::io(path, e))?;
        for i in 0..self.grid.len() {
            let (x, y) = self.grid.center(i);
            writeln!(
                w,
                "{x},{y},{:e},{},{:e},{:e},{:e}",
                self.mu[i], self.q[i], self.mu_ab[i], self.flux[i][0], self.flux[i][1]
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_strip(n: usize) -> GridOperator {
        let g = Grid2::strip(0.0, 1.0, n).unwrap();
        GridOperator::from_potential_values(g, vec![0.0; n], 0.7).unwrap()
    }

    fn double_well_strip(n: usize) -> GridOperator {
        let g = Grid2::strip(-2.0, 2.0, n).unwrap();
        let v = (0..n)
            .map(|i| {
                let x = g.center(i).0;
                (x * x - 1.0).powi(2)
            })
            .collect();
        GridOperator::from_potential_values(g, v, 0.7).unwrap()
    }

    #[test]
    fn flat_strip_rates() {
        let op = flat_strip(3);
        let k = 0.49 / (2.0 * (1.0f64 / 3.0).powi(2));
        assert!((op.rate(0, 1) - k).abs() < 1e-12);
        assert!((op.rate(2, 1) - k).abs() < 1e-12);
        assert!((op.diagonal()[1] + 2.0 * k).abs() < 1e-12);
        assert!(op.apply(&[1.0; 3]).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn degenerate_grid_is_rejected() {
        let g = Grid2::strip(0.0, 1.0, 2).unwrap();
        assert!(GridOperator::from_potential_values(g, vec![0.0; 2], 0.7).is_err());
    }

    #[test]
    fn row_sums_and_detailed_balance() {
        let op = GridOperator::build_sqra(&SystemSpec::standard_double_well(), Grid2::square(-2.5, 2.5, 30).unwrap()).unwrap();
        assert!(op.max_row_sum_defect() < 1e-10);
        assert!(op.max_detailed_balance_defect() < 1e-12);
    }

    #[test]
    fn lanczos_matches_dense_on_1d_double_well() {
        let op = double_well_strip(50);
        let d = op.dominant_eigenpairs(3, EigenMethod::Dense).unwrap();
        let l = op.dominant_eigenpairs(3, EigenMethod::Lanczos).unwrap();
        assert!(d.values[0].abs() < 1e-10 * d.values[1].abs());
        for i in 0..3 {
            assert!((d.values[i] - l.values[i]).abs() < 1e-8 * d.values[2].abs(), "{:?} vs {:?}", d.values, l.values);
        }
        // Independent oracle: dense eigen-decomposition of the symmetrised matrix.
        let (vals, _) = sorted_eigen(op.symmetric_dense());
        for i in 0..3 {
            assert!((vals[i] - d.values[i]).abs() < 1e-8 * d.values[2].abs());
        }
    }

    #[test]
    fn eigenvectors_satisfy_eigen_equation() {
        let op = double_well_strip(60);
        let e = op.dominant_eigenpairs(3, EigenMethod::Auto).unwrap();
        for k in 1..3 {
            let qphi = op.apply(&e.vectors[k]);
            let scale = e.vectors[k].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..op.len() {
                let r = qphi[i] - e.values[k] * e.vectors[k][i];
                assert!(r.abs() < 1e-6 * scale * e.values[k].abs().max(1e-3), "cell {i}: {r}");
            }
        }
    }

    #[test]
    fn chi_is_scale_invariant_and_oriented() {
        let op = double_well_strip(40);
        let e = op.dominant_eigenpairs(2, EigenMethod::Dense).unwrap();
        let a = make_chi(op.grid, &e.vectors[1], e.values[1], (-1.0, 0.5), (1.0, 0.5)).unwrap();
        let scaled: Vec<f64> = e.vectors[1].iter().map(|v| -3.0 * v).collect();
        let b = make_chi(op.grid, &scaled, e.values[1], (-1.0, 0.5), (1.0, 0.5)).unwrap();
        for (x, y) in a.table.values.iter().zip(&b.table.values) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.table.eval(-1.0, 0.5).0 < a.table.eval(1.0, 0.5).0);
        assert!(make_chi(op.grid, &vec![2.0; 40], -1.0, (-1.0, 0.5), (1.0, 0.5)).is_err());
    }

    #[test]
    fn flat_committor_is_linear() {
        let n = 21;
        let op = flat_strip(n);
        let mut a = vec![false; n];
        let mut b = vec![false; n];
        a[0] = true;
        b[n - 1] = true;
        let c = op.solve_committor(&a, &b).unwrap();
        for i in 0..n {
            assert!((c.q[i] - i as f64 / (n - 1) as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn invalid_committor_sets_are_rejected() {
        let op = flat_strip(5);
        let none = vec![false; 5];
        let one = vec![true, false, false, false, false];
        assert!(op.solve_committor(&none, &one).is_err());
        assert!(op.solve_committor(&one, &one).is_err());
    }

    #[test]
    fn coo_roundtrip() {
        let op = flat_strip(4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.txt");
        op.write_coo(&p).unwrap();
        let entries = read_coo(&p).unwrap();
        assert_eq!(entries.len(), 4 + 2 * 3);
        for (i, j, v) in entries {
            assert!((v - op.entry(i, j)).abs() < 1e-12 * v.abs().max(1.0));
        }
    }
}

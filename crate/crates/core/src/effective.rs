//! One-dimensional effective dynamics `dz = (c + λz)dt + σ̂(z)dW` on `[0, 1]`.
//!
//! The model is tabulated on uniform nodes. Its discrete generator uses
//! central differences, which reproduce the linear drift exactly at interior
//! nodes, and falls back to upwinding wherever central weights would turn
//! negative. Boundaries are reflecting.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sorted_eigen, thomas};
use crate::model::PathRecord;
use crate::operator::{GridOperator, Membership};
use crate::rng::stream_rng;

/// Floor applied to `p` before dividing by it.
pub const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveModel {
    pub c: f64,
    pub lambda: f64,
    /// Uniform nodes `z_i = i/(n-1)`.
    pub z: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub d_eff: Vec<f64>,
    /// `-log(π_i / w_i)` shifted to minimum zero; on the interior this is a
    /// discretisation of `log D - ∫ b/D`.
    pub v_eff: Vec<f64>,
    /// Stationary node masses of the discrete generator, `∝ w_i exp(-V_eff)`
    /// with trapezoid weights `w_i`; sums to one.
    pub pi: Vec<f64>,
    /// Bins without grid cells, filled by interpolation.
    pub filled_bins: Vec<usize>,
}

/// Tridiagonal matrix; `sub[0]` and `sup[n-1]` are unused.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * f[i];
                if i > 0 {
                    v += self.sub[i] * f[i - 1];
                }
                if i + 1 < n {
                    v += self.sup[i] * f[i + 1];
                }
                v
            })
            .collect()
    }
}

impl EffectiveModel {
    /// Coefficients from a grid operator and the membership function built
    /// from its second eigenvector.
    ///
    /// `σ̂(z_i)² = σ² E_μ[‖∇χ‖² | χ ∈ bin i]`, with node-centred bins of width
    /// `1/(n_z-1)` and `∇χ` by central differences on the grid. The end
    /// nodes get `σ̂ = 0`.
    pub fn build(op: &GridOperator, chi: &Membership, n_z: usize) -> Result<Self> {
        if n_z < 3 {
            return Err(Error::InvalidInput("need at least 3 latent nodes".into()));
        }
        if chi.table.grid != op.grid {
            return Err(Error::InvalidInput("membership function lives on a different grid".into()));
        }
        if !(chi.lambda < 0.0) {
            return Err(Error::InvalidInput(format!("need a negative eigenvalue, got {}", chi.lambda)));
        }
        let g = op.grid;
        let values = &chi.table.values;
        let mut num = vec![0.0; n_z];
        let mut den = vec![0.0; n_z];
        let scale = (n_z - 1) as f64;
        for i in 0..g.len() {
            let (gx, gy) = g.gradient(values, i);
            let bin = ((values[i] * scale).round() as usize).min(n_z - 1);
            num[bin] += op.mu[i] * (gx * gx + gy * gy);
            den[bin] += op.mu[i];
        }
        let mut grad2: Vec<Option<f64>> = (0..n_z)
            .map(|b| (den[b] > 0.0).then(|| num[b] / den[b]))
            .collect();
        let filled_bins = fill_gaps(&mut grad2)?;
        let s2 = op.sigma * op.sigma;
        let mut sigma_hat: Vec<f64> = grad2.iter().map(|g| (s2 * g.unwrap()).sqrt()).collect();
        // χ attains its extrema at 0 and 1, where the level sets carry no
        // gradient. A bin average there leaves enough noise to pin the path to
        // the wall and the reflection then dominates the drift.
        sigma_hat[0] = 0.0;
        sigma_hat[n_z - 1] = 0.0;
        Self::from_coefficients(chi.drift_constant(), chi.lambda, sigma_hat, filled_bins)
    }

    /// Model with given drift constants and `σ̂` at uniform nodes on `[0, 1]`.
    pub fn from_coefficients(c: f64, lambda: f64, sigma_hat: Vec<f64>, filled_bins: Vec<usize>) -> Result<Self> {
        let n = sigma_hat.len();
        if n < 3 {
            return Err(Error::InvalidInput("need at least 3 latent nodes".into()));
        }
        if !(c.is_finite() && lambda.is_finite()) {
            return Err(Error::InvalidInput("drift constants must be finite".into()));
        }
        let interior_ok = sigma_hat[1..n - 1].iter().all(|s| s.is_finite() && *s > 0.0);
        let ends_ok = [sigma_hat[0], sigma_hat[n - 1]].iter().all(|s| s.is_finite() && *s >= 0.0);
        if !(interior_ok && ends_ok) {
            return Err(Error::Degenerate("effective noise must be positive at interior nodes".into()));
        }
        let h = 1.0 / (n - 1) as f64;
        let z: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        let d_eff: Vec<f64> = sigma_hat.iter().map(|s| 0.5 * s * s).collect();
        let mut model = EffectiveModel {
            c,
            lambda,
            z,
            sigma_hat,
            d_eff,
            v_eff: Vec::new(),
            pi: Vec::new(),
            filled_bins,
        };
        let l = model.generator();
        if l.sup[..n - 1].iter().chain(&l.sub[1..]).any(|r| !(*r > 0.0)) {
            return Err(Error::Degenerate("latent chain is not irreducible (outward drift at a noiseless end)".into()));
        }
        model.pi = model.discrete_stationary();
        let mut v_eff: Vec<f64> = (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                -(model.pi[i] / w).ln()
            })
            .collect();
        let vmin = v_eff.iter().cloned().fold(f64::INFINITY, f64::min);
        v_eff.iter_mut().for_each(|v| *v -= vmin);
        model.v_eff = v_eff;
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.len() - 1) as f64
    }

    #[inline]
    pub fn drift(&self, z: f64) -> f64 {
        self.c + self.lambda * z
    }

    /// `σ̂` linearly interpolated between nodes, constant outside `[0, 1]`.
    #[inline]
    pub fn sigma_at(&self, z: f64) -> f64 {
        interp(&self.sigma_hat, z)
    }

    /// Fixed point `-c/λ` of the drift.
    pub fn balance_point(&self) -> f64 {
        -self.c / self.lambda
    }

    /// Discrete generator with reflecting ends.
    pub fn generator(&self) -> Tridiagonal {
        let n = self.len();
        let h = self.spacing();
        let mut sub = vec![0.0; n];
        let mut sup = vec![0.0; n];
        for i in 0..n {
            let b = self.drift(self.z[i]);
            let d = self.d_eff[i] / (h * h);
            if i == 0 {
                sup[i] = 2.0 * d + b.max(0.0) / h;
            } else if i == n - 1 {
                sub[i] = 2.0 * d + (-b).max(0.0) / h;
            } else if self.d_eff[i] >= 0.5 * b.abs() * h {
                sub[i] = d - 0.5 * b / h;
                sup[i] = d + 0.5 * b / h;
            } else if b > 0.0 {
                sub[i] = d;
                sup[i] = d + b / h;
            } else {
                sub[i] = d - b / h;
                sup[i] = d;
            }
        }
        let diag = (0..n).map(|i| -(sub[i] + sup[i])).collect();
        Tridiagonal { sub, diag, sup }
    }

    /// Stationary distribution of the discrete generator (a birth–death chain,
    /// so detailed balance fixes it up to normalisation).
    pub fn discrete_stationary(&self) -> Vec<f64> {
        let l = self.generator();
        let n = self.len();
        let mut log_p = vec![0.0; n];
        for i in 1..n {
            log_p[i] = log_p[i - 1] + l.sup[i - 1].ln() - l.sub[i].ln();
        }
        let m = log_p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = log_p.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }

    /// Leading eigenvalues of the discrete generator, descending.
    pub fn generator_eigenvalues(&self, k: usize) -> Vec<f64> {
        let l = self.generator();
        let p = self.discrete_stationary();
        let n = self.len();
        // D^{1/2} L D^{-1/2} is symmetric for a reversible chain.
        let s = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                l.diag[i]
            } else if j == i + 1 {
                l.sup[i] * (p[i] / p[j]).sqrt()
            } else if i == j + 1 {
                l.sub[i] * (p[i] / p[j]).sqrt()
            } else {
                0.0
            }
        });
        let s = (&s + s.transpose()) * 0.5;
        let (vals, _) = sorted_eigen(s);
        vals.into_iter().take(k).collect()
    }

    /// Mass that the tabulated stationary density puts on `[a, b]`, integrating
    /// the piecewise-linear interpolant of the node density.
    pub fn pi_mass(&self, a: f64, b: f64) -> f64 {
        let n = self.len();
        let h = self.spacing();
        let dens: Vec<f64> = self.pi.iter().enumerate().map(|(i, p)| {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            p / (w * h)
        }).collect();
        let (a, b) = (a.max(0.0), b.min(1.0));
        if b <= a {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n - 1 {
            let (lo, hi) = (self.z[i].max(a), self.z[i + 1].min(b));
            if hi <= lo {
                continue;
            }
            let f = |z: f64| dens[i] + (dens[i + 1] - dens[i]) * (z - self.z[i]) / h;
            total += 0.5 * (hi - lo) * (f(lo) + f(hi));
        }
        total
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `z,sigma_hat,d_eff,v_eff,pi` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "z,sigma_hat,d_eff,v_eff,pi").map_err(|e| Error::io(path, e))?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{:e},{:e},{},{:e}",
                self.z[i], self.sigma_hat[i], self.d_eff[i], self.v_eff[i], self.pi[i]
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Euler–Maruyama path with reflection into `[0, 1]`; every `stride`-th
    /// state is kept.
    pub fn simulate(&self, z0: f64, dt: f64, steps: usize, seed: u64, stride: usize) -> Result<PathRecord> {
        if !(0.0..=1.0).contains(&z0) {
            return Err(Error::OutOfRange {
                value: z0,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(dt > 0.0) || steps == 0 || stride == 0 {
            return Err(Error::InvalidInput("need dt > 0, steps >= 1 and stride >= 1".into()));
        }
        let mut rng = stream_rng(seed, 0);
        let sq = dt.sqrt();
        let mut z = z0;
        let mut states = Vec::with_capacity(steps / stride + 1);
        states.push(z);
        for n in 1..=steps {
            let eta: f64 = rng.sample(StandardNormal);
            z += self.drift(z) * dt + self.sigma_at(z) * sq * eta;
            z = reflect(z);
            if n % stride == 0 {
                states.push(z);
            }
        }
        Ok(PathRecord {
            t0: 0.0,
            dt: dt * stride as f64,
            dim: 1,
            states,
            seed,
            noise: None,
            controls: None,
            log_weight: None,
            clamped: false,
        })
    }

    /// Backward Kolmogorov solve for `p(s, z) = P(z_t > z_* | z_s = z)` on
    /// `s ∈ [0, t]` by implicit Euler.
    pub fn solve_bk(&self, z_star: f64, horizon: f64, n_t: usize, opts: BkOptions) -> Result<LatentProbabilityTable> {
        if !(z_star > 0.0 && z_star < 1.0) {
            return Err(Error::OutOfRange {
                value: z_star,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(horizon > 0.0) || n_t == 0 {
            return Err(Error::InvalidInput("need a positive horizon and n_t >= 1".into()));
        }
        let n = self.len();
        let h = self.spacing();
        let ds = horizon / n_t as f64;
        let l = self.generator();
        let a: Vec<f64> = l.sub.iter().map(|v| -ds * v).collect();
        let b: Vec<f64> = l.diag.iter().map(|v| 1.0 - ds * v).collect();
        let c: Vec<f64> = l.sup.iter().map(|v| -ds * v).collect();
        let terminal: Vec<f64> = self
            .z
            .iter()
            .map(|&z| {
                if opts.mollify {
                    ((z + 0.5 * h - z_star) / h).clamp(0.0, 1.0)
                } else if z > z_star {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut p = vec![0.0; (n_t + 1) * n];
        p[n_t * n..].copy_from_slice(&terminal);
        let mut cur = terminal;
        for k in (0..n_t).rev() {
            thomas(&a, &b, &c, &mut cur)?;
            p[k * n..(k + 1) * n].copy_from_slice(&cur);
        }
        // Gradient of log max(p, floor): bounded by log(1/floor) / h where p
        // underflows.
        let mut dlogp = vec![0.0; p.len()];
        for k in 0..=n_t {
            let lp: Vec<f64> = p[k * n..(k + 1) * n].iter().map(|v| v.max(opts.p_floor).ln()).collect();
            for i in 0..n {
                dlogp[k * n + i] = if i == 0 {
                    (lp[1] - lp[0]) / h
                } else if i == n - 1 {
                    (lp[n - 1] - lp[n - 2]) / h
                } else {
                    (lp[i + 1] - lp[i - 1]) / (2.0 * h)
                };
            }
        }
        // The terminal indicator has no usable gradient; controls evaluated
        // in the last time cell see the first implicit step instead.
        if n_t > 0 {
            let (head, tail) = dlogp.split_at_mut(n_t * n);
            tail.copy_from_slice(&head[(n_t - 1) * n..]);
        }
        Ok(LatentProbabilityTable {
            z_star,
            horizon,
            s: (0..=n_t).map(|k| k as f64 * ds).collect(),
            z: self.z.clone(),
            p,
            dlogp,
            p_floor: opts.p_floor,
        })
    }

    /// Committor of the discrete generator between `{z ≤ z_a}` and `{z ≥ z_b}`.
    pub fn committor(&self, z_a: f64, z_b: f64) -> Result<LatentCommittor> {
        if !(z_a < z_b) {
            return Err(Error::InvalidInput("need z_a < z_b".into()));
        }
        let n = self.len();
        let l = self.generator();
        let free: Vec<usize> = (0..n).filter(|&i| self.z[i] > z_a && self.z[i] < z_b).collect();
        if free.is_empty() || free[0] == 0 || *free.last().unwrap() == n - 1 {
            return Err(Error::InvalidInput("latent committor sets must bracket a nonempty interior".into()));
        }
        let m = free.len();
        let (i0, i1) = (free[0], free[m - 1]);
        let a: Vec<f64> = free.iter().map(|&i| l.sub[i]).collect();
        let b: Vec<f64> = free.iter().map(|&i| l.diag[i]).collect();
        let c: Vec<f64> = free.iter().map(|&i| l.sup[i]).collect();
        let mut rhs = vec![0.0; m];
        rhs[m - 1] -= l.sup[i1];
        thomas(&a, &b, &c, &mut rhs)?;
        let mut q = vec![0.0; n];
        for i in 0..n {
            q[i] = if i < i0 {
                0.0
            } else if i > i1 {
                1.0
            } else {
                rhs[i - i0].clamp(0.0, 1.0)
            };
        }
        Ok(LatentCommittor::from_values(self.z.clone(), q))
    }

    /// Two-term spectral approximation of `p(s, ·)` for the linear drift,
    /// using the tabulated stationary density.
    pub fn spectral_approx(&self, z_star: f64, horizon: f64, s: f64, p_floor: f64) -> SpectralApprox {
        let phi: Vec<f64> = self.z.iter().map(|&z| self.drift(z)).collect();
        let a = phi.iter().zip(&self.pi).map(|(f, p)| f * f * p).sum::<f64>().sqrt();
        let above = |i: &usize| self.z[*i] > z_star;
        let pi_b: f64 = (0..self.len()).filter(above).map(|i| self.pi[i]).sum();
        let gamma = (0..self.len()).filter(above).map(|i| phi[i] * self.pi[i]).sum::<f64>() / a;
        let decay = (self.lambda * (horizon - s)).exp();
        let p = phi
            .iter()
            .map(|f| (pi_b + gamma / a * decay * f).clamp(p_floor, 1.0))
            .collect();
        let dlogp = phi
            .iter()
            .map(|f| gamma * self.lambda * decay / (a * pi_b + gamma * decay * f))
            .collect();
        SpectralApprox {
            z: self.z.clone(),
            p,
            dlogp,
            pi_b,
            a,
            gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BkOptions {
    /// Replace the terminal indicator by its cell average.
    pub mollify: bool,
    pub p_floor: f64,
}

impl Default for BkOptions {
    fn default() -> Self {
        BkOptions {
            mollify: false,
            p_floor: P_FLOOR,
        }
    }
}

fn reflect(mut z: f64) -> f64 {
    if z < 0.0 {
        z = -z;
    }
    if z > 1.0 {
        z = 2.0 - z;
    }
    z.clamp(0.0, 1.0)
}

/// Linear interpolation on uniform nodes over `[0, 1]`.
#[inline]
fn interp(values: &[f64], z: f64) -> f64 {
    let n = values.len();
    let u = (z.clamp(0.0, 1.0) * (n - 1) as f64).min((n - 1) as f64);
    let i = (u.floor() as usize).min(n - 2);
    let t = u - i as f64;
    values[i] * (1.0 - t) + values[i + 1] * t
}

/// Fills `None` entries by linear interpolation (constant beyond the ends);
/// returns the filled indices.
fn fill_gaps(v: &mut [Option<f64>]) -> Result<Vec<usize>> {
    let known: Vec<usize> = (0..v.len()).filter(|&i| v[i].is_some()).collect();
    if known.is_empty() {
        return Err(Error::Degenerate("no grid cell falls into any latent bin".into()));
    }
    let mut filled = Vec::new();
    for i in 0..v.len() {
        if v[i].is_some() {
            continue;
        }
        let left = known.iter().rev().find(|&&k| k < i).copied();
        let right = known.iter().find(|&&k| k > i).copied();
        let val = match (left, right) {
            (Some(l), Some(r)) => {
                let t = (i - l) as f64 / (r - l) as f64;
                v[l].unwrap() * (1.0 - t) + v[r].unwrap() * t
            }
            (Some(l), None) => v[l].unwrap(),
            (None, Some(r)) => v[r].unwrap(),
            (None, None) => unreachable!(),
        };
        v[i] = Some(val);
        filled.push(i);
    }
    Ok(filled)
}

/// `p(s_k, z_i)` and `∂_z log p` on a time × space grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentProbabilityTable {
    pub z_star: f64,
    pub horizon: f64,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    /// Row-major `(n_t+1) × n_z`.
    pub p: Vec<f64>,
    pub dlogp: Vec<f64>,
    pub p_floor: f64,
}

impl LatentProbabilityTable {
    pub fn row(&self, k: usize) -> &[f64] {
        let n = self.z.len();
        &self.p[k * n..(k + 1) * n]
    }

    pub fn dlogp_row(&self, k: usize) -> &[f64] {
        let n = self.z.len();
        &self.dlogp[k * n..(k + 1) * n]
    }

    /// Bilinear lookup; `s` and `z` are clamped to the table.
    fn lookup(&self, field: &[f64], s: f64, z: f64) -> f64 {
        let n = self.z.len();
        let nt = self.s.len() - 1;
        let u = (s / self.horizon).clamp(0.0, 1.0) * nt as f64;
        let k = (u.floor() as usize).min(nt.saturating_sub(1));
        let w = if nt == 0 { 0.0 } else { u - k as f64 };
        let a = interp(&field[k * n..(k + 1) * n], z);
        if nt == 0 {
            return a;
        }
        let b = interp(&field[(k + 1) * n..(k + 2) * n], z);
        a * (1.0 - w) + b * w
    }

    pub fn p_at(&self, s: f64, z: f64) -> f64 {
        self.lookup(&self.p, s, z)
    }

    pub fn dlogp_at(&self, s: f64, z: f64) -> f64 {
        self.lookup(&self.dlogp, s, z)
    }

    /// Writes `s,z,p,dlogp` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "s,z,p,dlogp").map_err(|e| Error::io(path, e))?;
        let n = self.z.len();
        for (k, s) in self.s.iter().enumerate() {
            for i in 0..n {
                writeln!(w, "{s},{},{:e},{:e}", self.z[i], self.p[k * n + i], self.dlogp[k * n + i])
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(())
    }
}

/// Latent committor with its derivative at uniform nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentCommittor {
    pub z: Vec<f64>,
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
}

impl LatentCommittor {
    pub fn from_values(z: Vec<f64>, q: Vec<f64>) -> Self {
        let n = z.len();
        let h = z[1] - z[0];
        let dq = (0..n)
            .map(|i| {
                if i == 0 {
                    (q[1] - q[0]) / h
                } else if i == n - 1 {
                    (q[n - 1] - q[n - 2]) / h
                } else {
                    (q[i + 1] - q[i - 1]) / (2.0 * h)
                }
            })
            .collect();
        LatentCommittor { z, q, dq }
    }

    /// `(q̃(z), q̃'(z))` by linear interpolation.
    pub fn eval(&self, z: f64) -> (f64, f64) {
        (interp(&self.q, z), interp(&self.dq, z))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralApprox {
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub dlogp: Vec<f64>,
    pub pi_b: f64,
    pub a: f64,
    pub gamma: f64,
}

/// Count-based transition matrix between uniform boxes on `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanEstimate {
    pub tau: f64,
    pub n_boxes: usize,
    /// Boxes that were visited and kept as states.
    pub active: Vec<usize>,
    /// Row-major `active × active` row-stochastic matrix.
    pub matrix: Vec<f64>,
    /// Leading eigenvalues of the matrix by modulus (real parts).
    pub eigenvalues: Vec<f64>,
    /// Implied generator eigenvalues `log|ν|/τ`.
    pub implied_rates: Vec<f64>,
}

impl KoopmanEstimate {
    pub fn max_row_sum_defect(&self) -> f64 {
        let m = self.active.len();
        (0..m)
            .map(|i| (self.matrix[i * m..(i + 1) * m].iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Estimates the lag-`τ` transfer matrix from samples spaced `sample_dt` apart.
pub fn estimate_koopman(samples: &[f64], sample_dt: f64, tau: f64, n_boxes: usize, n_eigen: usize) -> Result<KoopmanEstimate> {
    let lag = (tau / sample_dt).round() as usize;
    if lag == 0 || ((lag as f64) * sample_dt - tau).abs() > 1e-9 * tau {
        return Err(Error::InvalidInput(format!(
            "lag {tau} is not a multiple of the sample spacing {sample_dt}"
        )));
    }
    if samples.len() <= 100 * lag {
        return Err(Error::InvalidInput("trajectory must be longer than 100 lags".into()));
    }
    if n_boxes < 2 {
        return Err(Error::InvalidInput("need at least 2 boxes".into()));
    }
    let boxes: Vec<usize> = samples
        .iter()
        .map(|&z| ((z.clamp(0.0, 1.0) * n_boxes as f64) as usize).min(n_boxes - 1))
        .collect();
    let mut counts = vec![0.0f64; n_boxes * n_boxes];
    for n in 0..samples.len() - lag {
        counts[boxes[n] * n_boxes + boxes[n + lag]] += 1.0;
    }
    // Keep boxes with outgoing transitions; drop transitions into removed boxes.
    let mut active: Vec<usize> = (0..n_boxes)
        .filter(|&b| counts[b * n_boxes..(b + 1) * n_boxes].iter().sum::<f64>() > 0.0)
        .collect();
    loop {
        let keep: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&b| active.iter().map(|&c| counts[b * n_boxes + c]).sum::<f64>() > 0.0)
            .collect();
        if keep.len() == active.len() {
            break;
        }
        active = keep;
    }
    let m = active.len();
    if m < 2 {
        return Err(Error::Estimation("fewer than two visited boxes".into()));
    }
    let mut matrix = vec![0.0; m * m];
    for (i, &bi) in active.iter().enumerate() {
        let row: f64 = active.iter().map(|&bj| counts[bi * n_boxes + bj]).sum();
        for (j, &bj) in active.iter().enumerate() {
            matrix[i * m + j] = counts[bi * n_boxes + bj] / row;
        }
    }
    let k = DMatrix::from_row_slice(m, m, &matrix);
    let ev = k.complex_eigenvalues();
    let mut ev: Vec<_> = ev.iter().copied().collect();
    ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.re.total_cmp(&a.re)));
    let take = n_eigen.min(m);
    let eigenvalues: Vec<f64> = ev[..take].iter().map(|c| c.re).collect();
    let implied_rates = ev[..take].iter().map(|c| c.norm().ln() / tau).collect();
    Ok(KoopmanEstimate {
        tau,
        n_boxes,
        active,
        matrix,
        eigenvalues,
        implied_rates,
    })
}

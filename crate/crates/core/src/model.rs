//! Full-dimensional overdamped Langevin systems and their Euler–Maruyama
//! integration.
//!
//! A [`SystemSpec`] couples a closed-form potential `V` with a constant scalar
//! noise intensity `σ`; the dynamics is `dX = -∇V(X) dt + σ dW`. Controlled
//! dynamics add `σ·u(t, X)` to the drift, i.e. controls live in noise-channel
//! units throughout the crate.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Paths whose state norm exceeds this bound are declared diverged.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Closed-form potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Potential {
    /// `α(x1²-1)² + β(x2²-1)² + 1 - exp(-γ(x1-x2)²)`.
    DoubleWell { alpha: f64, beta: f64, gamma: f64 },
    /// `W(Rx)` with `W(y) = V_dw(y1, y2) + ½ Σ_{j≥3} ω_j² y_j²`.
    Rotated {
        alpha: f64,
        beta: f64,
        gamma: f64,
        /// Harmonic frequencies of the coordinates `3..=d`.
        omegas: Vec<f64>,
        /// Orthonormal `d×d` matrix, row-major.
        rotation: Vec<Vec<f64>>,
    },
    /// `½ Σ k_i x_i²`; `k = 0` gives free diffusion, `k = 1` the standard OU process.
    Harmonic { stiffness: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub sigma: f64,
    pub potential: Potential,
}

fn dw_value(alpha: f64, beta: f64, gamma: f64, x1: f64, x2: f64) -> f64 {
    let a = x1 * x1 - 1.0;
    let b = x2 * x2 - 1.0;
    let d = x1 - x2;
    alpha * a * a + beta * b * b + (1.0 - (-gamma * d * d).exp())
}

fn dw_gradient(alpha: f64, beta: f64, gamma: f64, x1: f64, x2: f64) -> (f64, f64) {
    let d = x1 - x2;
    let coupling = 2.0 * gamma * d * (-gamma * d * d).exp();
    (
        4.0 * alpha * x1 * (x1 * x1 - 1.0) + coupling,
        4.0 * beta * x2 * (x2 * x2 - 1.0) - coupling,
    )
}

impl SystemSpec {
    /// The 2D test system with two main wells at `±(1, 1)` and two side wells.
    pub fn double_well(alpha: f64, beta: f64, gamma: f64, sigma: f64) -> Result<Self> {
        let spec = SystemSpec {
            sigma,
            potential: Potential::DoubleWell { alpha, beta, gamma },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `α = β = 1, γ = 2, σ = 0.7`.
    pub fn standard_double_well() -> Self {
        Self::double_well(1.0, 1.0, 2.0, 0.7).expect("valid parameters")
    }

    pub fn harmonic(stiffness: Vec<f64>, sigma: f64) -> Result<Self> {
        let spec = SystemSpec {
            sigma,
            potential: Potential::Harmonic { stiffness },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Rotated high-dimensional variant with an explicit orthonormal matrix.
    pub fn rotated(
        alpha: f64,
        beta: f64,
        gamma: f64,
        omegas: Vec<f64>,
        rotation: Vec<Vec<f64>>,
        sigma: f64,
    ) -> Result<Self> {
        let spec = SystemSpec {
            sigma,
            potential: Potential::Rotated {
                alpha,
                beta,
                gamma,
                omegas,
                rotation,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Rotated variant whose rotation is obtained by orthogonalising a seeded
    /// Gaussian matrix.
    pub fn rotated_random(
        alpha: f64,
        beta: f64,
        gamma: f64,
        omegas: Vec<f64>,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = omegas.len() + 2;
        Self::rotated(alpha, beta, gamma, omegas, random_rotation(d, seed), sigma)
    }

    pub fn dim(&self) -> usize {
        match &self.potential {
            Potential::DoubleWell { .. } => 2,
            Potential::Rotated { omegas, .. } => omegas.len() + 2,
            Potential::Harmonic { stiffness } => stiffness.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {}", self.sigma)));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
            }
        };
        match &self.potential {
            Potential::DoubleWell { alpha, beta, gamma } => {
                positive("alpha", *alpha)?;
                positive("beta", *beta)?;
                positive("gamma", *gamma)?;
            }
            Potential::Rotated {
                alpha,
                beta,
                gamma,
                omegas,
                rotation,
            } => {
                positive("alpha", *alpha)?;
                positive("beta", *beta)?;
                positive("gamma", *gamma)?;
                for w in omegas {
                    positive("omega", *w)?;
                }
                let d = omegas.len() + 2;
                if rotation.len() != d || rotation.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidInput(format!("rotation must be {d}x{d}")));
                }
                for i in 0..d {
                    for j in 0..d {
                        let dot: f64 = (0..d).map(|k| rotation[i][k] * rotation[j][k]).sum();
                        let target = if i == j { 1.0 } else { 0.0 };
                        if (dot - target).abs() > 1e-12 {
                            return Err(Error::InvalidInput(format!(
                                "rotation is not orthonormal: (R R^T)[{i}][{j}] = {dot}"
                            )));
                        }
                    }
                }
            }
            Potential::Harmonic { stiffness } => {
                if stiffness.is_empty() {
                    return Err(Error::InvalidInput("harmonic potential needs d >= 1".into()));
                }
                if stiffness.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
                    return Err(Error::InvalidInput("stiffness must be non-negative".into()));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn potential(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.potential_unchecked(x))
    }

    pub(crate) fn potential_unchecked(&self, x: &[f64]) -> f64 {
        match &self.potential {
            Potential::DoubleWell { alpha, beta, gamma } => dw_value(*alpha, *beta, *gamma, x[0], x[1]),
            Potential::Rotated {
                alpha,
                beta,
                gamma,
                omegas,
                rotation,
            } => {
                let y: Vec<f64> = rotation.iter().map(|row| dot(row, x)).collect();
                let tail: f64 = omegas.iter().zip(&y[2..]).map(|(w, yj)| w * w * yj * yj).sum();
                dw_value(*alpha, *beta, *gamma, y[0], y[1]) + 0.5 * tail
            }
            Potential::Harmonic { stiffness } => {
                0.5 * stiffness.iter().zip(x).map(|(k, xi)| k * xi * xi).sum::<f64>()
            }
        }
    }

    /// `b(x) = -∇V(x)`.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; x.len()];
        self.drift_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.potential {
            Potential::DoubleWell { alpha, beta, gamma } => {
                let (g1, g2) = dw_gradient(*alpha, *beta, *gamma, x[0], x[1]);
                out[0] = -g1;
                out[1] = -g2;
            }
            Potential::Rotated {
                alpha,
                beta,
                gamma,
                omegas,
                rotation,
            } => {
                let d = x.len();
                let y: Vec<f64> = rotation.iter().map(|row| dot(row, x)).collect();
                let mut gy = vec![0.0; d];
                let (g1, g2) = dw_gradient(*alpha, *beta, *gamma, y[0], y[1]);
                gy[0] = g1;
                gy[1] = g2;
                for (j, w) in omegas.iter().enumerate() {
                    gy[j + 2] = w * w * y[j + 2];
                }
                // ∇V(x) = Rᵀ ∇W(Rx)
                for (i, o) in out.iter_mut().enumerate() {
                    *o = -(0..d).map(|k| rotation[k][i] * gy[k]).sum::<f64>();
                }
            }
            Potential::Harmonic { stiffness } => {
                for ((o, k), xi) in out.iter_mut().zip(stiffness).zip(x) {
                    *o = -k * xi;
                }
            }
        }
    }

    /// Rotation matrix of the rotated variant, identity otherwise.
    pub fn rotation(&self) -> DMatrix<f64> {
        match &self.potential {
            Potential::Rotated { rotation, .. } => {
                let d = rotation.len();
                DMatrix::from_fn(d, d, |i, j| rotation[i][j])
            }
            _ => DMatrix::identity(self.dim(), self.dim()),
        }
    }

    /// The underlying 2D double well `(α, β, γ)`, when there is one.
    pub fn double_well_params(&self) -> Option<(f64, f64, f64)> {
        match &self.potential {
            Potential::DoubleWell { alpha, beta, gamma }
            | Potential::Rotated {
                alpha, beta, gamma, ..
            } => Some((*alpha, *beta, *gamma)),
            Potential::Harmonic { .. } => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SystemSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal matrix from a seeded Gaussian matrix (modified Gram–Schmidt,
/// applied twice for full working precision).
pub fn random_rotation(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 0);
    let mut rows: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for _ in 0..2 {
        for i in 0..d {
            for j in 0..i {
                let proj = dot(&rows[i], &rows[j]);
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= proj * b;
                }
            }
            let norm = dot(&rows[i], &rows[i]).sqrt();
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
    }
    rows
}

/// A feedback control `u(t, x)` in noise-channel units.
pub trait Control: Send + Sync {
    /// Writes `u(t, x)` into `u`; returns `true` when a collective-variable
    /// lookup had to be clamped to its table.
    fn evaluate(&self, t: f64, x: &[f64], u: &mut [f64]) -> bool;
}

/// A simulated trajectory on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub t0: f64,
    pub dt: f64,
    pub dim: usize,
    /// Row-major `(M+1) × d` states.
    pub states: Vec<f64>,
    pub seed: u64,
    /// Per-step standard normal increments `η_n` (when weights are tracked).
    pub noise: Option<Vec<f64>>,
    /// Per-step controls `u_n` (when weights are tracked).
    pub controls: Option<Vec<f64>>,
    /// Girsanov log-weight accumulated along the path (when weights are tracked).
    pub log_weight: Option<f64>,
    /// Set when a collective-variable query left its table.
    pub clamped: bool,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of integration steps `M`.
    pub fn steps(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n * self.dim..(n + 1) * self.dim]
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut header = String::from("t");
        for i in 1..=self.dim {
            header.push_str(&format!(",x_{i}"));
        }
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
        for n in 0..self.len() {
            let mut line = format!("{}", self.time(n));
            for v in self.state(n) {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Single-path Euler–Maruyama propagator with on-the-fly Girsanov bookkeeping.
///
/// One step advances `X ← X + (b(X) + σu)δt + σ√δt η` and updates
/// `log w ← log w - √δt u·η - ½‖u‖²δt`.
pub(crate) struct Stepper<'a> {
    spec: &'a SystemSpec,
    control: Option<&'a dyn Control>,
    dt: f64,
    sqrt_dt: f64,
    pub x: Vec<f64>,
    pub t: f64,
    pub steps: usize,
    pub log_weight: f64,
    /// `½∫‖u‖² dt`.
    pub control_cost: f64,
    pub clamped: bool,
    pub u: Vec<f64>,
    pub eta: Vec<f64>,
    b: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(spec: &'a SystemSpec, control: Option<&'a dyn Control>, x0: &[f64], t0: f64, dt: f64) -> Self {
        let d = x0.len();
        Stepper {
            spec,
            control,
            dt,
            sqrt_dt: dt.sqrt(),
            x: x0.to_vec(),
            t: t0,
            steps: 0,
            log_weight: 0.0,
            control_cost: 0.0,
            clamped: false,
            u: vec![0.0; d],
            eta: vec![0.0; d],
            b: vec![0.0; d],
        }
    }

    pub fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        self.spec.drift_into(&self.x, &mut self.b);
        let sigma = self.spec.sigma;
        if let Some(c) = self.control {
            if c.evaluate(self.t, &self.x, &mut self.u) {
                self.clamped = true;
            }
        }
        for e in self.eta.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let mut norm2 = 0.0;
        if self.control.is_some() {
            let mut u_eta = 0.0;
            let mut u2 = 0.0;
            for i in 0..self.x.len() {
                let ui = self.u[i];
                u_eta += ui * self.eta[i];
                u2 += ui * ui;
                self.x[i] += (self.b[i] + sigma * ui) * self.dt + sigma * self.sqrt_dt * self.eta[i];
                norm2 += self.x[i] * self.x[i];
            }
            self.log_weight -= self.sqrt_dt * u_eta + 0.5 * u2 * self.dt;
            self.control_cost += 0.5 * u2 * self.dt;
        } else {
            for i in 0..self.x.len() {
                self.x[i] += self.b[i] * self.dt + sigma * self.sqrt_dt * self.eta[i];
                norm2 += self.x[i] * self.x[i];
            }
        }
        self.steps += 1;
        self.t += self.dt;
        if !norm2.is_finite() || norm2 > DIVERGENCE_BOUND * DIVERGENCE_BOUND {
            return Err(Error::Divergence {
                step: self.steps,
                norm: norm2.sqrt(),
            });
        }
        Ok(())
    }
}

/// Euler–Maruyama trajectory of the (optionally controlled) dynamics.
///
/// `track_weights` records the per-step noise and control values together with
/// the Girsanov log-weight. The noise stream is stream 0 of `seed`.
pub fn simulate_em(
    spec: &SystemSpec,
    x0: &[f64],
    dt: f64,
    steps: usize,
    control: Option<&dyn Control>,
    seed: u64,
    track_weights: bool,
) -> Result<PathRecord> {
    simulate_em_stream(spec, x0, 0.0, dt, steps, control, seed, 0, track_weights)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_em_stream(
    spec: &SystemSpec,
    x0: &[f64],
    t0: f64,
    dt: f64,
    steps: usize,
    control: Option<&dyn Control>,
    seed: u64,
    stream: u64,
    track_weights: bool,
) -> Result<PathRecord> {
    spec.check_dim(x0)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    let d = x0.len();
    let mut rng = stream_rng(seed, stream);
    let mut stepper = Stepper::new(spec, control, x0, t0, dt);
    let mut states = Vec::with_capacity((steps + 1) * d);
    states.extend_from_slice(x0);
    let mut noise = track_weights.then(|| Vec::with_capacity(steps * d));
    let mut controls = track_weights.then(|| Vec::with_capacity(steps * d));
    for _ in 0..steps {
        stepper.step(&mut rng)?;
        states.extend_from_slice(&stepper.x);
        if let Some(n) = noise.as_mut() {
            n.extend_from_slice(&stepper.eta);
        }
        if let Some(c) = controls.as_mut() {
            c.extend_from_slice(&stepper.u);
        }
    }
    Ok(PathRecord {
        t0,
        dt,
        dim: d,
        states,
        seed,
        noise,
        controls,
        log_weight: track_weights.then_some(stepper.log_weight),
        clamped: stepper.clamped,
    })
}

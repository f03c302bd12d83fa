//! Feedback controls steering a collective variable.
//!
//! All laws return `u` in noise-channel units: the drift increment is `σu`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cv::CollectiveVariable;
use crate::effective::{LatentCommittor, LatentProbabilityTable};
use crate::error::{Error, Result};
use crate::model::Control;

pub const DEFAULT_Q_FLOOR: f64 = 1e-6;
pub const DEFAULT_TRACKING_CLIP: f64 = 50.0;

/// Piecewise-linear latent reference `z̄_t` through knots `(t_j, Z_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    times: Vec<f64>,
    /// One latent vector per knot.
    values: Vec<Vec<f64>>,
}

impl ReferencePath {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::InvalidInput("a reference path needs matching times and values, at least 2 knots".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("knot times must be finite and strictly increasing".into()));
        }
        let m = values[0].len();
        if m == 0 || values.iter().any(|v| v.len() != m || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("knot values must be finite vectors of one common length".into()));
        }
        Ok(ReferencePath { times, values })
    }

    /// Scalar reference from `(t, z)` pairs.
    pub fn scalar(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::new(times, values.into_iter().map(|v| vec![v]).collect())
    }

    /// `n_knots` equally spaced knots on the straight line from `z0` at `t0` to `z1` at `t1`.
    pub fn linear_ramp(t0: f64, t1: f64, z0: f64, z1: f64, n_knots: usize) -> Result<Self> {
        if n_knots < 2 {
            return Err(Error::InvalidInput("need at least 2 knots".into()));
        }
        let k = (n_knots - 1) as f64;
        let times = (0..n_knots).map(|j| t0 + (t1 - t0) * j as f64 / k).collect();
        let values = (0..n_knots).map(|j| z0 + (z1 - z0) * j as f64 / k).collect();
        Self::scalar(times, values)
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// `z̄_t`; errors outside `[t_start, t_end]`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= self.t_start() && t <= self.t_end()) {
            return Err(Error::OutOfRange {
                value: t,
                lo: self.t_start(),
                hi: self.t_end(),
            });
        }
        let mut out = vec![0.0; self.dim()];
        self.eval_clamped(t, &mut out);
        Ok(out)
    }

    /// `z̄_t` with `t` clamped to the knot range.
    pub fn eval_clamped(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        let j = match self.times.partition_point(|&tk| tk <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        for (k, o) in out.iter_mut().enumerate() {
            *o = if w == 0.0 {
                self.values[j][k]
            } else if w == 1.0 {
                self.values[j + 1][k]
            } else {
                self.values[j][k] * (1.0 - w) + self.values[j + 1][k] * w
            };
        }
    }
}

/// Scalar gain factor `g(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GainSchedule {
    Constant { value: f64 },
    /// `values[k]` on `[breaks[k-1], breaks[k])`; `values.len() == breaks.len() + 1`.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
    /// Linear from `g0` at `t0` to `g1` at `t1`, constant outside.
    Ramp { t0: f64, t1: f64, g0: f64, g1: f64 },
}

impl GainSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = |g: f64| g.is_finite() && g >= 0.0;
        match self {
            GainSchedule::Constant { value } if ok(*value) => Ok(()),
            GainSchedule::Piecewise { breaks, values }
                if values.len() == breaks.len() + 1
                    && values.iter().all(|g| ok(*g))
                    && breaks.windows(2).all(|w| w[1] > w[0]) =>
            {
                Ok(())
            }
            GainSchedule::Ramp { t0, t1, g0, g1 } if t1 > t0 && ok(*g0) && ok(*g1) => Ok(()),
            _ => Err(Error::InvalidInput(format!("invalid gain schedule {self:?}"))),
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            GainSchedule::Constant { value } => *value,
            GainSchedule::Piecewise { breaks, values } => values[breaks.partition_point(|&b| b <= t)],
            GainSchedule::Ramp { t0, t1, g0, g1 } => {
                let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                g0 + (g1 - g0) * w
            }
        }
    }

    /// Largest value the schedule takes.
    pub fn max_value(&self) -> f64 {
        match self {
            GainSchedule::Constant { value } => *value,
            GainSchedule::Piecewise { values, .. } => values.iter().cloned().fold(0.0, f64::max),
            GainSchedule::Ramp { g0, g1, .. } => g0.max(*g1),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ControlKind {
    /// `u = J_ξᵀ G̃_t (z̄_t - ξ(x))` with `G_t = scale·g(t)·M`.
    Tracking {
        reference: ReferencePath,
        gain: GainSchedule,
        /// SPD factor `M`; identity when absent.
        metric: Option<DMatrix<f64>>,
        /// Preconditioning regularizer `ρ`; `G̃ = G (J Jᵀ + ρI)⁻¹` when positive.
        rho: f64,
        scale: f64,
    },
    /// `u = κσ ∂_z log p(t, ξ(x)) ∇ξ`.
    OptimalGuidance { table: Arc<LatentProbabilityTable>, kappa: f64 },
    /// `u = κσ q̃'(ξ)/q̃(ξ) ∇ξ`.
    CommittorGuidance {
        committor: Arc<LatentCommittor>,
        kappa: f64,
        q_floor: f64,
    },
}

#[derive(Debug, Clone)]
pub struct ControlLaw {
    pub cv: CollectiveVariable,
    pub kind: ControlKind,
    pub sigma: f64,
    /// Norm clip on `u`.
    pub u_max: Option<f64>,
}

impl ControlLaw {
    /// Tracking control, clipped at [`DEFAULT_TRACKING_CLIP`].
    pub fn tracking(cv: CollectiveVariable, reference: ReferencePath, gain: GainSchedule, rho: f64) -> Result<Self> {
        gain.validate()?;
        if reference.dim() != cv.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: cv.latent_dim(),
                actual: reference.dim(),
            });
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidInput(format!("rho must be nonnegative, got {rho}")));
        }
        Ok(ControlLaw {
            cv,
            kind: ControlKind::Tracking {
                reference,
                gain,
                metric: None,
                rho,
                scale: 1.0,
            },
            sigma: 1.0,
            u_max: Some(DEFAULT_TRACKING_CLIP),
        })
    }

    pub fn optimal_guidance(cv: CollectiveVariable, table: Arc<LatentProbabilityTable>, kappa: f64, sigma: f64) -> Result<Self> {
        check_boost(kappa, sigma)?;
        check_scalar(&cv)?;
        Ok(ControlLaw {
            cv,
            kind: ControlKind::OptimalGuidance { table, kappa },
            sigma,
            u_max: None,
        })
    }

    pub fn committor_guidance(
        cv: CollectiveVariable,
        committor: Arc<LatentCommittor>,
        kappa: f64,
        sigma: f64,
        q_floor: f64,
    ) -> Result<Self> {
        check_boost(kappa, sigma)?;
        check_scalar(&cv)?;
        if !(q_floor > 0.0) {
            return Err(Error::InvalidInput("q_floor must be positive".into()));
        }
        Ok(ControlLaw {
            cv,
            kind: ControlKind::CommittorGuidance {
                committor,
                kappa,
                q_floor,
            },
            sigma,
            u_max: None,
        })
    }

    /// Replaces the SPD factor of a tracking gain.
    pub fn with_metric(mut self, m: DMatrix<f64>) -> Result<Self> {
        let dim = self.cv.latent_dim();
        if let ControlKind::Tracking { metric, .. } = &mut self.kind {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: m.nrows(),
                });
            }
            if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) || m.clone().cholesky().is_none() {
                return Err(Error::InvalidInput("gain metric must be symmetric positive definite".into()));
            }
            *metric = Some(m);
        }
        Ok(self)
    }

    pub fn with_clip(mut self, u_max: Option<f64>) -> Self {
        self.u_max = u_max;
        self
    }

    /// Multiplies a tracking gain by `factor`; other kinds are unchanged.
    pub fn with_gain_scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        if let ControlKind::Tracking { scale, .. } = &mut out.kind {
            *scale *= factor;
        }
        out
    }

    pub fn gain_scale(&self) -> f64 {
        match &self.kind {
            ControlKind::Tracking { scale, .. } => *scale,
            _ => 1.0,
        }
    }

    /// `u(t, x)` as a new vector.
    pub fn control_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; x.len()];
        self.evaluate(t, x, &mut u);
        u
    }

    fn tracking_multi(&self, t: f64, x: &[f64], u: &mut [f64]) -> bool {
        let ControlKind::Tracking {
            reference,
            gain,
            metric,
            rho,
            scale,
        } = &self.kind
        else {
            unreachable!()
        };
        let m = reference.dim();
        let (z, clamped) = self.cv.eval(x);
        let mut zbar = vec![0.0; m];
        reference.eval_clamped(t, &mut zbar);
        let err = DVector::from_iterator(m, zbar.iter().zip(&z).map(|(a, b)| a - b));
        let j = self.cv.jacobian(x);
        let mut g = metric.clone().unwrap_or_else(|| DMatrix::identity(m, m)) * (scale * gain.at(t));
        if *rho > 0.0 {
            let jjt = &j * j.transpose() + DMatrix::identity(m, m) * *rho;
            // G (JJᵀ + ρI)⁻¹ = ((JJᵀ + ρI)⁻¹ Gᵀ)ᵀ
            if let Some(ch) = jjt.cholesky() {
                g = ch.solve(&g.transpose()).transpose();
            }
        }
        let v = j.transpose() * (g * err);
        u.copy_from_slice(v.as_slice());
        clamped
    }
}

fn check_boost(kappa: f64, sigma: f64) -> Result<()> {
    if !(kappa >= 0.0 && kappa.is_finite() && sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("need kappa >= 0 and sigma > 0, got {kappa}, {sigma}")));
    }
    Ok(())
}

fn check_scalar(cv: &CollectiveVariable) -> Result<()> {
    if cv.latent_dim() != 1 {
        return Err(Error::InvalidInput("guidance from a latent table needs a scalar CV".into()));
    }
    Ok(())
}

impl Control for ControlLaw {
    fn evaluate(&self, t: f64, x: &[f64], u: &mut [f64]) -> bool {
        let clamped = match &self.kind {
            ControlKind::Tracking {
                reference,
                gain,
                metric,
                rho,
                scale,
            } if reference.dim() == 1 => {
                let (z, clamped) = self.cv.grad1(x, u);
                let mut zbar = [0.0];
                reference.eval_clamped(t, &mut zbar);
                let mut g = scale * gain.at(t) * metric.as_ref().map_or(1.0, |m| m[(0, 0)]);
                if *rho > 0.0 {
                    let jj: f64 = u.iter().map(|v| v * v).sum();
                    g /= jj + rho;
                }
                let f = g * (zbar[0] - z);
                u.iter_mut().for_each(|v| *v *= f);
                clamped
            }
            ControlKind::Tracking { .. } => self.tracking_multi(t, x, u),
            ControlKind::OptimalGuidance { table, kappa } => {
                let (z, clamped) = self.cv.grad1(x, u);
                let f = kappa * self.sigma * table.dlogp_at(t, z);
                u.iter_mut().for_each(|v| *v *= f);
                clamped
            }
            ControlKind::CommittorGuidance {
                committor,
                kappa,
                q_floor,
            } => {
                let (z, clamped) = self.cv.grad1(x, u);
                let (q, dq) = committor.eval(z);
                let f = kappa * self.sigma * dq / q.max(*q_floor);
                u.iter_mut().for_each(|v| *v *= f);
                clamped
            }
        };
        if let Some(cap) = self.u_max {
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cap {
                let s = cap / norm;
                u.iter_mut().for_each(|v| *v *= s);
            }
        }
        clamped
    }
}

//! Guided path ensembles with Girsanov weights.
//!
//! Paths are propagated in parallel; path `j` always draws its noise from
//! stream `j` of the master seed, so results do not depend on scheduling.
//! Ensemble-level randomness (resampling, start states) uses
//! [`CONTROL_STREAM`].

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::CollectiveVariable;
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::guidance::{ControlLaw, GainSchedule, ReferencePath};
use crate::model::{Control, PathRecord, Stepper, SystemSpec};
use crate::rng::{stream_rng, CONTROL_STREAM};

/// Time window and ensemble size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSettings {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Keep every `k`-th state of each path.
    pub store_stride: Option<usize>,
}

impl BridgeSettings {
    pub fn new(t0: f64, t1: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        BridgeSettings {
            t0,
            t1,
            dt,
            n_paths,
            seed,
            store_stride: None,
        }
    }

    pub fn storing(mut self, stride: usize) -> Self {
        self.store_stride = Some(stride);
        self
    }

    /// Number of fine steps; errors unless `dt` divides the window.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.t1 > self.t0 && self.dt.is_finite() && self.t1.is_finite()) {
            return Err(Error::InvalidInput("need dt > 0 and t1 > t0".into()));
        }
        let m = (self.t1 - self.t0) / self.dt;
        let r = m.round();
        if (m - r).abs() > 1e-6 * r.max(1.0) || r < 1.0 {
            return Err(Error::InvalidInput(format!(
                "dt = {} does not divide [{}, {}]",
                self.dt, self.t0, self.t1
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidInput("need at least one path".into()));
        }
        if self.store_stride == Some(0) {
            return Err(Error::InvalidInput("store stride must be positive".into()));
        }
        Ok(r as usize)
    }
}

/// Level-set events watched along each path.
#[derive(Debug, Clone)]
pub struct Monitor {
    pub cv: CollectiveVariable,
    /// Source set `{ξ ≤ source}`.
    pub source: Option<f64>,
    /// Target set `{ξ ≥ target}`.
    pub target: Option<f64>,
    pub stop_at_source: bool,
    pub stop_at_target: bool,
}

impl Monitor {
    /// Records first entry into `{ξ ≥ target}` without stopping.
    pub fn target_only(cv: CollectiveVariable, target: f64) -> Self {
        Monitor {
            cv,
            source: None,
            target: Some(target),
            stop_at_source: false,
            stop_at_target: false,
        }
    }

    /// Stops on hitting either set.
    pub fn absorbing(cv: CollectiveVariable, source: f64, target: f64) -> Self {
        Monitor {
            cv,
            source: Some(source),
            target: Some(target),
            stop_at_source: true,
            stop_at_target: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidedPath {
    pub index: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Time of the last state.
    pub t_end: f64,
    pub steps: usize,
    pub log_weight: f64,
    /// `½∫‖u‖² dt`.
    pub control_cost: f64,
    /// First time in the target set.
    pub target_time: Option<f64>,
    /// First time in the source set.
    pub source_time: Option<f64>,
    /// Last time in the source set before stopping.
    pub last_source_time: Option<f64>,
    pub diverged: bool,
    pub clamped: bool,
    pub trajectory: Option<PathRecord>,
}

impl GuidedPath {
    pub fn reached_target(&self) -> bool {
        self.target_time.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedPathEnsemble {
    pub paths: Vec<GuidedPath>,
    /// Normalised weights; zero for diverged paths.
    pub weights: Vec<f64>,
    pub ess: f64,
    /// `log` of the mean unnormalised weight, including factors absorbed by
    /// resampling.
    pub log_mean_weight: f64,
    /// Fine steps over all paths.
    pub total_steps: u64,
}

impl WeightedPathEnsemble {
    fn assemble(paths: Vec<GuidedPath>, log_norm: f64) -> Result<Self> {
        let logw: Vec<f64> = paths
            .iter()
            .map(|p| if p.diverged { f64::NEG_INFINITY } else { p.log_weight })
            .collect();
        let (weights, log_sum) = normalize_log_weights(&logw)?;
        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let relative: Vec<f64> = logw.iter().map(|v| (v - m).exp()).collect();
        let ess = ess(&relative)?;
        let total_steps = paths.iter().map(|p| p.steps as u64).sum();
        let n = paths.len() as f64;
        Ok(WeightedPathEnsemble {
            paths,
            weights,
            ess,
            log_mean_weight: log_norm + log_sum - n.ln(),
            total_steps,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn diverged(&self) -> usize {
        self.paths.iter().filter(|p| p.diverged).count()
    }

    /// Writes `path_id,t,x_1..x_d,logw` for every stored state.
    pub fn write_paths_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        let d = self.paths.first().map_or(0, |p| p.end.len());
        let cols: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
        writeln!(w, "path_id,t,{},logw", cols.join(",")).map_err(io)?;
        for p in &self.paths {
            let Some(tr) = &p.trajectory else { continue };
            for n in 0..tr.len() {
                let xs: Vec<String> = tr.state(n).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{},{},{}", p.index, tr.time(n), xs.join(","), p.log_weight).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Writes one row per path with its endpoint, weight and events.
    pub fn write_endpoints_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        let d = self.paths.first().map_or(0, |p| p.end.len());
        let cols: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
        writeln!(w, "path_id,t_end,{},logw,weight,target_time,source_time,diverged", cols.join(",")).map_err(io)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |t| t.to_string());
        for (p, wt) in self.paths.iter().zip(&self.weights) {
            let xs: Vec<String> = p.end.iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{:e},{},{},{}",
                p.index,
                p.t_end,
                xs.join(","),
                p.log_weight,
                wt,
                opt(p.target_time),
                opt(p.source_time),
                p.diverged
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Normalised weights from log-weights by log-sum-exp; also returns
/// `log Σ exp(logw)`.
pub fn normalize_log_weights(logw: &[f64]) -> Result<(Vec<f64>, f64)> {
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegenerateEnsemble(if logw.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            "non-finite log-weights".into()
        } else {
            "every path has zero weight".into()
        }));
    }
    let mut w: Vec<f64> = logw.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Ok((w, m + s.ln()))
}

/// `1/Σ w̃²` for nonnegative (not necessarily normalised) weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::DegenerateEnsemble("weights must be finite and nonnegative".into()));
    }
    let top = weights.iter().cloned().fold(0.0, f64::max);
    if !(top > 0.0) {
        return Err(Error::DegenerateEnsemble("all weights are zero".into()));
    }
    // (Σw)²/Σw², which is exactly N for equal weights.
    let s: f64 = weights.iter().map(|w| w / top).sum();
    let s2: f64 = weights.iter().map(|w| (w / top).powi(2)).sum();
    Ok(s * s / s2)
}

/// Draws one path index with probability equal to its normalised weight and
/// returns it with the path's endpoint.
pub fn resample_endpoint(ensemble: &WeightedPathEnsemble, seed: u64) -> Result<(usize, Vec<f64>)> {
    let mut rng = stream_rng(seed, CONTROL_STREAM);
    let j = categorical(&ensemble.weights, &mut rng)?;
    Ok((j, ensemble.paths[j].end.clone()))
}

fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateEnsemble("cannot draw from zero weights".into()));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (j, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = j;
            if u < acc {
                return Ok(j);
            }
        }
    }
    Ok(last)
}

/// Systematic resampling: ancestor indices for `n` offspring given
/// normalised `weights` and a uniform offset `u ∈ [0, 1)`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for k in 0..n {
        let point = (k as f64 + u) / n as f64;
        while point >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

#[derive(Clone)]
struct Particle {
    index: usize,
    start: Vec<f64>,
    x: Vec<f64>,
    t: f64,
    steps: usize,
    log_weight: f64,
    control_cost: f64,
    target_time: Option<f64>,
    source_time: Option<f64>,
    last_source_time: Option<f64>,
    stopped: bool,
    diverged: bool,
    clamped: bool,
    stored: Option<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Particle {
    fn new(index: usize, x0: &[f64], t0: f64, seed: u64, store: bool, monitor: Option<&Monitor>) -> Self {
        let mut p = Particle {
            index,
            start: x0.to_vec(),
            x: x0.to_vec(),
            t: t0,
            steps: 0,
            log_weight: 0.0,
            control_cost: 0.0,
            target_time: None,
            source_time: None,
            last_source_time: None,
            stopped: false,
            diverged: false,
            clamped: false,
            stored: store.then(|| x0.to_vec()),
            rng: stream_rng(seed, index as u64),
        };
        if let Some(m) = monitor {
            p.observe(m);
        }
        p
    }

    fn observe(&mut self, m: &Monitor) {
        let (z, _) = m.cv.eval1(&self.x);
        if let Some(lo) = m.source {
            if z <= lo {
                self.last_source_time = Some(self.t);
                self.source_time.get_or_insert(self.t);
                if m.stop_at_source {
                    self.stopped = true;
                }
            }
        }
        if let Some(hi) = m.target {
            if z >= hi {
                self.target_time.get_or_insert(self.t);
                if m.stop_at_target {
                    self.stopped = true;
                }
            }
        }
    }

    /// Advances up to `n` fine steps.
    fn advance(
        &mut self,
        spec: &SystemSpec,
        control: Option<&dyn Control>,
        dt: f64,
        n: usize,
        monitor: Option<&Monitor>,
        stride: Option<usize>,
    ) {
        if self.stopped || self.diverged || n == 0 {
            return;
        }
        let mut stepper = Stepper::new(spec, control, &self.x, self.t, dt);
        stepper.log_weight = self.log_weight;
        stepper.control_cost = self.control_cost;
        for _ in 0..n {
            if stepper.step(&mut self.rng).is_err() {
                self.diverged = true;
                self.stopped = true;
                break;
            }
            self.steps += 1;
            self.x.copy_from_slice(&stepper.x);
            self.t = stepper.t;
            if let (Some(buf), Some(k)) = (self.stored.as_mut(), stride) {
                if self.steps.is_multiple_of(k) {
                    buf.extend_from_slice(&self.x);
                }
            }
            if let Some(m) = monitor {
                self.observe(m);
                if self.stopped {
                    break;
                }
            }
        }
        self.x.copy_from_slice(&stepper.x);
        self.t = stepper.t;
        self.log_weight = stepper.log_weight;
        self.control_cost = stepper.control_cost;
        self.clamped |= stepper.clamped;
    }

    fn finish(self, t0: f64, dt: f64, stride: Option<usize>, seed: u64) -> GuidedPath {
        let d = self.x.len();
        let trajectory = self.stored.map(|states| PathRecord {
            t0,
            dt: dt * stride.unwrap_or(1) as f64,
            dim: d,
            states,
            seed,
            noise: None,
            controls: None,
            log_weight: Some(self.log_weight),
            clamped: self.clamped,
        });
        GuidedPath {
            index: self.index,
            start: self.start,
            end: self.x,
            t_end: self.t,
            steps: self.steps,
            log_weight: self.log_weight,
            control_cost: self.control_cost,
            target_time: self.target_time,
            source_time: self.source_time,
            last_source_time: self.last_source_time,
            diverged: self.diverged,
            clamped: self.clamped,
            trajectory,
        }
    }
}

fn make_particles(spec: &SystemSpec, starts: &[Vec<f64>], s: &BridgeSettings, monitor: Option<&Monitor>) -> Result<Vec<Particle>> {
    if starts.len() != 1 && starts.len() != s.n_paths {
        return Err(Error::InvalidInput(format!(
            "need 1 or {} start states, got {}",
            s.n_paths,
            starts.len()
        )));
    }
    for x in starts {
        spec.check_dim(x)?;
    }
    Ok((0..s.n_paths)
        .map(|j| {
            let x0 = if starts.len() == 1 { &starts[0] } else { &starts[j] };
            Particle::new(j, x0, s.t0, s.seed, s.store_stride.is_some(), monitor)
        })
        .collect())
}

/// Guided (or, with `control = None`, plain) ensemble on `[t0, t1]`.
///
/// Every path starts from `starts[0]`, or from `starts[j]` when one start is
/// given per path. Diverged paths get zero weight; the call fails only when
/// all of them diverge.
pub fn run_guided_bridge(
    spec: &SystemSpec,
    control: Option<&dyn Control>,
    starts: &[Vec<f64>],
    settings: &BridgeSettings,
    monitor: Option<&Monitor>,
) -> Result<WeightedPathEnsemble> {
    let steps = settings.steps()?;
    let mut particles = make_particles(spec, starts, settings, monitor)?;
    particles
        .par_iter_mut()
        .for_each(|p| p.advance(spec, control, settings.dt, steps, monitor, settings.store_stride));
    finish(particles, settings, 0.0)
}

fn finish(particles: Vec<Particle>, s: &BridgeSettings, log_norm: f64) -> Result<WeightedPathEnsemble> {
    let paths: Vec<GuidedPath> = particles
        .into_iter()
        .map(|p| p.finish(s.t0, s.dt, s.store_stride, s.seed))
        .collect();
    if paths.iter().all(|p| p.diverged) {
        return Err(Error::DegenerateEnsemble(format!("all {} paths diverged", paths.len())));
    }
    WeightedPathEnsemble::assemble(paths, log_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmcOptions {
    /// Resample when ESS falls below `ess_threshold · N`.
    pub ess_threshold: f64,
    /// Fine steps per block.
    pub block: usize,
    /// Shrink the gain by 0.8 whenever the block ESS drops below `0.3 N`,
    /// never below `0.1` of its initial value.
    pub adaptive_gain: bool,
}

pub const ADAPTIVE_GAIN_FACTOR: f64 = 0.8;
pub const ADAPTIVE_GAIN_TRIGGER: f64 = 0.3;
pub const ADAPTIVE_GAIN_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleEvent {
    pub step: usize,
    pub time: f64,
    pub ess_before: f64,
    /// Ancestor of each slot after resampling.
    pub ancestors: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SmcLog {
    pub events: Vec<ResampleEvent>,
    /// Gain factor in force during each block.
    pub gain_scales: Vec<f64>,
    /// ESS of the incremental weights of each block.
    pub block_ess: Vec<f64>,
}

impl SmcLog {
    /// Original path index at the start of the run for every final slot.
    pub fn roots(&self, n: usize) -> Vec<usize> {
        let mut root: Vec<usize> = (0..n).collect();
        for e in &self.events {
            root = e.ancestors.iter().map(|&a| root[a]).collect();
        }
        root
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Sequential Monte Carlo variant of [`run_guided_bridge`].
///
/// Paths advance in blocks. After each block the ensemble is resampled
/// systematically if its ESS is below the threshold; weights are then reset to
/// uniform and the discarded mass is kept in `log_mean_weight`. Each slot keeps
/// its own noise stream, so a threshold that never triggers reproduces
/// [`run_guided_bridge`] exactly.
pub fn run_smc_bridge(
    spec: &SystemSpec,
    control: &ControlLaw,
    starts: &[Vec<f64>],
    settings: &BridgeSettings,
    monitor: Option<&Monitor>,
    opts: SmcOptions,
) -> Result<(WeightedPathEnsemble, SmcLog)> {
    if !(opts.ess_threshold >= 0.0 && opts.ess_threshold < 1.0) || opts.block == 0 {
        return Err(Error::InvalidInput("need 0 <= ess_threshold < 1 and block >= 1".into()));
    }
    let steps = settings.steps()?;
    let n = settings.n_paths;
    let mut particles = make_particles(spec, starts, settings, monitor)?;
    let mut rng = stream_rng(settings.seed, CONTROL_STREAM);
    let mut log = SmcLog::default();
    let mut log_norm = 0.0;
    let mut scale = 1.0;
    let mut done = 0;
    while done < steps {
        let len = opts.block.min(steps - done);
        let law = control.with_gain_scale(scale);
        let before: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
        particles
            .par_iter_mut()
            .for_each(|p| p.advance(spec, Some(&law), settings.dt, len, monitor, settings.store_stride));
        done += len;
        log.gain_scales.push(scale);
        let inc: Vec<f64> = particles
            .iter()
            .zip(&before)
            .map(|(p, b)| if p.diverged { f64::NEG_INFINITY } else { p.log_weight - b })
            .collect();
        let block_ess = match normalize_log_weights(&inc) {
            Ok((w, _)) => ess(&w)?,
            Err(_) => 0.0,
        };
        log.block_ess.push(block_ess);
        if opts.adaptive_gain && block_ess < ADAPTIVE_GAIN_TRIGGER * n as f64 {
            scale = (scale * ADAPTIVE_GAIN_FACTOR).max(ADAPTIVE_GAIN_FLOOR);
        }
        let logw: Vec<f64> = particles
            .iter()
            .map(|p| if p.diverged { f64::NEG_INFINITY } else { p.log_weight })
            .collect();
        let (w, log_sum) = normalize_log_weights(&logw)?;
        let current = ess(&w)?;
        if done < steps && current < opts.ess_threshold * n as f64 {
            let ancestors = systematic_resample(&w, rng.random::<f64>());
            let old = particles.clone();
            for (slot, &a) in ancestors.iter().enumerate() {
                let rng_keep = particles[slot].rng.clone();
                particles[slot] = old[a].clone();
                particles[slot].index = slot;
                particles[slot].rng = rng_keep;
                particles[slot].log_weight = 0.0;
            }
            log_norm += log_sum - (n as f64).ln();
            log.events.push(ResampleEvent {
                step: done,
                time: settings.t0 + done as f64 * settings.dt,
                ess_before: current,
                ancestors,
            });
        }
    }
    let ens = finish(particles, settings, log_norm)?;
    Ok((ens, log))
}

/// Start states on the level-set band `|χ - z| < tol` of a tabulated CV,
/// drawn from cell centres with probability proportional to `mu`.
pub fn level_set_starts(grid: &Grid2, chi: &[f64], mu: &[f64], z: f64, tol: f64, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if chi.len() != grid.len() || mu.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            actual: chi.len().min(mu.len()),
        });
    }
    let w: Vec<f64> = chi
        .iter()
        .zip(mu)
        .map(|(c, m)| if (c - z).abs() < tol { *m } else { 0.0 })
        .collect();
    if !(w.iter().sum::<f64>() > 0.0) {
        return Err(Error::Degenerate(format!("no grid cell with |chi - {z}| < {tol}")));
    }
    let mut rng = stream_rng(seed, CONTROL_STREAM - 1);
    (0..n)
        .map(|_| {
            let i = categorical(&w, &mut rng)?;
            let (x, y) = grid.center(i);
            Ok(vec![x, y])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactiveSettings {
    pub z_min: f64,
    pub z_max: f64,
    pub dt: f64,
    /// Paths that have not reached `z_max` by then are rejected.
    pub max_time: f64,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReactiveEnsemble {
    pub ensemble: WeightedPathEnsemble,
    /// Indices of accepted paths.
    pub accepted: Vec<usize>,
    /// Reactive durations of accepted paths: first entry into `{χ ≥ z_max}`
    /// minus the last time in `{χ ≤ z_min}` (or the start time).
    pub durations: Vec<f64>,
    pub mean_duration: f64,
    pub std_duration: f64,
}

/// Reactive trajectories guided along a latent reference by tracking control.
///
/// A path is accepted when it reaches `{χ ≥ z_max}` before `max_time`; its
/// reactive piece starts after its last visit to `{χ ≤ z_min}`, so it never
/// returns there. Past the last knot the reference holds its final value.
pub fn sample_reactive_ensemble(
    spec: &SystemSpec,
    cv: &CollectiveVariable,
    reference: &ReferencePath,
    gain: &GainSchedule,
    starts: &[Vec<f64>],
    settings: &ReactiveSettings,
) -> Result<ReactiveEnsemble> {
    if !(settings.z_min < settings.z_max) {
        return Err(Error::InvalidInput("need z_min < z_max".into()));
    }
    let t0 = reference.t_start();
    let law = ControlLaw::tracking(cv.clone(), reference.clone(), gain.clone(), 0.0)?;
    let monitor = Monitor {
        cv: cv.clone(),
        source: Some(settings.z_min),
        target: Some(settings.z_max),
        stop_at_source: false,
        stop_at_target: true,
    };
    let steps = (settings.max_time / settings.dt).round().max(1.0) as usize;
    let bs = BridgeSettings {
        t0,
        t1: t0 + steps as f64 * settings.dt,
        dt: settings.dt,
        n_paths: settings.n_paths,
        seed: settings.seed,
        store_stride: Some(1),
    };
    let ensemble = run_guided_bridge(spec, Some(&law), starts, &bs, Some(&monitor))?;
    let mut accepted = Vec::new();
    let mut durations = Vec::new();
    for p in &ensemble.paths {
        if let (Some(hit), false) = (p.target_time, p.diverged) {
            accepted.push(p.index);
            durations.push(hit - p.last_source_time.unwrap_or(t0));
        }
    }
    if accepted.is_empty() {
        return Err(Error::EmptyEnsemble {
            accepted: 0,
            attempted: settings.n_paths,
        });
    }
    let (mean_duration, std_duration) = mean_std(&durations);
    Ok(ReactiveEnsemble {
        ensemble,
        accepted,
        durations,
        mean_duration,
        std_duration,
    })
}

impl ReactiveEnsemble {
    /// Normalised occupancy of the reactive pieces on `grid` (first two
    /// coordinates), one count per stored state.
    pub fn histogram(&self, grid: &Grid2) -> Vec<f64> {
        let mut h = vec![0.0; grid.len()];
        for &j in &self.accepted {
            let p = &self.ensemble.paths[j];
            let Some(tr) = &p.trajectory else { continue };
            let from = p.last_source_time.unwrap_or(tr.t0);
            for n in 0..tr.len() {
                let t = tr.time(n);
                if t > from + 1e-12 {
                    let x = tr.state(n);
                    h[grid.cell_of(x[0], x[1])] += 1.0;
                }
            }
        }
        let s: f64 = h.iter().sum();
        if s > 0.0 {
            h.iter_mut().for_each(|v| *v /= s);
        }
        h
    }
}

/// Total-variation distance between two densities on the same cells.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    0.5 * a.iter().zip(b).map(|(x, y)| (x / sa - y / sb).abs()).sum::<f64>()
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Writes a grid field as `x,y,value` rows.
pub fn write_grid_csv(grid: &Grid2, values: &[f64], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "x,y,value").map_err(io)?;
    for (i, v) in values.iter().enumerate() {
        let (x, y) = grid.center(i);
        writeln!(w, "{x},{y},{v:e}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct ConstantControl(Vec<f64>);

    impl Control for ConstantControl {
        fn evaluate(&self, _t: f64, _x: &[f64], u: &mut [f64]) -> bool {
            u.copy_from_slice(&self.0);
            false
        }
    }

    fn ou() -> SystemSpec {
        SystemSpec::harmonic(vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn ess_hand_values() {
        assert!((ess(&[1.0; 100]).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(ess(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert!((ess(&[0.5, 0.25, 0.25]).unwrap() - 1.0 / 0.375).abs() < 1e-12);
        assert!(ess(&[0.0, 0.0]).is_err());
        assert!(normalize_log_weights(&[f64::NEG_INFINITY; 3]).is_err());
    }

    proptest! {
        #[test]
        fn normalised_weights_sum_to_one(logw in proptest::collection::vec(-800.0f64..800.0, 1..50)) {
            let (w, _) = normalize_log_weights(&logw).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let e = ess(&w).unwrap();
            prop_assert!(e > 0.0 && e <= logw.len() as f64 + 1e-9);
        }

        #[test]
        fn systematic_resampling_counts(raw in proptest::collection::vec(0.0f64..1.0, 2..40), u in 0.0f64..1.0) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 0.0);
            let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let idx = systematic_resample(&w, u);
            let n = w.len() as f64;
            for (j, wj) in w.iter().enumerate() {
                let c = idx.iter().filter(|&&k| k == j).count() as f64;
                prop_assert!((c - n * wj).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn zero_control_gives_unit_weights() {
        let spec = SystemSpec::standard_double_well();
        let law = ConstantControl(vec![0.0, 0.0]);
        let s = BridgeSettings::new(0.0, 1.0, 1e-2, 50, 3);
        let e = run_guided_bridge(&spec, Some(&law), &[vec![-1.0, -1.0]], &s, None).unwrap();
        assert!(e.paths.iter().all(|p| p.log_weight == 0.0));
        assert_eq!(e.ess, 50.0);
        let plain = run_guided_bridge(&spec, None, &[vec![-1.0, -1.0]], &s, None).unwrap();
        for (a, b) in e.paths.iter().zip(&plain.paths) {
            assert_eq!(a.end, b.end);
        }
    }

    #[test]
    fn ensembles_are_bitwise_reproducible() {
        let spec = SystemSpec::standard_double_well();
        let law = ConstantControl(vec![0.3, -0.1]);
        let s = BridgeSettings::new(0.0, 0.5, 1e-2, 20, 9).storing(5);
        let a = run_guided_bridge(&spec, Some(&law), &[vec![0.0, 0.0]], &s, None).unwrap();
        let b = run_guided_bridge(&spec, Some(&law), &[vec![0.0, 0.0]], &s, None).unwrap();
        for (p, q) in a.paths.iter().zip(&b.paths) {
            assert_eq!(p.end, q.end);
            assert_eq!(p.log_weight.to_bits(), q.log_weight.to_bits());
            assert_eq!(p.trajectory, q.trajectory);
        }
        assert_eq!(a.paths[0].trajectory.as_ref().unwrap().len(), 11);
    }

    #[test]
    fn settings_validation() {
        assert!(BridgeSettings::new(0.0, 1.0, 0.3, 5, 0).steps().is_err());
        assert_eq!(BridgeSettings::new(0.0, 1.0, 0.25, 5, 0).steps().unwrap(), 4);
        assert!(BridgeSettings::new(0.0, 1.0, 0.25, 0, 0).steps().is_err());
        let spec = ou();
        let s = BridgeSettings::new(0.0, 1.0, 0.25, 3, 0);
        assert!(run_guided_bridge(&spec, None, &[vec![0.0], vec![1.0]], &s, None).is_err());
    }

    #[test]
    fn girsanov_recovers_uncontrolled_mean() {
        // dX = -X dt + dW from X0 = 1; E[X_1] = e^{-1}.
        let spec = ou();
        let s = BridgeSettings::new(0.0, 1.0, 1e-2, 20_000, 11);
        let law = ConstantControl(vec![0.5]);
        let e = run_guided_bridge(&spec, Some(&law), &[vec![1.0]], &s, None).unwrap();
        let m: f64 = e.paths.iter().zip(&e.weights).map(|(p, w)| w * p.end[0]).sum();
        let var: f64 = e.paths.iter().zip(&e.weights).map(|(p, w)| w * w * (p.end[0] - m).powi(2)).sum();
        // Euler–Maruyama mean: (1 - δt)^100.
        let exact = 0.99f64.powi(100);
        assert!((m - exact).abs() < 4.0 * var.sqrt(), "{m} vs {exact} ± {}", var.sqrt());
        assert!(e.ess < 20_000.0 && e.ess > 10_000.0);
    }

    #[test]
    fn resample_endpoint_frequencies() {
        let spec = ou();
        let s = BridgeSettings::new(0.0, 0.1, 0.1, 1, 0);
        let single = run_guided_bridge(&spec, None, &[vec![0.5]], &s, None).unwrap();
        for seed in 0..5 {
            assert_eq!(resample_endpoint(&single, seed).unwrap().0, 0);
        }
        let mut e = run_guided_bridge(&spec, None, &[vec![0.5]], &BridgeSettings::new(0.0, 0.1, 0.1, 3, 0), None).unwrap();
        e.weights = vec![1.0, 0.0, 0.0];
        assert!((0..20).all(|seed| resample_endpoint(&e, seed).unwrap().0 == 0));
        let w = [0.5, 0.3, 0.2];
        let mut rng = stream_rng(1, 0);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[categorical(&w, &mut rng).unwrap()] += 1;
        }
        for k in 0..3 {
            let sd = (n as f64 * w[k] * (1.0 - w[k])).sqrt();
            assert!((counts[k] as f64 - n as f64 * w[k]).abs() < 3.0 * sd);
        }
    }

    fn ou_tracking(gain: f64, target: f64) -> ControlLaw {
        let r = ReferencePath::scalar(vec![0.0, 1.0], vec![target, target]).unwrap();
        ControlLaw::tracking(CollectiveVariable::coordinate(0, 1), r, GainSchedule::Constant { value: gain }, 0.0)
            .unwrap()
            .with_clip(None)
    }

    #[test]
    fn smc_without_resampling_matches_plain_run() {
        let spec = ou();
        let law = ou_tracking(2.0, 1.5);
        let s = BridgeSettings::new(0.0, 1.0, 1e-2, 64, 5);
        let plain = run_guided_bridge(&spec, Some(&law), &[vec![0.0]], &s, None).unwrap();
        let opts = SmcOptions {
            ess_threshold: 0.0,
            block: 7,
            adaptive_gain: false,
        };
        let (smc, log) = run_smc_bridge(&spec, &law, &[vec![0.0]], &s, None, opts).unwrap();
        assert!(log.events.is_empty());
        for (a, b) in plain.paths.iter().zip(&smc.paths) {
            assert_eq!(a.end, b.end);
            assert_eq!(a.log_weight.to_bits(), b.log_weight.to_bits());
        }
    }

    #[test]
    fn log_weight_is_independent_of_block_size() {
        let spec = ou();
        let law = ou_tracking(3.0, 1.0);
        let s = BridgeSettings::new(0.0, 1.0, 1e-2, 8, 2);
        let run = |block| {
            let opts = SmcOptions {
                ess_threshold: 0.0,
                block,
                adaptive_gain: false,
            };
            run_smc_bridge(&spec, &law, &[vec![0.0]], &s, None, opts).unwrap().0
        };
        let (a, b) = (run(1), run(100));
        for (p, q) in a.paths.iter().zip(&b.paths) {
            assert!((p.log_weight - q.log_weight).abs() < 1e-12);
        }
    }

    #[test]
    fn smc_with_strong_control_recovers_uncontrolled_mean() {
        let spec = ou();
        let law = ou_tracking(4.0, 1.5);
        let s = BridgeSettings::new(0.0, 1.0, 1e-2, 20_000, 21);
        let opts = SmcOptions {
            ess_threshold: 0.5,
            block: 10,
            adaptive_gain: false,
        };
        let (e, log) = run_smc_bridge(&spec, &law, &[vec![0.0]], &s, None, opts).unwrap();
        assert!(!log.events.is_empty());
        let m: f64 = e.paths.iter().zip(&e.weights).map(|(p, w)| w * p.end[0]).sum();
        let m2: f64 = e.paths.iter().zip(&e.weights).map(|(p, w)| w * p.end[0] * p.end[0]).sum();
        // From X0 = 0 the uncontrolled mean is 0 and the variance (1 - e^{-2})/2.
        let se = (m2 / e.ess).sqrt();
        assert!(m.abs() < 4.0 * se, "{m} ± {se}");
        assert!((m2 - 0.5 * (1.0 - (-2.0f64).exp())).abs() < 0.05);
        let roots = log.roots(20_000);
        assert!(roots.iter().all(|&r| r < 20_000));
    }

    #[test]
    fn degenerate_control_triggers_resampling_and_adaptation() {
        let spec = ou();
        let law = ou_tracking(50.0, 3.0);
        let s = BridgeSettings::new(0.0, 0.5, 1e-2, 100, 1);
        let opts = SmcOptions {
            ess_threshold: 0.5,
            block: 5,
            adaptive_gain: true,
        };
        let (_, log) = run_smc_bridge(&spec, &law, &[vec![0.0]], &s, None, opts).unwrap();
        assert!(!log.events.is_empty());
        assert!(log.gain_scales.last().unwrap() < &1.0);
        assert!(log.gain_scales.iter().all(|g| *g >= ADAPTIVE_GAIN_FLOOR));
    }

    #[test]
    fn monitor_stops_and_records_events() {
        let spec = ou();
        let cv = CollectiveVariable::coordinate(0, 1);
        let s = BridgeSettings::new(0.0, 5.0, 1e-2, 50, 4);
        let m = Monitor::absorbing(cv.clone(), -0.5, 0.5);
        let e = run_guided_bridge(&spec, None, &[vec![0.0]], &s, Some(&m)).unwrap();
        for p in &e.paths {
            let hit = p.target_time.or(p.source_time);
            if let Some(t) = hit {
                assert_eq!(p.t_end, t);
                let z = p.end[0];
                assert!(z >= 0.5 || z <= -0.5);
            }
        }
        let inside = run_guided_bridge(&spec, None, &[vec![0.7]], &s, Some(&m)).unwrap();
        assert!(inside.paths.iter().all(|p| p.steps == 0 && p.target_time == Some(0.0)));
    }

    #[test]
    fn all_diverged_is_an_error() {
        let spec = ou();
        let law = ConstantControl(vec![1e9]);
        let s = BridgeSettings::new(0.0, 1.0, 0.1, 4, 0);
        assert!(matches!(
            run_guided_bridge(&spec, Some(&law), &[vec![0.0]], &s, None),
            Err(Error::DegenerateEnsemble(_))
        ));
    }

    #[test]
    fn level_set_starts_sample_the_band() {
        let g = Grid2::square(0.0, 1.0, 10).unwrap();
        let chi: Vec<f64> = (0..g.len()).map(|i| g.center(i).0).collect();
        let mu = vec![1.0; g.len()];
        let s = level_set_starts(&g, &chi, &mu, 0.45, 0.02, 30, 1).unwrap();
        assert!(s.iter().all(|x| (x[0] - 0.45).abs() < 0.02));
        assert!(level_set_starts(&g, &chi, &mu, 2.0, 0.02, 3, 1).is_err());
    }

    #[test]
    fn total_variation_bounds() {
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 2.0]), 1.0);
        assert_eq!(total_variation(&[1.0, 3.0], &[2.0, 6.0]), 0.0);
    }
}

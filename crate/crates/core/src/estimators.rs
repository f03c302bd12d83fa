//! Estimators built on path ensembles: weighted observables, transition
//! probabilities, committors and reactive-segment statistics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bridge::{mean_std, run_guided_bridge, BridgeSettings, GuidedPath, Monitor, WeightedPathEnsemble};
use crate::cv::CollectiveVariable;
use crate::effective::{LatentCommittor, LatentProbabilityTable};
use crate::error::{Error, Result};
use crate::guidance::{ControlLaw, DEFAULT_Q_FLOOR};
use crate::model::{PathRecord, Stepper, SystemSpec};
use crate::rng::stream_rng;

/// Default regularisation of `p̂_B`.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    Normal,
    Wilson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub kind: String,
    pub estimate: f64,
    pub std_error: f64,
    /// 95% interval.
    pub ci: [f64; 2],
    pub interval: IntervalKind,
    /// Samples entering the estimate.
    pub n: usize,
    /// Fine steps simulated for the estimate.
    pub cost_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ess: Option<f64>,
}

fn z_quantile(level: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + 0.5 * level)
}

impl EstimateReport {
    pub fn normal(kind: &str, estimate: f64, std_error: f64, n: usize, cost_steps: u64) -> Self {
        let mut r = EstimateReport {
            kind: kind.into(),
            estimate,
            std_error,
            ci: [estimate, estimate],
            interval: IntervalKind::Normal,
            n,
            cost_steps,
            ess: None,
        };
        r.ci = r.interval_at(0.95);
        r
    }

    /// Binomial proportion `successes / n` with a Wilson interval.
    pub fn proportion(kind: &str, successes: usize, n: usize, cost_steps: u64) -> Self {
        let p = if n == 0 { f64::NAN } else { successes as f64 / n as f64 };
        let mut r = EstimateReport {
            kind: kind.into(),
            estimate: p,
            std_error: (p * (1.0 - p) / n as f64).sqrt(),
            ci: [p, p],
            interval: IntervalKind::Wilson,
            n,
            cost_steps,
            ess: None,
        };
        r.ci = r.interval_at(0.95);
        r
    }

    /// Confidence interval at `level`.
    pub fn interval_at(&self, level: f64) -> [f64; 2] {
        let z = z_quantile(level);
        match self.interval {
            IntervalKind::Normal => [self.estimate - z * self.std_error, self.estimate + z * self.std_error],
            IntervalKind::Wilson => {
                let n = self.n as f64;
                let p = self.estimate;
                let denom = 1.0 + z * z / n;
                let centre = (p + z * z / (2.0 * n)) / denom;
                let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
                [(centre - half).max(0.0), (centre + half).min(1.0)]
            }
        }
    }

    /// Whether the 95% interval intersects `[centre - half, centre + half]`.
    pub fn overlaps(&self, centre: f64, half: f64) -> bool {
        self.ci[0] <= centre + half && self.ci[1] >= centre - half
    }
}

/// Self-normalised estimate `Σ w̃_j f(path_j)` with the delta-method
/// standard error `sqrt(Σ w̃_j² (f_j - f̂)²)`.
pub fn weighted_expectation<F>(ensemble: &WeightedPathEnsemble, f: F) -> Result<EstimateReport>
where
    F: Fn(&GuidedPath) -> f64,
{
    if !ensemble.weights.iter().any(|w| *w > 0.0) {
        return Err(Error::DegenerateEnsemble("no path carries weight".into()));
    }
    let values: Vec<f64> = ensemble.paths.iter().map(&f).collect();
    let est: f64 = ensemble.weights.iter().zip(&values).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum();
    let var: f64 = ensemble
        .weights
        .iter()
        .zip(&values)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, v)| w * w * (v - est).powi(2))
        .sum();
    let mut r = EstimateReport::normal("weighted-mean", est, var.sqrt(), ensemble.len(), ensemble.total_steps);
    r.ess = Some(ensemble.ess);
    Ok(r)
}

/// Common inputs of the transition-probability estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionQuery {
    pub x0: Vec<f64>,
    /// `B = {ξ > z_star}`.
    pub z_star: f64,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    /// Fraction of paths with `ξ(X_T) > z_*`.
    pub endpoint: EstimateReport,
    /// Fraction of paths that entered `B` at some `t ≤ T`.
    pub hit_by_t: EstimateReport,
}

fn in_b(cv: &CollectiveVariable, x: &[f64], z_star: f64) -> bool {
    cv.eval1(x).0 > z_star
}

/// Plain Monte Carlo estimate of `P(ξ(X_T) > z_*)`.
pub fn estimate_pb_mc(spec: &SystemSpec, cv: &CollectiveVariable, q: &TransitionQuery) -> Result<TransitionReport> {
    let s = BridgeSettings::new(0.0, q.horizon, q.dt, q.n_paths, q.seed);
    let monitor = Monitor::target_only(cv.clone(), q.z_star);
    let ens = run_guided_bridge(spec, None, std::slice::from_ref(&q.x0), &s, Some(&monitor))?;
    let live: Vec<&GuidedPath> = ens.paths.iter().filter(|p| !p.diverged).collect();
    let hits = live.iter().filter(|p| in_b(cv, &p.end, q.z_star)).count();
    let ever = live.iter().filter(|p| p.target_time.is_some_and(|t| t > 0.0) || in_b(cv, &p.start, q.z_star)).count();
    Ok(TransitionReport {
        endpoint: EstimateReport::proportion("mc-endpoint", hits, live.len(), ens.total_steps),
        hit_by_t: EstimateReport::proportion("mc-hit-by-t", ever, live.len(), ens.total_steps),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedTransitionReport {
    /// `max(exp(-mean ½∫‖u‖²), ε)` over the paths ending in `B`.
    pub soc: EstimateReport,
    /// `mean[w · 1_B(X_T)]` with Girsanov weights `w`.
    pub importance: EstimateReport,
    /// Fraction of guided paths ending in `B`.
    pub b_fraction: f64,
    pub ess: f64,
    pub epsilon: f64,
    pub kappa: f64,
}

/// Transition probability from optimally guided paths; reports both the
/// exponential (SOC) form and the importance-sampling form.
pub fn estimate_pb_guided(
    spec: &SystemSpec,
    cv: &CollectiveVariable,
    table: Arc<LatentProbabilityTable>,
    kappa: f64,
    q: &TransitionQuery,
    epsilon: f64,
) -> Result<GuidedTransitionReport> {
    if (table.z_star - q.z_star).abs() > 1e-12 || (table.horizon - q.horizon).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "table is for z* = {}, T = {}; query has z* = {}, T = {}",
            table.z_star, table.horizon, q.z_star, q.horizon
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidInput("epsilon must be nonnegative".into()));
    }
    let law = ControlLaw::optimal_guidance(cv.clone(), table, kappa, spec.sigma)?;
    let s = BridgeSettings::new(0.0, q.horizon, q.dt, q.n_paths, q.seed);
    let ens = run_guided_bridge(spec, Some(&law), std::slice::from_ref(&q.x0), &s, None)?;
    let live: Vec<&GuidedPath> = ens.paths.iter().filter(|p| !p.diverged).collect();
    let n = live.len();
    let hit: Vec<bool> = live.iter().map(|p| in_b(cv, &p.end, q.z_star)).collect();
    let b_fraction = hit.iter().filter(|h| **h).count() as f64 / n as f64;

    // Misses would make -log 1_B infinite; the exponent is averaged over
    // the paths ending in B and the result floored at ε.
    let costs: Vec<f64> = live.iter().zip(&hit).filter(|(_, h)| **h).map(|(p, _)| p.control_cost).collect();
    let soc = if costs.is_empty() {
        EstimateReport::normal("guided-soc", epsilon, 0.0, 0, ens.total_steps)
    } else {
        let (m, sd) = mean_std(&costs);
        let p = (-m).exp().max(epsilon);
        // Delta method on exp(-mean).
        EstimateReport::normal("guided-soc", p, p * sd / (costs.len() as f64).sqrt(), costs.len(), ens.total_steps)
    };

    let is_terms: Vec<f64> = live
        .iter()
        .zip(&hit)
        .map(|(p, h)| if *h { p.log_weight.exp() } else { 0.0 })
        .collect();
    let (m, sd) = mean_std(&is_terms);
    let mut importance = EstimateReport::normal("guided-is", m, sd / (n as f64).sqrt(), n, ens.total_steps);
    importance.ess = Some(ens.ess);
    Ok(GuidedTransitionReport {
        soc,
        importance,
        b_fraction,
        ess: ens.ess,
        epsilon,
        kappa,
    })
}

/// Inputs of the committor estimators: `A = {ξ ≤ z_a}`, `B = {ξ ≥ z_b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittorQuery {
    pub x0: Vec<f64>,
    pub z_a: f64,
    pub z_b: f64,
    pub max_time: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittorReport {
    /// `exp(-mean ½∫‖u‖²)` over paths hitting `B` first.
    pub soc: EstimateReport,
    /// `mean[w · 1(B first)]` over uncensored paths.
    pub importance: EstimateReport,
    /// Plain fraction hitting `B` first among uncensored paths.
    pub hit_fraction: EstimateReport,
    pub hits_a: usize,
    pub hits_b: usize,
    pub censored: usize,
    /// Mean and standard deviation of `τ_B` over paths hitting `B` first.
    pub tau_b_mean: f64,
    pub tau_b_std: f64,
    pub tau_b: Vec<f64>,
    pub kappa: f64,
}

/// Committor at `x0` from committor-guided paths run until they hit `A ∪ B`
/// or reach `max_time`. With `κ = 0` the paths are uncontrolled.
pub fn estimate_committor_guided(
    spec: &SystemSpec,
    cv: &CollectiveVariable,
    committor: Arc<LatentCommittor>,
    kappa: f64,
    q: &CommittorQuery,
) -> Result<CommittorReport> {
    if !(q.z_a < q.z_b) {
        return Err(Error::InvalidInput("need z_a < z_b".into()));
    }
    let law = ControlLaw::committor_guidance(cv.clone(), committor, kappa, spec.sigma, DEFAULT_Q_FLOOR)?;
    let s = BridgeSettings::new(0.0, q.max_time, q.dt, q.n_paths, q.seed);
    let monitor = Monitor::absorbing(cv.clone(), q.z_a, q.z_b);
    let control = (kappa > 0.0).then_some(&law as &dyn crate::model::Control);
    let ens = run_guided_bridge(spec, control, std::slice::from_ref(&q.x0), &s, Some(&monitor))?;
    let mut hits_a = 0;
    let mut costs = Vec::new();
    let mut tau_b = Vec::new();
    let mut is_terms = Vec::new();
    for p in ens.paths.iter().filter(|p| !p.diverged) {
        match (p.source_time, p.target_time) {
            (_, Some(t)) => {
                costs.push(p.control_cost);
                tau_b.push(t);
                is_terms.push(p.log_weight.exp());
            }
            (Some(_), None) => {
                hits_a += 1;
                is_terms.push(0.0);
            }
            (None, None) => {}
        }
    }
    let hits_b = tau_b.len();
    let censored = ens.len() - hits_a - hits_b;
    if hits_a + hits_b == 0 {
        return Err(Error::Estimation(format!("all {} paths were censored at t = {}", ens.len(), q.max_time)));
    }
    let soc = if hits_b > 0 {
        let (m, sd) = mean_std(&costs);
        let v = (-m).exp();
        EstimateReport::normal("committor-soc", v, v * sd / (hits_b as f64).sqrt(), hits_b, ens.total_steps)
    } else {
        EstimateReport::normal("committor-soc", 0.0, 0.0, 0, ens.total_steps)
    };
    let (m, sd) = mean_std(&is_terms);
    let mut importance = EstimateReport::normal(
        "committor-is",
        m,
        sd / (is_terms.len() as f64).sqrt(),
        is_terms.len(),
        ens.total_steps,
    );
    importance.ess = Some(ens.ess);
    let hit_fraction = EstimateReport::proportion("committor-hit-fraction", hits_b, hits_a + hits_b, ens.total_steps);
    let (tau_b_mean, tau_b_std) = mean_std(&tau_b);
    Ok(CommittorReport {
        soc,
        importance,
        hit_fraction,
        hits_a,
        hits_b,
        censored,
        tau_b_mean,
        tau_b_std,
        tau_b,
        kappa,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Last sample in `{ξ ≤ z_a}` before the transition.
    pub start: f64,
    /// First sample in `{ξ ≥ z_b}`.
    pub end: f64,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub segments: Vec<Segment>,
    pub mean: f64,
    pub std: f64,
    /// Total time scanned.
    pub time: f64,
}

impl SegmentStats {
    pub fn from_segments(segments: Vec<Segment>, time: f64) -> Self {
        let d: Vec<f64> = segments.iter().map(Segment::duration).collect();
        let (mean, std) = mean_std(&d);
        SegmentStats { segments, mean, std, time }
    }

    pub fn count(&self) -> usize {
        self.segments.len()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.segments.iter().map(Segment::duration).collect()
    }

    /// Counts of durations in `bins` equal bins on `[0, max]`; longer
    /// durations land in the last bin.
    pub fn histogram(&self, bins: usize, max: f64) -> Vec<usize> {
        let mut h = vec![0; bins];
        for d in self.durations() {
            let k = ((d / max) * bins as f64) as usize;
            h[k.min(bins - 1)] += 1;
        }
        h
    }
}

/// Incremental scanner for A→B reactive segments of a sampled `ξ` sequence.
#[derive(Debug, Clone)]
pub struct SegmentScanner {
    z_a: f64,
    z_b: f64,
    last_in_a: Option<f64>,
    pub segments: Vec<Segment>,
}

impl SegmentScanner {
    pub fn new(z_a: f64, z_b: f64) -> Result<Self> {
        if !(z_a < z_b) {
            return Err(Error::InvalidInput("need z_a < z_b".into()));
        }
        Ok(SegmentScanner {
            z_a,
            z_b,
            last_in_a: None,
            segments: Vec::new(),
        })
    }

    #[inline]
    pub fn push(&mut self, t: f64, z: f64) {
        if z <= self.z_a {
            self.last_in_a = Some(t);
        } else if z >= self.z_b {
            if let Some(start) = self.last_in_a.take() {
                self.segments.push(Segment { start, end: t });
            }
        }
    }
}

/// Reactive segments of a stored path.
pub fn extract_reactive_segments(path: &PathRecord, cv: &CollectiveVariable, z_a: f64, z_b: f64) -> Result<SegmentStats> {
    let mut scan = SegmentScanner::new(z_a, z_b)?;
    for n in 0..path.len() {
        scan.push(path.time(n), cv.eval1(path.state(n)).0);
    }
    Ok(SegmentStats::from_segments(scan.segments, path.time(path.len() - 1) - path.t0))
}

/// Reactive segments of `n_chains` independent uncontrolled runs of length
/// `time / n_chains` each, scanned on the fly without storing the paths.
#[allow(clippy::too_many_arguments)]
pub fn long_run_segments(
    spec: &SystemSpec,
    cv: &CollectiveVariable,
    x0: &[f64],
    dt: f64,
    time: f64,
    n_chains: usize,
    seed: u64,
    levels: (f64, f64),
) -> Result<SegmentStats> {
    if n_chains == 0 || !(time > 0.0 && dt > 0.0) {
        return Err(Error::InvalidInput("need n_chains >= 1, time > 0 and dt > 0".into()));
    }
    spec.check_dim(x0)?;
    let steps = (time / n_chains as f64 / dt).round() as usize;
    let runs: Vec<Result<Vec<Segment>>> = (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let mut st = Stepper::new(spec, None, x0, 0.0, dt);
            let mut scan = SegmentScanner::new(levels.0, levels.1)?;
            scan.push(0.0, cv.eval1(x0).0);
            for n in 1..=steps {
                st.step(&mut rng)?;
                scan.push(n as f64 * dt, cv.eval1(&st.x).0);
            }
            Ok(scan.segments)
        })
        .collect();
    let mut all = Vec::new();
    for r in runs {
        all.extend(r?);
    }
    Ok(SegmentStats::from_segments(all, steps as f64 * dt * n_chains as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::run_guided_bridge;
    use crate::effective::{BkOptions, EffectiveModel};
    use crate::model::Control;

    struct Constant(f64);

    impl Control for Constant {
        fn evaluate(&self, _t: f64, _x: &[f64], u: &mut [f64]) -> bool {
            u[0] = self.0;
            false
        }
    }

    fn ou() -> SystemSpec {
        SystemSpec::harmonic(vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn constant_observable_has_zero_variance() {
        let s = BridgeSettings::new(0.0, 1.0, 0.01, 200, 1);
        let e = run_guided_bridge(&ou(), Some(&Constant(0.7)), &[vec![0.0]], &s, None).unwrap();
        let r = weighted_expectation(&e, |_| 1.0).unwrap();
        assert!((r.estimate - 1.0).abs() < 1e-12 && r.std_error < 1e-12);
    }

    #[test]
    fn unweighted_ensemble_gives_plain_mean() {
        let s = BridgeSettings::new(0.0, 1.0, 0.01, 300, 2);
        let e = run_guided_bridge(&ou(), None, &[vec![0.3]], &s, None).unwrap();
        let r = weighted_expectation(&e, |p| p.end[0]).unwrap();
        let plain = e.paths.iter().map(|p| p.end[0]).sum::<f64>() / 300.0;
        assert!((r.estimate - plain).abs() < 1e-12);
    }

    #[test]
    fn controlled_ou_mean_matches_analytic() {
        let s = BridgeSettings::new(0.0, 1.0, 0.01, 20_000, 5);
        let e = run_guided_bridge(&ou(), Some(&Constant(-0.8)), &[vec![1.0]], &s, None).unwrap();
        let r = weighted_expectation(&e, |p| p.end[0]).unwrap();
        let exact = 0.99f64.powi(100);
        assert!((r.estimate - exact).abs() < 3.0 * r.std_error, "{r:?}");
        assert!(r.ci[0] <= r.estimate && r.estimate <= r.ci[1]);
    }

    #[test]
    fn intervals_widen_with_level() {
        let a = EstimateReport::proportion("x", 30, 200, 0);
        let b = EstimateReport::normal("y", 0.4, 0.02, 100, 0);
        for r in [a, b] {
            let (lo, hi) = (r.interval_at(0.9), r.interval_at(0.99));
            assert!(hi[0] < lo[0] && hi[1] > lo[1]);
            assert!(r.ci[0] <= r.estimate && r.estimate <= r.ci[1]);
        }
        // Wilson interval for 0 of 10.
        let z = EstimateReport::proportion("z", 0, 10, 0);
        assert!(z.ci[0].abs() < 1e-12);
        assert!((z.ci[1] - 0.2775).abs() < 1e-3);
    }

    #[test]
    fn pb_mc_trivial_limits() {
        let spec = ou();
        let cv = CollectiveVariable::coordinate(0, 1);
        let all = TransitionQuery {
            x0: vec![0.0],
            z_star: -1e9,
            horizon: 0.1,
            dt: 0.01,
            n_paths: 50,
            seed: 1,
        };
        assert_eq!(estimate_pb_mc(&spec, &cv, &all).unwrap().endpoint.estimate, 1.0);
        let none = TransitionQuery {
            z_star: 0.5,
            horizon: 1e-3,
            dt: 1e-3,
            ..all
        };
        assert_eq!(estimate_pb_mc(&spec, &cv, &none).unwrap().endpoint.estimate, 0.0);
    }

    fn ou_phi(z: f64) -> f64 {
        Normal::new(0.0, 1.0).unwrap().cdf(z)
    }

    #[test]
    fn guided_estimates_match_ou_tail_probability() {
        // dX = -X dt + dW observed through an affine ξ: the latent table is
        // exact up to discretisation.
        let spec = SystemSpec::harmonic(vec![1.0], 1.0).unwrap();
        let cv = CollectiveVariable::coordinate(0, 1);
        // Latent coordinate y = (x + 4) / 8 on [0, 1]: drift c + λy with
        // c = 1/2, λ = -1 and σ̂ = 1/8.
        let (lo, n) = (-4.0, 321);
        let model = EffectiveModel::from_coefficients(-lo / 8.0, -1.0, vec![1.0 / 8.0; n], vec![]).unwrap();
        let z_star_x = 1.5;
        let t = 1.0;
        let table = model.solve_bk((z_star_x - lo) / 8.0, t, 400, BkOptions::default()).unwrap();
        let cv_unit = CollectiveVariable::Linear {
            matrix: vec![vec![1.0 / 8.0]],
            offset: vec![-lo / 8.0],
        };
        let q = TransitionQuery {
            x0: vec![0.0],
            z_star: (z_star_x - lo) / 8.0,
            horizon: t,
            dt: 1e-3,
            n_paths: 2000,
            seed: 3,
        };
        let exact = 1.0 - ou_phi(z_star_x / (0.5 * (1.0 - (-2.0f64).exp())).sqrt());
        let r = estimate_pb_guided(&spec, &cv_unit, Arc::new(table), 1.0, &q, DEFAULT_EPSILON).unwrap();
        assert!((r.importance.estimate - exact).abs() < 3.0 * r.importance.std_error + 2e-3, "{r:?} vs {exact}");
        assert!((r.soc.estimate - exact).abs() < 3.0 * r.soc.std_error + 0.05 * exact, "{r:?} vs {exact}");
        assert!(r.b_fraction > 0.5);
        let mc = estimate_pb_mc(&spec, &cv, &TransitionQuery { z_star: z_star_x, n_paths: 4000, ..q.clone() }).unwrap();
        assert!((mc.endpoint.estimate - exact).abs() < 3.0 * mc.endpoint.std_error + 2e-3);
        assert!(mc.hit_by_t.estimate >= mc.endpoint.estimate);
    }

    #[test]
    fn guided_table_must_match_query() {
        let model = EffectiveModel::from_coefficients(0.5, -1.0, vec![0.2; 21], vec![]).unwrap();
        let table = Arc::new(model.solve_bk(0.7, 1.0, 10, BkOptions::default()).unwrap());
        let q = TransitionQuery {
            x0: vec![0.0],
            z_star: 0.6,
            horizon: 1.0,
            dt: 0.01,
            n_paths: 3,
            seed: 0,
        };
        assert!(estimate_pb_guided(&ou(), &CollectiveVariable::coordinate(0, 1), table, 1.0, &q, 1e-12).is_err());
    }

    #[test]
    fn committor_boundary_values() {
        let spec = ou();
        let cv = CollectiveVariable::coordinate(0, 1);
        let z: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let lc = Arc::new(LatentCommittor::from_values(z.clone(), z));
        let q = CommittorQuery {
            x0: vec![0.95],
            z_a: 0.1,
            z_b: 0.9,
            max_time: 1.0,
            dt: 0.01,
            n_paths: 10,
            seed: 0,
        };
        let r = estimate_committor_guided(&spec, &cv, lc.clone(), 1.0, &q).unwrap();
        assert_eq!(r.importance.estimate, 1.0);
        assert_eq!(r.hits_b, 10);
        assert!(r.tau_b.iter().all(|t| *t == 0.0));
        let q = CommittorQuery { x0: vec![0.05], ..q };
        let r = estimate_committor_guided(&spec, &cv, lc, 1.0, &q).unwrap();
        assert_eq!((r.importance.estimate, r.hit_fraction.estimate, r.hits_a), (0.0, 0.0, 10));
    }

    #[test]
    fn flat_committor_estimates_agree() {
        // Brownian motion on a line between A = {x ≤ 0} and B = {x ≥ 1}: q(x) = x.
        let spec = SystemSpec::harmonic(vec![0.0], 1.0).unwrap();
        let cv = CollectiveVariable::coordinate(0, 1);
        let z: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let lc = Arc::new(LatentCommittor::from_values(z.clone(), z));
        let q = CommittorQuery {
            x0: vec![0.3],
            z_a: 0.0,
            z_b: 1.0,
            max_time: 20.0,
            dt: 1e-3,
            n_paths: 2000,
            seed: 8,
        };
        let plain = estimate_committor_guided(&spec, &cv, lc.clone(), 0.0, &q).unwrap();
        assert!((plain.hit_fraction.estimate - 0.3).abs() < 3.0 * plain.hit_fraction.std_error + 0.01);
        let guided = estimate_committor_guided(&spec, &cv, lc, 1.0, &q).unwrap();
        assert!((guided.importance.estimate - 0.3).abs() < 3.0 * guided.importance.std_error + 0.01, "{guided:?}");
        // With the exact committor only time discretisation lets paths reach A.
        assert!(guided.hits_a < 40, "{}", guided.hits_a);
        assert!(guided.tau_b_mean < plain.tau_b_mean);
    }

    #[test]
    fn synthetic_sequence_segments() {
        let zs = [0.05, 0.3, 0.95, 0.5, 0.05, 0.08, 0.2, 0.04, 0.6, 0.95, 0.97];
        let p = PathRecord {
            t0: 0.0,
            dt: 0.5,
            dim: 1,
            states: zs.to_vec(),
            seed: 0,
            noise: None,
            controls: None,
            log_weight: None,
            clamped: false,
        };
        let cv = CollectiveVariable::coordinate(0, 1);
        let s = extract_reactive_segments(&p, &cv, 0.1, 0.9).unwrap();
        assert_eq!(s.count(), 2);
        assert_eq!(s.segments[0], Segment { start: 0.0, end: 1.0 });
        assert_eq!(s.segments[1], Segment { start: 3.5, end: 4.5 });
        assert_eq!(s.mean, 1.0);
        let stay = PathRecord {
            states: vec![0.05, 0.02, 0.09],
            ..p
        };
        assert_eq!(extract_reactive_segments(&stay, &cv, 0.1, 0.9).unwrap().count(), 0);
    }
}

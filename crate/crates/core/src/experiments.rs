//! Config-driven experiments behind the `cvlift` binary.
//!
//! A run reads an [`ExperimentConfig`], writes its artifacts into one output
//! directory and returns an [`Outcome`]. `results.json` holds the scalar
//! values compared by [`compare_files`]; `manifest.json` echoes the resolved
//! config so that the run can be repeated from the manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bridge::{
    level_set_starts, resample_endpoint, run_guided_bridge, run_smc_bridge, sample_reactive_ensemble, total_variation,
    write_grid_csv, BridgeSettings, ReactiveSettings, SmcOptions, WeightedPathEnsemble,
};
use crate::cv::CollectiveVariable;
use crate::effective::{estimate_koopman, BkOptions, EffectiveModel, LatentProbabilityTable, P_FLOOR};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_committor_guided, estimate_pb_guided, estimate_pb_mc, extract_reactive_segments, long_run_segments,
    CommittorQuery, Segment, SegmentStats, TransitionQuery,
};
use crate::grid::Grid2;
use crate::guidance::{ControlLaw, GainSchedule, ReferencePath};
use crate::model::{PathRecord, SystemSpec};
use crate::operator::{make_chi, EigenMethod, Eigenpairs, GridOperator, Membership, TptFields};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    GridSpectrum,
    TptFields,
    EffectiveBuild,
    EffectiveSim,
    Koopman,
    BkSolve,
    BridgeLinear,
    BridgeEffective,
    ReactiveEnsemble,
    #[serde(rename = "pB-mc")]
    PbMc,
    #[serde(rename = "pB-guided")]
    PbGuided,
    Committor,
    SpectralApprox,
    HighdDemo,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 14] = [
        ExperimentId::GridSpectrum,
        ExperimentId::TptFields,
        ExperimentId::EffectiveBuild,
        ExperimentId::EffectiveSim,
        ExperimentId::Koopman,
        ExperimentId::BkSolve,
        ExperimentId::BridgeLinear,
        ExperimentId::BridgeEffective,
        ExperimentId::ReactiveEnsemble,
        ExperimentId::PbMc,
        ExperimentId::PbGuided,
        ExperimentId::Committor,
        ExperimentId::SpectralApprox,
        ExperimentId::HighdDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::GridSpectrum => "grid-spectrum",
            ExperimentId::TptFields => "tpt-fields",
            ExperimentId::EffectiveBuild => "effective-build",
            ExperimentId::EffectiveSim => "effective-sim",
            ExperimentId::Koopman => "koopman",
            ExperimentId::BkSolve => "bk-solve",
            ExperimentId::BridgeLinear => "bridge-linear",
            ExperimentId::BridgeEffective => "bridge-effective",
            ExperimentId::ReactiveEnsemble => "reactive-ensemble",
            ExperimentId::PbMc => "pB-mc",
            ExperimentId::PbGuided => "pB-guided",
            ExperimentId::Committor => "committor",
            ExperimentId::SpectralApprox => "spectral-approx",
            ExperimentId::HighdDemo => "highd-demo",
        }
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    /// Full-system time step.
    pub dt: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            sigma: 0.7,
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    /// Cells per axis.
    pub n: usize,
    /// Eigenpairs reported by `grid-spectrum`.
    pub n_eigen: usize,
    /// Centres of the wells mapped to χ = 0 and χ = 1.
    pub low_well: [f64; 2],
    pub high_well: [f64; 2],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lo: -2.5,
            hi: 2.5,
            n: 200,
            n_eigen: 3,
            low_well: [-1.0, -1.0],
            high_well: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EffectiveConfig {
    /// Latent nodes on `[0, 1]`.
    pub n_z: usize,
    pub dt: f64,
    pub z0: f64,
    /// Length of the `effective-sim` trajectory.
    pub time: f64,
    /// Steps between stored samples.
    pub stride: usize,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        EffectiveConfig {
            n_z: 201,
            dt: 1e-3,
            z0: 0.05,
            time: 2000.0,
            stride: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KoopmanConfig {
    pub time: f64,
    pub tau: f64,
    pub n_boxes: usize,
    pub n_eigen: usize,
    /// Spacing of the stored samples.
    pub sample_dt: f64,
}

impl Default for KoopmanConfig {
    fn default() -> Self {
        KoopmanConfig {
            time: 5e5,
            tau: 2.0,
            n_boxes: 200,
            n_eigen: 4,
            sample_dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitionConfig {
    pub x0: Vec<f64>,
    pub z_star: f64,
    pub horizon: f64,
    /// Implicit time steps of the latent backward solve.
    pub n_t: usize,
    pub mollify: bool,
    pub mc_paths: usize,
    pub guided_paths: usize,
    pub kappa: f64,
    pub epsilon: f64,
    /// Time separation `t - s` for `spectral-approx`.
    pub spectral_lag: f64,
    /// Latent window on which `spectral-approx` measures the sup-norm.
    pub spectral_window: [f64; 2],
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            x0: vec![-0.2, -0.2],
            z_star: 0.9,
            horizon: 20.0,
            n_t: 2000,
            mollify: false,
            mc_paths: 5000,
            guided_paths: 100,
            kappa: 1.6,
            epsilon: 1e-12,
            spectral_lag: 20.0,
            spectral_window: [0.05, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommittorConfig {
    pub x0: Vec<f64>,
    pub z_a: f64,
    pub z_b: f64,
    pub kappa: f64,
    pub n_paths: usize,
    pub max_time: f64,
}

impl Default for CommittorConfig {
    fn default() -> Self {
        CommittorConfig {
            x0: vec![-1.0, 0.2],
            z_a: 0.1,
            z_b: 0.9,
            kappa: 1.3,
            n_paths: 100,
            max_time: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmcConfig {
    pub ess_threshold: f64,
    pub block: usize,
    pub adaptive_gain: bool,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            ess_threshold: 0.5,
            block: 100,
            adaptive_gain: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub x0: Vec<f64>,
    /// Point whose χ value ends the linear reference.
    pub target: Vec<f64>,
    pub horizon: f64,
    /// Knot spacing of the reference path.
    pub knot_dt: f64,
    pub gain: GainSchedule,
    /// Tikhonov term added to `J Jᵀ`.
    pub rho: f64,
    pub n_paths: usize,
    /// Fine steps between stored states.
    pub store_stride: usize,
    /// Paths ending with `χ(X_T)` above this count as arrived.
    pub arrival_level: f64,
    pub smc: Option<SmcConfig>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            x0: vec![-1.0, -1.0],
            target: vec![1.0, 1.0],
            horizon: 10.0,
            knot_dt: 1.0,
            gain: GainSchedule::Constant { value: 100.0 },
            rho: 0.0,
            n_paths: 100,
            store_stride: 100,
            arrival_level: 0.8,
            smc: None,
        }
    }
}

/// Which reactive piece of the coarse run guides the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentChoice {
    /// The piece of median duration.
    Median,
    First,
    Shortest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactiveConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub gains: Vec<f64>,
    pub n_paths: usize,
    /// Width of the start band `|χ - z_min| < tol`.
    pub tol: f64,
    pub max_time: f64,
    /// Length of the coarse run from which the reference piece is cut.
    pub coarse_time: f64,
    pub segment: SegmentChoice,
    /// Gain whose occupancy histogram is compared with `μ_AB`.
    pub histogram_gain: f64,
    /// Total length of the uncontrolled long run; zero skips it.
    pub long_run_time: f64,
    pub long_run_chains: usize,
}

impl Default for ReactiveConfig {
    fn default() -> Self {
        ReactiveConfig {
            z_min: 0.1,
            z_max: 0.9,
            gains: vec![15.0, 25.0, 50.0],
            n_paths: 100,
            tol: 0.02,
            max_time: 200.0,
            coarse_time: 200_000.0,
            segment: SegmentChoice::Median,
            histogram_gain: 25.0,
            long_run_time: 0.0,
            long_run_chains: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HighdConfig {
    /// Frequencies `ω_3 … ω_d` of the harmonic directions.
    pub omegas: Vec<f64>,
    pub rotation_seed: u64,
}

impl Default for HighdConfig {
    fn default() -> Self {
        HighdConfig {
            omegas: vec![2.0; 8],
            rotation_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub effective: EffectiveConfig,
    #[serde(default)]
    pub koopman: KoopmanConfig,
    #[serde(default)]
    pub transition: TransitionConfig,
    #[serde(default)]
    pub committor: CommittorConfig,
    #[serde(default)]
    pub bridge: BridgeConfig,
    #[serde(default)]
    pub reactive: ReactiveConfig,
    #[serde(default)]
    pub highd: HighdConfig,
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId) -> Self {
        ExperimentConfig {
            experiment,
            seed: default_seed(),
            system: SystemConfig::default(),
            grid: GridConfig::default(),
            effective: EffectiveConfig::default(),
            koopman: KoopmanConfig::default(),
            transition: TransitionConfig::default(),
            committor: CommittorConfig::default(),
            bridge: BridgeConfig::default(),
            reactive: ReactiveConfig::default(),
            highd: HighdConfig::default(),
        }
    }

    /// Parses a JSON config; unknown keys and invalid values are config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let s = &self.system;
        if !(s.sigma > 0.0 && s.dt > 0.0 && s.alpha > 0.0 && s.beta > 0.0 && s.gamma >= 0.0) {
            return bad("system: need sigma, dt, alpha, beta > 0 and gamma >= 0");
        }
        let g = &self.grid;
        if !(g.hi > g.lo) || g.n < 4 || g.n_eigen < 2 {
            return bad("grid: need hi > lo, n >= 4 and n_eigen >= 2");
        }
        let e = &self.effective;
        if e.n_z < 3 || !(e.dt > 0.0 && e.time > 0.0) || e.stride == 0 || !(0.0..=1.0).contains(&e.z0) {
            return bad("effective: need n_z >= 3, dt > 0, time > 0, stride >= 1 and z0 in [0, 1]");
        }
        let k = &self.koopman;
        if !(k.time > 0.0 && k.tau > 0.0 && k.sample_dt >= e.dt) || k.n_boxes < 2 || k.n_eigen < 2 {
            return bad("koopman: need time, tau > 0, sample_dt >= effective.dt, n_boxes >= 2, n_eigen >= 2");
        }
        let t = &self.transition;
        if !(t.z_star > 0.0 && t.z_star < 1.0 && t.horizon > 0.0 && t.spectral_lag > 0.0) || t.n_t == 0 {
            return bad("transition: need 0 < z_star < 1, horizon > 0, spectral_lag > 0 and n_t >= 1");
        }
        if t.mc_paths == 0 || t.guided_paths == 0 || !(t.kappa >= 0.0 && t.epsilon >= 0.0) {
            return bad("transition: need paths >= 1, kappa >= 0 and epsilon >= 0");
        }
        if !(t.spectral_window[0] < t.spectral_window[1]) {
            return bad("transition: empty spectral_window");
        }
        let c = &self.committor;
        if !(c.z_a < c.z_b && c.kappa >= 0.0 && c.max_time > 0.0) || c.n_paths == 0 {
            return bad("committor: need z_a < z_b, kappa >= 0, max_time > 0 and n_paths >= 1");
        }
        let b = &self.bridge;
        if !(b.horizon > 0.0 && b.knot_dt > 0.0 && b.rho >= 0.0) || b.n_paths == 0 || b.store_stride == 0 {
            return bad("bridge: need horizon, knot_dt > 0, rho >= 0, n_paths >= 1 and store_stride >= 1");
        }
        b.gain.validate().map_err(|e| Error::Config(format!("bridge.gain: {e}")))?;
        if let Some(smc) = &b.smc {
            if !(smc.ess_threshold >= 0.0 && smc.ess_threshold < 1.0) || smc.block == 0 {
                return bad("bridge.smc: need 0 <= ess_threshold < 1 and block >= 1");
            }
        }
        let r = &self.reactive;
        if !(r.z_min < r.z_max && r.tol > 0.0 && r.max_time > 0.0 && r.coarse_time > 0.0 && r.long_run_time >= 0.0)
            || r.n_paths == 0
            || r.long_run_chains == 0
            || r.gains.iter().any(|g| !(*g > 0.0))
        {
            return bad("reactive: need z_min < z_max, positive tol, times and gains, n_paths >= 1");
        }
        for (name, x) in [
            ("transition.x0", &t.x0),
            ("committor.x0", &c.x0),
            ("bridge.x0", &b.x0),
            ("bridge.target", &b.target),
        ] {
            if x.len() != 2 || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite 2D point")));
            }
        }
        if self.highd.omegas.iter().any(|w| !(*w > 0.0)) {
            return bad("highd: omegas must be positive");
        }
        Ok(())
    }
}

/// What a run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Outcome {
    pub experiment: ExperimentId,
    pub seed: u64,
    /// Scalar results; the fields compared by [`compare_files`].
    pub values: BTreeMap<String, f64>,
    /// Structured details (reports, diagnostics, vectors).
    pub details: Value,
    /// Artifact files relative to the output directory.
    pub files: Vec<String>,
}

struct Recorder {
    dir: PathBuf,
    values: BTreeMap<String, f64>,
    details: serde_json::Map<String, Value>,
    files: Vec<String>,
}

impl Recorder {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Recorder {
            dir: dir.to_path_buf(),
            values: BTreeMap::new(),
            details: serde_json::Map::new(),
            files: Vec::new(),
        })
    }

    fn value(&mut self, key: &str, v: f64) {
        self.values.insert(key.to_string(), v);
    }

    fn detail<T: Serialize>(&mut self, key: &str, v: &T) -> Result<()> {
        self.details.insert(key.to_string(), serde_json::to_value(v)?);
        Ok(())
    }

    /// Path of a new artifact inside the output directory.
    fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

/// Operator, spectrum and membership shared by most experiments.
struct Landscape {
    spec: SystemSpec,
    op: GridOperator,
    eig: Eigenpairs,
    chi: Membership,
}

impl Landscape {
    fn build(cfg: &ExperimentConfig, n_eigen: usize) -> Result<Self> {
        let s = &cfg.system;
        let spec = SystemSpec::double_well(s.alpha, s.beta, s.gamma, s.sigma)?;
        let g = &cfg.grid;
        let op = GridOperator::build_sqra(&spec, Grid2::square(g.lo, g.hi, g.n)?)?;
        let eig = op.dominant_eigenpairs(n_eigen, EigenMethod::Auto)?;
        let low = (g.low_well[0], g.low_well[1]);
        let high = (g.high_well[0], g.high_well[1]);
        let chi = make_chi(op.grid, &eig.vectors[1], eig.values[1], low, high)?;
        Ok(Landscape { spec, op, eig, chi })
    }

    fn cv(&self) -> CollectiveVariable {
        CollectiveVariable::grid_chi(self.chi.table.clone())
    }

    fn sets(&self, z_a: f64, z_b: f64) -> (Vec<bool>, Vec<bool>) {
        let v = &self.chi.table.values;
        (v.iter().map(|c| *c <= z_a).collect(), v.iter().map(|c| *c >= z_b).collect())
    }

    fn tpt(&self, z_a: f64, z_b: f64) -> Result<(TptFields, f64)> {
        let (a, b) = self.sets(z_a, z_b);
        let c = self.op.solve_committor(&a, &b)?;
        let violation = c.max_violation;
        Ok((self.op.tpt_fields(&c)?, violation))
    }

    fn effective(&self, cfg: &ExperimentConfig) -> Result<EffectiveModel> {
        EffectiveModel::build(&self.op, &self.chi, cfg.effective.n_z)
    }
}

/// Independent seed for the `k`-th component of a run.
fn derived_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

/// Runs one experiment, writing artifacts and `results.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let mut rec = Recorder::new(out)?;
    match cfg.experiment {
        ExperimentId::GridSpectrum => grid_spectrum(cfg, &mut rec)?,
        ExperimentId::TptFields => tpt_fields(cfg, &mut rec)?,
        ExperimentId::EffectiveBuild => effective_build(cfg, &mut rec)?,
        ExperimentId::EffectiveSim => effective_sim(cfg, &mut rec)?,
        ExperimentId::Koopman => koopman(cfg, &mut rec)?,
        ExperimentId::BkSolve => bk_solve(cfg, &mut rec)?,
        ExperimentId::BridgeLinear => bridge_linear(cfg, &mut rec)?,
        ExperimentId::BridgeEffective => bridge_effective(cfg, &mut rec)?,
        ExperimentId::ReactiveEnsemble => reactive(cfg, &mut rec)?,
        ExperimentId::PbMc => pb_mc(cfg, &mut rec)?,
        ExperimentId::PbGuided => pb_guided(cfg, &mut rec)?,
        ExperimentId::Committor => committor(cfg, &mut rec)?,
        ExperimentId::SpectralApprox => spectral(cfg, &mut rec)?,
        ExperimentId::HighdDemo => highd(cfg, &mut rec)?,
    }
    if rec.values.values().any(|v| v.is_infinite()) {
        return Err(Error::Estimation("non-finite result value".into()));
    }
    let results = rec.file("results.json");
    let outcome = Outcome {
        experiment: cfg.experiment,
        seed: cfg.seed,
        values: rec.values,
        details: Value::Object(rec.details),
        files: rec.files,
    };
    write_json(&results, &outcome)?;
    Ok(outcome)
}

/// [`run_experiment`] plus `manifest.json` with the resolved config, the
/// tool version, the worker count and the wall-clock runtime.
pub fn run_with_manifest(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<Outcome> {
    let start = Instant::now();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        if k == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(k);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let workers = pool.current_num_threads();
    let outcome = pool.install(|| run_experiment(cfg, out))?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment,
        "config": cfg,
        "threads": workers,
        "files": outcome.files,
        "runtime_seconds": start.elapsed().as_secs_f64(),
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(outcome)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn grid_spectrum(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, cfg.grid.n_eigen)?;
    for (k, l) in land.eig.values.iter().enumerate() {
        rec.value(&format!("lambda_{}", k + 1), *l);
    }
    rec.value("max_row_sum_defect", land.op.max_row_sum_defect());
    rec.value("max_detailed_balance_defect", land.op.max_detailed_balance_defect());
    rec.value("drift_constant", land.chi.drift_constant());
    let path = rec.file("spectrum.csv");
    write_rows(&path, "k,lambda", land.eig.values.iter().enumerate().map(|(k, l)| vec![(k + 1) as f64, *l]))?;
    for k in 1..land.eig.vectors.len() {
        let path = rec.file(&format!("phi_{}.csv", k + 1));
        write_grid_csv(&land.op.grid, &land.eig.vectors[k], &path)?;
    }
    let path = rec.file("chi.csv");
    write_grid_csv(&land.op.grid, &land.chi.table.values, &path)
}

fn tpt_fields(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let c = &cfg.committor;
    let (f, violation) = land.tpt(c.z_a, c.z_b)?;
    let cell = land.op.grid.cell_of(c.x0[0], c.x0[1]);
    rec.value("committor_at_x0", f.q[cell]);
    rec.value("chi_at_x0", land.chi.table.values[cell]);
    rec.value("max_principle_violation", violation);
    rec.value("relative_flux_divergence", f.relative_flux_divergence());
    let path = rec.file("tpt_fields.csv");
    f.write_csv(&path)
}

fn effective_build(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let m = land.effective(cfg)?;
    rec.value("c", m.c);
    rec.value("lambda", m.lambda);
    rec.value("grid_lambda_2", land.eig.values[1]);
    let ev = m.generator_eigenvalues(3);
    for (k, l) in ev.iter().enumerate().skip(1) {
        rec.value(&format!("generator_lambda_{}", k + 1), *l);
    }
    rec.value("balance_point", m.balance_point());
    rec.value("filled_bins", m.filled_bins.len() as f64);
    let path = rec.file("effective.csv");
    m.write_csv(&path)?;
    let path = rec.file("effective.json");
    fs::write(&path, m.to_json()?).map_err(|e| Error::io(&path, e))
}

fn simulate_effective(m: &EffectiveModel, cfg: &ExperimentConfig, time: f64, stride: usize, seed: u64) -> Result<PathRecord> {
    let e = &cfg.effective;
    let steps = (time / e.dt).round() as usize;
    m.simulate(e.z0, e.dt, steps, seed, stride)
}

fn effective_sim(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let m = land.effective(cfg)?;
    let path = simulate_effective(&m, cfg, cfg.effective.time, cfg.effective.stride, cfg.seed)?;
    let zs = &path.states;
    let n = zs.len() as f64;
    rec.value("mean_z", zs.iter().sum::<f64>() / n);
    rec.value("fraction_above_half", zs.iter().filter(|z| **z > 0.5).count() as f64 / n);
    rec.value("pi_mass_above_half", m.pi_mass(0.5, 1.0));
    let r = &cfg.reactive;
    let segs = extract_reactive_segments(&path, &CollectiveVariable::coordinate(0, 1), r.z_min, r.z_max)?;
    rec.value("segments", segs.count() as f64);
    rec.value("segment_mean", segs.mean);
    rec.detail("segments", &segs.segments)?;
    let file = rec.file("effective_path.csv");
    path.write_csv(&file)
}

fn koopman(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let m = land.effective(cfg)?;
    let k = &cfg.koopman;
    let stride = ((k.sample_dt / cfg.effective.dt).round() as usize).max(1);
    let path = simulate_effective(&m, cfg, k.time, stride, cfg.seed)?;
    let est = estimate_koopman(&path.states, path.dt, k.tau, k.n_boxes, k.n_eigen)?;
    for (i, r) in est.implied_rates.iter().enumerate().skip(1) {
        rec.value(&format!("implied_lambda_{}", i + 1), *r);
    }
    rec.value("lambda", m.lambda);
    rec.value("active_boxes", est.active.len() as f64);
    rec.value("max_row_sum_defect", est.max_row_sum_defect());
    rec.detail("eigenvalues", &est.eigenvalues)?;
    let file = rec.file("koopman_eigenvalues.csv");
    write_rows(
        &file,
        "k,eigenvalue,implied_rate",
        est.eigenvalues.iter().zip(&est.implied_rates).enumerate().map(|(i, (e, r))| vec![(i + 1) as f64, *e, *r]),
    )
}

fn latent_table(m: &EffectiveModel, t: &TransitionConfig) -> Result<LatentProbabilityTable> {
    let opts = BkOptions {
        mollify: t.mollify,
        p_floor: P_FLOOR,
    };
    m.solve_bk(t.z_star, t.horizon, t.n_t, opts)
}

fn bk_solve(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let m = land.effective(cfg)?;
    let t = &cfg.transition;
    let table = latent_table(&m, t)?;
    let z0 = land.cv().eval1(&t.x0).0;
    rec.value("z0", z0);
    rec.value("p_at_x0", table.p_at(0.0, z0));
    rec.value("min_p", table.p.iter().copied().fold(f64::INFINITY, f64::min));
    rec.value("max_p", table.p.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    // Twenty time slices keep the file small.
    let n = table.z.len();
    let every = (table.s.len() / 20).max(1);
    let rows = (0..table.s.len())
        .filter(|k| k % every == 0 || *k + 1 == table.s.len())
        .flat_map(|k| {
            let t = &table;
            (0..n).map(move |i| vec![t.s[k], t.z[i], t.p[k * n + i], t.dlogp[k * n + i]])
        });
    let file = rec.file("bk_table.csv");
    write_rows(&file, "s,z,p,dlogp", rows)
}

fn bridge_settings(cfg: &ExperimentConfig, n_paths: usize) -> BridgeSettings {
    let b = &cfg.bridge;
    BridgeSettings::new(0.0, b.horizon, cfg.system.dt, n_paths, cfg.seed).storing(b.store_stride)
}

fn run_bridge(
    cfg: &ExperimentConfig,
    rec: &mut Recorder,
    spec: &SystemSpec,
    law: &ControlLaw,
    starts: &[Vec<f64>],
) -> Result<WeightedPathEnsemble> {
    let b = &cfg.bridge;
    let settings = bridge_settings(cfg, b.n_paths);
    let ens = match &b.smc {
        None => run_guided_bridge(spec, Some(law), starts, &settings, None)?,
        Some(smc) => {
            let opts = SmcOptions {
                ess_threshold: smc.ess_threshold,
                block: smc.block,
                adaptive_gain: smc.adaptive_gain,
            };
            let (ens, log) = run_smc_bridge(spec, law, starts, &settings, None, opts)?;
            rec.value("resampling_events", log.events.len() as f64);
            rec.value("final_gain_scale", log.gain_scales.last().copied().unwrap_or(1.0));
            let file = rec.file("smc_log.json");
            log.write_json(&file)?;
            ens
        }
    };
    let cv = &law.cv;
    let arrived = ens
        .paths
        .iter()
        .filter(|p| !p.diverged && cv.eval1(&p.end).0 > b.arrival_level)
        .count();
    rec.value("arrival_fraction", arrived as f64 / ens.len() as f64);
    rec.value("ess", ens.ess);
    rec.value("log_mean_weight", ens.log_mean_weight);
    rec.value("diverged", ens.diverged() as f64);
    rec.value("cost_steps", ens.total_steps as f64);
    let (j, x) = resample_endpoint(&ens, derived_seed(cfg.seed, 1))?;
    rec.value("resampled_index", j as f64);
    rec.detail("resampled_endpoint", &x)?;
    let file = rec.file("ensemble_paths.csv");
    ens.write_paths_csv(&file)?;
    let file = rec.file("ensemble_endpoints.csv");
    ens.write_endpoints_csv(&file)?;
    Ok(ens)
}

fn bridge_linear(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let cv = land.cv();
    let b = &cfg.bridge;
    land.spec.check_dim(&b.x0)?;
    land.spec.check_dim(&b.target)?;
    let (z0, z1) = (cv.eval1(&b.x0).0, cv.eval1(&b.target).0);
    let knots = (b.horizon / b.knot_dt).round() as usize + 1;
    let reference = ReferencePath::linear_ramp(0.0, b.horizon, z0, z1, knots)?;
    let law = ControlLaw::tracking(cv, reference, b.gain.clone(), b.rho)?;
    rec.value("z_start", z0);
    rec.value("z_target", z1);
    run_bridge(cfg, rec, &land.spec, &law, std::slice::from_ref(&b.x0))?;
    Ok(())
}

fn bridge_effective(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let cv = land.cv();
    let m = land.effective(cfg)?;
    let b = &cfg.bridge;
    land.spec.check_dim(&b.x0)?;
    let z0 = cv.eval1(&b.x0).0;
    let e = &cfg.effective;
    let stride = ((b.knot_dt / e.dt).round() as usize).max(1);
    let steps = (b.horizon / e.dt).round() as usize;
    let coarse = m.simulate(z0, e.dt, steps, derived_seed(cfg.seed, 2), stride)?;
    let times: Vec<f64> = (0..coarse.len()).map(|n| coarse.time(n)).collect();
    let reference = ReferencePath::scalar(times.clone(), coarse.states.clone())?;
    let file = rec.file("coarse_path.csv");
    write_rows(&file, "t,z", times.iter().zip(&coarse.states).map(|(t, z)| vec![*t, *z]))?;
    let z_end = *coarse.states.last().expect("nonempty path");
    let law = ControlLaw::tracking(cv.clone(), reference, b.gain.clone(), b.rho)?;
    rec.value("z_start", z0);
    rec.value("coarse_z_end", z_end);
    let ens = run_bridge(cfg, rec, &land.spec, &law, std::slice::from_ref(&b.x0))?;
    let gap: f64 = ens
        .paths
        .iter()
        .zip(&ens.weights)
        .map(|(p, w)| w * (cv.eval1(&p.end).0 - z_end).abs())
        .sum();
    rec.value("weighted_end_gap", gap);
    Ok(())
}

/// Fine steps between stored samples of the coarse run.
const COARSE_STRIDE: usize = 50;

/// Reactive pieces of a coarse effective run, and the one chosen as reference.
pub struct CoarseSegment {
    pub stats: SegmentStats,
    pub chosen: Segment,
    pub reference: ReferencePath,
}

/// Cuts a reactive `z_min → z_max` piece out of a seeded effective run; the
/// reference clock starts at the last exit from `{z ≤ z_min}`.
pub fn coarse_segment(
    m: &EffectiveModel,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<CoarseSegment> {
    let r = &cfg.reactive;
    let e = &cfg.effective;
    let steps = (r.coarse_time / e.dt).round() as usize;
    let path = m.simulate(e.z0, e.dt, steps, seed, COARSE_STRIDE)?;
    let stats = extract_reactive_segments(&path, &CollectiveVariable::coordinate(0, 1), r.z_min, r.z_max)?;
    if stats.count() == 0 {
        return Err(Error::Estimation(format!(
            "coarse run of length {} has no reactive piece; increase reactive.coarse_time",
            r.coarse_time
        )));
    }
    let chosen = match r.segment {
        SegmentChoice::First => stats.segments[0],
        SegmentChoice::Shortest => *stats
            .segments
            .iter()
            .min_by(|a, b| a.duration().total_cmp(&b.duration()))
            .expect("nonempty"),
        SegmentChoice::Median => {
            let mut order: Vec<Segment> = stats.segments.clone();
            order.sort_by(|a, b| a.duration().total_cmp(&b.duration()));
            order[(order.len() - 1) / 2]
        }
    };
    let i0 = ((chosen.start - path.t0) / path.dt).round() as usize;
    let i1 = ((chosen.end - path.t0) / path.dt).round() as usize;
    let times: Vec<f64> = (i0..=i1).map(|i| (i - i0) as f64 * path.dt).collect();
    let values = path.states[i0..=i1].to_vec();
    Ok(CoarseSegment {
        stats,
        chosen,
        reference: ReferencePath::scalar(times, values)?,
    })
}

fn gain_key(g: f64) -> String {
    format!("{g}").replace('.', "p")
}

fn reactive(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let cv = land.cv();
    let m = land.effective(cfg)?;
    let r = &cfg.reactive;
    let (fields, _) = land.tpt(r.z_min, r.z_max)?;
    let coarse = coarse_segment(&m, cfg, derived_seed(cfg.seed, 3))?;
    rec.value("coarse_segments", coarse.stats.count() as f64);
    rec.value("coarse_mean_duration", coarse.stats.mean);
    rec.value("reference_duration", coarse.chosen.duration());
    let file = rec.file("reference_path.csv");
    write_rows(
        &file,
        "t,z",
        coarse.reference.times().iter().zip(coarse.reference.values()).map(|(t, z)| vec![*t, z[0]]),
    )?;
    let grid = land.op.grid;
    let starts = level_set_starts(&grid, &land.chi.table.values, &fields.mu, r.z_min, r.tol, r.n_paths, cfg.seed)?;
    let settings = ReactiveSettings {
        z_min: r.z_min,
        z_max: r.z_max,
        dt: cfg.system.dt,
        max_time: r.max_time,
        n_paths: r.n_paths,
        seed: cfg.seed,
    };
    let mut per_gain = Vec::new();
    for &g in &r.gains {
        let ens = sample_reactive_ensemble(&land.spec, &cv, &coarse.reference, &GainSchedule::Constant { value: g }, &starts, &settings)?;
        let key = gain_key(g);
        rec.value(&format!("mean_duration_g{key}"), ens.mean_duration);
        rec.value(&format!("std_duration_g{key}"), ens.std_duration);
        rec.value(&format!("accepted_g{key}"), ens.accepted.len() as f64);
        let hist = ens.histogram(&grid);
        let tv = total_variation(&hist, &fields.mu_ab);
        rec.value(&format!("tv_mu_ab_g{key}"), tv);
        if g == r.histogram_gain {
            rec.value("tv_mu_ab", tv);
        }
        let file = rec.file(&format!("histogram_g{key}.csv"));
        write_grid_csv(&grid, &hist, &file)?;
        let file = rec.file(&format!("durations_g{key}.csv"));
        write_rows(&file, "duration", ens.durations.iter().map(|d| vec![*d]))?;
        per_gain.push(json!({ "gain": g, "durations": ens.durations, "attempted": ens.ensemble.len() }));
    }
    rec.detail("gains", &per_gain)?;
    let file = rec.file("mu_ab.csv");
    write_grid_csv(&grid, &fields.mu_ab, &file)?;
    if r.long_run_time > 0.0 {
        let x0 = [cfg.grid.low_well[0], cfg.grid.low_well[1]];
        let levels = (r.z_min, r.z_max);
        let s = long_run_segments(&land.spec, &cv, &x0, cfg.system.dt, r.long_run_time, r.long_run_chains, derived_seed(cfg.seed, 4), levels)?;
        rec.value("long_run_segments", s.count() as f64);
        rec.value("long_run_mean_duration", s.mean);
        rec.value("long_run_std_duration", s.std);
        let file = rec.file("long_run_durations.csv");
        write_rows(&file, "start,end,duration", s.segments.iter().map(|g| vec![g.start, g.end, g.duration()]))?;
    }
    Ok(())
}

fn transition_query(cfg: &ExperimentConfig, n_paths: usize, z_star: f64) -> TransitionQuery {
    let t = &cfg.transition;
    TransitionQuery {
        x0: t.x0.clone(),
        z_star,
        horizon: t.horizon,
        dt: cfg.system.dt,
        n_paths,
        seed: cfg.seed,
    }
}

fn pb_mc(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let t = &cfg.transition;
    let r = estimate_pb_mc(&land.spec, &land.cv(), &transition_query(cfg, t.mc_paths, t.z_star))?;
    rec.value("p_b", r.endpoint.estimate);
    rec.value("p_b_ci_low", r.endpoint.ci[0]);
    rec.value("p_b_ci_high", r.endpoint.ci[1]);
    rec.value("p_b_std_error", r.endpoint.std_error);
    rec.value("hit_by_t", r.hit_by_t.estimate);
    rec.value("cost_steps", r.endpoint.cost_steps as f64);
    rec.detail("report", &r)
}

fn pb_guided(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let m = land.effective(cfg)?;
    let t = &cfg.transition;
    let table = Arc::new(latent_table(&m, t)?);
    let q = transition_query(cfg, t.guided_paths, t.z_star);
    let r = estimate_pb_guided(&land.spec, &land.cv(), table, t.kappa, &q, t.epsilon)?;
    if r.b_fraction == 0.0 && t.epsilon == 0.0 {
        eprintln!("warning: no guided path reached B; the SOC estimate is 0");
    }
    rec.value("p_b_soc", r.soc.estimate);
    rec.value("p_b_soc_ci_low", r.soc.ci[0]);
    rec.value("p_b_soc_ci_high", r.soc.ci[1]);
    rec.value("p_b_is", r.importance.estimate);
    rec.value("p_b_is_ci_low", r.importance.ci[0]);
    rec.value("p_b_is_ci_high", r.importance.ci[1]);
    rec.value("b_fraction", r.b_fraction);
    rec.value("ess", r.ess);
    let steps_per_path = (t.horizon / cfg.system.dt).round();
    rec.value("cost_steps", r.importance.cost_steps as f64);
    rec.value("mc_cost_steps", t.mc_paths as f64 * steps_per_path);
    rec.value("cost_ratio", t.mc_paths as f64 * steps_per_path / r.importance.cost_steps as f64);
    rec.detail("report", &r)
}

fn committor(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let m = land.effective(cfg)?;
    let c = &cfg.committor;
    let lc = Arc::new(m.committor(c.z_a, c.z_b)?);
    let q = CommittorQuery {
        x0: c.x0.clone(),
        z_a: c.z_a,
        z_b: c.z_b,
        max_time: c.max_time,
        dt: cfg.system.dt,
        n_paths: c.n_paths,
        seed: cfg.seed,
    };
    let plain = estimate_committor_guided(&land.spec, &land.cv(), lc.clone(), 0.0, &q)?;
    let guided = estimate_committor_guided(&land.spec, &land.cv(), lc, c.kappa, &q)?;
    let (a, b) = land.sets(c.z_a, c.z_b);
    let grid_q = land.op.solve_committor(&a, &b)?.q[land.op.grid.cell_of(c.x0[0], c.x0[1])];
    rec.value("grid_committor", grid_q);
    for (name, r) in [("plain", &plain), ("guided", &guided)] {
        rec.value(&format!("{name}_hit_fraction"), r.hit_fraction.estimate);
        rec.value(&format!("{name}_hit_ci_low"), r.hit_fraction.ci[0]);
        rec.value(&format!("{name}_hit_ci_high"), r.hit_fraction.ci[1]);
        rec.value(&format!("{name}_is"), r.importance.estimate);
        rec.value(&format!("{name}_is_ci_low"), r.importance.ci[0]);
        rec.value(&format!("{name}_is_ci_high"), r.importance.ci[1]);
        rec.value(&format!("{name}_is_std_error"), r.importance.std_error);
        rec.value(&format!("{name}_soc"), r.soc.estimate);
        rec.value(&format!("{name}_tau_b_mean"), r.tau_b_mean);
        rec.value(&format!("{name}_tau_b_std"), r.tau_b_std);
        rec.value(&format!("{name}_censored"), r.censored as f64);
        rec.value(&format!("{name}_cost_steps"), r.importance.cost_steps as f64);
    }
    // Fine steps the plain estimator would need to match the guided interval.
    let matched = plain.importance.cost_steps as f64 * (plain.importance.std_error / guided.importance.std_error).powi(2);
    rec.value("cost_ratio_matched_width", matched / guided.importance.cost_steps as f64);
    rec.detail("plain", &plain)?;
    rec.detail("guided", &guided)
}

fn spectral(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let m = land.effective(cfg)?;
    let t = &cfg.transition;
    let bk_cfg = TransitionConfig {
        horizon: t.spectral_lag,
        ..t.clone()
    };
    let table = latent_table(&m, &bk_cfg)?;
    let sa = m.spectral_approx(t.z_star, t.spectral_lag, 0.0, P_FLOOR);
    let bk = table.row(0);
    let [lo, hi] = t.spectral_window;
    let sup = m
        .z
        .iter()
        .enumerate()
        .filter(|(_, z)| **z >= lo - 1e-12 && **z <= hi + 1e-12)
        .map(|(i, _)| (bk[i] - sa.p[i]).abs())
        .fold(0.0, f64::max);
    rec.value("sup_difference", sup);
    rec.value("pi_b", sa.pi_b);
    rec.value("a", sa.a);
    rec.value("gamma", sa.gamma);
    let file = rec.file("spectral_vs_bk.csv");
    write_rows(&file, "z,p_bk,p_spectral", (0..m.z.len()).map(|i| vec![m.z[i], bk[i], sa.p[i]]))
}

fn highd(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let land = Landscape::build(cfg, 2)?;
    let s = &cfg.system;
    let h = &cfg.highd;
    let spec = SystemSpec::rotated_random(s.alpha, s.beta, s.gamma, h.omegas.clone(), s.sigma, h.rotation_seed)?;
    let rot = spec.rotation();
    let cv = CollectiveVariable::rotated_chi(Arc::new(land.chi.table.clone()), &rot)?;
    let d = spec.dim();
    // Embed the 2D points: x = Rᵀ (x₁, x₂, 0, …, 0).
    let lift = |p: &[f64]| -> Vec<f64> {
        let mut w = vec![0.0; d];
        w[0] = p[0];
        w[1] = p[1];
        let v = rot.transpose() * nalgebra::DVector::from_vec(w);
        v.iter().copied().collect()
    };
    let b = &cfg.bridge;
    let (x0, target) = (lift(&b.x0), lift(&b.target));
    let (z0, z1) = (cv.eval1(&x0).0, cv.eval1(&target).0);
    let knots = (b.horizon / b.knot_dt).round() as usize + 1;
    let reference = ReferencePath::linear_ramp(0.0, b.horizon, z0, z1, knots)?;
    let law = ControlLaw::tracking(cv, reference, b.gain.clone(), b.rho)?;
    rec.value("dim", d as f64);
    rec.value("z_start", z0);
    rec.value("z_target", z1);
    run_bridge(cfg, rec, &spec, &law, &[x0])?;
    Ok(())
}

/// One compared field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldCheck {
    pub field: String,
    pub a: f64,
    pub b: f64,
    pub rel_diff: f64,
    pub rel_tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub experiment: String,
    pub checks: Vec<FieldCheck>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// A reference entry: target value, relative tolerance and a provenance tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceField {
    pub value: f64,
    pub rel_tol: f64,
    #[serde(default)]
    pub provenance: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

/// Relative difference `|a - b| / |b|`, or `|a - b|` when `b = 0`.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        (a - b).abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn values_of(doc: &Value, label: &str) -> Result<BTreeMap<String, f64>> {
    let obj = doc
        .get("values")
        .and_then(Value::as_object)
        .ok_or_else(|| schema(format!("{label}: missing `values` object")))?;
    obj.iter()
        .map(|(k, v)| {
            v.as_f64()
                .map(|x| (k.clone(), x))
                .ok_or_else(|| schema(format!("{label}: field `{k}` is not a number")))
        })
        .collect()
}

/// Compares result document `a` against `b`, which is either another results
/// document (every field of `b` checked with `default_tol`) or a reference
/// document with per-field tolerances under `fields`.
pub fn compare_values(a: &Value, b: &Value, default_tol: f64) -> Result<CompareReport> {
    let exp = |d: &Value, label: &str| -> Result<String> {
        d.get("experiment")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| schema(format!("{label}: missing `experiment`")))
    };
    let (ea, eb) = (exp(a, "a")?, exp(b, "b")?);
    if ea != eb {
        return Err(schema(format!("experiment mismatch: `{ea}` vs `{eb}`")));
    }
    let got = values_of(a, "a")?;
    let expected: Vec<(String, f64, f64)> = match b.get("fields") {
        Some(fields) => {
            let map: BTreeMap<String, ReferenceField> =
                serde_json::from_value(fields.clone()).map_err(|e| schema(format!("b: bad `fields`: {e}")))?;
            map.into_iter().map(|(k, f)| (k, f.value, f.rel_tol)).collect()
        }
        None => values_of(b, "b")?.into_iter().map(|(k, v)| (k, v, default_tol)).collect(),
    };
    let mut checks = Vec::new();
    for (field, target, tol) in expected {
        let a = *got.get(&field).ok_or_else(|| schema(format!("a: missing field `{field}`")))?;
        let rel_diff = relative_difference(a, target);
        let pass = rel_diff <= tol || a.to_bits() == target.to_bits();
        checks.push(FieldCheck {
            field,
            a,
            b: target,
            rel_diff,
            rel_tol: tol,
            pass,
        });
    }
    Ok(CompareReport { experiment: ea, checks })
}

pub fn compare_files(a: &Path, b: &Path, default_tol: f64) -> Result<CompareReport> {
    let read = |p: &Path| -> Result<Value> {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        serde_json::from_str(&text).map_err(|e| schema(format!("{}: {e}", p.display())))
    };
    compare_values(&read(a)?, &read(b)?, default_tol)
}

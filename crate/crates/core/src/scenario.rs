//! Config-driven Segway scenarios: simulate with and without a learned
//! residual, train a residual episodically, and sweep a config parameter.
//!
//! Artifacts are plain CSV/JSON files; given the same config they are
//! byte-identical from run to run.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::barrier::{
    BarrierFunction, EllipseBarrier, EllipseParams, FilterMode, FilteredController, ResidualEstimate,
};
use crate::dynamics::{
    segway_nominal, segway_true, simulate, step_count, ControlAffineSystem, Controller, PerturbationSpec, Segway,
    SegwayParams, Trajectory,
};
use crate::format::fmt_f64;
use crate::learning::{
    episodic_train, EpisodeHistory, EpisodicConfig, EpisodicSetup, FeatureKind, FeatureSpec,
    LearningError, MeasurementNoise, ResidualModel,
};
use crate::pssf::{delta_bound, make_certificate, verify_certificate, CertificateJson, CertificateReport, DeltaTrace};

/// Number of states sampled for the `sup ‖f − f̂‖` metadata.
pub const MODEL_GAP_SAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("learning failed: {0}")]
    Learning(#[from] LearningError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Learning(LearningError::AllEpisodesTerminated | LearningError::EarlyTermination(_)) => 3,
            RunError::Learning(_) | RunError::Io { .. } => 1,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> RunError {
    RunError::Config(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default)]
    pub params: SegwayParams,
    /// Scalings applied to `params` to obtain the nominal model.
    #[serde(default = "PerturbationSpec::benchmark")]
    pub perturbation: PerturbationSpec,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            params: SegwayParams::default(),
            perturbation: PerturbationSpec::benchmark(),
        }
    }
}

/// `θ_ref(t) = offset + amplitude·sin(2π·frequency·t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            offset: 0.0,
            amplitude: 0.4,
            frequency: 0.4,
        }
    }
}

/// Seeded multi-sine torque added to the desired input while collecting
/// training data. `amplitude` bounds the sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationSpec {
    pub amplitude: f64,
    pub components: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        Self {
            amplitude: 10.0,
            components: 3,
            min_frequency: 0.3,
            max_frequency: 3.0,
        }
    }
}

/// Which constraint the safety filter imposes; see [`FilterMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Pointwise,
    SampledData,
}

impl FilterKind {
    pub fn mode(self, dt: f64) -> FilterMode {
        match self {
            FilterKind::Pointwise => FilterMode::Pointwise,
            FilterKind::SampledData => FilterMode::SampledData { dt },
        }
    }
}

/// PD pitch tracking, `τ = kp(θ − θ_ref) + kd(θ̇ − θ̇_ref) + kv·ṗ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kp: f64,
    pub kd: f64,
    pub kv: f64,
    pub filter: FilterKind,
    pub reference: ReferenceSpec,
    pub excitation: ExcitationSpec,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kp: 150.0,
            kd: 15.0,
            kv: 0.0,
            filter: FilterKind::SampledData,
            reference: ReferenceSpec::default(),
            excitation: ExcitationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningConfig {
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Length of each training and validation rollout in seconds.
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_features")]
    pub features: FeatureSpec,
    #[serde(default = "default_lambda")]
    pub ridge_lambda: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda_schedule: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<MeasurementNoise>,
    /// Half-widths of the seeded uniform perturbation of `run.x0` used as
    /// each episode's initial state. Draws outside the safe set are redrawn.
    #[serde(default = "default_spread")]
    pub x0_spread: Vec<f64>,
    /// Also write the aggregated training data as `dataset.csv`.
    #[serde(default)]
    pub export_dataset: bool,
}

fn default_episodes() -> usize {
    5
}
fn default_duration() -> f64 {
    10.0
}
fn default_features() -> FeatureSpec {
    FeatureSpec {
        kind: FeatureKind::Polynomial { max_degree: 2 },
        coordinates: vec![1, 2, 3],
    }
}
fn default_lambda() -> f64 {
    10.0
}
fn default_spread() -> Vec<f64> {
    vec![0.0, 0.1, 0.05, 0.1]
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            episodes: default_episodes(),
            duration: default_duration(),
            features: default_features(),
            ridge_lambda: default_lambda(),
            lambda_schedule: Vec::new(),
            noise: None,
            x0_spread: default_spread(),
            export_dataset: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub duration: f64,
    pub dt: f64,
    pub seed: u64,
    pub x0: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            dt: 1e-3,
            seed: 0,
            x0: vec![0.0; 4],
        }
    }
}

/// One scenario file. Omitting `[learning]` disables the `learn` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub barrier: EllipseParams,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning: Option<LearningConfig>,
    #[serde(default)]
    pub run: RunConfig,
}

impl Default for ScenarioConfig {
    /// The benchmark scenario, learning enabled.
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            barrier: EllipseParams::default(),
            controller: ControllerConfig::default(),
            learning: Some(LearningConfig::default()),
            run: RunConfig::default(),
        }
    }
}

fn check_finite(name: &str, v: f64) -> Result<(), RunError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(RunError::Config(format!("{name} must be finite, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config is always representable as TOML")
    }

    /// Everything that can be checked without running a rollout.
    pub fn validate(&self) -> Result<(), RunError> {
        let scenario = Scenario::build(self)?;

        let c = &self.controller;
        for (name, v) in [
            ("controller.kp", c.kp),
            ("controller.kd", c.kd),
            ("controller.kv", c.kv),
            ("controller.reference.offset", c.reference.offset),
            ("controller.reference.amplitude", c.reference.amplitude),
            ("controller.reference.frequency", c.reference.frequency),
        ] {
            check_finite(name, v)?;
        }
        let e = &c.excitation;
        if !(e.amplitude.is_finite() && e.amplitude >= 0.0) {
            return Err(config_err("controller.excitation.amplitude must be >= 0"));
        }
        if e.amplitude > 0.0
            && (e.components == 0
                || !(e.min_frequency > 0.0 && e.min_frequency <= e.max_frequency && e.max_frequency.is_finite()))
        {
            return Err(config_err(
                "controller.excitation needs components > 0 and 0 < min_frequency <= max_frequency",
            ));
        }

        let r = &self.run;
        if !(r.dt.is_finite() && r.dt > 0.0) || !(r.duration.is_finite() && r.duration >= 0.0) {
            return Err(config_err("run.dt must be > 0 and run.duration >= 0"));
        }
        step_count(r.duration, r.dt).map_err(|e| RunError::Config(format!("run: {e}")))?;
        if r.x0.len() != 4 || r.x0.iter().any(|v| !v.is_finite()) {
            return Err(config_err("run.x0 must hold 4 finite values (p, p_dot, theta, theta_dot)"));
        }
        let h0 = scenario.barrier.value(&self.x0());
        if h0 < 0.0 {
            return Err(RunError::Config(format!("run.x0 lies outside the safe set (h = {h0})")));
        }

        if let Some(l) = &self.learning {
            if l.episodes == 0 {
                return Err(config_err("learning.episodes must be > 0"));
            }
            if !(l.duration.is_finite() && l.duration > 0.0) {
                return Err(config_err("learning.duration must be > 0"));
            }
            step_count(l.duration, r.dt).map_err(|e| RunError::Config(format!("learning: {e}")))?;
            l.features.validate(4).map_err(config_err)?;
            if !(l.ridge_lambda.is_finite() && l.ridge_lambda > 0.0)
                || l.lambda_schedule.iter().any(|v| !(v.is_finite() && *v > 0.0))
            {
                return Err(config_err("learning.ridge_lambda and lambda_schedule entries must be > 0"));
            }
            if let Some(n) = &l.noise {
                if !(n.std.is_finite() && n.std >= 0.0) {
                    return Err(config_err("learning.noise.std must be >= 0"));
                }
            }
            if l.x0_spread.len() != 4 || l.x0_spread.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(config_err("learning.x0_spread must hold 4 values >= 0"));
            }
        }
        Ok(())
    }

    pub fn filter_mode(&self) -> FilterMode {
        self.controller.filter.mode(self.run.dt)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.run.x0)
    }
}

/// Instantiated models for one config.
pub struct Scenario {
    pub true_sys: Segway,
    pub nominal_sys: Segway,
    pub barrier: EllipseBarrier,
}

impl Scenario {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self, RunError> {
        Ok(Self {
            true_sys: segway_true(&cfg.system.params).map_err(|e| RunError::Config(format!("system.params: {e}")))?,
            nominal_sys: segway_nominal(&cfg.system.params, &cfg.system.perturbation)
                .map_err(|e| RunError::Config(format!("system.perturbation: {e}")))?,
            barrier: cfg.barrier.build().map_err(|e| RunError::Config(format!("barrier: {e}")))?,
        })
    }
}

/// Desired controller: PD tracking of a sinusoidal pitch reference plus
/// optional excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTracker {
    kp: f64,
    kd: f64,
    kv: f64,
    reference: ReferenceSpec,
    /// `(amplitude, frequency, phase)` per sinusoid.
    excitation: Vec<(f64, f64, f64)>,
}

impl PitchTracker {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Self {
            kp: cfg.kp,
            kd: cfg.kd,
            kv: cfg.kv,
            reference: cfg.reference.clone(),
            excitation: Vec::new(),
        }
    }

    /// Same tracker with the configured excitation drawn from `seed`.
    pub fn exciting(cfg: &ControllerConfig, seed: u64) -> Self {
        let e = &cfg.excitation;
        let mut tracker = Self::new(cfg);
        if e.amplitude > 0.0 && e.components > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let amp = e.amplitude / e.components as f64;
            tracker.excitation = (0..e.components)
                .map(|_| {
                    let f = rng.random_range(e.min_frequency..=e.max_frequency);
                    (amp, f, rng.random_range(0.0..TAU))
                })
                .collect();
        }
        tracker
    }

    pub fn reference(&self, t: f64) -> (f64, f64) {
        let r = &self.reference;
        let w = TAU * r.frequency;
        (r.offset + r.amplitude * (w * t).sin(), r.amplitude * w * (w * t).cos())
    }

    pub fn excitation(&self, t: f64) -> f64 {
        self.excitation
            .iter()
            .map(|(a, f, phi)| a * (TAU * f * t + phi).sin())
            .sum()
    }
}

impl Controller for PitchTracker {
    fn control(&mut self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let (theta_r, omega_r) = self.reference(t);
        let tau = self.kp * (x[2] - theta_r) + self.kd * (x[3] - omega_r) + self.kv * x[1] + self.excitation(t);
        DVector::from_element(1, tau)
    }
}

fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed ^ (episode as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Initial state of a training episode: `run.x0` perturbed uniformly within
/// `spread`, redrawn until it lies in the safe set.
pub fn episode_initial_state(
    x0: &DVector<f64>,
    spread: &[f64],
    bar: &dyn BarrierFunction,
    seed: u64,
    episode: usize,
) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, episode).rotate_left(17));
    for _ in 0..1000 {
        let x = DVector::from_iterator(
            x0.len(),
            x0.iter().zip(spread).map(|(v, s)| if *s > 0.0 { v + rng.random_range(-s..=*s) } else { *v }),
        );
        if bar.value(&x) >= 0.0 {
            return x;
        }
    }
    x0.clone()
}

/// `sup ‖f(x) − f̂(x)‖` over seeded samples of a box around the safe set.
pub fn model_gap_sup(scenario: &Scenario, cfg: &ScenarioConfig, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let half = [1.0, 2.0, cfg.barrier.theta_max, cfg.barrier.omega_max];
    (0..samples)
        .map(|_| {
            let x = DVector::from_iterator(4, half.iter().map(|h| rng.random_range(-h..=*h)));
            (scenario.true_sys.drift(&x) - scenario.nominal_sys.drift(&x)).norm()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub delta_bar: f64,
    pub floor: f64,
    pub min_h: f64,
    pub pass: bool,
    pub filter_modified_steps: usize,
    pub filter_infeasible_steps: usize,
    /// Time of early termination, if any.
    pub terminated_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub k: f64,
    pub dt: f64,
    pub duration: f64,
    pub no_learning: ModeSummary,
    pub learned: Option<ModeSummary>,
    /// `sup ‖f − f̂‖` over sampled states.
    pub model_gap_sup: f64,
    pub model_gap_samples: usize,
}

impl SimulationSummary {
    /// 0 ok, 3 early termination, 4 certificate failure.
    pub fn exit_code(&self) -> i32 {
        let modes = std::iter::once(&self.no_learning).chain(self.learned.as_ref());
        let modes: Vec<_> = modes.collect();
        if modes.iter().any(|m| m.terminated_at.is_some()) {
            3
        } else if modes.iter().any(|m| !m.pass) {
            4
        } else {
            0
        }
    }
}

/// Closed-loop outcome of one filter mode.
pub struct ModeOutcome {
    pub trajectory: Trajectory,
    pub trace: DeltaTrace,
    pub report: CertificateReport,
    pub summary: ModeSummary,
}

pub struct SimulationOutcome {
    pub no_learning: ModeOutcome,
    pub learned: Option<ModeOutcome>,
    pub summary: SimulationSummary,
}

fn run_mode(
    cfg: &ScenarioConfig,
    scenario: &Scenario,
    residual: Option<&dyn ResidualEstimate>,
) -> Result<ModeOutcome, RunError> {
    let mut ctrl = FilteredController::new(
        &scenario.barrier,
        &scenario.nominal_sys,
        residual,
        Box::new(PitchTracker::new(&cfg.controller)),
    )
    .with_mode(cfg.filter_mode());
    let trajectory = simulate(&scenario.true_sys, &mut ctrl, &cfg.x0(), cfg.run.duration, cfg.run.dt, None)
        .map_err(|e| RunError::Config(format!("run: {e}")))?;
    let trace = DeltaTrace::along(&trajectory, &scenario.barrier, &scenario.true_sys, &scenario.nominal_sys, residual);
    let report = match delta_bound(&trace) {
        Ok(delta_bar) => {
            let cert = make_certificate(scenario.barrier.alpha(), delta_bar).map_err(config_err)?;
            let mut report = verify_certificate(&trajectory, &scenario.barrier, &cert);
            report.k = Some(cfg.barrier.k);
            report
        }
        // Zero duration: nothing to bound, the certificate is the safe set itself.
        Err(_) => {
            let cert = make_certificate(scenario.barrier.alpha(), 0.0).map_err(config_err)?;
            let mut report = verify_certificate(&trajectory, &scenario.barrier, &cert);
            report.k = Some(cfg.barrier.k);
            report
        }
    };
    let summary = ModeSummary {
        delta_bar: report.delta_bar,
        floor: report.floor,
        min_h: report.min_h,
        pass: report.passed(),
        filter_modified_steps: ctrl.stats.modified,
        filter_infeasible_steps: ctrl.stats.infeasible,
        terminated_at: trajectory.terminated_early.as_ref().map(|t| t.time),
    };
    Ok(ModeOutcome {
        trajectory,
        trace,
        report,
        summary,
    })
}

/// Runs the scenario without and (if a model is given) with the learned
/// residual in the filter, and certifies both trajectories.
pub fn run_simulation(cfg: &ScenarioConfig, model: Option<&ResidualModel>) -> Result<SimulationOutcome, RunError> {
    cfg.validate()?;
    let scenario = Scenario::build(cfg)?;
    if let Some(m) = model {
        check_model(m)?;
    }
    let no_learning = run_mode(cfg, &scenario, None)?;
    let learned = model
        .map(|m| run_mode(cfg, &scenario, Some(m as &dyn ResidualEstimate)))
        .transpose()?;
    let summary = SimulationSummary {
        k: cfg.barrier.k,
        dt: cfg.run.dt,
        duration: cfg.run.duration,
        no_learning: no_learning.summary.clone(),
        learned: learned.as_ref().map(|l| l.summary.clone()),
        model_gap_sup: model_gap_sup(&scenario, cfg, MODEL_GAP_SAMPLES),
        model_gap_samples: MODEL_GAP_SAMPLES,
    };
    Ok(SimulationOutcome {
        no_learning,
        learned,
        summary,
    })
}

fn check_model(m: &ResidualModel) -> Result<(), RunError> {
    let d = m.features.dimension();
    if m.input_dim() != 1 || m.w_b.len() != d || m.w_a.iter().any(|r| r.len() != d) {
        return Err(config_err("model weights do not match a 1-input Segway residual"));
    }
    m.features.spec().validate(4).map_err(config_err)
}

pub fn load_model(path: &Path) -> Result<ResidualModel, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let model = ResidualModel::from_json(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    check_model(&model)?;
    Ok(model)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

fn write_mode(out: &Path, suffix: &str, mode: &ModeOutcome) -> Result<(), RunError> {
    write_file(&out.join(format!("trajectory_{suffix}.csv")), |w| mode.trajectory.write_csv(w))?;
    write_file(&out.join(format!("delta_{suffix}.csv")), |w| mode.trace.write_csv(w))?;
    let cert: CertificateJson = mode.report.to_json();
    write_json(&out.join(format!("certificate_{suffix}.json")), &cert)
}

fn prepare_out(out: &Path) -> Result<(), RunError> {
    fs::create_dir_all(out).map_err(io_err(out))
}

/// `simulate`: writes `trajectory_*.csv`, `delta_*.csv`,
/// `certificate_*.json` for the `no_learning` and (with a model) `learned`
/// modes, plus `summary.json` and `resolved_config.toml`.
pub fn cmd_simulate(
    cfg: &ScenarioConfig,
    model: Option<&ResidualModel>,
    out: &Path,
) -> Result<SimulationSummary, RunError> {
    let outcome = run_simulation(cfg, model)?;
    prepare_out(out)?;
    write_file(&out.join("resolved_config.toml"), |w| w.write_all(cfg.to_toml().as_bytes()))?;
    write_mode(out, "no_learning", &outcome.no_learning)?;
    if let Some(l) = &outcome.learned {
        write_mode(out, "learned", l)?;
    }
    write_json(&out.join("summary.json"), &outcome.summary)?;
    Ok(outcome.summary)
}

/// Episodic training as configured by the `[learning]` block.
pub fn run_learning(cfg: &ScenarioConfig) -> Result<(ResidualModel, EpisodeHistory), RunError> {
    cfg.validate()?;
    let l = cfg
        .learning
        .as_ref()
        .ok_or_else(|| config_err("the learn command needs a [learning] block"))?;
    let scenario = Scenario::build(cfg)?;
    let episodic = EpisodicConfig {
        episodes: l.episodes,
        duration: l.duration,
        dt: cfg.run.dt,
        features: l.features.clone(),
        ridge_lambda: l.ridge_lambda,
        lambda_schedule: l.lambda_schedule.clone(),
        noise: l.noise.clone(),
    };
    let seed = cfg.run.seed;
    let controller = &cfg.controller;
    let desired = move |ep: usize, explore: bool| -> Box<dyn Controller> {
        if explore {
            Box::new(PitchTracker::exciting(controller, episode_seed(seed, ep)))
        } else {
            Box::new(PitchTracker::new(controller))
        }
    };
    let x0 = cfg.x0();
    let initial = |ep: usize| episode_initial_state(&x0, &l.x0_spread, &scenario.barrier, seed, ep);
    let setup = EpisodicSetup {
        true_sys: &scenario.true_sys,
        nominal_sys: &scenario.nominal_sys,
        barrier: &scenario.barrier,
        desired: &desired,
        initial_state: &initial,
        validation_state: x0.clone(),
        filter_mode: cfg.filter_mode(),
    };
    Ok(episodic_train(&episodic, &setup)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnSummary {
    pub baseline_delta_bar: f64,
    pub final_validation_delta_bar: Option<f64>,
    pub episodes: usize,
    pub skipped_episodes: usize,
    pub rows: usize,
    pub training_rms: f64,
    pub condition_estimate: f64,
    pub ill_conditioned: bool,
}

/// `learn`: writes `model.json`, `metrics.csv`, `learn_summary.json`,
/// `resolved_config.toml` and optionally `dataset.csv`.
pub fn cmd_learn(cfg: &ScenarioConfig, out: &Path) -> Result<LearnSummary, RunError> {
    let (model, history) = run_learning(cfg)?;
    prepare_out(out)?;
    write_file(&out.join("resolved_config.toml"), |w| w.write_all(cfg.to_toml().as_bytes()))?;
    write_file(&out.join("model.json"), |w| {
        w.write_all(model.to_json().map_err(io::Error::other)?.as_bytes())?;
        writeln!(w)
    })?;
    write_file(&out.join("metrics.csv"), |w| history.write_csv(w))?;
    if cfg.learning.as_ref().is_some_and(|l| l.export_dataset) {
        write_file(&out.join("dataset.csv"), |w| history.data.write_csv(w))?;
    }
    let summary = LearnSummary {
        baseline_delta_bar: history.baseline_delta_bar,
        final_validation_delta_bar: history.episodes.last().and_then(|e| e.validation_delta_bar),
        episodes: history.episodes.len(),
        skipped_episodes: history.episodes.iter().filter(|e| e.skipped_reason.is_some()).count(),
        rows: history.data.len(),
        training_rms: model.training_rms,
        condition_estimate: model.condition_estimate,
        ill_conditioned: model.ill_conditioned,
    };
    write_json(&out.join("learn_summary.json"), &summary)?;
    Ok(summary)
}

/// Sets the numeric leaf at a dotted path (`run.dt`, `barrier.k`, ...).
/// Integer leaves stay integers when the value is integral.
pub fn set_dotted(cfg: &ScenarioConfig, path: &str, value: f64) -> Result<ScenarioConfig, RunError> {
    let mut root = toml::Value::try_from(cfg).map_err(config_err)?;
    let mut node = &mut root;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys {
        node = node
            .get_mut(*key)
            .ok_or_else(|| RunError::Config(format!("no config entry at {path:?}")))?;
    }
    *node = match node {
        toml::Value::Float(_) => toml::Value::Float(value),
        toml::Value::Integer(_) if value.fract() == 0.0 && value.abs() < 9.0e15 => toml::Value::Integer(value as i64),
        toml::Value::Integer(_) => return Err(RunError::Config(format!("{path} is an integer, got {value}"))),
        _ => return Err(RunError::Config(format!("{path} is not a numeric leaf"))),
    };
    let updated: ScenarioConfig = root.try_into().map_err(config_err)?;
    updated.validate()?;
    Ok(updated)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub result: Result<SimulationSummary, String>,
}

pub fn parse_values(list: &str) -> Result<Vec<f64>, RunError> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| RunError::Config(format!("sweep value {s:?}: {e}")))
        })
        .collect()
}

/// `sweep`: one `cmd_simulate` per value in `run_NNN/`, rows in
/// `sweep.csv`. Failed runs are recorded in their row.
pub fn cmd_sweep(
    cfg: &ScenarioConfig,
    param: &str,
    values: &[f64],
    model: Option<&ResidualModel>,
    out: &Path,
) -> Result<Vec<SweepRow>, RunError> {
    cfg.validate()?;
    // Catch a bad path before fanning out.
    set_dotted(cfg, param, values.first().copied().ok_or_else(|| config_err("no sweep values"))?)
        .or_else(|e| match e {
            RunError::Config(msg) if msg.starts_with("no config entry") || msg.contains("not a numeric") => {
                Err(RunError::Config(msg))
            }
            _ => Ok(cfg.clone()),
        })?;
    prepare_out(out)?;
    let rows: Vec<SweepRow> = values
        .par_iter()
        .enumerate()
        .map(|(i, &value)| {
            let result = set_dotted(cfg, param, value)
                .and_then(|c| cmd_simulate(&c, model, &out.join(format!("run_{i:03}"))))
                .map_err(|e| e.to_string());
            SweepRow { value, result }
        })
        .collect();
    write_file(&out.join("sweep.csv"), |w| write_sweep_csv(w, param, &rows))?;
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut w: W, param: &str, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(
        w,
        "{param},status,delta_bar_no_learning,delta_bar_learned,floor_no_learning,floor_learned,min_h_no_learning,min_h_learned,error"
    )?;
    for r in rows {
        match &r.result {
            Ok(s) => {
                let l = s.learned.as_ref();
                let opt = |f: fn(&ModeSummary) -> f64| l.map(|m| fmt_f64(f(m))).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},",
                    fmt_f64(r.value),
                    s.exit_code(),
                    fmt_f64(s.no_learning.delta_bar),
                    opt(|m| m.delta_bar),
                    fmt_f64(s.no_learning.floor),
                    opt(|m| m.floor),
                    fmt_f64(s.no_learning.min_h),
                    opt(|m| m.min_h),
                )?;
            }
            Err(msg) => {
                let msg = msg.replace([',', '\n', '\r'], " ");
                writeln!(w, "{},error,,,,,,,{msg}", fmt_f64(r.value))?;
            }
        }
    }
    Ok(())
}

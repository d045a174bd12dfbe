//! Episodic learning of the barrier-derivative residual `b(x) + a(x)ᵀu`.
//!
//! Each episode rolls the true system out under the current safety-filtered
//! controller, measures `ḣ` by finite differences, and refits a ridge model
//! on everything collected so far. The next episode filters with the
//! updated model in the constraint.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};
use thiserror::Error;

use crate::barrier::{h_dot, BarrierFunction, FilterMode, FilteredController, ResidualEstimate};
use crate::dynamics::{simulate, ControlAffineSystem, Controller, DynamicsError, Termination};
use crate::format::fmt_f64;
use crate::pssf::{delta_bound, DeltaTrace};

/// Regularized Gram matrices above this condition number are flagged.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("ridge_lambda must be > 0, got {0}")]
    InvalidLambda(f64),
    #[error("invalid feature specification: {0}")]
    InvalidFeatures(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("episode terminated early at t = {}: {:?}", .0.time, .0.reason)]
    EarlyTermination(Termination),
    #[error("every episode terminated early")]
    AllEpisodesTerminated,
    #[error("normal equations could not be solved")]
    Singular,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("dataset csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureKind {
    /// All monomials of total degree ≤ `max_degree`, constant included.
    Polynomial { max_degree: u32 },
    /// `sqrt(2/count)·cos(ωᵀz + b)`, `ω ~ N(0, I/bandwidth²)`, `b ~ U[0, 2π)`.
    RandomFourier { count: usize, bandwidth: f64, seed: u64 },
}

/// Which state coordinates feed the features, and how they are expanded.
/// Unknown keys are rejected by the flattened `kind` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    #[serde(flatten)]
    pub kind: FeatureKind,
    pub coordinates: Vec<usize>,
}

impl FeatureSpec {
    pub fn validate(&self, state_dim: usize) -> Result<(), LearningError> {
        if self.coordinates.is_empty() {
            return Err(LearningError::InvalidFeatures("no coordinates selected".into()));
        }
        if let Some(&c) = self.coordinates.iter().find(|&&c| c >= state_dim) {
            return Err(LearningError::InvalidFeatures(format!(
                "coordinate {c} out of range for state dimension {state_dim}"
            )));
        }
        match self.kind {
            FeatureKind::Polynomial { .. } => Ok(()),
            FeatureKind::RandomFourier { count, bandwidth, .. } => {
                if count == 0 || !(bandwidth > 0.0) {
                    Err(LearningError::InvalidFeatures(
                        "random Fourier features need count > 0 and bandwidth > 0".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Expansion {
    Monomials(Vec<Vec<u32>>),
    Fourier { omegas: Vec<Vec<f64>>, phases: Vec<f64> },
}

/// Normalized feature map `φ(x)`: selected coordinates are shifted and
/// scaled (`z = (x − offset) / scale`) before expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureMapRepr", into = "FeatureMapRepr")]
pub struct FeatureMap {
    spec: FeatureSpec,
    offsets: Vec<f64>,
    scales: Vec<f64>,
    expansion: Expansion,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureMapRepr {
    spec: FeatureSpec,
    offsets: Vec<f64>,
    scales: Vec<f64>,
}

impl TryFrom<FeatureMapRepr> for FeatureMap {
    type Error = LearningError;
    fn try_from(r: FeatureMapRepr) -> Result<Self, Self::Error> {
        FeatureMap::with_normalization(r.spec, r.offsets, r.scales)
    }
}

impl From<FeatureMap> for FeatureMapRepr {
    fn from(f: FeatureMap) -> Self {
        FeatureMapRepr {
            spec: f.spec,
            offsets: f.offsets,
            scales: f.scales,
        }
    }
}

fn monomials(vars: usize, max_degree: u32) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, vars: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == vars {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=remaining {
            prefix.push(e);
            rec(prefix, vars, remaining - e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), vars, max_degree, &mut out);
    // Graded order: by total degree, then lexicographically descending.
    out.sort_by(|a, b| {
        let (da, db): (u32, u32) = (a.iter().sum(), b.iter().sum());
        da.cmp(&db).then_with(|| b.cmp(a))
    });
    out
}

impl FeatureMap {
    /// Build with an explicit normalization.
    pub fn with_normalization(
        spec: FeatureSpec,
        offsets: Vec<f64>,
        scales: Vec<f64>,
    ) -> Result<Self, LearningError> {
        let k = spec.coordinates.len();
        if k == 0 || offsets.len() != k || scales.len() != k {
            return Err(LearningError::InvalidFeatures(
                "normalization must have one offset and one scale per coordinate".into(),
            ));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) || offsets.iter().any(|o| !o.is_finite()) {
            return Err(LearningError::InvalidFeatures("normalization must be finite with scales > 0".into()));
        }
        let expansion = match spec.kind {
            FeatureKind::Polynomial { max_degree } => Expansion::Monomials(monomials(k, max_degree)),
            FeatureKind::RandomFourier { count, bandwidth, seed } => {
                if count == 0 || !(bandwidth > 0.0) {
                    return Err(LearningError::InvalidFeatures(
                        "random Fourier features need count > 0 and bandwidth > 0".into(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, 1.0 / bandwidth).expect("bandwidth > 0");
                let omegas = (0..count)
                    .map(|_| (0..k).map(|_| normal.sample(&mut rng)).collect())
                    .collect();
                let phases = (0..count)
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                Expansion::Fourier { omegas, phases }
            }
        };
        Ok(Self {
            spec,
            offsets,
            scales,
            expansion,
        })
    }

    /// Fit the normalization (mean, standard deviation) on `states`.
    /// Constant coordinates get scale 1.
    pub fn fit(spec: FeatureSpec, states: &[DVector<f64>]) -> Result<Self, LearningError> {
        if states.is_empty() {
            return Err(LearningError::EmptyDataset);
        }
        spec.validate(states[0].len())?;
        let n = states.len() as f64;
        let mut offsets = Vec::with_capacity(spec.coordinates.len());
        let mut scales = Vec::with_capacity(spec.coordinates.len());
        for &c in &spec.coordinates {
            let mean = states.iter().map(|x| x[c]).sum::<f64>() / n;
            let var = states.iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            offsets.push(mean);
            scales.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        Self::with_normalization(spec, offsets, scales)
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        match &self.expansion {
            Expansion::Monomials(m) => m.len(),
            Expansion::Fourier { phases, .. } => phases.len(),
        }
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        let z: Vec<f64> = self
            .spec
            .coordinates
            .iter()
            .zip(self.offsets.iter().zip(&self.scales))
            .map(|(&c, (o, s))| (x[c] - o) / s)
            .collect();
        match &self.expansion {
            Expansion::Monomials(exps) => DVector::from_iterator(
                exps.len(),
                exps.iter()
                    .map(|e| e.iter().zip(&z).map(|(&p, v)| v.powi(p as i32)).product()),
            ),
            Expansion::Fourier { omegas, phases } => {
                let scale = (2.0 / phases.len() as f64).sqrt();
                DVector::from_iterator(
                    phases.len(),
                    omegas.iter().zip(phases).map(|(w, b)| {
                        scale * (w.iter().zip(&z).map(|(wi, zi)| wi * zi).sum::<f64>() + b).cos()
                    }),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataRow {
    pub episode: usize,
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// Finite-difference `ḣ` from (possibly noisy) measured states.
    pub hdot_target: f64,
    pub hdot_nominal: f64,
    /// `ḣ` of the true model at the noise-free state; not in CSV exports.
    pub hdot_exact: Option<f64>,
    /// Row came from a central difference (false at the first sample).
    pub central: bool,
}

impl DataRow {
    /// Regression target `ḣ_measured − ḣ_nominal`.
    pub fn residual(&self) -> f64 {
        self.hdot_target - self.hdot_nominal
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub rows: Vec<DataRow>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.rows.extend(other.rows);
    }

    /// `episode,t,x1..xn,u1..um,hdot_target,hdot_nominal`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let Some(first) = self.rows.first() else {
            return writeln!(w, "episode,t,hdot_target,hdot_nominal");
        };
        let mut header = vec!["episode".to_string(), "t".to_string()];
        header.extend((1..=first.x.len()).map(|i| format!("x{i}")));
        header.extend((1..=first.u.len()).map(|i| format!("u{i}")));
        header.extend(["hdot_target".to_string(), "hdot_nominal".to_string()]);
        writeln!(w, "{}", header.join(","))?;
        for r in &self.rows {
            let mut row = vec![r.episode.to_string(), fmt_f64(r.t)];
            row.extend(r.x.iter().map(|v| fmt_f64(*v)));
            row.extend(r.u.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(r.hdot_target));
            row.push(fmt_f64(r.hdot_nominal));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, LearningError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| LearningError::Csv("missing header".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with('x')).count();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        if cols.len() != 4 + n + m || cols[0] != "episode" || cols[1] != "t" {
            return Err(LearningError::Csv(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        let mut prev: Option<(usize, f64)> = None;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(LearningError::Csv(format!("line {}: wrong field count", lineno + 2)));
            }
            let num = |i: usize| -> Result<f64, LearningError> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|e| LearningError::Csv(format!("line {}: {e}", lineno + 2)))
            };
            let episode = fields[0]
                .parse::<usize>()
                .map_err(|e| LearningError::Csv(format!("line {}: {e}", lineno + 2)))?;
            let t = num(1)?;
            if let Some((pe, pt)) = prev {
                if pe == episode && t <= pt {
                    return Err(LearningError::Csv(format!(
                        "line {}: rows not time-ordered within episode {episode}",
                        lineno + 2
                    )));
                }
            }
            prev = Some((episode, t));
            let x = DVector::from_iterator(n, (0..n).map(|i| num(2 + i)).collect::<Result<Vec<_>, _>>()?);
            let u = DVector::from_iterator(m, (0..m).map(|i| num(2 + n + i)).collect::<Result<Vec<_>, _>>()?);
            let hdot_target = num(2 + n + m)?;
            if !hdot_target.is_finite() {
                return Err(LearningError::Csv(format!("line {}: non-finite target", lineno + 2)));
            }
            rows.push(DataRow {
                episode,
                t,
                x,
                u,
                hdot_target,
                hdot_nominal: num(3 + n + m)?,
                hdot_exact: None,
                central: true,
            });
        }
        Ok(Self { rows })
    }
}

/// Gaussian noise added to measured states before differencing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementNoise {
    pub std: f64,
    pub seed: u64,
}

/// Rolls `controller` out on the true system and turns the trajectory into
/// regression rows. `ḣ` is differenced on measured states: forward at the
/// first sample, central elsewhere. The final state has no applied input
/// and yields no row.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode(
    true_sys: &dyn ControlAffineSystem,
    nominal_sys: &dyn ControlAffineSystem,
    bar: &dyn BarrierFunction,
    controller: &mut dyn Controller,
    x0: &DVector<f64>,
    duration: f64,
    dt: f64,
    noise: Option<&MeasurementNoise>,
    episode: usize,
) -> Result<Dataset, LearningError> {
    let traj = simulate(true_sys, controller, x0, duration, dt, None)?;
    if let Some(term) = traj.terminated_early {
        return Err(LearningError::EarlyTermination(term));
    }
    let measured: Vec<DVector<f64>> = match noise {
        Some(nz) if nz.std > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(nz.seed.wrapping_add(episode as u64));
            let normal = Normal::new(0.0, nz.std)
                .map_err(|e| LearningError::InvalidFeatures(format!("noise: {e}")))?;
            traj.states
                .iter()
                .map(|x| x.map(|v| v + normal.sample(&mut rng)))
                .collect()
        }
        _ => traj.states.clone(),
    };
    let h: Vec<f64> = measured.iter().map(|x| bar.value(x)).collect();
    let rows = traj
        .inputs
        .iter()
        .enumerate()
        .map(|(j, u)| {
            let central = j > 0;
            let hdot_target = if central {
                (h[j + 1] - h[j - 1]) / (2.0 * dt)
            } else {
                (h[1] - h[0]) / dt
            };
            DataRow {
                episode,
                t: traj.times[j],
                x: measured[j].clone(),
                u: u.clone(),
                hdot_target,
                hdot_nominal: h_dot(bar, nominal_sys, &measured[j], u),
                hdot_exact: Some(h_dot(bar, true_sys, &traj.states[j], u)),
                central,
            }
        })
        .collect();
    Ok(Dataset { rows })
}

/// `b̂(x) = w_b·φ(x)`, `â(x) = W_a φ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualModel {
    pub features: FeatureMap,
    pub w_b: Vec<f64>,
    /// One row per input channel.
    pub w_a: Vec<Vec<f64>>,
    pub ridge_lambda: f64,
    pub training_rms: f64,
    pub condition_estimate: f64,
    pub ill_conditioned: bool,
}

impl ResidualModel {
    pub fn zero(features: FeatureMap, inputs: usize) -> Self {
        let d = features.dimension();
        Self {
            features,
            w_b: vec![0.0; d],
            w_a: vec![vec![0.0; d]; inputs],
            ridge_lambda: 1.0,
            training_rms: 0.0,
            condition_estimate: 1.0,
            ill_conditioned: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_a.len()
    }

    /// All weights stacked as `[w_b, W_a[0], W_a[1], …]`.
    pub fn stacked_weights(&self) -> Vec<f64> {
        let mut w = self.w_b.clone();
        for row in &self.w_a {
            w.extend_from_slice(row);
        }
        w
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

impl ResidualEstimate for ResidualModel {
    fn b_hat(&self, x: &DVector<f64>) -> f64 {
        let phi = self.features.evaluate(x);
        self.w_b.iter().zip(phi.iter()).map(|(w, p)| w * p).sum()
    }

    fn a_hat(&self, x: &DVector<f64>) -> DVector<f64> {
        let phi = self.features.evaluate(x);
        DVector::from_iterator(
            self.w_a.len(),
            self.w_a
                .iter()
                .map(|row| row.iter().zip(phi.iter()).map(|(w, p)| w * p).sum()),
        )
    }
}

/// `b̂(x) + â(x)ᵀu`.
pub fn predict(model: &ResidualModel, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    model.predict(x, u)
}

/// Stacked regressor `[φ(x), u₁φ(x), …, u_mφ(x)]`.
fn regressor(phi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let d = phi.len();
    let mut psi = DVector::zeros(d * (1 + u.len()));
    psi.rows_mut(0, d).copy_from(phi);
    for (i, ui) in u.iter().enumerate() {
        psi.rows_mut(d * (i + 1), d).copy_from(&(phi * *ui));
    }
    psi
}

/// Ridge regression of the residual target on the stacked regressor:
/// `(ΨᵀΨ + λI) w = Ψᵀy`. A poorly conditioned system is still solved and
/// marked `ill_conditioned`.
pub fn fit_residual(
    data: &Dataset,
    features: &FeatureMap,
    ridge_lambda: f64,
) -> Result<ResidualModel, LearningError> {
    if !(ridge_lambda > 0.0 && ridge_lambda.is_finite()) {
        return Err(LearningError::InvalidLambda(ridge_lambda));
    }
    let first = data.rows.first().ok_or(LearningError::EmptyDataset)?;
    let m = first.u.len();
    let d = features.dimension();
    let p = d * (1 + m);

    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut psis = Vec::with_capacity(data.len());
    for row in &data.rows {
        if row.u.len() != m {
            return Err(LearningError::Dimension("inconsistent input dimension across rows".into()));
        }
        let psi = regressor(&features.evaluate(&row.x), &row.u);
        gram.ger(1.0, &psi, &psi, 1.0);
        rhs.axpy(row.residual(), &psi, 1.0);
        psis.push(psi);
    }
    for i in 0..p {
        gram[(i, i)] += ridge_lambda;
    }

    let eig = gram.clone().symmetric_eigen();
    let (emin, emax) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    let condition_estimate = if emin > 0.0 { emax / emin } else { f64::INFINITY };

    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs).ok_or(LearningError::Singular)?,
    };

    let sq: f64 = data
        .rows
        .iter()
        .zip(&psis)
        .map(|(row, psi)| (row.residual() - psi.dot(&w)).powi(2))
        .sum();
    let training_rms = (sq / data.len() as f64).sqrt();
    let ill_conditioned = !(condition_estimate <= CONDITION_LIMIT);
    if ill_conditioned {
        log::warn!("regularized Gram matrix condition estimate {condition_estimate:e}");
    }

    Ok(ResidualModel {
        features: features.clone(),
        w_b: w.rows(0, d).iter().copied().collect(),
        w_a: (0..m).map(|i| w.rows(d * (i + 1), d).iter().copied().collect()).collect(),
        ridge_lambda,
        training_rms,
        condition_estimate,
        ill_conditioned,
    })
}

/// Loop settings for [`episodic_train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodicConfig {
    pub episodes: usize,
    pub duration: f64,
    pub dt: f64,
    pub features: FeatureSpec,
    pub ridge_lambda: f64,
    /// Per-episode λ overrides; episode `i` uses entry `i` when present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda_schedule: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<MeasurementNoise>,
}

impl EpisodicConfig {
    pub fn lambda_for(&self, episode: usize) -> f64 {
        self.lambda_schedule.get(episode).copied().unwrap_or(self.ridge_lambda)
    }
}

/// Scenario pieces the episodic loop needs but does not own.
pub struct EpisodicSetup<'a> {
    pub true_sys: &'a dyn ControlAffineSystem,
    pub nominal_sys: &'a dyn ControlAffineSystem,
    pub barrier: &'a dyn BarrierFunction,
    /// Desired controller for an episode; `explore` asks for excitation.
    pub desired: &'a dyn Fn(usize, bool) -> Box<dyn Controller>,
    pub initial_state: &'a dyn Fn(usize) -> DVector<f64>,
    pub validation_state: DVector<f64>,
    pub filter_mode: FilterMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// `None` when the episode terminated early and was skipped.
    pub training_rms: Option<f64>,
    pub validation_delta_bar: Option<f64>,
    pub rows: usize,
    pub skipped_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeHistory {
    /// Validation δ̄ of the filter without any learned model.
    pub baseline_delta_bar: f64,
    pub episodes: Vec<EpisodeRecord>,
    /// Everything the final model was fitted on.
    pub data: Dataset,
}

impl EpisodeHistory {
    /// `episode,training_rms,validation_delta_bar`; skipped episodes leave
    /// the metric cells empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "episode,training_rms,validation_delta_bar")?;
        let cell = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.episodes {
            writeln!(
                w,
                "{},{},{}",
                r.episode,
                cell(r.training_rms),
                cell(r.validation_delta_bar)
            )?;
        }
        Ok(())
    }
}

/// Validation rollout from the setup's validation state without
/// excitation; returns δ̄ of the chosen δ mode.
pub fn validation_delta_bar(
    setup: &EpisodicSetup,
    residual: Option<&ResidualModel>,
    duration: f64,
    dt: f64,
) -> Result<f64, LearningError> {
    let res = residual.map(|r| r as &dyn ResidualEstimate);
    let mut ctrl = FilteredController::new(setup.barrier, setup.nominal_sys, res, (setup.desired)(0, false))
        .with_mode(setup.filter_mode);
    let traj = simulate(setup.true_sys, &mut ctrl, &setup.validation_state, duration, dt, None)?;
    if let Some(term) = traj.terminated_early {
        return Err(LearningError::EarlyTermination(term));
    }
    let trace = DeltaTrace::along(&traj, setup.barrier, setup.true_sys, setup.nominal_sys, res);
    delta_bound(&trace).map_err(|_| LearningError::EmptyDataset)
}

/// Episode 0 runs the plain filter; every later episode filters with the
/// model fitted on all data gathered so far.
pub fn episodic_train(
    config: &EpisodicConfig,
    setup: &EpisodicSetup,
) -> Result<(ResidualModel, EpisodeHistory), LearningError> {
    config.features.validate(setup.true_sys.state_dim())?;
    if config.episodes == 0 {
        return Err(LearningError::EmptyDataset);
    }
    let baseline_delta_bar = validation_delta_bar(setup, None, config.duration, config.dt)?;

    let mut data = Dataset::default();
    let mut features: Option<FeatureMap> = None;
    let mut model: Option<ResidualModel> = None;
    let mut records = Vec::with_capacity(config.episodes);

    for ep in 0..config.episodes {
        let x0 = (setup.initial_state)(ep);
        let (collected, infeasible) = {
            let res = model.as_ref().map(|r| r as &dyn ResidualEstimate);
            let mut ctrl =
                FilteredController::new(setup.barrier, setup.nominal_sys, res, (setup.desired)(ep, true))
                    .with_mode(setup.filter_mode);
            let collected = collect_episode(
                setup.true_sys,
                setup.nominal_sys,
                setup.barrier,
                &mut ctrl,
                &x0,
                config.duration,
                config.dt,
                config.noise.as_ref(),
                ep,
            );
            (collected, ctrl.stats.infeasible)
        };
        let episode_data = match collected {
            Ok(d) => d,
            Err(LearningError::EarlyTermination(term)) => {
                log::warn!("episode {ep} excluded: terminated early at t = {}", term.time);
                records.push(EpisodeRecord {
                    episode: ep,
                    training_rms: None,
                    validation_delta_bar: None,
                    rows: 0,
                    skipped_reason: Some(format!("{:?}", term.reason)),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        if infeasible > 0 {
            log::warn!("episode {ep}: safety filter infeasible at {infeasible} steps");
        }
        let rows = episode_data.len();
        if features.is_none() {
            let states: Vec<_> = episode_data.rows.iter().map(|r| r.x.clone()).collect();
            features = Some(FeatureMap::fit(config.features.clone(), &states)?);
        }
        data.extend(episode_data);
        let fitted = fit_residual(&data, features.as_ref().expect("fitted above"), config.lambda_for(ep))?;
        let validation = validation_delta_bar(setup, Some(&fitted), config.duration, config.dt);
        let validation_delta_bar = match validation {
            Ok(v) => Some(v),
            Err(LearningError::EarlyTermination(term)) => {
                log::warn!("episode {ep}: validation rollout terminated early at t = {}", term.time);
                None
            }
            Err(e) => return Err(e),
        };
        records.push(EpisodeRecord {
            episode: ep,
            training_rms: Some(fitted.training_rms),
            validation_delta_bar,
            rows,
            skipped_reason: None,
        });
        model = Some(fitted);
    }

    let model = model.ok_or(LearningError::AllEpisodesTerminated)?;
    Ok((
        model,
        EpisodeHistory {
            baseline_delta_bar,
            episodes: records,
            data,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(deg: u32, coords: Vec<usize>) -> FeatureSpec {
        FeatureSpec {
            kind: FeatureKind::Polynomial { max_degree: deg },
            coordinates: coords,
        }
    }

    #[test]
    fn monomial_count_and_order() {
        let m = monomials(3, 2);
        assert_eq!(m.len(), 10);
        assert_eq!(m[0], vec![0, 0, 0]);
        assert_eq!(m[1], vec![1, 0, 0]);
        assert_eq!(monomials(2, 3).len(), 10);
    }

    #[test]
    fn feature_map_normalizes_and_expands() {
        let states: Vec<_> = (0..10).map(|i| DVector::from_vec(vec![i as f64, 5.0])).collect();
        let fm = FeatureMap::fit(poly(2, vec![0, 1]), &states).unwrap();
        assert_eq!(fm.dimension(), 6);
        let phi = fm.evaluate(&DVector::from_vec(vec![4.5, 5.0]));
        assert_eq!(phi[0], 1.0);
        assert_eq!(phi[1], 0.0);
        let rff = FeatureSpec {
            kind: FeatureKind::RandomFourier { count: 16, bandwidth: 1.0, seed: 3 },
            coordinates: vec![0],
        };
        let a = FeatureMap::fit(rff.clone(), &states).unwrap();
        let b = FeatureMap::fit(rff, &states).unwrap();
        let x = DVector::from_vec(vec![2.0, 5.0]);
        assert_eq!(a.evaluate(&x), b.evaluate(&x));
        assert_eq!(a.evaluate(&x).len(), 16);
        assert!(a.evaluate(&x).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn feature_spec_rejects_bad_coordinates() {
        let states = vec![DVector::from_vec(vec![1.0, 2.0])];
        assert!(FeatureMap::fit(poly(2, vec![5]), &states).is_err());
        assert!(FeatureMap::fit(poly(2, vec![]), &states).is_err());
    }

    #[test]
    fn fit_rejects_empty_and_bad_lambda() {
        let states = vec![DVector::from_vec(vec![1.0])];
        let fm = FeatureMap::fit(poly(1, vec![0]), &states).unwrap();
        assert!(matches!(fit_residual(&Dataset::default(), &fm, 1.0), Err(LearningError::EmptyDataset)));
        let data = Dataset {
            rows: vec![DataRow {
                episode: 0,
                t: 0.0,
                x: DVector::from_vec(vec![1.0]),
                u: DVector::from_vec(vec![0.5]),
                hdot_target: 1.0,
                hdot_nominal: 0.0,
                hdot_exact: None,
                central: true,
            }],
        };
        assert!(matches!(fit_residual(&data, &fm, 0.0), Err(LearningError::InvalidLambda(_))));
    }

    #[test]
    fn single_row_prediction_approaches_target() {
        let states = vec![DVector::from_vec(vec![0.3])];
        let fm = FeatureMap::fit(poly(1, vec![0]), &states).unwrap();
        let row = DataRow {
            episode: 0,
            t: 0.0,
            x: DVector::from_vec(vec![0.3]),
            u: DVector::from_vec(vec![0.5]),
            hdot_target: 2.0,
            hdot_nominal: 0.5,
            hdot_exact: None,
            central: true,
        };
        let data = Dataset { rows: vec![row.clone()] };
        let mut prev_err = f64::INFINITY;
        for lambda in [10.0, 1.0, 1e-2, 1e-4, 1e-8] {
            let m = fit_residual(&data, &fm, lambda).unwrap();
            let err = (predict(&m, &row.x, &row.u) - row.residual()).abs();
            assert!(err <= prev_err);
            prev_err = err;
        }
        assert!(prev_err < 1e-6);
    }

    #[test]
    fn prediction_is_affine_in_input() {
        let states: Vec<_> = (0..5).map(|i| DVector::from_vec(vec![i as f64, -(i as f64)])).collect();
        let fm = FeatureMap::fit(poly(2, vec![0, 1]), &states).unwrap();
        let mut model = ResidualModel::zero(fm, 2);
        assert_eq!(predict(&model, &states[2], &DVector::from_vec(vec![1.0, 2.0])), 0.0);
        model.w_b = (0..6).map(|i| i as f64 * 0.3 - 0.5).collect();
        model.w_a = vec![(0..6).map(|i| (i as f64).sin()).collect(), (0..6).map(|i| (i as f64).cos()).collect()];
        let x = DVector::from_vec(vec![0.7, -1.2]);
        let (u1, u2) = (DVector::from_vec(vec![1.0, -3.0]), DVector::from_vec(vec![0.2, 0.4]));
        let mid = (&u1 + &u2) / 2.0;
        let lhs = predict(&model, &x, &mid);
        let rhs = (predict(&model, &x, &u1) + predict(&model, &x, &u2)) / 2.0;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn model_json_round_trip() {
        let states: Vec<_> = (0..5).map(|i| DVector::from_vec(vec![i as f64 * 0.1])).collect();
        let fm = FeatureMap::fit(poly(3, vec![0]), &states).unwrap();
        let mut model = ResidualModel::zero(fm, 1);
        model.w_b = vec![0.1, 1.0 / 3.0, -2.5e-7, 7.0];
        let back = ResidualModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let rows = (0..4)
            .map(|i| DataRow {
                episode: i / 2,
                t: (i % 2) as f64 * 0.001,
                x: DVector::from_vec(vec![0.1 * i as f64, 1.0 / 3.0]),
                u: DVector::from_vec(vec![-0.7 * i as f64]),
                hdot_target: (i as f64).sin(),
                hdot_nominal: (i as f64).cos(),
                hdot_exact: None,
                central: true,
            })
            .collect();
        let data = Dataset { rows };
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("episode,t,x1,x2,u1,hdot_target,hdot_nominal\n"));
        let back = Dataset::read_csv(io::Cursor::new(buf)).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn feature_spec_rejects_unknown_keys() {
        let ok: FeatureSpec = serde_json::from_str(r#"{"kind":"polynomial","max_degree":2,"coordinates":[1]}"#).unwrap();
        assert_eq!(ok, poly(2, vec![1]));
        let typo = serde_json::from_str::<FeatureSpec>(r#"{"kind":"polynomial","max_degre":2,"coordinates":[1]}"#);
        assert!(typo.is_err());
        let extra = serde_json::from_str::<FeatureSpec>(r#"{"kind":"polynomial","max_degree":2,"coordinates":[1],"extra":0}"#);
        assert!(extra.is_err());
    }

    #[test]
    fn dataset_csv_rejects_time_disorder() {
        let text = "episode,t,x1,u1,hdot_target,hdot_nominal\n0,1,0,0,0,0\n0,0.5,0,0,0,0\n";
        assert!(Dataset::read_csv(io::Cursor::new(text)).is_err());
    }
}

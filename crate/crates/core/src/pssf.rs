//! Projection-to-state safety.
//!
//! Model error enters the barrier derivative only through its projection
//! onto the barrier gradient. This module computes that projected
//! disturbance δ along closed-loop trajectories (with or without a learned
//! residual), bounds it, and turns the bound δ̄ into a certificate: the
//! inflated set `{x : h(x) ≥ −γ(δ̄)}` that the trajectory must not leave.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

use crate::barrier::{h_dot, BarrierFunction, ResidualEstimate};
use crate::dynamics::{ControlAffineSystem, Trajectory};
use crate::format::fmt_f64;
use crate::kfun::{ComparisonFunction, KfunError};

/// A certificate passes when `min h − floor` is at least this.
pub const CERTIFICATE_TOLERANCE: f64 = -1e-6;
/// Slack allowed in the compatibility sandwich.
pub const COMPATIBILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PssfError {
    #[error("delta trace is empty")]
    EmptyTrace,
    #[error("disturbance bound must be finite and >= 0, got {0}")]
    InvalidBound(f64),
    #[error(transparent)]
    Kfun(#[from] KfunError),
}

/// A continuously differentiable map `Π : Rⁿ → Rᵏ` with analytic Jacobian.
pub trait Projection: Send + Sync {
    fn output_dim(&self) -> usize;
    fn map(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `Π = h`, the scalar projection behind the direct learning pipeline.
pub struct BarrierProjection<'a>(pub &'a dyn BarrierFunction);

impl Projection for BarrierProjection<'_> {
    fn output_dim(&self) -> usize {
        1
    }
    fn map(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.0.value(x))
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, x.len(), self.0.gradient(x).as_slice())
    }
}

type MapFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

pub struct FnProjection {
    k: usize,
    map: Box<MapFn>,
    jacobian: Box<JacFn>,
}

impl FnProjection {
    pub fn new(
        k: usize,
        map: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            k,
            map: Box::new(map),
            jacobian: Box::new(jacobian),
        }
    }
}

impl Projection for FnProjection {
    fn output_dim(&self) -> usize {
        self.k
    }
    fn map(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.map)(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(x)
    }
}

/// `ẏ = D_Π(x)(f(x) + g(x)u + d)`.
pub fn projected_dynamics(
    proj: &dyn Projection,
    sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> DVector<f64> {
    proj.jacobian(x) * (sys.vector_field(x, u) + d)
}

/// Largest relative error between the analytic Jacobian and central
/// differences of the map.
pub fn jacobian_check(proj: &dyn Projection, samples: &[DVector<f64>], eps: f64) -> f64 {
    samples
        .iter()
        .map(|x| {
            let jac = proj.jacobian(x);
            let mut fd = DMatrix::zeros(proj.output_dim(), x.len());
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += eps;
                xm[i] -= eps;
                fd.set_column(i, &((proj.map(&xp) - proj.map(&xm)) / (2.0 * eps)));
            }
            (jac - &fd).norm() / fd.norm().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Candidate compatible projection: `σ̲(h(x)) ≤ h_Π(Π(x)) ≤ σ̄(h(x))`.
pub struct CompatiblePair<'a> {
    pub barrier: &'a dyn BarrierFunction,
    pub projection: &'a dyn Projection,
    pub h_proj: &'a (dyn Fn(&DVector<f64>) -> f64 + Sync),
    pub sigma_lower: ComparisonFunction,
    pub sigma_upper: ComparisonFunction,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompatibilityViolation {
    Lower,
    Upper,
    /// `h(x) ≥ 0` but `h_Π(Π(x)) < 0`.
    SetPreservation,
    /// σ̲ or σ̄ could not be evaluated at `h(x)`.
    Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityReport {
    /// `min (h_Π(Π(x)) − σ̲(h(x)))` over the samples.
    pub worst_lower_slack: f64,
    /// `min (σ̄(h(x)) − h_Π(Π(x)))` over the samples.
    pub worst_upper_slack: f64,
    pub first_violation: Option<(usize, CompatibilityViolation)>,
    pub samples: usize,
}

impl CompatibilityReport {
    pub fn passed(&self) -> bool {
        self.first_violation.is_none()
    }
}

pub fn check_compatibility(pair: &CompatiblePair, samples: &[DVector<f64>]) -> CompatibilityReport {
    let mut rep = CompatibilityReport {
        worst_lower_slack: f64::INFINITY,
        worst_upper_slack: f64::INFINITY,
        first_violation: None,
        samples: samples.len(),
    };
    let flag = |rep: &mut CompatibilityReport, i, v| {
        if rep.first_violation.is_none() {
            rep.first_violation = Some((i, v));
        }
    };
    for (i, x) in samples.iter().enumerate() {
        let h = pair.barrier.value(x);
        let hp = (pair.h_proj)(&pair.projection.map(x));
        let (lo, hi) = match (pair.sigma_lower.evaluate(h), pair.sigma_upper.evaluate(h)) {
            (Ok(lo), Ok(hi)) => (lo, hi),
            _ => {
                flag(&mut rep, i, CompatibilityViolation::Domain);
                continue;
            }
        };
        let (ls, us) = (hp - lo, hi - hp);
        rep.worst_lower_slack = rep.worst_lower_slack.min(ls);
        rep.worst_upper_slack = rep.worst_upper_slack.min(us);
        if ls < -COMPATIBILITY_SLACK {
            flag(&mut rep, i, CompatibilityViolation::Lower);
        }
        if us < -COMPATIBILITY_SLACK {
            flag(&mut rep, i, CompatibilityViolation::Upper);
        }
        if h >= 0.0 && hp < 0.0 {
            flag(&mut rep, i, CompatibilityViolation::SetPreservation);
        }
    }
    rep
}

/// `δ = ḣ_true(x, u) − ḣ_nominal(x, u) = ∇h·[(f − f̂) + (g − ĝ)u]`.
pub fn projected_disturbance_model_error(
    bar: &dyn BarrierFunction,
    true_sys: &dyn ControlAffineSystem,
    nominal_sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    h_dot(bar, true_sys, x, u) - h_dot(bar, nominal_sys, x, u)
}

/// `δ = ḣ_true(x, u) − [ḣ_nominal(x, u) + b̂(x) + â(x)ᵀu]`: what the learned
/// residual still misses.
pub fn projected_disturbance_learned(
    bar: &dyn BarrierFunction,
    nominal_sys: &dyn ControlAffineSystem,
    residual: &dyn ResidualEstimate,
    true_sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    h_dot(bar, true_sys, x, u) - (h_dot(bar, nominal_sys, x, u) + residual.predict(x, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    ModelError,
    LearnedResidual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTrace {
    pub times: Vec<f64>,
    pub delta: Vec<f64>,
    pub mode: DeltaMode,
}

impl DeltaTrace {
    /// δ at every sample of `traj` that has an applied input. Passing a
    /// residual selects the learned-residual mode.
    pub fn along(
        traj: &Trajectory,
        bar: &dyn BarrierFunction,
        true_sys: &dyn ControlAffineSystem,
        nominal_sys: &dyn ControlAffineSystem,
        residual: Option<&dyn ResidualEstimate>,
    ) -> Self {
        let samples = traj.states.iter().zip(&traj.inputs);
        let delta = match residual {
            None => samples
                .map(|(x, u)| projected_disturbance_model_error(bar, true_sys, nominal_sys, x, u))
                .collect(),
            Some(res) => samples
                .map(|(x, u)| projected_disturbance_learned(bar, nominal_sys, res, true_sys, x, u))
                .collect(),
        };
        Self {
            times: traj.times[..traj.inputs.len()].to_vec(),
            delta,
            mode: if residual.is_some() {
                DeltaMode::LearnedResidual
            } else {
                DeltaMode::ModelError
            },
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,abs_delta")?;
        for (t, d) in self.times.iter().zip(&self.delta) {
            writeln!(w, "{},{}", fmt_f64(*t), fmt_f64(d.abs()))?;
        }
        Ok(())
    }
}

/// Discrete sup-norm `max_j |δ(t_j)|`.
pub fn delta_bound(trace: &DeltaTrace) -> Result<f64, PssfError> {
    if trace.delta.is_empty() {
        return Err(PssfError::EmptyTrace);
    }
    Ok(trace.delta.iter().fold(0.0, |m, d| m.max(d.abs())))
}

/// Inflation function for an ISSf-CBF `ḣ ≥ −α(h) − ι(|δ|)`: the set
/// `{h ≥ −α⁻¹(ι(δ̄))}` is forward invariant, so `γ = α⁻¹ ∘ ι`.
pub fn issf_gamma(
    alpha: &ComparisonFunction,
    iota: &ComparisonFunction,
) -> Result<ComparisonFunction, KfunError> {
    ComparisonFunction::compose(&alpha.inverse()?, iota)
}

/// `γ′ = σ̄⁻¹ ∘ γ`: carries an inflation certified on the projected safe set
/// back to the original one.
pub fn transport_inflation(
    sigma_upper: &ComparisonFunction,
    gamma: &ComparisonFunction,
) -> Result<ComparisonFunction, KfunError> {
    ComparisonFunction::compose(&sigma_upper.inverse()?, gamma)
}

/// Floor obtained by inverting the upper sandwich directly,
/// `σ̄⁻¹(−γ(δ̄))`. Coincides with `−γ′(δ̄)` for odd σ̄ (e.g. linear).
pub fn direct_transported_floor(
    sigma_upper: &ComparisonFunction,
    gamma: &ComparisonFunction,
    delta_bar: f64,
) -> Result<f64, KfunError> {
    sigma_upper.inverse()?.evaluate(-gamma.evaluate(delta_bar)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PssfCertificate {
    pub delta_bar: f64,
    pub alpha: ComparisonFunction,
    /// Maps δ̄ to the inflation of the safe set.
    pub gamma: ComparisonFunction,
    pub inflation: f64,
    /// `−inflation`: the certified lower bound on `h`.
    pub floor: f64,
}

impl PssfCertificate {
    pub fn from_gamma(
        alpha: ComparisonFunction,
        gamma: ComparisonFunction,
        delta_bar: f64,
    ) -> Result<Self, PssfError> {
        if !(delta_bar.is_finite() && delta_bar >= 0.0) {
            return Err(PssfError::InvalidBound(delta_bar));
        }
        let inflation = gamma.evaluate(delta_bar)?;
        Ok(Self {
            delta_bar,
            alpha,
            gamma,
            inflation,
            floor: 0.0 - inflation,
        })
    }
}

/// Certificate for `Π = h` with the identity compatible projection:
/// floor `−α⁻¹(δ̄)`, i.e. `−δ̄/k` for `α(r) = kr`.
pub fn make_certificate(alpha: &ComparisonFunction, delta_bar: f64) -> Result<PssfCertificate, PssfError> {
    PssfCertificate::from_gamma(alpha.clone(), alpha.inverse()?, delta_bar)
}

/// Certificate through a general compatible projection: an ISSf-CBF
/// with `(α, ι)` on the projected set, carried back through σ̄.
pub fn make_projected_certificate(
    alpha: &ComparisonFunction,
    iota: &ComparisonFunction,
    sigma_upper: &ComparisonFunction,
    delta_bar: f64,
) -> Result<PssfCertificate, PssfError> {
    let gamma = transport_inflation(sigma_upper, &issf_gamma(alpha, iota)?)?;
    PssfCertificate::from_gamma(alpha.clone(), gamma, delta_bar)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    Pass,
    Fail,
    /// `h(x0)` already below the floor; the certificate says nothing.
    PreconditionViolated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub min_h: f64,
    /// `min_h − floor`.
    pub margin: f64,
    pub status: CertificateStatus,
    pub delta_bar: f64,
    pub floor: f64,
    pub k: Option<f64>,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.status == CertificateStatus::Pass
    }

    pub fn to_json(&self) -> CertificateJson {
        CertificateJson {
            delta_bar: self.delta_bar,
            k: self.k,
            floor: self.floor,
            min_h: self.min_h,
            pass: self.passed(),
        }
    }
}

/// On-disk certificate layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateJson {
    pub delta_bar: f64,
    pub k: Option<f64>,
    pub floor: f64,
    pub min_h: f64,
    pub pass: bool,
}

/// Checks `h(x(t)) ≥ floor` along the whole trajectory.
pub fn verify_certificate(
    traj: &Trajectory,
    bar: &dyn BarrierFunction,
    cert: &PssfCertificate,
) -> CertificateReport {
    let min_h = traj
        .states
        .iter()
        .map(|x| bar.value(x))
        .fold(f64::INFINITY, f64::min);
    let margin = min_h - cert.floor;
    let status = if bar.value(&traj.states[0]) < cert.floor {
        CertificateStatus::PreconditionViolated
    } else if margin >= CERTIFICATE_TOLERANCE {
        CertificateStatus::Pass
    } else {
        CertificateStatus::Fail
    };
    CertificateReport {
        min_h,
        margin,
        status,
        delta_bar: cert.delta_bar,
        floor: cert.floor,
        k: cert.alpha.linear_gain(),
    }
}

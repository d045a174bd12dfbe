//! Barrier functions, CBF / ISSf-CBF condition margins and the min-norm
//! safety filter.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{step_rk4, ControlAffineSystem, Controller};
use crate::kfun::{ComparisonFunction, DomainKind, KfunError};

/// Below this ‖a‖ the filter constraint cannot be steered by the input.
pub const DEGENERATE_ACTUATION: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("alpha must be an extended class K-infinity function, got domain {0:?}")]
    AlphaDomain(DomainKind),
    #[error("barrier gradient vanishes; worst-case disturbance direction undefined (margin with d = 0: {zero_disturbance_margin})")]
    DegenerateGradient { zero_disturbance_margin: f64 },
    #[error("disturbance bound must be >= 0, got {0}")]
    NegativeBound(f64),
    #[error(transparent)]
    Kfun(#[from] KfunError),
}

/// `C = {x : h(x) ≥ 0}` with an analytic gradient and the extended class
/// K∞ function α of the CBF condition `ḣ ≥ −α(h)`.
pub trait BarrierFunction: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn alpha(&self) -> &ComparisonFunction;

    fn alpha_of_h(&self, x: &DVector<f64>) -> f64 {
        self.alpha()
            .evaluate(self.value(x))
            .expect("alpha is extended class K-infinity")
    }
}

fn check_alpha(alpha: &ComparisonFunction) -> Result<(), BarrierError> {
    match alpha.domain() {
        DomainKind::ExtendedClassKInf => Ok(()),
        other => Err(BarrierError::AlphaDomain(other)),
    }
}

/// `h(x) = 1 − (x_i / a)² − (x_j / b)²`: an ellipse on two coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipseBarrier {
    indices: (usize, usize),
    semi_axes: (f64, f64),
    alpha: ComparisonFunction,
}

impl EllipseBarrier {
    pub fn new(
        indices: (usize, usize),
        semi_axes: (f64, f64),
        alpha: ComparisonFunction,
    ) -> Result<Self, BarrierError> {
        check_alpha(&alpha)?;
        if !(semi_axes.0 > 0.0 && semi_axes.1 > 0.0) {
            return Err(KfunError::InvalidParameter(format!(
                "ellipse semi-axes must be > 0, got {semi_axes:?}"
            ))
            .into());
        }
        Ok(Self {
            indices,
            semi_axes,
            alpha,
        })
    }

    /// Pitch / pitch-rate ellipse on the Segway state `(p, ṗ, θ, θ̇)`.
    pub fn segway_pitch(theta_max: f64, omega_max: f64, k: f64) -> Result<Self, BarrierError> {
        Self::new((2, 3), (theta_max, omega_max), ComparisonFunction::linear(k)?)
    }
}

impl BarrierFunction for EllipseBarrier {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let (i, j) = self.indices;
        let (a, b) = self.semi_axes;
        1.0 - (x[i] / a).powi(2) - (x[j] / b).powi(2)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (i, j) = self.indices;
        let (a, b) = self.semi_axes;
        let mut g = DVector::zeros(x.len());
        g[i] = -2.0 * x[i] / (a * a);
        g[j] = -2.0 * x[j] / (b * b);
        g
    }

    fn alpha(&self) -> &ComparisonFunction {
        &self.alpha
    }
}

/// Ellipse barrier parameters as they appear in scenario configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipseParams {
    pub theta_max: f64,
    pub omega_max: f64,
    pub k: f64,
}

impl Default for EllipseParams {
    fn default() -> Self {
        Self {
            theta_max: 0.3,
            omega_max: 1.0,
            k: 1.0,
        }
    }
}

impl EllipseParams {
    pub fn build(&self) -> Result<EllipseBarrier, BarrierError> {
        EllipseBarrier::segway_pitch(self.theta_max, self.omega_max, self.k)
    }
}

type ScalarFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type VectorFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Barrier from closures.
pub struct FnBarrier {
    h: Box<ScalarFn>,
    grad: Box<VectorFn>,
    alpha: ComparisonFunction,
}

impl FnBarrier {
    pub fn new(
        h: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        alpha: ComparisonFunction,
    ) -> Result<Self, BarrierError> {
        check_alpha(&alpha)?;
        Ok(Self {
            h: Box::new(h),
            grad: Box::new(grad),
            alpha,
        })
    }
}

impl BarrierFunction for FnBarrier {
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.h)(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }
    fn alpha(&self) -> &ComparisonFunction {
        &self.alpha
    }
}

/// Learned additive terms of the barrier derivative, `b̂(x) + â(x)ᵀu`.
pub trait ResidualEstimate: Send + Sync {
    fn b_hat(&self, x: &DVector<f64>) -> f64;
    fn a_hat(&self, x: &DVector<f64>) -> DVector<f64>;

    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.b_hat(x) + self.a_hat(x).dot(u)
    }
}

/// `ḣ(x, u) = ∇h(x)·(f(x) + g(x)u)`.
pub fn h_dot(
    bar: &dyn BarrierFunction,
    sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    bar.gradient(x).dot(&sys.vector_field(x, u))
}

/// `ḣ(x, u) + α(h(x))`; `u` is admissible for the CBF iff this is ≥ 0.
pub fn cbf_margin(
    bar: &dyn BarrierFunction,
    sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    h_dot(bar, sys, x, u) + bar.alpha_of_h(x)
}

/// Worst case of `ḣ(x, u, d) + α(h(x)) + ι(‖d‖)` over the Euclidean ball
/// `‖d‖ ≤ d_bound`.
///
/// The disturbance enters through `∇h·d ≥ −‖∇h‖‖d‖`, so the problem
/// reduces to `min_{ρ ∈ [0, d_bound]} ι(ρ) − ‖∇h‖ρ`. Endpoints are exact
/// for linear or concave ι; other ι are additionally searched on the
/// interior.
pub fn issf_margin(
    bar: &dyn BarrierFunction,
    sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d_bound: f64,
    iota: &ComparisonFunction,
) -> Result<f64, BarrierError> {
    if !(d_bound >= 0.0) {
        return Err(BarrierError::NegativeBound(d_bound));
    }
    let base = cbf_margin(bar, sys, x, u);
    if d_bound == 0.0 {
        return Ok(base);
    }
    let g = bar.gradient(x).norm();
    if g == 0.0 {
        return Err(BarrierError::DegenerateGradient {
            zero_disturbance_margin: base,
        });
    }
    let worst = worst_radial_term(g, d_bound, iota)?;
    Ok(base + worst)
}

fn worst_radial_term(g: f64, d_bound: f64, iota: &ComparisonFunction) -> Result<f64, KfunError> {
    let phi = |rho: f64| -> Result<f64, KfunError> { Ok(iota.evaluate(rho)? - g * rho) };
    let mut best = phi(0.0)?.min(phi(d_bound)?);
    let endpoints_exact = match iota.family() {
        crate::kfun::Family::Linear { .. } | crate::kfun::Family::LinearDivisor { .. } => true,
        crate::kfun::Family::Power { p, .. } => *p <= 1.0,
        _ => false,
    };
    if endpoints_exact {
        return Ok(best);
    }
    const SCAN: usize = 1024;
    let mut best_i = 0;
    for i in 1..SCAN {
        let v = phi(d_bound * i as f64 / SCAN as f64)?;
        if v < best {
            best = v;
            best_i = i;
        }
    }
    // Golden-section polish around the best scan cell.
    let (mut lo, mut hi) = (
        d_bound * best_i.saturating_sub(1) as f64 / SCAN as f64,
        d_bound * ((best_i + 1).min(SCAN)) as f64 / SCAN as f64,
    );
    let r = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let (m1, m2) = (hi - r * (hi - lo), lo + r * (hi - lo));
        if phi(m1)? < phi(m2)? {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    Ok(best.min(phi(0.5 * (lo + hi))?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub u: DVector<f64>,
    /// `a·u − b`: the modelled `ḣ + α(h)` at the returned input.
    pub constraint_margin: f64,
    pub modified: bool,
    pub infeasible: bool,
}

/// Min-norm safety filter:
///
/// ```text
/// min ‖u − u_des‖²  s.t.  a·u ≥ b
/// a = ∇h(x)ᵀ ĝ(x) + â(x)
/// b = −α(h(x)) − ∇h(x)ᵀ f̂(x) − b̂(x)
/// ```
///
/// When the constraint cannot be met (`‖a‖` degenerate) `u_des` is
/// returned with `infeasible` set.
pub fn safety_filter(
    bar: &dyn BarrierFunction,
    model: &dyn ControlAffineSystem,
    residual: Option<&dyn ResidualEstimate>,
    u_des: &DVector<f64>,
    x: &DVector<f64>,
) -> FilterResult {
    let grad = bar.gradient(x);
    let mut a = model.actuation(x).transpose() * &grad;
    let mut b = -bar.alpha_of_h(x) - grad.dot(&model.drift(x));
    if let Some(res) = residual {
        a += res.a_hat(x);
        b -= res.b_hat(x);
    }
    let slack = a.dot(u_des) - b;
    if slack >= 0.0 {
        return FilterResult {
            u: u_des.clone(),
            constraint_margin: slack,
            modified: false,
            infeasible: false,
        };
    }
    let a_sq = a.norm_squared();
    if a_sq.sqrt() <= DEGENERATE_ACTUATION {
        return FilterResult {
            u: u_des.clone(),
            constraint_margin: slack,
            modified: false,
            infeasible: true,
        };
    }
    let u = u_des + &a * (-slack / a_sq);
    FilterResult {
        constraint_margin: a.dot(&u) - b,
        u,
        modified: true,
        infeasible: false,
    }
}

/// Relative bracket width at which the hold-interval line search stops.
const LINE_SEARCH_TOL: f64 = 1e-13;

/// Min-norm filter for a zero-order-hold loop with period `dt`.
///
/// The pointwise condition `ḣ ≥ −α(h)` only holds at the sampling instant;
/// over the hold interval the state runs along the tangent of a convex
/// safe set and `h` loses `O(dt²)` per step. Here the constraint is imposed
/// on the predicted end of the interval instead:
///
/// ```text
/// h(x⁺(u)) + dt·(b̂(x) + â(x)ᵀu) ≥ h(x) − dt·α(h(x))    (≥ 0 when h(x) ≥ 0)
/// ```
///
/// with `x⁺` one RK4 step of `model` under the held input. The input is
/// moved from `u_des` along the constraint gradient to the nearest feasible
/// point; if the constraint cannot be met on that ray, the best point is
/// returned and flagged infeasible. `constraint_margin` is the constraint
/// slack divided by `dt`, comparable to the pointwise margin.
pub fn sampled_data_filter(
    bar: &dyn BarrierFunction,
    model: &dyn ControlAffineSystem,
    residual: Option<&dyn ResidualEstimate>,
    u_des: &DVector<f64>,
    x: &DVector<f64>,
    dt: f64,
) -> FilterResult {
    let h = bar.value(x);
    let mut target = h - dt * bar.alpha_of_h(x);
    if h >= 0.0 {
        target = target.max(0.0);
    }
    let zero = DVector::zeros(x.len());
    let slack = |u: &DVector<f64>| -> f64 {
        let predicted = match step_rk4(model, x, u, &zero, dt) {
            Ok(next) => bar.value(&next),
            Err(_) => return f64::NEG_INFINITY,
        };
        let learned = residual.map_or(0.0, |r| dt * r.predict(x, u));
        (predicted + learned - target) / dt
    };

    let g0 = slack(u_des);
    if g0 >= 0.0 {
        return FilterResult {
            u: u_des.clone(),
            constraint_margin: g0,
            modified: false,
            infeasible: false,
        };
    }
    let unmodified_infeasible = || FilterResult {
        u: u_des.clone(),
        constraint_margin: g0,
        modified: false,
        infeasible: true,
    };

    let m = u_des.len();
    let mut dir = DVector::from_iterator(
        m,
        (0..m).map(|i| {
            let e = 1e-6 * (1.0 + u_des[i].abs());
            let (mut up, mut dn) = (u_des.clone(), u_des.clone());
            up[i] += e;
            dn[i] -= e;
            (slack(&up) - slack(&dn)) / (2.0 * e)
        }),
    );
    if !(dir.norm() > DEGENERATE_ACTUATION) || !dir.iter().all(|v| v.is_finite()) {
        let grad = bar.gradient(x);
        dir = model.actuation(x).transpose() * &grad;
        if let Some(res) = residual {
            dir += res.a_hat(x);
        }
    }
    let slope = dir.norm();
    if !(slope > DEGENERATE_ACTUATION) {
        return unmodified_infeasible();
    }
    dir /= slope;
    let phi = |s: f64| slack(&(u_des + &dir * s));

    // Expand until feasible or past the maximum along the ray.
    let (mut s_lo, mut s_prev, mut phi_prev) = (0.0, 0.0, g0);
    let mut s = -g0 / slope;
    let mut bracket = None;
    for _ in 0..64 {
        let v = phi(s);
        if v >= 0.0 {
            bracket = Some((s_prev, s));
            break;
        }
        if v < phi_prev {
            // Unimodal along the ray: the maximum lies in [s_lo, s].
            let (mut a, mut b) = (s_lo, s);
            let ratio = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..200 {
                if b - a <= LINE_SEARCH_TOL * b.abs().max(1.0) {
                    break;
                }
                let c = b - ratio * (b - a);
                let d = a + ratio * (b - a);
                if phi(c) >= phi(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            let s_max = 0.5 * (a + b);
            if phi(s_max) >= 0.0 {
                bracket = Some((s_lo, s_max));
            }
            break;
        }
        s_lo = s_prev;
        s_prev = s;
        phi_prev = v;
        s *= 2.0;
    }
    let Some((mut lo, mut hi)) = bracket else {
        return unmodified_infeasible();
    };
    for _ in 0..200 {
        if hi - lo <= LINE_SEARCH_TOL * hi.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if phi(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let u = u_des + &dir * hi;
    FilterResult {
        constraint_margin: phi(hi),
        u,
        modified: true,
        infeasible: false,
    }
}

/// How a [`FilteredController`] imposes the barrier constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterMode {
    /// [`safety_filter`]: pointwise condition, closed form.
    Pointwise,
    /// [`sampled_data_filter`] with the given hold period.
    SampledData { dt: f64 },
}

/// Counters gathered while a [`FilteredController`] runs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FilterStats {
    pub calls: usize,
    pub modified: usize,
    pub infeasible: usize,
    pub min_margin: f64,
}

/// A desired controller wrapped in the min-norm safety filter.
pub struct FilteredController<'a> {
    pub barrier: &'a dyn BarrierFunction,
    pub model: &'a dyn ControlAffineSystem,
    pub residual: Option<&'a dyn ResidualEstimate>,
    pub desired: Box<dyn Controller + 'a>,
    pub mode: FilterMode,
    pub stats: FilterStats,
}

impl<'a> FilteredController<'a> {
    pub fn new(
        barrier: &'a dyn BarrierFunction,
        model: &'a dyn ControlAffineSystem,
        residual: Option<&'a dyn ResidualEstimate>,
        desired: Box<dyn Controller + 'a>,
    ) -> Self {
        Self {
            barrier,
            model,
            residual,
            desired,
            mode: FilterMode::Pointwise,
            stats: FilterStats {
                min_margin: f64::INFINITY,
                ..FilterStats::default()
            },
        }
    }
}

impl FilteredController<'_> {
    pub fn with_mode(mut self, mode: FilterMode) -> Self {
        self.mode = mode;
        self
    }
}

impl Controller for FilteredController<'_> {
    fn control(&mut self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let u_des = self.desired.control(t, x);
        let r = match self.mode {
            FilterMode::Pointwise => safety_filter(self.barrier, self.model, self.residual, &u_des, x),
            FilterMode::SampledData { dt } => {
                sampled_data_filter(self.barrier, self.model, self.residual, &u_des, x, dt)
            }
        };
        self.stats.calls += 1;
        self.stats.modified += r.modified as usize;
        self.stats.infeasible += r.infeasible as usize;
        self.stats.min_margin = self.stats.min_margin.min(r.constraint_margin);
        r.u
    }
}

/// Largest relative error between the analytic gradient and central
/// differences of `h` over `samples`.
pub fn gradient_check(bar: &dyn BarrierFunction, samples: &[DVector<f64>], eps: f64) -> f64 {
    samples
        .iter()
        .map(|x| {
            let g = bar.gradient(x);
            let fd = DVector::from_fn(x.len(), |i, _| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += eps;
                xm[i] -= eps;
                (bar.value(&xp) - bar.value(&xm)) / (2.0 * eps)
            });
            (g - &fd).norm() / fd.norm().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// First sample near the zero level set (`|h| ≤ band`) where the gradient
/// vanishes; `None` means 0 looks like a regular value on these samples.
pub fn regular_value_check(
    bar: &dyn BarrierFunction,
    samples: &[DVector<f64>],
    band: f64,
) -> Option<DVector<f64>> {
    samples
        .iter()
        .find(|x| bar.value(x).abs() <= band && bar.gradient(x).norm() == 0.0)
        .cloned()
}

//! Control-affine systems `ẋ = f(x) + g(x)u + d`, the planar Segway model,
//! fixed-step RK4 integration and closed-loop rollouts.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

use crate::format::fmt_f64;

/// Any state component beyond this magnitude counts as a blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e8;
const SINGULAR_DET: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("mass matrix determinant {0:e} below the singularity threshold")]
    SingularMassMatrix(f64),
    #[error("state component {index} reached {value:e}")]
    NumericalBlowUp { index: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// `ẋ = f(x) + g(x)u`. Implementations must be pure.
pub trait ControlAffineSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn actuation(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn vector_field(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.actuation(x) * u
    }
}

type DriftFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type ActuationFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// A control-affine system from a pair of closures.
pub struct FnSystem {
    n: usize,
    m: usize,
    drift: Box<DriftFn>,
    actuation: Box<ActuationFn>,
}

impl FnSystem {
    pub fn new(
        n: usize,
        m: usize,
        drift: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        actuation: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            m,
            drift: Box::new(drift),
            actuation: Box::new(actuation),
        }
    }

    /// `ẋ = A x + B u`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        Self::new(n, m, move |x| &a * x, move |_| b.clone())
    }
}

impl ControlAffineSystem for FnSystem {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }
    fn actuation(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.actuation)(x)
    }
}

/// Physical parameters of the planar Segway. The defaults are plausible
/// values for a human-carrying platform, not measured data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegwayParams {
    pub body_mass: f64,
    pub wheel_mass: f64,
    pub com_length: f64,
    pub body_inertia: f64,
    pub wheel_radius: f64,
    pub gravity: f64,
    pub viscous_friction: f64,
    pub motor_torque_scale: f64,
}

impl Default for SegwayParams {
    fn default() -> Self {
        Self {
            body_mass: 44.8,
            wheel_mass: 2.0,
            com_length: 0.8,
            body_inertia: 6.0,
            wheel_radius: 0.195,
            gravity: 9.81,
            viscous_friction: 0.1,
            motor_torque_scale: 1.0,
        }
    }
}

impl SegwayParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("body_mass", self.body_mass),
            ("wheel_mass", self.wheel_mass),
            ("com_length", self.com_length),
            ("body_inertia", self.body_inertia),
            ("wheel_radius", self.wheel_radius),
            ("gravity", self.gravity),
            ("motor_torque_scale", self.motor_torque_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::InvalidParameter(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        if !(self.viscous_friction.is_finite() && self.viscous_friction >= 0.0) {
            return Err(DynamicsError::InvalidParameter(format!(
                "viscous_friction must be >= 0, got {}",
                self.viscous_friction
            )));
        }
        Ok(())
    }

    /// Apparent translational mass of the wheels: a solid disc of mass
    /// `wheel_mass` contributes `I_w / r² = wheel_mass / 2`.
    pub fn wheel_inertia_equiv(&self) -> f64 {
        0.5 * self.wheel_mass
    }
}

/// Multiplicative parameter scalings used to build a nominal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub body_mass: f64,
    pub wheel_mass: f64,
    pub com_length: f64,
    pub body_inertia: f64,
    pub wheel_radius: f64,
    pub gravity: f64,
    pub viscous_friction: f64,
    pub motor_torque_scale: f64,
    pub drop_friction: bool,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl PerturbationSpec {
    pub fn identity() -> Self {
        Self {
            body_mass: 1.0,
            wheel_mass: 1.0,
            com_length: 1.0,
            body_inertia: 1.0,
            wheel_radius: 1.0,
            gravity: 1.0,
            viscous_friction: 1.0,
            motor_torque_scale: 1.0,
            drop_friction: false,
        }
    }

    /// Mass up, inertia down, friction dropped, weaker motor. Touches both
    /// the drift and the actuation channel.
    pub fn benchmark() -> Self {
        Self {
            body_mass: 1.15,
            body_inertia: 0.85,
            motor_torque_scale: 0.9,
            drop_friction: true,
            ..Self::identity()
        }
    }

    pub fn apply(&self, p: &SegwayParams) -> SegwayParams {
        SegwayParams {
            body_mass: p.body_mass * self.body_mass,
            wheel_mass: p.wheel_mass * self.wheel_mass,
            com_length: p.com_length * self.com_length,
            body_inertia: p.body_inertia * self.body_inertia,
            wheel_radius: p.wheel_radius * self.wheel_radius,
            gravity: p.gravity * self.gravity,
            viscous_friction: if self.drop_friction {
                0.0
            } else {
                p.viscous_friction * self.viscous_friction
            },
            motor_torque_scale: p.motor_torque_scale * self.motor_torque_scale,
        }
    }
}

/// Planar wheeled inverted pendulum, `x = (p, ṗ, θ, θ̇)`, input wheel torque.
///
/// `D(q)q̈ + C(q,q̇)q̇ + G(q) = Bτ` with `q = (p, θ)`:
///
/// ```text
/// D = [[M + m_w + m_w/2,  m L cosθ], [m L cosθ, J + m L²]]
/// Cq̇ = [-m L sinθ θ̇² + c ṗ, 0]
/// G = [0, -m g L sinθ]
/// B = [s / r, -s]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Segway {
    params: SegwayParams,
}

pub fn segway_true(params: &SegwayParams) -> Result<Segway, DynamicsError> {
    Segway::new(params.clone())
}

pub fn segway_nominal(
    params: &SegwayParams,
    perturbation: &PerturbationSpec,
) -> Result<Segway, DynamicsError> {
    Segway::new(perturbation.apply(params))
}

impl Segway {
    pub fn new(params: SegwayParams) -> Result<Self, DynamicsError> {
        params.validate()?;
        // det D(θ) is smallest at cosθ = ±1.
        let s = Self { params };
        let det = s.mass_matrix(0.0).determinant();
        if det < SINGULAR_DET {
            return Err(DynamicsError::SingularMassMatrix(det));
        }
        Ok(s)
    }

    pub fn params(&self) -> &SegwayParams {
        &self.params
    }

    fn mass_matrix(&self, theta: f64) -> Matrix2<f64> {
        let p = &self.params;
        let ml = p.body_mass * p.com_length;
        let coupling = ml * theta.cos();
        Matrix2::new(
            p.body_mass + p.wheel_mass + p.wheel_inertia_equiv(),
            coupling,
            coupling,
            p.body_inertia + ml * p.com_length,
        )
    }

    fn input_map(&self) -> Vector2<f64> {
        let p = &self.params;
        Vector2::new(p.motor_torque_scale / p.wheel_radius, -p.motor_torque_scale)
    }

    fn mass_inverse(&self, theta: f64) -> Matrix2<f64> {
        // Construction guarantees det D ≥ det D(0) > 0 for every θ.
        self.mass_matrix(theta)
            .try_inverse()
            .expect("mass matrix checked non-singular at construction")
    }

    /// Kinetic plus potential energy; conserved without friction and input.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let p = &self.params;
        let qd = Vector2::new(x[1], x[3]);
        0.5 * qd.dot(&(self.mass_matrix(x[2]) * qd))
            + p.body_mass * p.gravity * p.com_length * x[2].cos()
    }
}

impl ControlAffineSystem for Segway {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let (pd, th, thd) = (x[1], x[2], x[3]);
        let ml = p.body_mass * p.com_length;
        let coriolis_friction = Vector2::new(-ml * th.sin() * thd * thd + p.viscous_friction * pd, 0.0);
        let gravity = Vector2::new(0.0, -p.body_mass * p.gravity * p.com_length * th.sin());
        let qdd = self.mass_inverse(th) * (-coriolis_friction - gravity);
        DVector::from_vec(vec![pd, qdd[0], thd, qdd[1]])
    }

    fn actuation(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let col = self.mass_inverse(x[2]) * self.input_map();
        DMatrix::from_column_slice(4, 1, &[0.0, col[0], 0.0, col[1]])
    }
}

/// Largest finite-difference ratio `‖F(x1) − F(x2)‖ / ‖x1 − x2‖` over
/// consecutive sample pairs, with `F(x) = f(x) + g(x)u`. Diagnostic only.
pub fn lipschitz_probe(
    sys: &dyn ControlAffineSystem,
    samples: &[DVector<f64>],
    u: &DVector<f64>,
) -> f64 {
    samples
        .windows(2)
        .filter_map(|w| {
            let dx = (&w[0] - &w[1]).norm();
            (dx > 0.0).then(|| (sys.vector_field(&w[0], u) - sys.vector_field(&w[1], u)).norm() / dx)
        })
        .fold(0.0, f64::max)
}

/// One classical RK4 step of `ẋ = f(x) + g(x)u + d` with `u`, `d` held
/// over the step.
pub fn step_rk4(
    sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    let rhs = |s: &DVector<f64>| sys.vector_field(s, u) + d;
    let k1 = rhs(x);
    let k2 = rhs(&(x + &k1 * (0.5 * dt)));
    let k3 = rhs(&(x + &k2 * (0.5 * dt)));
    let k4 = rhs(&(x + &k3 * dt));
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    check_state(&next)?;
    Ok(next)
}

fn check_state(x: &DVector<f64>) -> Result<(), DynamicsError> {
    for (index, &value) in x.iter().enumerate() {
        if !value.is_finite() {
            return Err(DynamicsError::NonFinite("state"));
        }
        if value.abs() > BLOW_UP_THRESHOLD {
            return Err(DynamicsError::NumericalBlowUp { index, value });
        }
    }
    Ok(())
}

/// State feedback `u = k(t, x)`. Stateful so that seeded excitation and
/// logging can live inside the controller.
pub trait Controller {
    fn control(&mut self, t: f64, x: &DVector<f64>) -> DVector<f64>;
}

impl<F> Controller for F
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    fn control(&mut self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self(t, x)
    }
}

/// Additive disturbance `d(t, x, u)` with a declared sup-norm bound.
pub trait DisturbanceSignal {
    fn evaluate(&mut self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn declared_bound(&self) -> f64;
}

#[derive(Debug, Clone)]
pub struct ConstantDisturbance {
    pub value: DVector<f64>,
}

impl DisturbanceSignal for ConstantDisturbance {
    fn evaluate(&mut self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        self.value.clone()
    }
    fn declared_bound(&self) -> f64 {
        self.value.amax()
    }
}

/// Componentwise uniform noise on `[-bound, bound]`, redrawn every call.
#[derive(Debug, Clone)]
pub struct UniformDisturbance {
    bound: f64,
    dim: usize,
    rng: ChaCha8Rng,
}

impl UniformDisturbance {
    pub fn new(dim: usize, bound: f64, seed: u64) -> Self {
        Self {
            bound,
            dim,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl DisturbanceSignal for UniformDisturbance {
    fn evaluate(&mut self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let b = self.bound;
        DVector::from_fn(self.dim, |_, _| self.rng.random_range(-b..=b))
    }
    fn declared_bound(&self) -> f64 {
        self.bound
    }
}

/// Disturbance from a closure and a declared bound.
pub struct FnDisturbance<F> {
    pub f: F,
    pub bound: f64,
}

impl<F> DisturbanceSignal for FnDisturbance<F>
where
    F: FnMut(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    fn evaluate(&mut self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x, u)
    }
    fn declared_bound(&self) -> f64 {
        self.bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminationReason {
    Integration(DynamicsError),
    NonFiniteInput,
    DisturbanceBoundExceeded { norm: f64, bound: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Termination {
    pub time: f64,
    pub reason: TerminationReason,
}

/// Fixed-step closed-loop rollout. `inputs[j]` is applied on
/// `[times[j], times[j+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub terminated_early: Option<Termination>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds at least x0")
    }

    /// CSV with header `t,x1..xn,u1..um`; the input cells of the final row
    /// are empty since no input is applied after the last sample.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.states[0].len();
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (j, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![fmt_f64(*t)];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            match self.inputs.get(j) {
                Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Number of fixed steps covering `duration`, requiring `duration / dt` to
/// be an integer to within 1e-9.
pub fn step_count(duration: f64, dt: f64) -> Result<usize, DynamicsError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(DynamicsError::InvalidParameter(format!(
            "duration must be >= 0, got {duration}"
        )));
    }
    let ratio = duration / dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 {
        return Err(DynamicsError::InvalidParameter(format!(
            "duration {duration} is not an integer multiple of dt {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Closed-loop rollout under `controller`, optionally with an additive
/// disturbance. Integration failures end the rollout early and are
/// recorded on the trajectory; only invalid arguments are errors.
pub fn simulate(
    sys: &dyn ControlAffineSystem,
    controller: &mut dyn Controller,
    x0: &DVector<f64>,
    duration: f64,
    dt: f64,
    mut disturbance: Option<&mut dyn DisturbanceSignal>,
) -> Result<Trajectory, DynamicsError> {
    let n = sys.state_dim();
    if x0.len() != n {
        return Err(DynamicsError::Dimension(format!(
            "x0 has {} components, system has {n}",
            x0.len()
        )));
    }
    check_state(x0)?;
    let steps = step_count(duration, dt)?;
    let zero = DVector::zeros(n);

    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps),
        terminated_early: None,
    };
    traj.times.push(0.0);
    traj.states.push(x0.clone());

    for j in 0..steps {
        let t = j as f64 * dt;
        let x = &traj.states[j];
        let u = controller.control(t, x);
        if u.len() != sys.input_dim() {
            return Err(DynamicsError::Dimension(format!(
                "controller returned {} inputs, system takes {}",
                u.len(),
                sys.input_dim()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            traj.terminated_early = Some(Termination {
                time: t,
                reason: TerminationReason::NonFiniteInput,
            });
            break;
        }
        let d = match disturbance.as_deref_mut() {
            Some(sig) => {
                let d = sig.evaluate(t, x, &u);
                let (norm, bound) = (d.amax(), sig.declared_bound());
                if !(norm <= bound) {
                    traj.terminated_early = Some(Termination {
                        time: t,
                        reason: TerminationReason::DisturbanceBoundExceeded { norm, bound },
                    });
                    break;
                }
                d
            }
            None => zero.clone(),
        };
        match step_rk4(sys, x, &u, &d, dt) {
            Ok(next) => {
                traj.times.push((j + 1) as f64 * dt);
                traj.states.push(next);
                traj.inputs.push(u);
            }
            Err(e) => {
                traj.terminated_early = Some(Termination {
                    time: t,
                    reason: TerminationReason::Integration(e),
                });
                break;
            }
        }
    }
    Ok(traj)
}

//! Barrier-function safety filtering with projected-disturbance
//! certificates and episodic residual learning.
//!
//! - [`kfun`]: comparison functions (class K and friends) and their algebra.
//! - [`dynamics`]: control-affine systems, the Segway model, RK4 rollouts.
//! - [`barrier`]: barrier functions, the min-norm safety filter, ISSf margins.
//! - [`pssf`]: projections, projected disturbances, certificate floors.
//! - [`learning`]: residual estimators and the episodic training loop.
//! - [`scenario`]: config-driven runs behind the `pssf` binary.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod barrier;
pub mod dynamics;
pub mod format;
pub mod kfun;
pub mod learning;
pub mod pssf;
pub mod scenario;

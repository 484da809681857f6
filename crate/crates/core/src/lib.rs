//! ODE views of deep networks.
//!
//! Networks are read as discretizations of `dx/dt = f(x, W, t)` and training
//! as open-loop optimal control over the per-layer weights. The crate holds
//! the fixed-step integrators, a small dense-network engine with
//! hand-written derivatives, the architecture/discretization zoo, PMP-based
//! training (method of successive approximations), continuous adjoint
//! gradients, continuity-equation density transport and the meta particle
//! flow operator for sequential Bayesian inference.

pub mod adjoint;
pub mod arch;
pub mod control;
pub mod density;
pub mod error;
mod linalg;
pub mod nn;
pub mod mpf;
pub mod ode;
pub mod rng;

pub use error::{Error, Result};
pub use nn::{Activation, GradSet, ParamSet, SetEmbedding};
pub use ode::{Dynamics, Jacobian, Scheme, StateVec, TimeGrid, Trajectory};

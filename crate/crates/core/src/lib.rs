//! Bayesian landmark registration driven by Langevin-perturbed Hamiltonian
//! landmark dynamics.
//!
//! Landmark sets are stored landmark-major as flat vectors of length `N·d`;
//! phase states hold momenta `p` and positions `q` in that layout.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod flow;
pub mod kernel;
pub mod langevin;
pub mod linearised;
pub mod numerics;
pub mod splitting;

pub use error::{Error, Result};
pub use flow::{flow, push_forward, shoot_register, velocity_field, DiscretePath, FlowSettings, Integrator};
pub use kernel::{GaussianKernel, Kernel, LandmarkConfig, PhaseState, ThermostatParams};

//! Schrödinger-bridge sampling from un-normalized densities.
//!
//! A pair of scalar potentials `phi` (forward) and `psi` (backward) is
//! parameterized by small residual networks. Their spatial gradients drive a
//! controlled diffusion from a Gaussian prior towards the target. Training
//! minimizes path-space objectives built from Euler–Maruyama trajectories:
//!
//! * a log-variance divergence between the forward and backward path measures,
//! * HJB residual (PINN), variance and TD regularizers that pin down the
//!   optimal (minimum-energy) bridge,
//! * the separately-controlled loss, which imposes the optimality conditions
//!   of each control on its own.
//!
//! Trained controls yield importance-weighted samples and an ELBO-type
//! estimate of `log Z`.
//!
//! Module map:
//!
//! | module       | contents                                                     |
//! |--------------|--------------------------------------------------------------|
//! | [`ndiff`]    | residual networks, derivative queries, reverse-mode graph, Adam |
//! | [`targets`]  | benchmark densities, Gaussian priors, reference values        |
//! | [`paths`]    | batched Euler–Maruyama simulation with cached noise           |
//! | [`losses`]   | discretized training objectives                               |
//! | [`estimators`] | importance weights, `log Z` estimator, weighted statistics  |
//! | [`trainer`]  | training loop, pretraining, evaluation reports                |
//! | [`phase2`]   | underdamped (position/velocity) dynamics                      |
//! | [`otmetrics`] | Sinkhorn entropic transport and the Gaussian bridge oracle   |

pub mod error;
pub mod estimators;
pub mod losses;
pub mod ndiff;
pub mod otmetrics;
pub mod paths;
pub mod phase2;
pub mod rng;
pub mod stats;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};

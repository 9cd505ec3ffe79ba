//! Conformal symplectic integration of stochastic Langevin equations with
//! additive noise.
//!
//! The model is
//!
//! ```text
//! dP = -f(Q) dt - v P dt + Σ dW,    dQ = M P dt,
//! ```
//!
//! with `f = ∇F`, friction `v > 0`, mass matrix `M` and noise matrix `Σ`.
//! The central scheme ([`integrators::gf2_step`]) is a one-step map of weak
//! order two that contracts `dP ∧ dQ` by exactly `e^{-vh}` per step. It is
//! obtained from a modified generating function of the associated
//! autonomous Hamiltonian system, which lives in [`genfun`].
//!
//! Module map:
//!
//! * [`models`]: problem definition, built-in test systems, Lyapunov function
//!   and Boltzmann–Gibbs densities.
//! * [`integrators`]: the one-step maps, their Jacobians, trajectories and
//!   Gaussian laws for linear models.
//! * [`genfun`]: augmented coordinates, Hamiltonians, generating-function
//!   coefficients and the scheme written in augmented coordinates.
//! * [`mc`]: seeding, Brownian increments, coupled estimators.
//! * [`analysis`]: quadrature, weak-error curves, order fits, structure
//!   metrics, temporal averages.
//! * [`cli`]: configuration-driven experiment runner.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod genfun;
pub mod integrators;
mod linalg;
pub mod mc;
pub mod models;

pub use error::{Error, Result};
pub use models::{LangevinModel, PhaseState};

//! Risk-aware cautious exploration for tabular reinforcement learning.
//!
//! The crate keeps a Dirichlet-Categorical belief over an unknown transition
//! kernel, back-propagates the probability of entering an unsafe state over a
//! short horizon under the believed-safest policy, approximates the mean and
//! variance of that believed risk with a first-order (delta-method) expansion,
//! and turns them into a one-sided Cantelli bound that filters the actions a
//! Q-learner is allowed to take.
//!
//! Modules:
//! - [`mdp`]: ground-truth MDPs, stepping and the observation boundary.
//! - [`belief`]: Dirichlet beliefs and their moments.
//! - [`risk`]: risk back-propagation, gradients, variance and safe sets.
//! - [`agent`]: the filtered Q-learner and the unfiltered baseline.
//! - [`envs`]: BridgeCross and Pacman builders plus layout files.
//! - [`oracle`]: independent validators for every approximation in `risk`.

pub mod agent;
pub mod belief;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod oracle;
pub mod risk;

pub use error::{Error, Result};
pub use mdp::{ActionId, Observation, StateId, TabularMdp, TransitionModel};

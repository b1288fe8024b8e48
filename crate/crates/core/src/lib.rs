//! Offline multi-agent reinforcement learning with implicit constraints.
//!
//! The crate is organised bottom-up:
//!
//! * [`mdp`]: tabular environments, the two-state multi-agent MDP, factored
//!   joint policies and seeded rollouts.
//! * [`dataset`]: offline buffers, their JSON Lines persistence and the derived
//!   statistics (empirical MDP, seen/unseen partition, behavior estimate).
//! * [`operators`]: the tabular Bellman operator family (standard, importance
//!   sampled, implicit-constraint, batch-constrained, trace-based) and
//!   fixed-point iteration.
//! * [`error_analysis`]: extrapolation-error propagation through the
//!   seen/unseen block system and concentrability coefficients.
//! * [`approx`]: small dense networks with hand-written backpropagation, the
//!   monotonic mixer and Adam.
//! * [`learners`]: ICQ, ICQ-MA and the BCQ-MA / CQL-MA / BC-MA baselines.

pub mod approx;
pub mod dataset;
pub mod error_analysis;
pub mod learners;
pub mod mdp;
pub mod operators;
pub mod qtable;
pub mod rng;

pub use dataset::{BehaviorEstimate, DatasetHeader, EmpiricalMdp, OfflineDataset};
pub use mdp::{ActionSpace, JointPolicy, MmdpSpec, PolicyTable, Step, TabularMdp, Trajectory};
pub use qtable::QTable;

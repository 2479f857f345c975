//! Networked multi-agent policy gradients for general utilities of
//! state-action occupancy measures.
//!
//! A team of agents sits on a communication graph. Each agent owns a local
//! state/action space, a local transition kernel over the global state-action
//! pair, and a local utility that is a (possibly nonlinear) function of its
//! discounted local occupancy measure. Policies are tabular softmax tables
//! conditioned on a graph neighborhood of radius kappa, and policy gradients
//! are estimated from sampled batches via shadow rewards and truncated
//! Q-tables that only read neighborhood information.
//!
//! The [`oracle`] module computes every quantity exactly on small instances
//! (occupancies, shadow Q-functions, policy gradients, influence matrices,
//! decay certificates) so that the sampled estimators and their error bounds
//! can be verified by enumeration.

pub mod config;
pub mod estimation;
pub mod graph;
pub mod indexer;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod utility;

pub use estimation::{Anchor, GradientEstimate, TdSchedule, TruncatedQTable};
pub use graph::{AgentGraph, NeighborhoodIndex};
pub use mdp::{FactoredMDP, Trajectory};
pub use oracle::{DecayCertificate, InfluenceMatrix, OccupancyMeasure};
pub use policy::LocalizedPolicy;
pub use trainer::{IterationMetrics, TrainConfig, TrainResult};
pub use utility::{LocalUtility, ShadowReward};

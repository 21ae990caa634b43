//! Workbench for decentralized graph-based traffic signal control.
//!
//! The crate bundles everything needed to train and evaluate graph
//! reinforcement-learning signal controllers on a built-in microscopic
//! traffic simulator:
//!
//! - [`roadnet`] — static road networks plus random-irregular and grid
//!   generators.
//! - [`simcore`] — discrete-time (1 s) car-following simulation, trip
//!   demand generation, and traffic metrics.
//! - [`obsgraph`] — per-step heterogeneous state graphs and the
//!   vehicle-sensor failure model.
//! - [`autodiff`] — a small dense-tensor reverse-mode differentiation
//!   engine with Adam/SGD updates.
//! - [`gcnmodel`] — the shared-parameter graph network with a
//!   deterministic Q-head and an implicit-quantile head.
//! - [`agents`] — DQN and quantile-regression losses, replay, action
//!   selection, the IGRL/DGRL policy ensemble (RGLight), and the
//!   fixed-time / greedy transportation baselines.
//! - [`harness`] — experiment orchestration: training runs, evaluation
//!   grids, the generalization matrix, switch-rate analysis, and report
//!   emission.

pub mod agents;
pub mod autodiff;
pub mod gcnmodel;
pub mod harness;
pub mod obsgraph;
pub mod roadnet;
pub mod simcore;

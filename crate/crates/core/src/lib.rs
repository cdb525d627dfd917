//! Offline imitation learning for anomaly detection in sequential decisions.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithmic piece
//! of the pipeline:
//!
//! - [`mdp`]: tabular deterministic environments, value iteration and
//!   Monte-Carlo value prediction used as ground-truth oracles.
//! - [`traj`]: trajectories, expert data generation and anomaly injection.
//! - [`autodiff`]: a small reverse-mode tape over dense 2-D tensors plus AdamW.
//! - [`policy`]: a causal transformer whose pre-softmax outputs are Q values.
//! - [`softrank`] and [`training`]: the action loss, the differentiable
//!   Spearman monotonicity loss and the two-stage training schedule.
//! - [`features`]: action-optimality and sequential-association window
//!   features.
//! - [`iforest`]: isolation forest boundary over the 2-D feature space.
//! - [`eval`]: metrics, verdicts, value correlation and monotonicity checks.
//!
//! File formats and the command-line front end live in the `oilad` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod eval;
pub mod features;
pub mod iforest;
pub mod math;
pub mod mdp;
pub mod policy;
pub mod rng;
pub mod softrank;
pub mod stats;
pub mod training;
pub mod traj;

pub use autodiff::{AdamW, AdamWConfig, Graph, Tensor, Var};
pub use features::{FeaturePoint, WindowConfig};
pub use iforest::IsoForest;
pub use mdp::{GridWorld, MdpSpec, TaxiWorld, ValueTables};
pub use policy::{PolicyConfig, TransformerPolicy};
pub use training::{TrainConfig, TrainHistory};
pub use traj::{Dataset, Label, Step, Trajectory};

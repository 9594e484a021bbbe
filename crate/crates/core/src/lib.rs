//! Offline soft-Bellman policy/value training on small, fully enumerable
//! token MDPs, with an exact soft value iteration oracle, preference and
//! supervised baselines, and value-guided decoding.
//!
//! ```
//! use oreo_core::envs::{full_coverage_dataset, Keyhole, KeyholeSpec};
//! use oreo_core::mdp::{PolicyTable, TaskMdp, DEFAULT_ENUM_CAP};
//! use oreo_core::oracle::soft_backward_induction;
//! use oreo_core::trainer::{train, TrainConfig};
//!
//! let mdp = Keyhole::new(KeyholeSpec::default()).unwrap();
//! let reference = PolicyTable::uniform(&mdp, DEFAULT_ENUM_CAP).unwrap();
//! let data = full_coverage_dataset(&mdp, DEFAULT_ENUM_CAP).unwrap();
//! let model = train(&data, &mdp, &reference, &TrainConfig { epochs: 50, ..Default::default() }).unwrap();
//! let oracle = soft_backward_induction(&mdp, &reference, 0.5, DEFAULT_ENUM_CAP).unwrap();
//! assert!(model.history.last().unwrap().max_bellman_residual < 1.0);
//! assert!(oracle.v0(&mdp.initial_states()[0]) > 0.0);
//! ```

pub mod baselines;
pub mod envs;
pub mod error;
pub mod inference;
pub mod mdp;
pub mod oracle;
pub mod rng;
pub mod trainer;

pub use error::{OreoError, Result};

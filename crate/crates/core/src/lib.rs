//! Split-inference offloading toolkit for DNN camera relocalization.
//!
//! * [`pose`]: poses, quaternion log/exp, metrics, two-pose fusion, trajectory files
//! * [`graph`], [`weights`], [`exec`], [`frame`]: the ResNet34 pose network model,
//!   seeded weights, and a bit-reproducible reference executor
//! * [`planner`]: per-cut latency model, calibration and split planning
//! * [`proto`]: the binary request/response wire format
//! * [`runtime`]: offload server, client and capture loop
//! * [`sim`]: discrete-event pipeline simulation and route coverage
//! * [`fusion`]: synthetic trajectories, noise models and the averaging study

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod frame;
pub mod fusion;
pub mod graph;
pub mod par;
pub mod planner;
pub mod pose;
pub mod proto;
pub mod rng;
pub mod runtime;
pub mod sim;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};
pub use graph::{build_backbone, Cut, LayerGraph, Stop, CUT_NAMES};
pub use pose::{Pose, Quaternion, Trajectory};

//! Alarm-raising policies for prescriptive business process monitoring.
//!
//! A case emits one prediction per prefix length. Each prediction carries a
//! relative predicted deviation `delta`, a reliability estimate `rho` and the
//! relative prefix length `tau`. A policy decides at every prefix whether to
//! raise an alarm (triggering a process adaptation) or to keep waiting. At
//! most one alarm is raised per case and every case is charged under a
//! parametric cost model.
//!
//! Modules:
//! - [`stream`]: prediction-stream data model, ensemble aggregation and file formats.
//! - [`costmodel`]: penalty/adaptation/compensation cost model and parameter envelopes.
//! - [`policies`]: first-positive, static prediction point and empirical thresholding.
//! - [`rl`]: online PPO agent with curiosity-shaped terminal rewards.
//! - [`metrics`]: MCC, MAE, earliness, savings and rolling windows.
//! - [`synthgen`]: seeded synthetic prediction streams with drift.
//! - [`harness`]: cost-parameter grid runner, reports and CLI plumbing.

pub mod costmodel;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod policies;
pub mod rl;
pub mod stream;
pub mod synthgen;

pub use error::{Error, Result};

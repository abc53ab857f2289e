//! Deterministic simulation and closed-loop resource management for
//! generative inference on heterogeneous edge devices.
//!
//! The [`simulator`] owns hidden device state and replays a workload through
//! per-device FIFO queues. Routing policies see only a causal view. The
//! [`agent`] combines the online performance model ([`opm`]), the fast-path
//! [`router`] and the event-driven [`metacontrol`] layer; the [`harness`]
//! runs presets and writes reports.

pub mod agent;
pub mod harness;
pub mod metacontrol;
pub mod opm;
pub mod profiles;
pub mod router;
pub mod simulator;
pub mod types;

pub use types::{DeviceId, Millis, ServiceModel, TaskKind};

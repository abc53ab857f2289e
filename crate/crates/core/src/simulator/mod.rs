//! Deterministic discrete-event simulator.
//!
//! Devices are single-server FIFO queues. The engine owns the hidden
//! [`truth::GroundTruthState`]; routing policies only ever see a
//! [`SystemView`], completed [`ExecutionRecord`]s, and coarse event
//! [`Annotation`]s.

mod engine;
pub mod plan;
pub(crate) mod truth;
pub mod workload;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{run_scenario, Dispatcher, EventLogEntry, RunOutput};
pub use plan::{builtin_plans, PlanError, ScenarioAction, ScenarioEvent, ScenarioPlan, SemanticLabel};
pub use truth::{DevicePool, PriorError};
pub use workload::{generate_workload, llm_bin, MixtureRule, TaskSpec, DEFAULT_LAMBDA};

use crate::types::{DeviceId, Millis, TaskKind};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("task {task}: policy chose unavailable device {device}")]
    UnavailableDevice { device: DeviceId, task: usize },
    #[error("task {task}: policy chose device {device} which does not serve {kind}")]
    WrongKind {
        device: DeviceId,
        task: usize,
        kind: TaskKind,
    },
    #[error("task {task}: policy chose unknown device {device}")]
    UnknownDevice { device: DeviceId, task: usize },
    #[error("task {task}: policy declined although {feasible} feasible device(s) were available")]
    Declined { task: usize, feasible: usize },
    #[error("workload arrivals must be strictly increasing (task {task})")]
    UnorderedWorkload { task: usize },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Causal feedback for one completed task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub task_id: usize,
    pub device: DeviceId,
    pub kind: TaskKind,
    pub arrival_ms: Millis,
    pub dispatch_ms: Millis,
    pub start_ms: Millis,
    pub completion_ms: Millis,
    pub latency_ms: Millis,
    pub service_ms: Millis,
    pub n_in: u32,
    pub n_out: u32,
    pub stutter: u8,
}

/// Why the engine is asking for a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchCause {
    Arrival,
    /// The task was queued on a device that departed, or waited with no
    /// feasible device.
    Redispatch,
}

/// Policy-visible event annotation. Degradation magnitudes and drift are never exposed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub task_index: usize,
    pub time_ms: Millis,
    pub device: DeviceId,
    #[serde(flatten)]
    pub kind: AnnotationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnnotationKind {
    SemanticOnset { label: SemanticLabel },
    SemanticOffset { label: SemanticLabel },
    DeviceLeave,
    DeviceReturn,
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotationKind::SemanticOnset { label } => write!(f, "semantic_onset:{label}"),
            AnnotationKind::SemanticOffset { label } => write!(f, "semantic_offset:{label}"),
            AnnotationKind::DeviceLeave => f.write_str("device_leave"),
            AnnotationKind::DeviceReturn => f.write_str("device_return"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InFlightView {
    pub task: TaskSpec,
    pub start_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceView {
    pub device: DeviceId,
    pub kind: TaskKind,
    pub available: bool,
    pub queued: Vec<TaskSpec>,
    pub in_flight: Option<InFlightView>,
    pub completed: usize,
    /// Busy time observed so far, including the elapsed part of the in-flight task.
    pub busy_ms: Millis,
}

impl DeviceView {
    pub fn queue_len(&self) -> usize {
        self.queued.len() + usize::from(self.in_flight.is_some())
    }
}

/// Everything a causal policy may observe at a decision epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemView {
    pub now_ms: Millis,
    /// Index of the next arrival (equal to the task id while routing an arrival).
    pub task_index: usize,
    pub devices: Vec<DeviceView>,
    /// Semantic labels currently exposed, by device.
    pub semantic: BTreeMap<DeviceId, SemanticLabel>,
}

impl SystemView {
    pub fn device(&self, id: DeviceId) -> Option<&DeviceView> {
        self.devices.iter().find(|d| d.device == id)
    }

    /// Available devices serving `kind`, in id order.
    pub fn candidates(&self, kind: TaskKind) -> impl Iterator<Item = &DeviceView> {
        self.devices.iter().filter(move |d| d.available && d.kind == kind)
    }
}

/// A causal routing policy driven by the engine.
pub trait Policy {
    /// Picks a device for `task`, or `None` when no available device serves its kind.
    fn select(&mut self, task: &TaskSpec, cause: DispatchCause, view: &SystemView) -> Option<DeviceId>;

    fn on_annotation(&mut self, _annotation: &Annotation, _view: &SystemView) {}

    /// Called exactly at `record.completion_ms`.
    fn on_feedback(&mut self, _record: &ExecutionRecord, _view: &SystemView) {}
}

/// Engine-internal queue snapshot handed to the oracle router.
#[derive(Debug, Clone)]
pub(crate) struct QueueSnapshot {
    pub device: DeviceId,
    pub available: bool,
    pub in_flight_completion_ms: Option<Millis>,
    pub queued: Vec<TaskSpec>,
}

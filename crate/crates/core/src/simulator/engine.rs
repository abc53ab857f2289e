use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::plan::{ScenarioAction, ScenarioPlan};
use super::truth::{DevicePool, GroundTruthState};
use super::workload::TaskSpec;
use super::{
    Annotation, AnnotationKind, DeviceView, DispatchCause, EngineError, ExecutionRecord, InFlightView, Policy,
    QueueSnapshot, SystemView,
};
use crate::router;
use crate::types::{DeviceId, Millis};

/// Who routes tasks during a run.
pub enum Dispatcher<'a> {
    /// A causal policy restricted to [`SystemView`].
    Causal(&'a mut dyn Policy),
    /// The full-information greedy referent.
    Oracle,
}

/// One scenario event as it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub task_index: usize,
    pub time_ms: Millis,
    #[serde(rename = "type")]
    pub kind: String,
    pub device: DeviceId,
    pub label: Option<String>,
    /// Whether the event was exposed to policies as an annotation.
    pub visible: bool,
}

impl fmt::Display for EventLogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "task={} time_ms={} type={} device={} label={} visible={}",
            self.task_index,
            self.time_ms,
            self.kind,
            self.device.0,
            self.label.as_deref().unwrap_or("-"),
            self.visible
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    /// Completed tasks ordered by task id.
    pub records: Vec<ExecutionRecord>,
    pub events: Vec<EventLogEntry>,
    /// Tasks still waiting for a feasible device when the run ended.
    pub unserved: Vec<usize>,
}

// Tie-break at equal times: scenario events, then completions, then arrivals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventClass {
    Scenario = 0,
    Completion = 1,
    Arrival = 2,
}

#[derive(Debug, Clone, Copy)]
enum Payload {
    Scenario(usize),
    Completion(DeviceId),
    Arrival(usize),
}

#[derive(Debug, Clone, Copy)]
struct Timed {
    time: Millis,
    class: EventClass,
    seq: u64,
    payload: Payload,
}

impl PartialEq for Timed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Timed {}

impl PartialOrd for Timed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timed {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.class.cmp(&other.class))
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    task: usize,
    dispatch_ms: Millis,
    stutter: u8,
}

#[derive(Debug, Clone, Copy)]
struct Running {
    queued: Queued,
    start_ms: Millis,
    service_ms: Millis,
}

#[derive(Debug, Default)]
struct DeviceRuntime {
    fifo: VecDeque<Queued>,
    running: Option<Running>,
    completed: usize,
    busy_ms: Millis,
}

struct Engine<'w> {
    workload: &'w [TaskSpec],
    truth: GroundTruthState,
    devices: Vec<DeviceRuntime>,
    pending: VecDeque<usize>,
    heap: BinaryHeap<Reverse<Timed>>,
    seq: u64,
    now: Millis,
    arrivals_seen: usize,
    semantic: BTreeMap<DeviceId, super::SemanticLabel>,
    records: Vec<ExecutionRecord>,
    events: Vec<EventLogEntry>,
}

/// Runs `workload` against `pool` under `plan`, routing with `dispatcher`.
///
/// Plan events indexed past the end of the workload never fire.
pub fn run_scenario(
    pool: &DevicePool,
    plan: &ScenarioPlan,
    workload: &[TaskSpec],
    mut dispatcher: Dispatcher<'_>,
) -> Result<RunOutput, EngineError> {
    plan.validate(pool.len())?;
    for pair in workload.windows(2) {
        if pair[1].arrival_ms <= pair[0].arrival_ms {
            return Err(EngineError::UnorderedWorkload { task: pair[1].task_id });
        }
    }
    let mut engine = Engine {
        workload,
        truth: GroundTruthState::from_pool(pool),
        devices: (0..pool.len()).map(|_| DeviceRuntime::default()).collect(),
        pending: VecDeque::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        arrivals_seen: 0,
        semantic: BTreeMap::new(),
        records: Vec::with_capacity(workload.len()),
        events: Vec::new(),
    };
    for (i, ev) in plan.events.iter().enumerate() {
        if let Some(task) = workload.get(ev.task_index) {
            engine.push(task.arrival_ms, EventClass::Scenario, Payload::Scenario(i));
        }
    }
    for (i, task) in workload.iter().enumerate() {
        engine.push(task.arrival_ms, EventClass::Arrival, Payload::Arrival(i));
    }

    while let Some(Reverse(ev)) = engine.heap.pop() {
        engine.now = ev.time;
        match ev.payload {
            Payload::Arrival(i) => {
                engine.dispatch(i, DispatchCause::Arrival, &mut dispatcher)?;
                engine.arrivals_seen = i + 1;
            }
            Payload::Completion(device) => engine.complete(device, &mut dispatcher)?,
            Payload::Scenario(i) => {
                engine.scenario(&plan.events[i].action, plan.events[i].task_index, &mut dispatcher)?
            }
        }
    }

    let mut records = engine.records;
    records.sort_by_key(|r| r.task_id);
    Ok(RunOutput {
        records,
        events: engine.events,
        unserved: engine.pending.into_iter().map(|i| workload[i].task_id).collect(),
    })
}

impl Engine<'_> {
    fn push(&mut self, time: Millis, class: EventClass, payload: Payload) {
        self.seq += 1;
        self.heap.push(Reverse(Timed {
            time,
            class,
            seq: self.seq,
            payload,
        }));
    }

    fn view(&self) -> SystemView {
        let devices = self
            .devices
            .iter()
            .enumerate()
            .map(|(i, rt)| {
                let id = DeviceId(i as u16);
                let elapsed = rt.running.map_or(0.0, |r| self.now - r.start_ms);
                DeviceView {
                    device: id,
                    kind: self.truth.kind(id),
                    available: self.truth.is_available(id),
                    queued: rt.fifo.iter().map(|q| self.workload[q.task]).collect(),
                    in_flight: rt.running.map(|r| InFlightView {
                        task: self.workload[r.queued.task],
                        start_ms: r.start_ms,
                    }),
                    completed: rt.completed,
                    busy_ms: rt.busy_ms + elapsed,
                }
            })
            .collect();
        SystemView {
            now_ms: self.now,
            task_index: self.arrivals_seen,
            devices,
            semantic: self.semantic.clone(),
        }
    }

    fn snapshots(&self) -> Vec<QueueSnapshot> {
        self.devices
            .iter()
            .enumerate()
            .map(|(i, rt)| {
                let id = DeviceId(i as u16);
                QueueSnapshot {
                    device: id,
                    available: self.truth.is_available(id),
                    in_flight_completion_ms: rt.running.map(|r| r.start_ms + r.service_ms),
                    queued: rt.fifo.iter().map(|q| self.workload[q.task]).collect(),
                }
            })
            .collect()
    }

    fn feasible(&self, task: &TaskSpec) -> usize {
        (0..self.devices.len())
            .map(|i| DeviceId(i as u16))
            .filter(|&d| self.truth.is_available(d) && self.truth.kind(d) == task.kind)
            .count()
    }

    fn dispatch(&mut self, i: usize, cause: DispatchCause, dispatcher: &mut Dispatcher<'_>) -> Result<(), EngineError> {
        let task = self.workload[i];
        let choice = match dispatcher {
            Dispatcher::Causal(policy) => policy.select(&task, cause, &self.view()),
            Dispatcher::Oracle => router::select_oracle(&task, &self.truth, &self.snapshots(), self.now),
        };
        let Some(device) = choice else {
            let feasible = self.feasible(&task);
            if feasible > 0 {
                return Err(EngineError::Declined {
                    task: task.task_id,
                    feasible,
                });
            }
            self.pending.push_back(i);
            return Ok(());
        };
        if device.index() >= self.devices.len() {
            return Err(EngineError::UnknownDevice {
                device,
                task: task.task_id,
            });
        }
        if !self.truth.is_available(device) {
            return Err(EngineError::UnavailableDevice {
                device,
                task: task.task_id,
            });
        }
        if self.truth.kind(device) != task.kind {
            return Err(EngineError::WrongKind {
                device,
                task: task.task_id,
                kind: task.kind,
            });
        }
        let queued = Queued {
            task: i,
            dispatch_ms: self.now,
            stutter: self.truth.stutter_indicator(device),
        };
        self.devices[device.index()].fifo.push_back(queued);
        if self.devices[device.index()].running.is_none() {
            self.start_next(device)?;
        }
        Ok(())
    }

    fn start_next(&mut self, device: DeviceId) -> Result<(), EngineError> {
        let Some(queued) = self.devices[device.index()].fifo.pop_front() else {
            return Ok(());
        };
        let service = self.truth.true_service_time(device, &self.workload[queued.task])?;
        self.devices[device.index()].running = Some(Running {
            queued,
            start_ms: self.now,
            service_ms: service,
        });
        self.push(self.now + service, EventClass::Completion, Payload::Completion(device));
        Ok(())
    }

    fn complete(&mut self, device: DeviceId, dispatcher: &mut Dispatcher<'_>) -> Result<(), EngineError> {
        let rt = &mut self.devices[device.index()];
        let run = rt.running.take().expect("completion without a running task");
        rt.completed += 1;
        rt.busy_ms += run.service_ms;
        let task = self.workload[run.queued.task];
        let completion = run.start_ms + run.service_ms;
        let record = ExecutionRecord {
            task_id: task.task_id,
            device,
            kind: task.kind,
            arrival_ms: task.arrival_ms,
            dispatch_ms: run.queued.dispatch_ms,
            start_ms: run.start_ms,
            completion_ms: completion,
            latency_ms: completion - task.arrival_ms,
            service_ms: run.service_ms,
            n_in: task.n_in,
            n_out: task.n_out,
            stutter: run.queued.stutter,
        };
        self.records.push(record);
        if self.truth.is_available(device) {
            self.start_next(device)?;
        }
        if let Dispatcher::Causal(policy) = dispatcher {
            let view = self.view();
            policy.on_feedback(&record, &view);
        }
        Ok(())
    }

    fn scenario(
        &mut self,
        action: &ScenarioAction,
        task_index: usize,
        dispatcher: &mut Dispatcher<'_>,
    ) -> Result<(), EngineError> {
        let device = action.device();
        let (annotation, label) = match *action {
            ScenarioAction::SemanticOnset { label, .. } => {
                self.semantic.insert(device, label);
                (Some(AnnotationKind::SemanticOnset { label }), Some(label.to_string()))
            }
            ScenarioAction::SemanticOffset { .. } => {
                let label = self.semantic.remove(&device).expect("validated pairing");
                (Some(AnnotationKind::SemanticOffset { label }), Some(label.to_string()))
            }
            ScenarioAction::DeviceLeave { .. } => (Some(AnnotationKind::DeviceLeave), None),
            ScenarioAction::DeviceReturn { .. } => (Some(AnnotationKind::DeviceReturn), None),
            ScenarioAction::DriftStep { model, factor, .. } => (None, Some(format!("{model}x{factor}"))),
            ScenarioAction::DriftRestore { model, .. } => (None, Some(model.to_string())),
        };
        self.truth.apply(action);
        self.events.push(EventLogEntry {
            task_index,
            time_ms: self.now,
            kind: action.type_name().to_string(),
            device,
            label,
            visible: annotation.is_some(),
        });

        if let (Some(kind), Dispatcher::Causal(policy)) = (annotation, &mut *dispatcher) {
            let ann = Annotation {
                task_index,
                time_ms: self.now,
                device,
                kind,
            };
            let view = self.view();
            policy.on_annotation(&ann, &view);
        }

        match action {
            ScenarioAction::DeviceLeave { .. } => {
                let stranded: Vec<Queued> = self.devices[device.index()].fifo.drain(..).collect();
                for q in stranded {
                    self.dispatch(q.task, DispatchCause::Redispatch, dispatcher)?;
                }
            }
            ScenarioAction::DeviceReturn { .. } => {
                let waiting: Vec<usize> = self.pending.drain(..).collect();
                for i in waiting {
                    self.dispatch(i, DispatchCause::Redispatch, dispatcher)?;
                }
                if self.devices[device.index()].running.is_none() {
                    self.start_next(device)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

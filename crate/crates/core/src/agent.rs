//! The closed-loop agent: fast-path routing over the online performance
//! model, with the meta-controller adjusting risk gating, calibration, and
//! router configuration on events.

use serde::Serialize;

use crate::metacontrol::{AdapterConfig, AuditLog, Invocation, MetaController, ToolContext, TriggerEvent};
use crate::opm::{Opm, OpmError, DEFAULT_WINDOW_CAPACITY, DRIFT_WINDOW_MS};
use crate::profiles::DevicePrior;
use crate::router::{select_e3, Decision, PolicyVisibleState, RiskTable, RouterConfig};
use crate::simulator::{Annotation, DispatchCause, ExecutionRecord, Policy, SystemView, TaskSpec};
use crate::types::{DeviceId, Millis, TaskKind};

/// Warmup refits the model every this many tasks.
pub const WARMUP_REFIT_PERIOD: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub warmup_budget: usize,
    pub router: RouterConfig,
    pub window_capacity: usize,
    pub trace_decisions: bool,
    pub adapter: Option<AdapterConfig>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            warmup_budget: 0,
            router: RouterConfig::default(),
            window_capacity: DEFAULT_WINDOW_CAPACITY,
            trace_decisions: false,
            adapter: None,
        }
    }
}

/// Risk context of one dispatch, for checking hard avoidance after the fact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchSample {
    pub task_id: usize,
    pub task_index: usize,
    pub device: DeviceId,
    pub chosen_risky: bool,
    /// A non-risky available device of the same kind existed.
    pub safe_available: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftSample {
    pub task_index: usize,
    pub time_ms: Millis,
    pub device: DeviceId,
    pub model: TaskKind,
    pub ratio: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvocationRecord {
    pub invocation: Invocation,
    pub sim_time_ms: Millis,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AgentStats {
    pub invocations: usize,
    pub tool_calls: usize,
    pub max_rounds: usize,
    pub dispatches: usize,
    pub score_evaluations: u64,
    pub candidate_total: usize,
}

/// Everything an agent leaves behind after a run.
#[derive(Debug, Clone)]
pub struct AgentArtifacts {
    pub opm: Opm,
    pub audit: AuditLog,
    pub stats: AgentStats,
    pub invocations: Vec<InvocationRecord>,
    pub dispatches: Vec<DispatchSample>,
    pub drift: Vec<DriftSample>,
    pub decisions: Vec<Decision>,
    pub final_router: RouterConfig,
}

pub struct E3Agent {
    opm: Opm,
    risk: RiskTable,
    router: RouterConfig,
    meta: MetaController,
    history: Vec<ExecutionRecord>,
    warmup_budget: usize,
    next_new_task: usize,
    stats: AgentStats,
    trace_decisions: bool,
    invocations: Vec<InvocationRecord>,
    dispatches: Vec<DispatchSample>,
    drift: Vec<DriftSample>,
    decisions: Vec<Decision>,
}

impl E3Agent {
    pub fn new(priors: &[DevicePrior], config: AgentConfig) -> Result<Self, OpmError> {
        Ok(E3Agent {
            opm: Opm::seed_with_capacity(priors, config.window_capacity)?,
            risk: RiskTable::default(),
            router: config.router,
            meta: MetaController::new(config.warmup_budget, config.adapter),
            history: Vec::new(),
            warmup_budget: config.warmup_budget,
            next_new_task: 0,
            stats: AgentStats::default(),
            trace_decisions: config.trace_decisions,
            invocations: Vec::new(),
            dispatches: Vec::new(),
            drift: Vec::new(),
            decisions: Vec::new(),
        })
    }

    pub fn opm(&self) -> &Opm {
        &self.opm
    }

    pub fn risk(&self) -> &RiskTable {
        &self.risk
    }

    pub fn router_config(&self) -> RouterConfig {
        self.router
    }

    pub fn audit(&self) -> &AuditLog {
        self.meta.audit()
    }

    pub fn stats(&self) -> AgentStats {
        AgentStats {
            invocations: self.meta.invocations(),
            tool_calls: self.meta.tool_calls(),
            max_rounds: self.meta.max_rounds_used(),
            ..self.stats
        }
    }

    pub fn into_artifacts(self) -> AgentArtifacts {
        let stats = self.stats();
        AgentArtifacts {
            opm: self.opm,
            audit: self.meta.into_audit(),
            stats,
            invocations: self.invocations,
            dispatches: self.dispatches,
            drift: self.drift,
            decisions: self.decisions,
            final_router: self.router,
        }
    }

    fn invoke(&mut self, inv: Invocation, view: &SystemView) {
        let mut ctx = ToolContext {
            opm: &mut self.opm,
            risk: &mut self.risk,
            config: &mut self.router,
            view,
            history: &self.history,
            origin: "",
        };
        self.meta.invoke(&inv, &mut ctx);
        self.invocations.push(InvocationRecord {
            invocation: inv,
            sim_time_ms: view.now_ms,
        });
    }

    /// Task-indexed duties: warmup refit cadence and warmup points.
    fn on_new_task(&mut self, k: usize, view: &SystemView) {
        if k > 0 && k < self.warmup_budget && k.is_multiple_of(WARMUP_REFIT_PERIOD) {
            self.opm.refit_all(1, Some(self.opm.capacity()), k);
        }
        if let Some(inv) = self.meta.evaluate(TriggerEvent::Task, k) {
            self.invoke(inv, view);
        }
    }
}

impl Policy for E3Agent {
    fn select(&mut self, task: &TaskSpec, cause: DispatchCause, view: &SystemView) -> Option<DeviceId> {
        if cause == DispatchCause::Arrival {
            while self.next_new_task <= task.task_id {
                let k = self.next_new_task;
                self.next_new_task += 1;
                self.on_new_task(k, view);
            }
        }
        let state = PolicyVisibleState::build(view, &self.opm, &self.risk, self.router)
            .expect("every device has a seeded estimate");
        let decision = select_e3(task, &state, &mut self.stats.score_evaluations)
            .expect("candidates come from the seeded pool")?;
        let matching: Vec<_> = state.devices.iter().filter(|c| c.kind == task.kind).collect();
        self.stats.candidate_total += matching.len();
        self.dispatches.push(DispatchSample {
            task_id: task.task_id,
            task_index: view.task_index,
            device: decision.chosen,
            chosen_risky: self.risk.is_risky(decision.chosen),
            safe_available: matching.iter().any(|c| !c.risky),
        });
        self.stats.dispatches += 1;
        self.risk.tick();
        let chosen = decision.chosen;
        if self.trace_decisions {
            self.decisions.push(decision);
        }
        Some(chosen)
    }

    fn on_annotation(&mut self, annotation: &Annotation, view: &SystemView) {
        if let Some(inv) = self
            .meta
            .evaluate(TriggerEvent::Annotation(annotation), annotation.task_index)
        {
            self.invoke(inv, view);
        }
    }

    fn on_feedback(&mut self, record: &ExecutionRecord, view: &SystemView) {
        self.opm
            .ingest_feedback(record, view.now_ms)
            .expect("feedback arrives at completion time for a seeded device");
        self.history.push(*record);
        let reading = self
            .opm
            .drift_ratio(record.device, record.kind, DRIFT_WINDOW_MS, view.now_ms);
        self.drift.push(DriftSample {
            task_index: view.task_index,
            time_ms: view.now_ms,
            device: record.device,
            model: record.kind,
            ratio: reading.ratio,
            sample_count: reading.sample_count,
        });
        let event = TriggerEvent::Residual {
            device: record.device,
            model: record.kind,
            reading,
        };
        if let Some(inv) = self.meta.evaluate(event, view.task_index) {
            self.invoke(inv, view);
        }
    }
}

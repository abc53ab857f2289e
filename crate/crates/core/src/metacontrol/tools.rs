use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::opm::{Opm, OpmError, RefitOutcome, DEFAULT_WINDOW_CAPACITY, DRIFT_THRESHOLD, DRIFT_WINDOW_MS};
use crate::router::{RiskOverride, RiskTable, RouterConfig, RouterPolicy, DEFAULT_RISK_TTL};
use crate::simulator::{ExecutionRecord, SystemView};
use crate::types::{DeviceId, Millis, TaskKind};

pub const TOOL_NAMES: [&str; 9] = [
    "get_system_status",
    "pull_observations",
    "compute_drift",
    "update_calibration",
    "switch_router",
    "set_router_params",
    "trigger_online_profile_update",
    "set_device_risky",
    "clear_device_risky",
];

const DEFAULT_OBSERVATION_WINDOW: usize = 20;
const DEFAULT_MIN_SAMPLES: usize = 3;

fn default_observation_window() -> usize {
    DEFAULT_OBSERVATION_WINDOW
}

fn default_drift_window() -> Millis {
    DRIFT_WINDOW_MS
}

fn default_refit_window() -> usize {
    DEFAULT_WINDOW_CAPACITY
}

fn default_min_samples() -> usize {
    DEFAULT_MIN_SAMPLES
}

fn default_ttl() -> u32 {
    DEFAULT_RISK_TTL
}

/// The closed set of actions available to the meta-controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "arguments", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToolCall {
    GetSystemStatus {},
    PullObservations {
        #[serde(default = "default_observation_window")]
        window: usize,
        #[serde(default = "default_observation_window")]
        limit: usize,
    },
    ComputeDrift {
        device: DeviceId,
        model: TaskKind,
        #[serde(default = "default_drift_window")]
        window_ms: Millis,
    },
    UpdateCalibration {
        device: DeviceId,
        model: TaskKind,
        ratio: f64,
    },
    SwitchRouter {
        router: String,
    },
    SetRouterParams {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        explore_weight_ms: Option<Millis>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        risk_penalty_ms: Option<Millis>,
    },
    TriggerOnlineProfileUpdate {
        #[serde(default = "default_refit_window")]
        window: usize,
        #[serde(default = "default_min_samples")]
        min_samples: usize,
    },
    SetDeviceRisky {
        device: DeviceId,
        #[serde(default = "default_ttl")]
        ttl: u32,
    },
    ClearDeviceRisky {
        device: DeviceId,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("{tool}: bad arguments: {message}")]
    BadArguments { tool: String, message: String },
    #[error("{tool}: {message}")]
    OutOfBounds { tool: &'static str, message: String },
    #[error(transparent)]
    Estimate(#[from] OpmError),
}

impl ToolCall {
    /// Parses a named call with JSON arguments, as produced by an external model.
    pub fn parse(name: &str, arguments: Value) -> Result<Self, ToolError> {
        if !TOOL_NAMES.contains(&name) {
            return Err(ToolError::UnknownTool(name.to_string()));
        }
        let arguments = if arguments.is_null() { json!({}) } else { arguments };
        serde_json::from_value(json!({ "name": name, "arguments": arguments })).map_err(|e| ToolError::BadArguments {
            tool: name.to_string(),
            message: e.to_string(),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToolCall::GetSystemStatus {} => "get_system_status",
            ToolCall::PullObservations { .. } => "pull_observations",
            ToolCall::ComputeDrift { .. } => "compute_drift",
            ToolCall::UpdateCalibration { .. } => "update_calibration",
            ToolCall::SwitchRouter { .. } => "switch_router",
            ToolCall::SetRouterParams { .. } => "set_router_params",
            ToolCall::TriggerOnlineProfileUpdate { .. } => "trigger_online_profile_update",
            ToolCall::SetDeviceRisky { .. } => "set_device_risky",
            ToolCall::ClearDeviceRisky { .. } => "clear_device_risky",
        }
    }

    /// The call's arguments as a JSON object.
    pub fn arguments(&self) -> Value {
        let v = serde_json::to_value(self).expect("tool calls serialize");
        v.get("arguments").cloned().unwrap_or_else(|| json!({}))
    }

    fn out_of_bounds(&self, message: impl Into<String>) -> ToolError {
        ToolError::OutOfBounds {
            tool: self.name(),
            message: message.into(),
        }
    }
}

/// Policy-visible handles a tool may read or mutate.
pub struct ToolContext<'a> {
    pub opm: &'a mut Opm,
    pub risk: &'a mut RiskTable,
    pub config: &'a mut RouterConfig,
    pub view: &'a SystemView,
    /// Completed records so far, in completion order.
    pub history: &'a [ExecutionRecord],
    /// Signature of the invocation issuing the call.
    pub origin: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutput {
    pub result: Value,
    /// Old and new values of anything mutated; `Null` for read-only tools.
    pub state_delta: Value,
}

impl ToolOutput {
    fn read(result: Value) -> Self {
        ToolOutput {
            result,
            state_delta: Value::Null,
        }
    }
}

fn positive_finite(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn non_negative_finite(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

pub fn execute_tool(call: &ToolCall, ctx: &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> {
    let device_kind = |d: DeviceId| ctx.view.device(d).map(|v| v.kind);
    match *call {
        ToolCall::GetSystemStatus {} => {
            let now = ctx.view.now_ms;
            let devices: Vec<Value> = ctx
                .view
                .devices
                .iter()
                .map(|d| {
                    let utilization = if now > 0.0 { d.busy_ms / now } else { 0.0 };
                    json!({
                        "device": d.device,
                        "model": d.kind,
                        "available": d.available,
                        "queue_len": d.queue_len(),
                        "completed": d.completed,
                        "utilization": utilization,
                        "risky": ctx.risk.is_risky(d.device),
                    })
                })
                .collect();
            Ok(ToolOutput::read(json!({
                "sim_time_ms": now,
                "task_index": ctx.view.task_index,
                "devices": devices,
                "semantic": ctx.view.semantic,
                "router": *ctx.config,
            })))
        }
        ToolCall::PullObservations { window, limit } => {
            if window == 0 || limit == 0 {
                return Err(call.out_of_bounds("window and limit must be positive"));
            }
            let recent = &ctx.history[ctx.history.len().saturating_sub(window)..];
            let stutter_count: usize = recent.iter().map(|r| usize::from(r.stutter)).sum();
            let shown = &recent[recent.len().saturating_sub(limit)..];
            let observations: Vec<Value> = shown
                .iter()
                .map(|r| {
                    json!({
                        "task_id": r.task_id,
                        "device": r.device,
                        "model": r.kind,
                        "n_in": r.n_in,
                        "n_out": r.n_out,
                        "latency_ms": r.latency_ms,
                        "service_ms": r.service_ms,
                        "stutter": r.stutter,
                    })
                })
                .collect();
            Ok(ToolOutput::read(json!({
                "count": recent.len(),
                "stutter_count": stutter_count,
                "observations": observations,
            })))
        }
        ToolCall::ComputeDrift {
            device,
            model,
            window_ms,
        } => {
            if device_kind(device) != Some(model) {
                return Err(call.out_of_bounds(format!("device {} does not serve {model}", device.0)));
            }
            if !positive_finite(window_ms) {
                return Err(call.out_of_bounds("window_ms must be positive"));
            }
            let r = ctx.opm.drift_ratio(device, model, window_ms, ctx.view.now_ms);
            let exceeding = ctx
                .opm
                .trailing_exceedances(device, model, DRIFT_THRESHOLD, window_ms, ctx.view.now_ms);
            Ok(ToolOutput::read(json!({
                "device": device,
                "model": model,
                "ratio": r.ratio,
                "sample_count": r.sample_count,
                "exceeding": exceeding,
            })))
        }
        ToolCall::UpdateCalibration { device, model, ratio } => {
            if device_kind(device) != Some(model) {
                return Err(call.out_of_bounds(format!("device {} does not serve {model}", device.0)));
            }
            if !positive_finite(ratio) {
                return Err(call.out_of_bounds(format!("ratio must be positive and finite, got {ratio}")));
            }
            let (old, new) = ctx.opm.apply_calibration(device, model, ratio)?;
            Ok(ToolOutput {
                result: json!({ "device": device, "model": model, "calibration": new }),
                state_delta: json!({ "calibration": { "old": old, "new": new } }),
            })
        }
        ToolCall::SwitchRouter { ref router } => {
            let policy: RouterPolicy = router
                .parse()
                .map_err(|_| call.out_of_bounds(format!("router must be sect or explore_risk, got `{router}`")))?;
            let old = ctx.config.policy;
            ctx.config.policy = policy;
            Ok(ToolOutput {
                result: json!({ "router": policy }),
                state_delta: json!({ "router": { "old": old, "new": policy } }),
            })
        }
        ToolCall::SetRouterParams {
            explore_weight_ms,
            risk_penalty_ms,
        } => {
            for v in [explore_weight_ms, risk_penalty_ms].into_iter().flatten() {
                if !non_negative_finite(v) {
                    return Err(call.out_of_bounds(format!("weights must be non-negative, got {v}")));
                }
            }
            let old = *ctx.config;
            if let Some(v) = explore_weight_ms {
                ctx.config.explore_weight_ms = v;
            }
            if let Some(v) = risk_penalty_ms {
                ctx.config.risk_penalty_ms = v;
            }
            Ok(ToolOutput {
                result: json!({ "router_config": *ctx.config }),
                state_delta: json!({ "router_config": { "old": old, "new": *ctx.config } }),
            })
        }
        ToolCall::TriggerOnlineProfileUpdate { window, min_samples } => {
            if window == 0 || min_samples == 0 {
                return Err(call.out_of_bounds("window and min_samples must be positive"));
            }
            let outcomes = ctx.opm.refit_all(min_samples, Some(window), ctx.view.task_index);
            let mut summary = Vec::new();
            let mut delta = Vec::new();
            for ((device, model), outcome) in outcomes {
                match outcome {
                    RefitOutcome::Insufficient { have, need } => summary.push(json!({
                        "device": device, "model": model, "updated": false, "have": have, "need": need,
                    })),
                    RefitOutcome::Updated {
                        old,
                        new,
                        old_calibration,
                        used,
                    } => {
                        summary.push(json!({
                            "device": device, "model": model, "updated": true, "used": used, "estimate": new,
                        }));
                        delta.push(json!({
                            "device": device,
                            "model": model,
                            "estimate": { "old": old, "new": new },
                            "calibration": { "old": old_calibration, "new": 1.0 },
                        }));
                    }
                }
            }
            Ok(ToolOutput {
                result: json!({ "refits": summary }),
                state_delta: Value::Array(delta),
            })
        }
        ToolCall::SetDeviceRisky { device, ttl } => {
            if device_kind(device).is_none() {
                return Err(call.out_of_bounds(format!("unknown device {}", device.0)));
            }
            if ttl == 0 {
                return Err(call.out_of_bounds("ttl must be positive"));
            }
            let before = ctx.risk.mask();
            ctx.risk.set(RiskOverride {
                device,
                ttl_tasks: ttl,
                origin_signature: ctx.origin.to_string(),
                set_at: ctx.view.task_index,
            });
            Ok(ToolOutput {
                result: json!({ "device": device, "ttl": ttl }),
                state_delta: json!({ "risky": { "old": before, "new": ctx.risk.mask() } }),
            })
        }
        ToolCall::ClearDeviceRisky { device } => {
            if device_kind(device).is_none() {
                return Err(call.out_of_bounds(format!("unknown device {}", device.0)));
            }
            let before = ctx.risk.mask();
            let cleared = ctx.risk.clear(device).is_some();
            Ok(ToolOutput {
                result: json!({ "device": device, "cleared": cleared }),
                state_delta: json!({ "risky": { "old": before, "new": ctx.risk.mask() } }),
            })
        }
    }
}

/// JSON-schema style catalog for chat-completions tool calling.
pub fn tool_catalog() -> Value {
    let device = json!({ "type": "integer", "minimum": 0 });
    let model = json!({ "type": "string", "enum": ["llm", "sdxl"] });
    let spec = |name: &str, description: &str, properties: Value, required: Value| {
        json!({
            "type": "function",
            "function": {
                "name": name,
                "description": description,
                "parameters": { "type": "object", "properties": properties, "required": required },
            }
        })
    };
    json!([
        spec(
            "get_system_status",
            "Queue lengths, utilization, sim time and semantic annotations.",
            json!({}),
            json!([])
        ),
        spec(
            "pull_observations",
            "Recent completed-task summaries and stutter count.",
            json!({ "window": { "type": "integer", "minimum": 1 }, "limit": { "type": "integer", "minimum": 1 } }),
            json!([])
        ),
        spec(
            "compute_drift",
            "Observed-to-predicted latency ratio and sample count.",
            json!({ "device": device, "model": model, "window_ms": { "type": "number", "exclusiveMinimum": 0 } }),
            json!(["device", "model"])
        ),
        spec(
            "update_calibration",
            "Smooth the calibration factor toward a ratio.",
            json!({ "device": device, "model": model, "ratio": { "type": "number", "exclusiveMinimum": 0 } }),
            json!(["device", "model", "ratio"])
        ),
        spec(
            "switch_router",
            "Select the router.",
            json!({ "router": { "type": "string", "enum": ["sect", "explore_risk"] } }),
            json!(["router"])
        ),
        spec(
            "set_router_params",
            "Set exploration weight and risk penalty (ms).",
            json!({ "explore_weight_ms": { "type": "number", "minimum": 0 }, "risk_penalty_ms": { "type": "number", "minimum": 0 } }),
            json!([])
        ),
        spec(
            "trigger_online_profile_update",
            "Refit the performance model from recent observations.",
            json!({ "window": { "type": "integer", "minimum": 1 }, "min_samples": { "type": "integer", "minimum": 1 } }),
            json!([])
        ),
        spec(
            "set_device_risky",
            "Avoid a device for a number of dispatched tasks.",
            json!({ "device": device, "ttl": { "type": "integer", "minimum": 1 } }),
            json!(["device"])
        ),
        spec(
            "clear_device_risky",
            "Remove a risk override.",
            json!({ "device": device }),
            json!(["device"])
        ),
    ])
}

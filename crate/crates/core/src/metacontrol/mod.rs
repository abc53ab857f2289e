//! Slow-path, event-driven meta-control.
//!
//! Triggers decide when to wake up; a planner (the deterministic scripted
//! policy, or optionally an external model) picks tool calls; every call is
//! executed against policy-visible state only and recorded in the audit log.

pub mod adapter;
mod audit;
mod scripted;
pub mod tools;
mod triggers;

use serde_json::{json, Value};

pub use adapter::{AdapterConfig, AdapterError, LlmAdapter};
pub use audit::{AuditEntry, AuditLog, AuditOutcome};
pub use scripted::{scripted_round, Observation};
pub use tools::{execute_tool, tool_catalog, ToolCall, ToolContext, ToolError, ToolOutput, TOOL_NAMES};
pub use triggers::{
    Invocation, InvocationReason, TriggerEvent, TriggerState, WarmupPhase, ANOMALY_COOLDOWN_TASKS, MIN_ALARM_SAMPLES,
    MIN_NONEVENT_GAP_TASKS,
};

pub const MAX_TOOL_ROUNDS: usize = 2;

pub struct MetaController {
    triggers: TriggerState,
    audit: AuditLog,
    adapter: Option<LlmAdapter>,
    invocations: usize,
    tool_calls: usize,
    max_rounds_used: usize,
}

impl MetaController {
    pub fn new(warmup_budget: usize, adapter: Option<AdapterConfig>) -> Self {
        MetaController {
            triggers: TriggerState::new(warmup_budget),
            audit: AuditLog::default(),
            adapter: adapter.map(LlmAdapter::new),
            invocations: 0,
            tool_calls: 0,
            max_rounds_used: 0,
        }
    }

    pub fn triggers(&self) -> &TriggerState {
        &self.triggers
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn into_audit(self) -> AuditLog {
        self.audit
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn tool_calls(&self) -> usize {
        self.tool_calls
    }

    /// Most tool rounds any single invocation used.
    pub fn max_rounds_used(&self) -> usize {
        self.max_rounds_used
    }

    pub fn evaluate(&mut self, event: TriggerEvent<'_>, now_task: usize) -> Option<Invocation> {
        self.triggers.evaluate(event, now_task)
    }

    /// Runs one invocation to completion, at most [`MAX_TOOL_ROUNDS`] rounds.
    pub fn invoke(&mut self, inv: &Invocation, ctx: &mut ToolContext<'_>) {
        let id = self.invocations;
        self.invocations += 1;
        let origin = inv.signature();
        let mut previous: Vec<Observation> = Vec::new();
        let mut use_script = self.adapter.is_none();
        let mut round = 0;
        let mut script_round = 0;
        while round < MAX_TOOL_ROUNDS {
            let proposed: Vec<Result<ToolCall, (String, Value, ToolError)>> = if use_script {
                scripted_round(inv, script_round, &previous)
                    .into_iter()
                    .map(Ok)
                    .collect()
            } else {
                let adapter = self.adapter.as_ref().expect("adapter present when not scripted");
                match adapter.round(inv, &previous) {
                    Ok(calls) => calls
                        .into_iter()
                        .map(|p| p.parsed.map_err(|e| (p.name, p.arguments, e)))
                        .collect(),
                    Err(e) => {
                        log::warn!("adapter failed for invocation {id}, falling back: {e}");
                        self.record(
                            id,
                            round,
                            inv,
                            ctx,
                            "adapter",
                            Value::Null,
                            json!({ "error": e.to_string() }),
                            Value::Null,
                            AuditOutcome::Fallback,
                        );
                        use_script = true;
                        script_round = 0;
                        previous.clear();
                        continue;
                    }
                }
            };
            if proposed.is_empty() {
                break;
            }
            for p in proposed {
                self.tool_calls += 1;
                match p {
                    Ok(call) => {
                        let outcome = {
                            let mut scoped = ToolContext {
                                opm: &mut *ctx.opm,
                                risk: &mut *ctx.risk,
                                config: &mut *ctx.config,
                                view: ctx.view,
                                history: ctx.history,
                                origin: &origin,
                            };
                            execute_tool(&call, &mut scoped)
                        };
                        let args = call.arguments();
                        match outcome {
                            Ok(out) => {
                                self.record(
                                    id,
                                    round,
                                    inv,
                                    ctx,
                                    call.name(),
                                    args,
                                    out.result.clone(),
                                    out.state_delta,
                                    AuditOutcome::Ok,
                                );
                                previous.push(Observation {
                                    call,
                                    result: Ok(out.result),
                                });
                            }
                            Err(e) => {
                                self.record(
                                    id,
                                    round,
                                    inv,
                                    ctx,
                                    call.name(),
                                    args,
                                    json!({ "error": e.to_string() }),
                                    Value::Null,
                                    AuditOutcome::Rejected,
                                );
                                previous.push(Observation {
                                    call,
                                    result: Err(e.to_string()),
                                });
                            }
                        }
                    }
                    Err((name, args, e)) => {
                        self.record(
                            id,
                            round,
                            inv,
                            ctx,
                            &name,
                            args,
                            json!({ "error": e.to_string() }),
                            Value::Null,
                            AuditOutcome::Rejected,
                        );
                    }
                }
            }
            round += 1;
            script_round += 1;
        }
        self.max_rounds_used = self.max_rounds_used.max(round);
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        invocation: usize,
        round: usize,
        inv: &Invocation,
        ctx: &ToolContext<'_>,
        tool: &str,
        arguments: Value,
        result: Value,
        state_delta: Value,
        outcome: AuditOutcome,
    ) {
        self.audit.append(AuditEntry {
            seq: 0,
            invocation,
            round,
            task_index: inv.task_index,
            sim_time_ms: ctx.view.now_ms,
            reason: inv.reason,
            tool: tool.to_string(),
            arguments,
            result,
            state_delta,
            outcome,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opm::Opm;
    use crate::profiles::fixture_priors;
    use crate::router::{RiskTable, RouterConfig};
    use crate::simulator::{DeviceView, SystemView};
    use crate::types::DeviceId;
    use std::collections::BTreeMap;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn view() -> SystemView {
        SystemView {
            now_ms: 120_000.0,
            task_index: 60,
            devices: fixture_priors()
                .iter()
                .map(|p| DeviceView {
                    device: p.device_id,
                    kind: p.kind(),
                    available: true,
                    queued: Vec::new(),
                    in_flight: None,
                    completed: 0,
                    busy_ms: 0.0,
                })
                .collect(),
            semantic: BTreeMap::new(),
        }
    }

    fn onset() -> Invocation {
        Invocation {
            reason: InvocationReason::SemanticOnset,
            task_index: 60,
            device: Some(DeviceId(0)),
            model: None,
            label: Some("game".into()),
            warmup: None,
            drift: None,
        }
    }

    fn run(meta: &mut MetaController, inv: &Invocation) -> (RiskTable, RouterConfig) {
        let mut opm = Opm::seed(&fixture_priors()).unwrap();
        let mut risk = RiskTable::default();
        let mut config = RouterConfig::default();
        let v = view();
        let mut ctx = ToolContext {
            opm: &mut opm,
            risk: &mut risk,
            config: &mut config,
            view: &v,
            history: &[],
            origin: "",
        };
        meta.invoke(inv, &mut ctx);
        (risk, config)
    }

    #[test]
    fn scripted_onset_is_audited() {
        let mut meta = MetaController::new(0, None);
        let (risk, _) = run(&mut meta, &onset());
        let ov = risk.get(DeviceId(0)).unwrap();
        assert_eq!(ov.ttl_tasks, 50);
        assert_eq!(ov.origin_signature, "semantic_onset:0:game");
        let tools: Vec<_> = meta.audit().entries().iter().map(|e| e.tool.as_str()).collect();
        assert_eq!(tools, vec!["get_system_status", "set_device_risky"]);
        assert_eq!(meta.tool_calls(), 2);
        assert_eq!(meta.invocations(), 1);
        assert_eq!(meta.audit().entries()[1].seq, 1);
        assert_eq!(meta.audit().to_jsonl().lines().count(), 2);
    }

    /// Serves canned chat-completions bodies, one per connection.
    fn serve(bodies: Vec<String>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for body in bodies {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let resp = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}/v1/chat/completions")
    }

    fn adapter(url: String) -> Option<AdapterConfig> {
        Some(AdapterConfig {
            url,
            model: "test".into(),
            api_key_env: None,
            timeout_ms: 2000,
        })
    }

    #[test]
    fn adapter_calls_are_bounded_and_checked() {
        let r0 = json!({ "choices": [{ "message": { "tool_calls": [
            { "id": "a", "type": "function", "function": { "name": "set_device_risky", "arguments": "{\"device\":0,\"ttl\":0}" } },
            { "id": "b", "type": "function", "function": { "name": "dispatch_task", "arguments": "{}" } },
            { "id": "c", "type": "function", "function": { "name": "set_device_risky", "arguments": "{\"device\":0,\"ttl\":7}" } },
        ] } }] });
        let r1 = json!({ "choices": [{ "message": { "tool_calls": [
            { "id": "d", "type": "function", "function": { "name": "get_system_status", "arguments": "{}" } },
        ] } }] });
        let url = serve(vec![r0.to_string(), r1.to_string(), r1.to_string()]);
        let mut meta = MetaController::new(0, adapter(url));
        let (risk, _) = run(&mut meta, &onset());
        assert_eq!(risk.get(DeviceId(0)).unwrap().ttl_tasks, 7);
        let outcomes: Vec<_> = meta
            .audit()
            .entries()
            .iter()
            .map(|e| (e.round, e.tool.as_str(), e.outcome))
            .collect();
        assert_eq!(
            outcomes,
            vec![
                (0, "set_device_risky", AuditOutcome::Rejected),
                (0, "dispatch_task", AuditOutcome::Rejected),
                (0, "set_device_risky", AuditOutcome::Ok),
                (1, "get_system_status", AuditOutcome::Ok),
            ]
        );
        assert_eq!(meta.max_rounds_used(), MAX_TOOL_ROUNDS);
    }

    #[test]
    fn unreachable_adapter_falls_back_to_script() {
        // Bind then drop to get a port nobody listens on.
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut meta = MetaController::new(0, adapter(format!("http://127.0.0.1:{port}/v1")));
        let (risk, _) = run(&mut meta, &onset());
        let mut scripted = MetaController::new(0, None);
        let (expected, _) = run(&mut scripted, &onset());
        assert_eq!(risk, expected);
        let entries = meta.audit().entries();
        assert_eq!(entries[0].outcome, AuditOutcome::Fallback);
        let after: Vec<_> = entries[1..].iter().map(|e| (&e.tool, &e.arguments)).collect();
        let reference: Vec<_> = scripted
            .audit()
            .entries()
            .iter()
            .map(|e| (&e.tool, &e.arguments))
            .collect();
        assert_eq!(after, reference);
    }
}

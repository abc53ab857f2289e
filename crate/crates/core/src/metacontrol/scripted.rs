use serde_json::Value;

use super::tools::ToolCall;
use super::triggers::{Invocation, InvocationReason, WarmupPhase};
use crate::opm::{DEFAULT_WINDOW_CAPACITY, DRIFT_WINDOW_MS};
use crate::router::{RouterPolicy, DEFAULT_EXPLORE_WEIGHT_MS, DEFAULT_RISK_PENALTY_MS, DEFAULT_RISK_TTL};

const RESIDUAL_REFIT_MIN_SAMPLES: usize = 3;

/// Result of one executed call, as fed back to a planner.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub call: ToolCall,
    pub result: Result<Value, String>,
}

/// Deterministic intervention plan. Returns the calls for `round`
/// (zero-based) given what earlier rounds returned; empty means done.
pub fn scripted_round(inv: &Invocation, round: usize, previous: &[Observation]) -> Vec<ToolCall> {
    use InvocationReason::*;
    let device = inv.device;
    match (inv.reason, round) {
        (SemanticOnset, 0) => match device {
            Some(d) => vec![
                ToolCall::GetSystemStatus {},
                ToolCall::SetDeviceRisky {
                    device: d,
                    ttl: DEFAULT_RISK_TTL,
                },
            ],
            None => Vec::new(),
        },
        (SemanticOffset, 0) => device
            .map(|d| vec![ToolCall::ClearDeviceRisky { device: d }])
            .unwrap_or_default(),
        (ResidualAlarm, 0) => match (device, inv.model) {
            (Some(d), Some(m)) => vec![ToolCall::ComputeDrift {
                device: d,
                model: m,
                window_ms: DRIFT_WINDOW_MS,
            }],
            _ => Vec::new(),
        },
        (ResidualAlarm, 1) => {
            let (Some(d), Some(m)) = (device, inv.model) else {
                return Vec::new();
            };
            let Some((ratio, exceeding)) = previous.iter().find_map(|o| match (&o.call, &o.result) {
                (ToolCall::ComputeDrift { .. }, Ok(v)) => {
                    Some((v["ratio"].as_f64()?, v["exceeding"].as_u64().unwrap_or(0)))
                }
                _ => None,
            }) else {
                return Vec::new();
            };
            let mut calls = Vec::new();
            if ratio.is_finite() && ratio > 0.0 {
                calls.push(ToolCall::UpdateCalibration {
                    device: d,
                    model: m,
                    ratio,
                });
            }
            calls.push(ToolCall::TriggerOnlineProfileUpdate {
                window: residual_refit_window(exceeding as usize),
                min_samples: RESIDUAL_REFIT_MIN_SAMPLES,
            });
            calls
        }
        (WarmupPoint, 0) => match inv.warmup {
            Some(WarmupPhase::Start) => vec![
                ToolCall::SwitchRouter {
                    router: RouterPolicy::ExploreRisk.as_str().to_string(),
                },
                ToolCall::SetRouterParams {
                    explore_weight_ms: Some(DEFAULT_EXPLORE_WEIGHT_MS),
                    risk_penalty_ms: Some(DEFAULT_RISK_PENALTY_MS),
                },
            ],
            Some(WarmupPhase::End) => vec![
                ToolCall::TriggerOnlineProfileUpdate {
                    window: DEFAULT_WINDOW_CAPACITY,
                    min_samples: 1,
                },
                ToolCall::SwitchRouter {
                    router: RouterPolicy::Sect.as_str().to_string(),
                },
            ],
            None => Vec::new(),
        },
        (ChurnEvent, 0) => vec![
            ToolCall::GetSystemStatus {},
            ToolCall::TriggerOnlineProfileUpdate {
                window: DEFAULT_WINDOW_CAPACITY,
                min_samples: 3,
            },
        ],
        _ => Vec::new(),
    }
}

/// Refit over the records since the apparent change point, so samples from
/// before a step do not bias the new fit. Falls back to the full window
/// when no trailing run exceeds the threshold.
fn residual_refit_window(exceeding: usize) -> usize {
    match exceeding {
        0 => DEFAULT_WINDOW_CAPACITY,
        n => n.clamp(RESIDUAL_REFIT_MIN_SAMPLES, DEFAULT_WINDOW_CAPACITY),
    }
}

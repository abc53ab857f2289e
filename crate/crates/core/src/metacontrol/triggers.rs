use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::opm::DriftReading;
use crate::simulator::{Annotation, AnnotationKind};
use crate::types::{DeviceId, TaskKind};

pub const ANOMALY_COOLDOWN_TASKS: usize = 20;
pub const MIN_NONEVENT_GAP_TASKS: usize = 20;
pub const MIN_ALARM_SAMPLES: usize = 3;
const FIRST_WARMUP_POINT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationReason {
    SemanticOnset,
    SemanticOffset,
    ResidualAlarm,
    WarmupPoint,
    ChurnEvent,
}

impl InvocationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvocationReason::SemanticOnset => "semantic_onset",
            InvocationReason::SemanticOffset => "semantic_offset",
            InvocationReason::ResidualAlarm => "residual_alarm",
            InvocationReason::WarmupPoint => "warmup_point",
            InvocationReason::ChurnEvent => "churn_event",
        }
    }
}

impl fmt::Display for InvocationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Position of a warmup point within the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupPhase {
    Start,
    End,
}

/// Why the meta-controller is being woken up, and about what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub reason: InvocationReason,
    pub task_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<TaskKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<WarmupPhase>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftReading>,
}

impl Invocation {
    fn new(reason: InvocationReason, task_index: usize) -> Self {
        Invocation {
            reason,
            task_index,
            device: None,
            model: None,
            label: None,
            warmup: None,
            drift: None,
        }
    }

    /// `reason:device:label`, the key cooldowns are tracked under.
    pub fn signature(&self) -> String {
        let device = self.device.map_or_else(|| "-".to_string(), |d| d.0.to_string());
        let label = match (&self.label, self.model) {
            (Some(l), _) => l.clone(),
            (None, Some(m)) => m.to_string(),
            (None, None) => "-".to_string(),
        };
        format!("{}:{device}:{label}", self.reason)
    }
}

/// Something the trigger layer may react to.
#[derive(Debug, Clone, Copy)]
pub enum TriggerEvent<'a> {
    Annotation(&'a Annotation),
    Residual {
        device: DeviceId,
        model: TaskKind,
        reading: DriftReading,
    },
    /// A new task index was reached.
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerState {
    pub last_invocation_task: Option<usize>,
    /// Signature to the first task index at which it may fire again.
    pub cooldowns: BTreeMap<String, usize>,
    pub warmup_points: BTreeSet<usize>,
    pub min_nonevent_gap: usize,
    pub anomaly_cooldown: usize,
    pub warmup_budget: usize,
}

impl TriggerState {
    /// Warmup points are `{min(10, W), W}`; a zero budget has none.
    pub fn new(warmup_budget: usize) -> Self {
        let warmup_points = if warmup_budget == 0 {
            BTreeSet::new()
        } else {
            [FIRST_WARMUP_POINT.min(warmup_budget), warmup_budget].into()
        };
        TriggerState {
            last_invocation_task: None,
            cooldowns: BTreeMap::new(),
            warmup_points,
            min_nonevent_gap: MIN_NONEVENT_GAP_TASKS,
            anomaly_cooldown: ANOMALY_COOLDOWN_TASKS,
            warmup_budget,
        }
    }

    pub fn evaluate(&mut self, event: TriggerEvent<'_>, now_task: usize) -> Option<Invocation> {
        let inv = match event {
            TriggerEvent::Annotation(a) => {
                let (reason, label) = match a.kind {
                    AnnotationKind::SemanticOnset { label } => (InvocationReason::SemanticOnset, Some(label)),
                    AnnotationKind::SemanticOffset { label } => (InvocationReason::SemanticOffset, Some(label)),
                    AnnotationKind::DeviceReturn => (InvocationReason::ChurnEvent, None),
                    // Departures are handled by the feasible set alone.
                    AnnotationKind::DeviceLeave => return None,
                };
                let mut inv = Invocation::new(reason, now_task);
                inv.device = Some(a.device);
                inv.label = Some(label.map_or_else(|| "device_return".to_string(), |l| l.to_string()));
                self.gate_cooldown(inv, now_task)?
            }
            TriggerEvent::Residual { device, model, reading } => {
                if !reading.is_alarm() || reading.sample_count < MIN_ALARM_SAMPLES {
                    return None;
                }
                if now_task < self.warmup_budget || !self.gap_elapsed(now_task) {
                    return None;
                }
                let mut inv = Invocation::new(InvocationReason::ResidualAlarm, now_task);
                inv.device = Some(device);
                inv.model = Some(model);
                inv.drift = Some(reading);
                self.gate_cooldown(inv, now_task)?
            }
            TriggerEvent::Task => {
                if !self.warmup_points.contains(&now_task) {
                    return None;
                }
                let phase = if now_task == self.warmup_budget {
                    WarmupPhase::End
                } else {
                    WarmupPhase::Start
                };
                let mut inv = Invocation::new(InvocationReason::WarmupPoint, now_task);
                inv.warmup = Some(phase);
                inv.label = Some(format!("{now_task}"));
                self.gate_cooldown(inv, now_task)?
            }
        };
        self.last_invocation_task = Some(now_task);
        Some(inv)
    }

    fn gap_elapsed(&self, now_task: usize) -> bool {
        self.last_invocation_task
            .is_none_or(|last| now_task.saturating_sub(last) >= self.min_nonevent_gap)
    }

    fn gate_cooldown(&mut self, inv: Invocation, now_task: usize) -> Option<Invocation> {
        let sig = inv.signature();
        if self.cooldowns.get(&sig).is_some_and(|&until| now_task < until) {
            return None;
        }
        self.cooldowns.insert(sig, now_task + self.anomaly_cooldown);
        Some(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::SemanticLabel;

    fn onset(task: usize, device: u16) -> Annotation {
        Annotation {
            task_index: task,
            time_ms: task as f64 * 2000.0,
            device: DeviceId(device),
            kind: AnnotationKind::SemanticOnset {
                label: SemanticLabel::Game,
            },
        }
    }

    fn alarm(ratio: f64, n: usize) -> TriggerEvent<'static> {
        TriggerEvent::Residual {
            device: DeviceId(1),
            model: TaskKind::Llm,
            reading: DriftReading { ratio, sample_count: n },
        }
    }

    #[test]
    fn semantic_onset_fires_then_cools_down() {
        let mut t = TriggerState::new(0);
        let a = onset(60, 0);
        let inv = t.evaluate(TriggerEvent::Annotation(&a), 60).unwrap();
        assert_eq!(inv.reason, InvocationReason::SemanticOnset);
        assert_eq!(inv.signature(), "semantic_onset:0:game");
        assert_eq!(t.cooldowns["semantic_onset:0:game"], 80);
        assert!(t.evaluate(TriggerEvent::Annotation(&onset(70, 0)), 70).is_none());
        assert!(t.evaluate(TriggerEvent::Annotation(&onset(70, 2)), 70).is_some());
        assert!(t.evaluate(TriggerEvent::Annotation(&onset(80, 0)), 80).is_some());
    }

    #[test]
    fn warmup_points() {
        let mut t = TriggerState::new(30);
        assert_eq!(t.warmup_points, [10, 30].into());
        let fired: Vec<_> = (0..60)
            .filter_map(|k| t.evaluate(TriggerEvent::Task, k))
            .map(|i| (i.task_index, i.warmup.unwrap()))
            .collect();
        assert_eq!(fired, vec![(10, WarmupPhase::Start), (30, WarmupPhase::End)]);
        assert!(TriggerState::new(0).warmup_points.is_empty());
        assert_eq!(TriggerState::new(5).warmup_points, [5].into());
        assert_eq!(TriggerState::new(100).warmup_points, [10, 100].into());
    }

    #[test]
    fn residual_alarm_needs_evidence_gap_and_cooldown() {
        let mut t = TriggerState::new(0);
        assert!(t.evaluate(alarm(1.3, 10), 5).is_none());
        assert!(t.evaluate(alarm(2.0, 2), 5).is_none());
        let inv = t.evaluate(alarm(2.0, 3), 5).unwrap();
        assert_eq!(inv.signature(), "residual_alarm:1:llm");
        assert!(t.evaluate(alarm(2.0, 3), 24).is_none());
        assert!(t.evaluate(alarm(2.0, 3), 25).is_some());

        // Event triggers are exempt from the gap but still reset it.
        let mut t = TriggerState::new(0);
        t.evaluate(TriggerEvent::Annotation(&onset(60, 0)), 60).unwrap();
        assert!(t.evaluate(alarm(2.0, 3), 70).is_none());
        assert!(t.evaluate(alarm(2.0, 3), 80).is_some());
    }

    #[test]
    fn residual_alarm_is_muted_during_warmup() {
        let mut t = TriggerState::new(30);
        assert!(t.evaluate(alarm(3.0, 5), 29).is_none());
        assert!(t.evaluate(alarm(3.0, 5), 30).is_some());
    }

    #[test]
    fn departures_do_not_invoke() {
        let mut t = TriggerState::new(0);
        let mut a = onset(80, 3);
        a.kind = AnnotationKind::DeviceLeave;
        assert!(t.evaluate(TriggerEvent::Annotation(&a), 80).is_none());
        a.kind = AnnotationKind::DeviceReturn;
        let inv = t.evaluate(TriggerEvent::Annotation(&a), 160).unwrap();
        assert_eq!(inv.reason, InvocationReason::ChurnEvent);
        assert_eq!(t.last_invocation_task, Some(160));
    }
}

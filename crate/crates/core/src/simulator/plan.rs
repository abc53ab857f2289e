//! Scenario plans: timed semantic, churn and drift events.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{DeviceId, TaskKind};

/// Service multiplier applied to a device while a semantic event is active.
pub const SEMANTIC_FACTOR: f64 = 3.0;
pub const DRIFT_FACTOR: f64 = 2.0;

pub const PLAN_NAMES: [&str; 4] = ["warmup", "semantic", "churn", "drift"];

// Fixture pool layout.
const LLM0: DeviceId = DeviceId(0);
const LLM1: DeviceId = DeviceId(1);
const SD0: DeviceId = DeviceId(2);
const SD1: DeviceId = DeviceId(3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticLabel {
    Game,
    VideoCall,
    LowBattery,
    SystemUpdate,
    Overheating,
}

impl SemanticLabel {
    pub const ALL: [SemanticLabel; 5] = [
        SemanticLabel::Game,
        SemanticLabel::VideoCall,
        SemanticLabel::LowBattery,
        SemanticLabel::SystemUpdate,
        SemanticLabel::Overheating,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SemanticLabel::Game => "game",
            SemanticLabel::VideoCall => "video_call",
            SemanticLabel::LowBattery => "low_battery",
            SemanticLabel::SystemUpdate => "system_update",
            SemanticLabel::Overheating => "overheating",
        }
    }
}

impl fmt::Display for SemanticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScenarioAction {
    SemanticOnset {
        device: DeviceId,
        label: SemanticLabel,
        factor: f64,
    },
    SemanticOffset {
        device: DeviceId,
    },
    DeviceLeave {
        device: DeviceId,
    },
    DeviceReturn {
        device: DeviceId,
    },
    DriftStep {
        device: DeviceId,
        model: TaskKind,
        factor: f64,
    },
    DriftRestore {
        device: DeviceId,
        model: TaskKind,
    },
}

impl ScenarioAction {
    pub fn device(&self) -> DeviceId {
        match *self {
            ScenarioAction::SemanticOnset { device, .. }
            | ScenarioAction::SemanticOffset { device }
            | ScenarioAction::DeviceLeave { device }
            | ScenarioAction::DeviceReturn { device }
            | ScenarioAction::DriftStep { device, .. }
            | ScenarioAction::DriftRestore { device, .. } => device,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ScenarioAction::SemanticOnset { .. } => "semantic_onset",
            ScenarioAction::SemanticOffset { .. } => "semantic_offset",
            ScenarioAction::DeviceLeave { .. } => "device_leave",
            ScenarioAction::DeviceReturn { .. } => "device_return",
            ScenarioAction::DriftStep { .. } => "drift_step",
            ScenarioAction::DriftRestore { .. } => "drift_restore",
        }
    }
}

/// An action that fires just before the arrival of task `task_index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub task_index: usize,
    #[serde(flatten)]
    pub action: ScenarioAction,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioPlan {
    pub name: String,
    pub events: Vec<ScenarioEvent>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("unknown scenario `{name}`; valid names: {}", PLAN_NAMES.join(", "))]
    UnknownPlan { name: String },
    #[error("event {index} is out of task order")]
    Unsorted { index: usize },
    #[error("event {index} references unknown device {device}")]
    UnknownDevice { index: usize, device: DeviceId },
    #[error("event {index} ({what}) on {device} is not properly paired")]
    Unpaired {
        index: usize,
        device: DeviceId,
        what: &'static str,
    },
    #[error("event {index} has a non-positive factor")]
    BadFactor { index: usize },
}

impl ScenarioPlan {
    pub fn empty(name: &str) -> Self {
        ScenarioPlan {
            name: name.to_string(),
            events: Vec::new(),
        }
    }

    /// Checks ordering, device references, and onset/offset, leave/return
    /// and drift step/restore pairing.
    pub fn validate(&self, device_count: usize) -> Result<(), PlanError> {
        #[derive(Default)]
        struct Open {
            semantic: bool,
            away: bool,
            drift: bool,
        }
        let mut open: BTreeMap<DeviceId, Open> = BTreeMap::new();
        let mut last = 0;
        for (index, ev) in self.events.iter().enumerate() {
            if ev.task_index < last {
                return Err(PlanError::Unsorted { index });
            }
            last = ev.task_index;
            let device = ev.action.device();
            if device.index() >= device_count {
                return Err(PlanError::UnknownDevice { index, device });
            }
            let state = open.entry(device).or_default();
            let unpaired = |what| PlanError::Unpaired { index, device, what };
            match ev.action {
                ScenarioAction::SemanticOnset { factor, .. } => {
                    if !(factor.is_finite() && factor > 0.0) {
                        return Err(PlanError::BadFactor { index });
                    }
                    if state.semantic {
                        return Err(unpaired("semantic_onset"));
                    }
                    state.semantic = true;
                }
                ScenarioAction::SemanticOffset { .. } => {
                    if !state.semantic {
                        return Err(unpaired("semantic_offset"));
                    }
                    state.semantic = false;
                }
                ScenarioAction::DeviceLeave { .. } => {
                    if state.away {
                        return Err(unpaired("device_leave"));
                    }
                    state.away = true;
                }
                ScenarioAction::DeviceReturn { .. } => {
                    if !state.away {
                        return Err(unpaired("device_return"));
                    }
                    state.away = false;
                }
                ScenarioAction::DriftStep { factor, .. } => {
                    if !(factor.is_finite() && factor > 0.0) {
                        return Err(PlanError::BadFactor { index });
                    }
                    if state.drift {
                        return Err(unpaired("drift_step"));
                    }
                    state.drift = true;
                }
                ScenarioAction::DriftRestore { .. } => {
                    if !state.drift {
                        return Err(unpaired("drift_restore"));
                    }
                    state.drift = false;
                }
            }
        }
        for (device, state) in open {
            let what = if state.semantic {
                "semantic_onset"
            } else if state.away {
                "device_leave"
            } else if state.drift {
                "drift_step"
            } else {
                continue;
            };
            return Err(PlanError::Unpaired {
                index: self.events.len(),
                device,
                what,
            });
        }
        Ok(())
    }
}

fn window(events: &mut Vec<ScenarioEvent>, device: DeviceId, label: SemanticLabel, start: usize, end: usize) {
    events.push(ScenarioEvent {
        task_index: start,
        action: ScenarioAction::SemanticOnset {
            device,
            label,
            factor: SEMANTIC_FACTOR,
        },
    });
    events.push(ScenarioEvent {
        task_index: end,
        action: ScenarioAction::SemanticOffset { device },
    });
}

fn away(events: &mut Vec<ScenarioEvent>, device: DeviceId, start: usize, end: usize) {
    events.push(ScenarioEvent {
        task_index: start,
        action: ScenarioAction::DeviceLeave { device },
    });
    events.push(ScenarioEvent {
        task_index: end,
        action: ScenarioAction::DeviceReturn { device },
    });
}

/// Default event plans over the 300-task horizon of the fixture pool.
pub fn builtin_plans(name: &str) -> Result<ScenarioPlan, PlanError> {
    let mut events = Vec::new();
    match name {
        "warmup" => {}
        "semantic" => {
            window(&mut events, LLM0, SemanticLabel::Game, 60, 100);
            window(&mut events, SD0, SemanticLabel::VideoCall, 110, 140);
            window(&mut events, LLM1, SemanticLabel::LowBattery, 150, 180);
            window(&mut events, SD1, SemanticLabel::SystemUpdate, 190, 230);
            window(&mut events, LLM0, SemanticLabel::Overheating, 240, 270);
        }
        "churn" => {
            away(&mut events, SD1, 80, 160);
            away(&mut events, LLM1, 200, 260);
        }
        "drift" => {
            events.push(ScenarioEvent {
                task_index: 120,
                action: ScenarioAction::DriftStep {
                    device: LLM1,
                    model: TaskKind::Llm,
                    factor: DRIFT_FACTOR,
                },
            });
            events.push(ScenarioEvent {
                task_index: 220,
                action: ScenarioAction::DriftRestore {
                    device: LLM1,
                    model: TaskKind::Llm,
                },
            });
        }
        other => {
            return Err(PlanError::UnknownPlan {
                name: other.to_string(),
            })
        }
    }
    events.sort_by_key(|e| e.task_index);
    Ok(ScenarioPlan {
        name: name.to_string(),
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn semantic_has_five_labelled_windows() {
        let plan = builtin_plans("semantic").unwrap();
        let labels: Vec<_> = plan
            .events
            .iter()
            .filter_map(|e| match e.action {
                ScenarioAction::SemanticOnset { label, .. } => Some(label),
                _ => None,
            })
            .collect();
        assert_eq!(labels, SemanticLabel::ALL);
        let offsets = plan
            .events
            .iter()
            .filter(|e| matches!(e.action, ScenarioAction::SemanticOffset { .. }))
            .count();
        assert_eq!(offsets, 5);
        plan.validate(4).unwrap();
    }

    #[test]
    fn warmup_is_empty() {
        assert!(builtin_plans("warmup").unwrap().events.is_empty());
    }

    #[test]
    fn drift_default() {
        let plan = builtin_plans("drift").unwrap();
        assert_eq!(
            plan.events,
            vec![
                ScenarioEvent {
                    task_index: 120,
                    action: ScenarioAction::DriftStep {
                        device: DeviceId(1),
                        model: TaskKind::Llm,
                        factor: 2.0
                    }
                },
                ScenarioEvent {
                    task_index: 220,
                    action: ScenarioAction::DriftRestore {
                        device: DeviceId(1),
                        model: TaskKind::Llm
                    }
                },
            ]
        );
    }

    #[test]
    fn churn_has_two_pairs() {
        let plan = builtin_plans("churn").unwrap();
        assert_eq!(plan.events.len(), 4);
        plan.validate(4).unwrap();
    }

    #[test]
    fn unknown_name_lists_valid_ones() {
        let err = builtin_plans("storm").unwrap_err();
        let msg = err.to_string();
        for name in PLAN_NAMES {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn validate_rejects_bad_pairing() {
        let mut plan = ScenarioPlan::empty("x");
        plan.events.push(ScenarioEvent {
            task_index: 3,
            action: ScenarioAction::DeviceReturn { device: DeviceId(0) },
        });
        assert!(matches!(plan.validate(4), Err(PlanError::Unpaired { .. })));

        let mut plan = builtin_plans("churn").unwrap();
        plan.events.pop();
        assert!(matches!(plan.validate(4), Err(PlanError::Unpaired { .. })));

        let plan = builtin_plans("semantic").unwrap();
        assert!(matches!(plan.validate(2), Err(PlanError::UnknownDevice { .. })));

        let mut plan = builtin_plans("drift").unwrap();
        plan.events[1].task_index = 100;
        assert!(matches!(plan.validate(4), Err(PlanError::Unsorted { index: 1 })));
    }

    #[test]
    fn plan_json_shape() {
        let ev = ScenarioEvent {
            task_index: 60,
            action: ScenarioAction::SemanticOnset {
                device: DeviceId(0),
                label: SemanticLabel::Game,
                factor: 3.0,
            },
        };
        let json = serde_json::to_string(&ev).unwrap();
        assert_eq!(
            json,
            r#"{"task_index":60,"type":"semantic_onset","device":0,"label":"game","factor":3.0}"#
        );
        let back: ScenarioEvent = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ev);
    }
}

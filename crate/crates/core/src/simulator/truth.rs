//! Hidden, time-varying device state. Only the engine and the oracle router
//! can read it; nothing here is serializable.

use serde::{Deserialize, Serialize};

use super::plan::ScenarioAction;
use super::workload::TaskSpec;
use super::EngineError;
use crate::profiles::DevicePrior;
use crate::types::{DeviceId, Millis, ServiceModel, TaskKind};

/// Per-device multiplicative error between the offline prior and the
/// device's real behaviour. `1.0` everywhere means the prior is exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorError {
    pub device: DeviceId,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
}

fn one() -> f64 {
    1.0
}

impl PriorError {
    pub fn exact(device: DeviceId) -> Self {
        PriorError {
            device,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }

    fn apply(&self, model: ServiceModel) -> ServiceModel {
        match model {
            ServiceModel::Llm { alpha, beta } => ServiceModel::Llm {
                alpha: alpha * self.alpha,
                beta: beta * self.beta,
            },
            ServiceModel::Sdxl { gamma } => ServiceModel::Sdxl {
                gamma: gamma * self.gamma,
            },
        }
    }
}

/// Device pool description handed to the engine.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DevicePool {
    pub priors: Vec<DevicePrior>,
    pub prior_error: Vec<PriorError>,
}

impl DevicePool {
    pub fn exact(priors: Vec<DevicePrior>) -> Self {
        DevicePool {
            priors,
            prior_error: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum HiddenState {
    Stable,
    Degraded,
}

#[derive(Debug, Clone)]
struct ActiveFactor {
    label: &'static str,
    factor: f64,
}

#[derive(Debug, Clone)]
struct TruthDevice {
    base: ServiceModel,
    state: HiddenState,
    available: bool,
    factors: Vec<ActiveFactor>,
}

#[derive(Debug, Clone)]
pub(crate) struct GroundTruthState {
    devices: Vec<TruthDevice>,
}

const SEMANTIC: &str = "semantic";
const DRIFT: &str = "drift";

impl GroundTruthState {
    pub(crate) fn from_pool(pool: &DevicePool) -> Self {
        let devices = pool
            .priors
            .iter()
            .map(|prior| {
                let err = pool
                    .prior_error
                    .iter()
                    .find(|e| e.device == prior.device_id)
                    .copied()
                    .unwrap_or_else(|| PriorError::exact(prior.device_id));
                TruthDevice {
                    base: err.apply(prior.model),
                    state: HiddenState::Stable,
                    available: true,
                    factors: Vec::new(),
                }
            })
            .collect();
        GroundTruthState { devices }
    }

    pub(crate) fn kind(&self, device: DeviceId) -> TaskKind {
        self.devices[device.index()].base.kind()
    }

    pub(crate) fn is_available(&self, device: DeviceId) -> bool {
        self.devices[device.index()].available
    }

    pub(crate) fn state(&self, device: DeviceId) -> HiddenState {
        self.devices[device.index()].state
    }

    /// Base parameters times every active factor.
    pub(crate) fn effective(&self, device: DeviceId) -> ServiceModel {
        let dev = &self.devices[device.index()];
        let product: f64 = dev.factors.iter().map(|f| f.factor).product();
        dev.base.scaled(product)
    }

    pub(crate) fn true_service_time(&self, device: DeviceId, task: &TaskSpec) -> Result<Millis, EngineError> {
        if !self.is_available(device) {
            return Err(EngineError::UnavailableDevice {
                device,
                task: task.task_id,
            });
        }
        Ok(self.service_time_unchecked(device, task))
    }

    /// Service time ignoring availability; used to finish in-flight work.
    pub(crate) fn service_time_unchecked(&self, device: DeviceId, task: &TaskSpec) -> Millis {
        self.effective(device).service_ms(task.n_in, task.n_out)
    }

    pub(crate) fn stutter_indicator(&self, device: DeviceId) -> u8 {
        u8::from(self.state(device) == HiddenState::Degraded)
    }

    pub(crate) fn apply(&mut self, action: &ScenarioAction) {
        let dev = &mut self.devices[action.device().index()];
        match *action {
            ScenarioAction::SemanticOnset { factor, .. } => {
                dev.state = HiddenState::Degraded;
                dev.factors.push(ActiveFactor {
                    label: SEMANTIC,
                    factor,
                });
            }
            ScenarioAction::SemanticOffset { .. } => {
                dev.state = HiddenState::Stable;
                dev.factors.retain(|f| f.label != SEMANTIC);
            }
            ScenarioAction::DeviceLeave { .. } => dev.available = false,
            ScenarioAction::DeviceReturn { .. } => dev.available = true,
            ScenarioAction::DriftStep { factor, .. } => {
                dev.factors.push(ActiveFactor { label: DRIFT, factor });
            }
            ScenarioAction::DriftRestore { .. } => dev.factors.retain(|f| f.label != DRIFT),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::fixture_priors;
    use crate::simulator::plan::SemanticLabel;

    fn truth() -> GroundTruthState {
        GroundTruthState::from_pool(&DevicePool::exact(fixture_priors()))
    }

    #[test]
    fn llm_service_matches_fixture_coefficients() {
        let t = truth();
        let task = TaskSpec::llm(0, 512, 64, 0.0);
        assert_eq!(t.true_service_time(DeviceId(0), &task).unwrap(), 3712.0);
    }

    #[test]
    fn degradation_factor_multiplies_service() {
        let mut t = truth();
        t.apply(&ScenarioAction::SemanticOnset {
            device: DeviceId(0),
            label: SemanticLabel::Game,
            factor: 3.0,
        });
        let task = TaskSpec::llm(0, 512, 64, 0.0);
        assert_eq!(t.true_service_time(DeviceId(0), &task).unwrap(), 11136.0);
        assert_eq!(t.stutter_indicator(DeviceId(0)), 1);
        t.apply(&ScenarioAction::SemanticOffset { device: DeviceId(0) });
        assert_eq!(t.true_service_time(DeviceId(0), &task).unwrap(), 3712.0);
        assert_eq!(t.stutter_indicator(DeviceId(0)), 0);
    }

    #[test]
    fn sdxl_service_is_gamma() {
        let t = truth();
        assert_eq!(
            t.true_service_time(DeviceId(2), &TaskSpec::sdxl(1, 0.0)).unwrap(),
            4000.0
        );
        assert_eq!(t.stutter_indicator(DeviceId(2)), 0);
    }

    #[test]
    fn unavailable_device_is_an_engine_fault() {
        let mut t = truth();
        t.apply(&ScenarioAction::DeviceLeave { device: DeviceId(2) });
        assert!(matches!(
            t.true_service_time(DeviceId(2), &TaskSpec::sdxl(1, 0.0)),
            Err(EngineError::UnavailableDevice { .. })
        ));
    }

    #[test]
    fn factors_stack_and_prior_error_scales_base() {
        let pool = DevicePool {
            priors: fixture_priors(),
            prior_error: vec![PriorError {
                device: DeviceId(1),
                alpha: 0.5,
                beta: 0.25,
                gamma: 1.0,
            }],
        };
        let mut t = GroundTruthState::from_pool(&pool);
        assert_eq!(t.effective(DeviceId(1)), ServiceModel::Llm { alpha: 1.0, beta: 20.0 });
        t.apply(&ScenarioAction::DriftStep {
            device: DeviceId(1),
            model: TaskKind::Llm,
            factor: 2.0,
        });
        t.apply(&ScenarioAction::SemanticOnset {
            device: DeviceId(1),
            label: SemanticLabel::LowBattery,
            factor: 3.0,
        });
        assert_eq!(
            t.effective(DeviceId(1)),
            ServiceModel::Llm {
                alpha: 6.0,
                beta: 120.0
            }
        );
        t.apply(&ScenarioAction::DriftRestore {
            device: DeviceId(1),
            model: TaskKind::Llm,
        });
        assert_eq!(t.effective(DeviceId(1)), ServiceModel::Llm { alpha: 3.0, beta: 60.0 });
    }
}

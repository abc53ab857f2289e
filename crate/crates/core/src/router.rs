//! Fast-path dispatch: the shortest-expected-completion scorer with
//! exploration and risk gating, plus the reference policies it is measured
//! against.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opm::{Opm, OpmError};
use crate::profiles::DevicePrior;
use crate::simulator::truth::{GroundTruthState, HiddenState};
use crate::simulator::{DispatchCause, Policy, QueueSnapshot, SemanticLabel, SystemView, TaskSpec};
use crate::types::{DeviceId, Millis, TaskKind};

pub const DEFAULT_EXPLORE_WEIGHT_MS: Millis = 2000.0;
pub const DEFAULT_RISK_PENALTY_MS: Millis = 60_000.0;
pub const DEFAULT_RISK_TTL: u32 = 50;

#[derive(Debug, Error, PartialEq)]
pub enum RouterError {
    #[error("device {0} is not an available candidate")]
    UnknownDevice(DeviceId),
    #[error(transparent)]
    Estimate(#[from] OpmError),
    #[error("{field} must be finite and non-negative, got {value}")]
    InvalidConfig { field: &'static str, value: f64 },
    #[error("unknown router `{0}` (expected sect or explore_risk)")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterPolicy {
    Sect,
    ExploreRisk,
}

impl RouterPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            RouterPolicy::Sect => "sect",
            RouterPolicy::ExploreRisk => "explore_risk",
        }
    }
}

impl fmt::Display for RouterPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouterPolicy {
    type Err = RouterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sect" => Ok(RouterPolicy::Sect),
            "explore_risk" => Ok(RouterPolicy::ExploreRisk),
            other => Err(RouterError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub policy: RouterPolicy,
    pub explore_weight_ms: Millis,
    pub risk_penalty_ms: Millis,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            policy: RouterPolicy::Sect,
            explore_weight_ms: DEFAULT_EXPLORE_WEIGHT_MS,
            risk_penalty_ms: DEFAULT_RISK_PENALTY_MS,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), RouterError> {
        for (field, value) in [
            ("explore_weight_ms", self.explore_weight_ms),
            ("risk_penalty_ms", self.risk_penalty_ms),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(RouterError::InvalidConfig { field, value });
            }
        }
        Ok(())
    }

    /// Exploration weight actually applied: zero under plain `sect`.
    pub fn effective_explore_weight(&self) -> Millis {
        match self.policy {
            RouterPolicy::Sect => 0.0,
            RouterPolicy::ExploreRisk => self.explore_weight_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskOverride {
    pub device: DeviceId,
    pub ttl_tasks: u32,
    pub origin_signature: String,
    pub set_at: usize,
}

/// Active risk overrides, keyed by device.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RiskTable {
    overrides: BTreeMap<DeviceId, RiskOverride>,
}

impl RiskTable {
    /// Installs an override; a zero TTL is ignored. Returns the replaced entry.
    pub fn set(&mut self, ov: RiskOverride) -> Option<RiskOverride> {
        if ov.ttl_tasks == 0 {
            return None;
        }
        self.overrides.insert(ov.device, ov)
    }

    pub fn clear(&mut self, device: DeviceId) -> Option<RiskOverride> {
        self.overrides.remove(&device)
    }

    pub fn is_risky(&self, device: DeviceId) -> bool {
        self.overrides.contains_key(&device)
    }

    pub fn get(&self, device: DeviceId) -> Option<&RiskOverride> {
        self.overrides.get(&device)
    }

    /// Devices currently marked risky, in id order.
    pub fn mask(&self) -> Vec<DeviceId> {
        self.overrides.keys().copied().collect()
    }

    /// Counts one dispatched task against every override; returns expired devices.
    pub fn tick(&mut self) -> Vec<DeviceId> {
        let mut expired = Vec::new();
        for ov in self.overrides.values_mut() {
            ov.ttl_tasks -= 1;
            if ov.ttl_tasks == 0 {
                expired.push(ov.device);
            }
        }
        for d in &expired {
            self.overrides.remove(d);
        }
        expired
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CandidateState {
    pub device: DeviceId,
    pub kind: TaskKind,
    /// Predicted remaining work on the device, queued plus in flight.
    pub backlog_ms: Millis,
    pub risky: bool,
}

/// What the E3 router sees before dispatching a task.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyVisibleState<'a> {
    pub now_ms: Millis,
    pub task_index: usize,
    /// Available devices only.
    pub devices: Vec<CandidateState>,
    pub config: RouterConfig,
    pub semantic: BTreeMap<DeviceId, SemanticLabel>,
    #[serde(skip)]
    pub opm: &'a Opm,
}

impl<'a> PolicyVisibleState<'a> {
    pub fn build(view: &SystemView, opm: &'a Opm, risk: &RiskTable, config: RouterConfig) -> Result<Self, RouterError> {
        let mut devices = Vec::new();
        for d in view.devices.iter().filter(|d| d.available) {
            let backlog_ms = backlog(d, view.now_ms, |t| opm.predict(d.device, t))?;
            devices.push(CandidateState {
                device: d.device,
                kind: d.kind,
                backlog_ms,
                risky: risk.is_risky(d.device),
            });
        }
        Ok(PolicyVisibleState {
            now_ms: view.now_ms,
            task_index: view.task_index,
            devices,
            config,
            semantic: view.semantic.clone(),
            opm,
        })
    }

    fn candidate(&self, device: DeviceId) -> Option<&CandidateState> {
        self.devices.iter().find(|c| c.device == device)
    }
}

/// Predicted backlog: queued tasks plus the unfinished part of the in-flight one.
fn backlog<E>(
    d: &crate::simulator::DeviceView,
    now: Millis,
    mut predict: impl FnMut(&TaskSpec) -> Result<Millis, E>,
) -> Result<Millis, E> {
    let mut total = 0.0;
    if let Some(f) = &d.in_flight {
        total += (predict(&f.task)? - (now - f.start_ms)).max(0.0);
    }
    for t in &d.queued {
        total += predict(t)?;
    }
    Ok(total)
}

/// `Q + T̂ - c·u + M` for one candidate.
pub fn score(device: DeviceId, task: &TaskSpec, state: &PolicyVisibleState<'_>) -> Result<Millis, RouterError> {
    let cand = state.candidate(device).ok_or(RouterError::UnknownDevice(device))?;
    let t_hat = state.opm.predict(device, task)?;
    let u = state.opm.uncertainty(device, task.kind);
    Ok(compose_score(cand.backlog_ms, t_hat, u, cand.risky, &state.config))
}

fn compose_score(q: Millis, t_hat: Millis, u: f64, risky: bool, config: &RouterConfig) -> Millis {
    let m = if risky { config.risk_penalty_ms } else { 0.0 };
    q + t_hat - config.effective_explore_weight() * u + m
}

/// One routing decision with every candidate's score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub task_id: usize,
    pub chosen: DeviceId,
    pub scores: Vec<(DeviceId, Millis)>,
}

/// Hard-avoids risky candidates when a safe one exists, then takes the
/// lowest score (lowest id on ties). `evaluations` counts score calls.
pub fn select_e3(
    task: &TaskSpec,
    state: &PolicyVisibleState<'_>,
    evaluations: &mut u64,
) -> Result<Option<Decision>, RouterError> {
    let matching: Vec<&CandidateState> = state.devices.iter().filter(|c| c.kind == task.kind).collect();
    let any_safe = matching.iter().any(|c| !c.risky);
    let mut scores = Vec::with_capacity(matching.len());
    for c in matching.iter().filter(|c| !(any_safe && c.risky)) {
        *evaluations += 1;
        scores.push((c.device, score(c.device, task, state)?));
    }
    Ok(argmin(&scores).map(|chosen| Decision {
        task_id: task.task_id,
        chosen,
        scores,
    }))
}

/// First minimum in iteration order; callers pass candidates in id order.
fn argmin(scores: &[(DeviceId, Millis)]) -> Option<DeviceId> {
    let mut best: Option<(DeviceId, Millis)> = None;
    for &(d, s) in scores {
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((d, s));
        }
    }
    best.map(|(d, _)| d)
}

/// Static shortest-expected-completion on offline priors only.
#[derive(Debug, Clone)]
pub struct FixedHeuristic {
    priors: BTreeMap<DeviceId, DevicePrior>,
}

impl FixedHeuristic {
    pub fn new(priors: &[DevicePrior]) -> Self {
        FixedHeuristic {
            priors: priors.iter().map(|p| (p.device_id, p.clone())).collect(),
        }
    }

    fn prior_ms(&self, device: DeviceId, task: &TaskSpec) -> Option<Millis> {
        self.priors
            .get(&device)
            .map(|p| p.model.service_ms(task.n_in, task.n_out))
    }
}

impl Policy for FixedHeuristic {
    fn select(&mut self, task: &TaskSpec, _cause: DispatchCause, view: &SystemView) -> Option<DeviceId> {
        let scores: Vec<(DeviceId, Millis)> = view
            .candidates(task.kind)
            .filter_map(|d| {
                let q = backlog(d, view.now_ms, |t| self.prior_ms(d.device, t).ok_or(())).ok()?;
                Some((d.device, q + self.prior_ms(d.device, task)?))
            })
            .collect();
        argmin(&scores)
    }
}

/// Cycles through available devices of each kind independently.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    last: BTreeMap<TaskKind, DeviceId>,
}

impl Policy for RoundRobin {
    fn select(&mut self, task: &TaskSpec, _cause: DispatchCause, view: &SystemView) -> Option<DeviceId> {
        let ids: Vec<DeviceId> = view.candidates(task.kind).map(|d| d.device).collect();
        let next = match self.last.get(&task.kind) {
            Some(&last) => ids.iter().copied().find(|&d| d > last).or_else(|| ids.first().copied()),
            None => ids.first().copied(),
        }?;
        self.last.insert(task.kind, next);
        Some(next)
    }
}

/// Greedy full-information choice: true backlog plus true service, skipping
/// degraded devices while a stable one exists.
pub(crate) fn select_oracle(
    task: &TaskSpec,
    truth: &GroundTruthState,
    queues: &[QueueSnapshot],
    now: Millis,
) -> Option<DeviceId> {
    let cands: Vec<&QueueSnapshot> = queues
        .iter()
        .filter(|q| q.available && truth.kind(q.device) == task.kind)
        .collect();
    let any_stable = cands.iter().any(|q| truth.state(q.device) == HiddenState::Stable);
    let scores: Vec<(DeviceId, Millis)> = cands
        .into_iter()
        .filter(|q| !any_stable || truth.state(q.device) == HiddenState::Stable)
        .map(|q| {
            let mut total = q.in_flight_completion_ms.map_or(0.0, |c| (c - now).max(0.0));
            total += q
                .queued
                .iter()
                .map(|t| truth.service_time_unchecked(q.device, t))
                .sum::<Millis>();
            total += truth.service_time_unchecked(q.device, task);
            (q.device, total)
        })
        .collect();
    argmin(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::fixture_priors;
    use crate::simulator::truth::DevicePool;
    use crate::simulator::{DeviceView, InFlightView, ScenarioAction};
    use crate::types::ServiceModel;
    use proptest::prelude::*;

    fn dev(id: u16, kind: TaskKind) -> DeviceView {
        DeviceView {
            device: DeviceId(id),
            kind,
            available: true,
            queued: Vec::new(),
            in_flight: None,
            completed: 0,
            busy_ms: 0.0,
        }
    }

    fn view(devices: Vec<DeviceView>) -> SystemView {
        SystemView {
            now_ms: 0.0,
            task_index: 0,
            devices,
            semantic: BTreeMap::new(),
        }
    }

    fn fixture_view() -> SystemView {
        view(vec![
            dev(0, TaskKind::Llm),
            dev(1, TaskKind::Llm),
            dev(2, TaskKind::Sdxl),
            dev(3, TaskKind::Sdxl),
        ])
    }

    fn sdxl_priors(gammas: &[f64]) -> Vec<DevicePrior> {
        gammas
            .iter()
            .enumerate()
            .map(|(i, &g)| DevicePrior {
                device_id: DeviceId(i as u16),
                device_name: format!("sd-{i}"),
                model: ServiceModel::Sdxl { gamma: g },
            })
            .collect()
    }

    fn state_with<'a>(opm: &'a Opm, backlog: &[f64], risky: &[bool], config: RouterConfig) -> PolicyVisibleState<'a> {
        PolicyVisibleState {
            now_ms: 0.0,
            task_index: 0,
            devices: backlog
                .iter()
                .zip(risky)
                .enumerate()
                .map(|(i, (&q, &r))| CandidateState {
                    device: DeviceId(i as u16),
                    kind: TaskKind::Sdxl,
                    backlog_ms: q,
                    risky: r,
                })
                .collect(),
            config,
            semantic: BTreeMap::new(),
            opm,
        }
    }

    #[test]
    fn score_examples() {
        let opm = Opm::seed(&sdxl_priors(&[2000.0])).unwrap();
        let task = TaskSpec::sdxl(1, 0.0);
        let mut s = state_with(&opm, &[1000.0], &[false], RouterConfig::default());
        assert_eq!(score(DeviceId(0), &task, &s).unwrap(), 3000.0);
        s.devices[0].risky = true;
        assert_eq!(score(DeviceId(0), &task, &s).unwrap(), 63000.0);
        s.devices[0].risky = false;
        s.config.policy = RouterPolicy::ExploreRisk;
        // No samples yet, so u = 1.
        assert_eq!(score(DeviceId(0), &task, &s).unwrap(), 1000.0);
        assert_eq!(
            score(DeviceId(7), &task, &s).unwrap_err(),
            RouterError::UnknownDevice(DeviceId(7))
        );
    }

    #[test]
    fn argmin_and_hard_avoidance() {
        let opm = Opm::seed(&sdxl_priors(&[3000.0, 3500.0])).unwrap();
        let task = TaskSpec::sdxl(1, 0.0);
        let mut n = 0;
        let s = state_with(&opm, &[0.0, 0.0], &[false, false], RouterConfig::default());
        assert_eq!(select_e3(&task, &s, &mut n).unwrap().unwrap().chosen, DeviceId(0));

        let s = state_with(&opm, &[0.0, 0.0], &[true, false], RouterConfig::default());
        let d = select_e3(&task, &s, &mut n).unwrap().unwrap();
        assert_eq!(d.chosen, DeviceId(1));
        assert_eq!(d.scores.len(), 1);

        let opm = Opm::seed(&sdxl_priors(&[3000.0, 4000.0])).unwrap();
        let s = state_with(&opm, &[0.0, 0.0], &[true, true], RouterConfig::default());
        let d = select_e3(&task, &s, &mut n).unwrap().unwrap();
        assert_eq!(d.chosen, DeviceId(0));
        assert_eq!(d.scores, vec![(DeviceId(0), 63000.0), (DeviceId(1), 64000.0)]);
        assert_eq!(n, 5);
    }

    #[test]
    fn ties_go_to_lowest_id_and_empty_set_is_none() {
        let opm = Opm::seed(&sdxl_priors(&[3000.0, 3000.0])).unwrap();
        let s = state_with(&opm, &[0.0, 0.0], &[false, false], RouterConfig::default());
        let mut n = 0;
        assert_eq!(
            select_e3(&TaskSpec::sdxl(1, 0.0), &s, &mut n).unwrap().unwrap().chosen,
            DeviceId(0)
        );
        assert!(select_e3(&TaskSpec::llm(0, 256, 32, 0.0), &s, &mut n)
            .unwrap()
            .is_none());
    }

    #[test]
    fn backlog_uses_predictions_and_elapsed_time() {
        let opm = Opm::seed(&fixture_priors()).unwrap();
        let mut v = fixture_view();
        v.now_ms = 1000.0;
        v.devices[0].in_flight = Some(InFlightView {
            task: TaskSpec::llm(0, 512, 64, 0.0),
            start_ms: 0.0,
        });
        v.devices[0].queued.push(TaskSpec::llm(2, 256, 32, 0.0));
        v.devices[3].available = false;
        let s = PolicyVisibleState::build(&v, &opm, &RiskTable::default(), RouterConfig::default()).unwrap();
        assert_eq!(s.devices.len(), 3);
        assert_eq!(s.devices[0].backlog_ms, (3712.0 - 1000.0) + 1856.0);
        assert_eq!(s.devices[1].backlog_ms, 0.0);
    }

    #[test]
    fn risk_ttl_counts_dispatches() {
        let mut t = RiskTable::default();
        let ov = |ttl| RiskOverride {
            device: DeviceId(0),
            ttl_tasks: ttl,
            origin_signature: "semantic_onset:0:game".into(),
            set_at: 60,
        };
        assert!(t.set(ov(0)).is_none());
        assert!(!t.is_risky(DeviceId(0)));
        t.set(ov(DEFAULT_RISK_TTL));
        for _ in 0..49 {
            assert!(t.tick().is_empty());
        }
        assert!(t.is_risky(DeviceId(0)));
        assert_eq!(t.tick(), vec![DeviceId(0)]);
        assert!(!t.is_risky(DeviceId(0)));
        t.set(ov(5));
        assert!(t.clear(DeviceId(0)).is_some());
        assert!(t.mask().is_empty());
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(RouterConfig::default().validate().is_ok());
        let bad = RouterConfig {
            risk_penalty_ms: -1.0,
            ..RouterConfig::default()
        };
        assert!(matches!(bad.validate(), Err(RouterError::InvalidConfig { .. })));
        assert_eq!(
            "explore_risk".parse::<RouterPolicy>().unwrap(),
            RouterPolicy::ExploreRisk
        );
        assert!("greedy".parse::<RouterPolicy>().is_err());
        assert_eq!(RouterConfig::default().effective_explore_weight(), 0.0);
    }

    #[test]
    fn round_robin_cycles_per_kind() {
        let mut rr = RoundRobin::default();
        let v = fixture_view();
        let llm = TaskSpec::llm(0, 256, 32, 0.0);
        let sd = TaskSpec::sdxl(1, 0.0);
        let picks: Vec<_> = (0..3)
            .map(|_| rr.select(&llm, DispatchCause::Arrival, &v).unwrap())
            .collect();
        assert_eq!(picks, vec![DeviceId(0), DeviceId(1), DeviceId(0)]);
        assert_eq!(rr.select(&sd, DispatchCause::Arrival, &v), Some(DeviceId(2)));
        let mut gone = v.clone();
        gone.devices[1].available = false;
        assert_eq!(rr.select(&llm, DispatchCause::Arrival, &gone), Some(DeviceId(0)));
        gone.devices[0].available = false;
        assert_eq!(rr.select(&llm, DispatchCause::Arrival, &gone), None);
    }

    #[test]
    fn fixed_heuristic_prefers_smaller_prior() {
        let mut fh = FixedHeuristic::new(&fixture_priors());
        let v = fixture_view();
        assert_eq!(
            fh.select(&TaskSpec::llm(0, 512, 64, 0.0), DispatchCause::Arrival, &v),
            Some(DeviceId(0))
        );
        assert_eq!(
            fh.select(&TaskSpec::sdxl(1, 0.0), DispatchCause::Arrival, &v),
            Some(DeviceId(2))
        );
        // A long queue on the fast device flips the choice.
        let mut busy = v.clone();
        busy.devices[2].queued = vec![TaskSpec::sdxl(3, 0.0); 2];
        assert_eq!(
            fh.select(&TaskSpec::sdxl(5, 0.0), DispatchCause::Arrival, &busy),
            Some(DeviceId(3))
        );
    }

    fn empty_queues(n: u16) -> Vec<QueueSnapshot> {
        (0..n)
            .map(|i| QueueSnapshot {
                device: DeviceId(i),
                available: true,
                in_flight_completion_ms: None,
                queued: Vec::new(),
            })
            .collect()
    }

    #[test]
    fn oracle_examples() {
        let pool = DevicePool {
            priors: fixture_priors(),
            prior_error: vec![crate::simulator::PriorError {
                device: DeviceId(1),
                alpha: 1.0,
                beta: 1.0,
                gamma: 1.0,
            }],
        };
        let mut truth = GroundTruthState::from_pool(&pool);
        let task = TaskSpec::llm(0, 512, 64, 0.0);
        // 3712 vs 2*512 + 80*64 = 6144.
        assert_eq!(select_oracle(&task, &truth, &empty_queues(4), 0.0), Some(DeviceId(0)));
        truth.apply(&ScenarioAction::SemanticOnset {
            device: DeviceId(0),
            label: SemanticLabel::Game,
            factor: 3.0,
        });
        assert_eq!(select_oracle(&task, &truth, &empty_queues(4), 0.0), Some(DeviceId(1)));
        truth.apply(&ScenarioAction::DeviceLeave { device: DeviceId(1) });
        let mut q = empty_queues(4);
        q[1].available = false;
        assert_eq!(select_oracle(&task, &truth, &q, 0.0), Some(DeviceId(0)));
    }

    #[test]
    fn oracle_counts_true_backlog() {
        let truth = GroundTruthState::from_pool(&DevicePool::exact(fixture_priors()));
        let mut q = empty_queues(4);
        q[2].in_flight_completion_ms = Some(9000.0);
        q[2].queued.push(TaskSpec::sdxl(3, 0.0));
        // d2: 8000 + 4000 + 4000 = 16000; d3: 7000.
        assert_eq!(
            select_oracle(&TaskSpec::sdxl(5, 1000.0), &truth, &q, 1000.0),
            Some(DeviceId(3))
        );
    }

    proptest! {
        #[test]
        fn scaling_predictions_keeps_argmin(gammas in proptest::collection::vec(1.0f64..1e5, 1..6), k in 0.01f64..100.0) {
            let task = TaskSpec::sdxl(1, 0.0);
            let zeros = vec![0.0; gammas.len()];
            let safe = vec![false; gammas.len()];
            let a = Opm::seed(&sdxl_priors(&gammas)).unwrap();
            let scaled: Vec<f64> = gammas.iter().map(|g| g * k).collect();
            let b = Opm::seed(&sdxl_priors(&scaled)).unwrap();
            let mut n = 0;
            let da = select_e3(&task, &state_with(&a, &zeros, &safe, RouterConfig::default()), &mut n).unwrap().unwrap();
            let db = select_e3(&task, &state_with(&b, &zeros, &safe, RouterConfig::default()), &mut n).unwrap().unwrap();
            prop_assert_eq!(da.chosen, db.chosen);
            prop_assert_eq!(n, 2 * gammas.len() as u64);
        }
    }
}

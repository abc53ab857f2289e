//! Experiment runner: presets, per-policy runs over a shared workload and
//! plan, metrics, and on-disk reports.

mod config;
mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    fixture_prior_error, ExperimentConfig, PolicyName, Scenario, DEFAULT_HORIZON, DYNAMIC_WARMUP_PREFIX, WARMUP_BUDGETS,
};
pub use metrics::{
    average_latency, check_coverage, compute_metrics, smooth_ma, vs_oracle_pct, PolicyMetrics, TrajectoryPoint,
    MA_WINDOW, TRAJECTORY_STRIDE,
};

use crate::agent::{AgentArtifacts, AgentConfig, E3Agent};
use crate::profiles::{fixture_priors, load_profiles, priors_from_records, DevicePrior, ProfileError};
use crate::router::{FixedHeuristic, RoundRobin};
use crate::simulator::{
    builtin_plans, generate_workload, run_scenario, DevicePool, Dispatcher, EngineError, MixtureRule, PlanError,
    Policy, RunOutput, ScenarioPlan, TaskSpec,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown policy `{0}` (valid: e3, fixed_heuristic, round_robin, oracle)")]
    UnknownPolicy(String),
    #[error("unknown scenario `{0}` (valid: warmup, semantic, churn, drift)")]
    UnknownScenario(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Profiles(#[from] ProfileError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("{policy}: {source}")]
    Engine { policy: PolicyName, source: EngineError },
    #[error("task coverage mismatch: {0}")]
    Coverage(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

/// Machine-readable summary of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub warmup_budget: usize,
    /// Tasks before the event plan; averages include them.
    pub warmup_prefix: usize,
    pub horizon: usize,
    pub lambda: f64,
    pub workload_hash: String,
    pub plan_hash: String,
    pub policies: BTreeMap<PolicyName, PolicyMetrics>,
}

/// A policy's full run.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub output: RunOutput,
    /// Present for the agent only.
    pub agent: Option<AgentArtifacts>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub priors: Vec<DevicePrior>,
    pub workload: Vec<TaskSpec>,
    pub plan: ScenarioPlan,
    pub runs: BTreeMap<PolicyName, PolicyRun>,
    pub report: MetricsReport,
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("workload and plan serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub fn load_priors(config: &ExperimentConfig) -> Result<Vec<DevicePrior>, HarnessError> {
    match &config.profiles {
        Some(path) => Ok(priors_from_records(&load_profiles(path)?.records)?),
        None => Ok(fixture_priors()),
    }
}

fn run_policy(
    name: PolicyName,
    config: &ExperimentConfig,
    pool: &DevicePool,
    plan: &ScenarioPlan,
    workload: &[TaskSpec],
) -> Result<PolicyRun, HarnessError> {
    let wrap = |source| HarnessError::Engine { policy: name, source };
    let causal = |policy: &mut dyn Policy| run_scenario(pool, plan, workload, Dispatcher::Causal(policy));
    match name {
        PolicyName::E3 => {
            let mut agent = E3Agent::new(
                &pool.priors,
                AgentConfig {
                    warmup_budget: config.effective_warmup(),
                    router: config.router,
                    trace_decisions: config.trace_decisions,
                    adapter: config.adapter.clone(),
                    ..AgentConfig::default()
                },
            )
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
            let output = causal(&mut agent).map_err(wrap)?;
            Ok(PolicyRun {
                output,
                agent: Some(agent.into_artifacts()),
            })
        }
        PolicyName::FixedHeuristic => Ok(PolicyRun {
            output: causal(&mut FixedHeuristic::new(&pool.priors)).map_err(wrap)?,
            agent: None,
        }),
        PolicyName::RoundRobin => Ok(PolicyRun {
            output: causal(&mut RoundRobin::default()).map_err(wrap)?,
            agent: None,
        }),
        PolicyName::Oracle => Ok(PolicyRun {
            output: run_scenario(pool, plan, workload, Dispatcher::Oracle).map_err(wrap)?,
            agent: None,
        }),
    }
}

/// Runs every requested policy on one shared workload and plan.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Experiment, HarnessError> {
    config.validate()?;
    let priors = load_priors(config)?;
    let pool = DevicePool {
        priors: priors.clone(),
        prior_error: config.effective_prior_error(),
    };
    let workload = generate_workload(config.horizon, config.lambda, MixtureRule::Alternating);
    let plan = builtin_plans(config.scenario.as_str())?;
    plan.validate(pool.len())?;

    let mut names = config.policies.clone();
    names.sort();
    names.dedup();

    // Policies share only immutable inputs, so they run side by side.
    let results: Vec<(PolicyName, Result<PolicyRun, HarnessError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = names
            .iter()
            .map(|&name| {
                let (pool, plan, workload) = (&pool, &plan, &workload);
                (name, s.spawn(move || run_policy(name, config, pool, plan, workload)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(name, h)| (name, h.join().expect("policy thread panicked")))
            .collect()
    });
    let mut runs = BTreeMap::new();
    for (name, r) in results {
        runs.insert(name, r?);
    }

    let oracle = runs.get(&PolicyName::Oracle).map(|r| r.output.records.as_slice());
    let mut policies = BTreeMap::new();
    if config.horizon > 0 {
        for (&name, run) in &runs {
            let (llm_calls, tool_calls) = run
                .agent
                .as_ref()
                .map_or((0, 0), |a| (a.stats.invocations, a.stats.tool_calls));
            policies.insert(
                name,
                compute_metrics(&run.output.records, oracle, config.prefix(), llm_calls, tool_calls)?,
            );
        }
    }
    let report = MetricsReport {
        scenario: config.scenario,
        warmup_budget: config.effective_warmup(),
        warmup_prefix: config.prefix(),
        horizon: config.horizon,
        lambda: config.lambda,
        workload_hash: sha256_json(&workload),
        plan_hash: sha256_json(&plan),
        policies,
    };
    Ok(Experiment {
        config: config.clone(),
        priors,
        workload,
        plan,
        runs,
        report,
    })
}

fn write(path: PathBuf, contents: &[u8]) -> Result<(), HarnessError> {
    fs::write(&path, contents).map_err(|source| HarnessError::Write { path, source })
}

/// Writes report.json, one trajectory CSV per policy, events.log and audit.log.
pub fn emit_report(experiment: &Experiment, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let mut put = |name: String, contents: Vec<u8>| -> Result<(), HarnessError> {
        let path = dir.join(name);
        write(path.clone(), &contents)?;
        written.push(path);
        Ok(())
    };

    let mut json = serde_json::to_vec_pretty(&experiment.report).expect("report serializes");
    json.push(b'\n');
    put("report.json".into(), json)?;

    for (name, m) in &experiment.report.policies {
        let mut csv = String::from("task_index,latency_ms,ma20_ms\n");
        for p in &m.trajectory {
            csv.push_str(&format!("{},{},{}\n", p.task_index, p.latency_ms, p.ma20_ms));
        }
        put(format!("trajectory_{name}.csv"), csv.into_bytes())?;
    }

    // The event sequence does not depend on the policy.
    let mut events = String::new();
    if let Some(run) = experiment.runs.values().next() {
        for e in &run.output.events {
            events.push_str(&format!("{e}\n"));
        }
    }
    put("events.log".into(), events.into_bytes())?;

    let audit = experiment
        .runs
        .get(&PolicyName::E3)
        .and_then(|r| r.agent.as_ref())
        .map(|a| a.audit.to_jsonl())
        .unwrap_or_default();
    put("audit.log".into(), audit.into_bytes())?;

    if experiment.config.trace_decisions {
        if let Some(agent) = experiment.runs.get(&PolicyName::E3).and_then(|r| r.agent.as_ref()) {
            let mut lines = String::new();
            for d in &agent.decisions {
                lines.push_str(&serde_json::to_string(d).expect("decision serializes"));
                lines.push('\n');
            }
            put("decisions.log".into(), lines.into_bytes())?;
        }
    }
    Ok(written)
}

/// Two-decimal human summary, one line per policy.
pub fn summary_table(report: &MetricsReport) -> String {
    let mut out = format!(
        "scenario={} warmup={} horizon={}\n{:<16} {:>12} {:>10} {:>8} {:>6} {:>6}\n",
        report.scenario,
        report.warmup_budget,
        report.horizon,
        "policy",
        "avg_ms",
        "vs_oracle",
        "stutter",
        "llm",
        "tools"
    );
    for (name, m) in &report.policies {
        let gap = m.vs_oracle_pct.map_or_else(|| "-".to_string(), |g| format!("{g:+.2}%"));
        out.push_str(&format!(
            "{:<16} {:>12.2} {:>10} {:>7.2}% {:>6} {:>6}\n",
            name.as_str(),
            m.avg_latency_ms,
            gap,
            m.stutter_rate * 100.0,
            m.llm_calls,
            m.tool_calls
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_zero_is_an_empty_report() {
        let mut c = ExperimentConfig::preset(Scenario::Warmup, 0);
        c.horizon = 0;
        let e = run_experiment(&c).unwrap();
        assert!(e.report.policies.is_empty());
    }

    #[test]
    fn warmup_zero_two_policies_share_workload() {
        let mut c = ExperimentConfig::preset(Scenario::Warmup, 0);
        c.policies = vec![PolicyName::Oracle, PolicyName::E3];
        c.horizon = 40;
        let e = run_experiment(&c).unwrap();
        assert_eq!(e.report.policies.len(), 2);
        assert_eq!(e.report.workload_hash.len(), 64);
        assert_eq!(e.report.policies[&PolicyName::Oracle].vs_oracle_pct, Some(0.0));
    }

    #[test]
    fn missing_profiles_are_fatal() {
        let mut c = ExperimentConfig::preset(Scenario::Warmup, 0);
        c.profiles = Some("/nonexistent/pool.jsonl".into());
        assert!(matches!(run_experiment(&c), Err(HarnessError::Profiles(_))));
    }
}

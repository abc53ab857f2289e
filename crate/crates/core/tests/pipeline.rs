use edgeloop::harness::{
    run_experiment, smooth_ma, ExperimentConfig, PolicyName, Scenario, DYNAMIC_WARMUP_PREFIX, MA_WINDOW,
};
use edgeloop::profiles::{fixture_priors, read_priors, write_priors, FIXTURE_JSONL};

#[test]
fn profile_file_matches_embedded_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.jsonl");
    std::fs::write(&pool, FIXTURE_JSONL).unwrap();
    let mut from_file = ExperimentConfig::preset(Scenario::Churn, DYNAMIC_WARMUP_PREFIX);
    from_file.profiles = Some(pool);
    let embedded = run_experiment(&ExperimentConfig::preset(Scenario::Churn, DYNAMIC_WARMUP_PREFIX)).unwrap();
    assert_eq!(run_experiment(&from_file).unwrap().report, embedded.report);

    let priors_path = dir.path().join("priors.jsonl");
    write_priors(&priors_path, &fixture_priors()).unwrap();
    assert_eq!(read_priors(&priors_path).unwrap(), fixture_priors());
}

#[test]
fn every_policy_completes_every_task() {
    for s in Scenario::ALL {
        let e = run_experiment(&ExperimentConfig::preset(s, 30)).unwrap();
        let counts: Vec<_> = e.runs.values().map(|r| r.output.records.len()).collect();
        assert!(counts.iter().all(|&n| n == e.workload.len()), "{s}: {counts:?}");
        for run in e.runs.values() {
            assert!(run.output.unserved.is_empty());
            assert!(run.output.records.windows(2).all(|w| w[0].task_id < w[1].task_id));
        }
    }
}

#[test]
fn oracle_never_stutters_under_the_semantic_plan() {
    let e = run_experiment(&ExperimentConfig::preset(Scenario::Semantic, DYNAMIC_WARMUP_PREFIX)).unwrap();
    assert_eq!(e.report.policies[&PolicyName::Oracle].stutter_rate, 0.0);
    let stutters = e.runs[&PolicyName::RoundRobin]
        .output
        .records
        .iter()
        .filter(|r| r.stutter == 1)
        .count();
    let rate = e.report.policies[&PolicyName::RoundRobin].stutter_rate;
    assert!((rate - stutters as f64 / 300.0).abs() < 1e-12);
}

#[test]
fn reported_series_recompute_from_records() {
    let e = run_experiment(&ExperimentConfig::preset(Scenario::Drift, DYNAMIC_WARMUP_PREFIX)).unwrap();
    for (name, run) in &e.runs {
        let m = &e.report.policies[name];
        let lat: Vec<f64> = run.output.records.iter().map(|r| r.latency_ms).collect();
        let mean = lat.iter().sum::<f64>() / lat.len() as f64;
        assert!((m.avg_latency_ms - mean).abs() <= 1e-9 * mean);
        let ma = smooth_ma(&lat, MA_WINDOW);
        assert_eq!(m.ma20, ma[DYNAMIC_WARMUP_PREFIX..].to_vec());
        for p in &m.trajectory {
            assert_eq!(p.task_index % 5, 0);
            assert_eq!(p.latency_ms, lat[p.task_index]);
        }
        assert_eq!(m.trajectory.first().map(|p| p.task_index), Some(DYNAMIC_WARMUP_PREFIX));
    }
}

#[test]
fn longer_warmup_spends_the_same_tool_budget() {
    for w in [30, 100] {
        let e = run_experiment(&ExperimentConfig::preset(Scenario::Warmup, w)).unwrap();
        let agent = e.runs[&PolicyName::E3].agent.as_ref().unwrap();
        assert_eq!(agent.stats.invocations, 2);
        assert_eq!(agent.final_router.policy.as_str(), "sect");
    }
    let e = run_experiment(&ExperimentConfig::preset(Scenario::Warmup, 0)).unwrap();
    assert_eq!(e.runs[&PolicyName::E3].agent.as_ref().unwrap().stats.invocations, 0);
}

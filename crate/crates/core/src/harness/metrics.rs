use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::simulator::ExecutionRecord;
use crate::types::Millis;

pub const MA_WINDOW: usize = 20;
pub const TRAJECTORY_STRIDE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub task_index: usize,
    pub latency_ms: Millis,
    pub ma20_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub avg_latency_ms: Millis,
    /// `None` when the experiment has no oracle run.
    pub vs_oracle_pct: Option<f64>,
    pub stutter_rate: f64,
    pub completed: usize,
    pub llm_calls: usize,
    pub tool_calls: usize,
    /// Raw latency every few tasks from the prefix end, with the MA20 value.
    pub trajectory: Vec<TrajectoryPoint>,
    /// MA20 for every task from the prefix end.
    pub ma20: Vec<Millis>,
}

/// `((avg / oracle) - 1) * 100`.
pub fn vs_oracle_pct(avg: Millis, oracle_avg: Millis) -> f64 {
    (avg / oracle_avg - 1.0) * 100.0
}

/// Trailing mean over at most `window` samples; same length as the input.
pub fn smooth_ma(series: &[Millis], window: usize) -> Vec<Millis> {
    assert!(window >= 1, "moving-average window must be at least 1");
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (k, &x) in series.iter().enumerate() {
        sum += x;
        if k >= window {
            sum -= series[k - window];
        }
        let n = (k + 1).min(window);
        out.push(sum / n as f64);
    }
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn average_latency(records: &[ExecutionRecord]) -> Millis {
    mean(records.iter().map(|r| r.latency_ms))
}

/// Errors unless both lists cover exactly the same task ids.
pub fn check_coverage(records: &[ExecutionRecord], reference: &[ExecutionRecord]) -> Result<(), HarnessError> {
    let a: BTreeSet<usize> = records.iter().map(|r| r.task_id).collect();
    let b: BTreeSet<usize> = reference.iter().map(|r| r.task_id).collect();
    if a.len() != records.len() || a != b {
        let missing = a.symmetric_difference(&b).count();
        return Err(HarnessError::Coverage(format!(
            "{} completed vs {} reference tasks, {missing} task ids differ",
            records.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// Metrics for one policy. `records` must be ordered by task id.
pub fn compute_metrics(
    records: &[ExecutionRecord],
    oracle: Option<&[ExecutionRecord]>,
    prefix: usize,
    llm_calls: usize,
    tool_calls: usize,
) -> Result<PolicyMetrics, HarnessError> {
    let avg = average_latency(records);
    let vs_oracle = match oracle {
        Some(o) => {
            check_coverage(records, o)?;
            if records.is_empty() {
                Some(0.0)
            } else {
                Some(vs_oracle_pct(avg, average_latency(o)))
            }
        }
        None => None,
    };
    let stutter_rate = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| f64::from(r.stutter)).sum::<f64>() / records.len() as f64
    };
    let latencies: Vec<Millis> = records.iter().map(|r| r.latency_ms).collect();
    let ma = smooth_ma(&latencies, MA_WINDOW);
    let mut trajectory = Vec::new();
    let mut ma20 = Vec::new();
    for (i, r) in records.iter().enumerate().filter(|(_, r)| r.task_id >= prefix) {
        ma20.push(ma[i]);
        if r.task_id % TRAJECTORY_STRIDE == 0 {
            trajectory.push(TrajectoryPoint {
                task_index: r.task_id,
                latency_ms: r.latency_ms,
                ma20_ms: ma[i],
            });
        }
    }
    Ok(PolicyMetrics {
        avg_latency_ms: avg,
        vs_oracle_pct: vs_oracle,
        stutter_rate,
        completed: records.len(),
        llm_calls,
        tool_calls,
        trajectory,
        ma20,
    })
}

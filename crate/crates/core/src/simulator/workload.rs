use serde::{Deserialize, Serialize};

use crate::types::{Millis, TaskKind};

pub const INPUT_BINS: [u32; 3] = [256, 512, 1024];
pub const OUTPUT_BINS: [u32; 3] = [32, 64, 128];
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// One generative request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    /// Input tokens; zero for diffusion tasks.
    pub n_in: u32,
    /// Output tokens; zero for diffusion tasks.
    pub n_out: u32,
    pub arrival_ms: Millis,
}

impl TaskSpec {
    pub fn llm(task_id: usize, n_in: u32, n_out: u32, arrival_ms: Millis) -> Self {
        TaskSpec {
            task_id,
            kind: TaskKind::Llm,
            n_in,
            n_out,
            arrival_ms,
        }
    }

    pub fn sdxl(task_id: usize, arrival_ms: Millis) -> Self {
        TaskSpec {
            task_id,
            kind: TaskKind::Sdxl,
            n_in: 0,
            n_out: 0,
            arrival_ms,
        }
    }
}

/// How task kinds are assigned along the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureRule {
    /// Even ids are LLM, odd ids are SDXL.
    #[default]
    Alternating,
    LlmOnly,
    SdxlOnly,
}

impl MixtureRule {
    fn kind_of(self, task_id: usize) -> TaskKind {
        match self {
            MixtureRule::Alternating if task_id.is_multiple_of(2) => TaskKind::Llm,
            MixtureRule::Alternating => TaskKind::Sdxl,
            MixtureRule::LlmOnly => TaskKind::Llm,
            MixtureRule::SdxlOnly => TaskKind::Sdxl,
        }
    }
}

/// Token bin for the `j`-th LLM task: row-major over inputs x outputs.
pub fn llm_bin(j: usize) -> (u32, u32) {
    let cell = j % (INPUT_BINS.len() * OUTPUT_BINS.len());
    (
        INPUT_BINS[cell / OUTPUT_BINS.len()],
        OUTPUT_BINS[cell % OUTPUT_BINS.len()],
    )
}

/// Deterministic fixed-interval stream of `horizon` tasks at `lambda` tasks/s.
///
/// # Panics
/// If `lambda` is not strictly positive and finite.
pub fn generate_workload(horizon: usize, lambda: f64, mixture: MixtureRule) -> Vec<TaskSpec> {
    assert!(lambda.is_finite() && lambda > 0.0, "arrival rate must be positive");
    let interarrival = 1000.0 / lambda;
    let mut llm_seen = 0;
    (0..horizon)
        .map(|k| {
            let arrival = k as f64 * interarrival;
            match mixture.kind_of(k) {
                TaskKind::Llm => {
                    let (n_in, n_out) = llm_bin(llm_seen);
                    llm_seen += 1;
                    TaskSpec::llm(k, n_in, n_out, arrival)
                }
                TaskKind::Sdxl => TaskSpec::sdxl(k, arrival),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_tasks_at_half_per_second() {
        let w = generate_workload(4, 0.5, MixtureRule::Alternating);
        let arrivals: Vec<_> = w.iter().map(|t| t.arrival_ms).collect();
        assert_eq!(arrivals, [0.0, 2000.0, 4000.0, 6000.0]);
        let kinds: Vec<_> = w.iter().map(|t| t.kind).collect();
        assert_eq!(kinds, [TaskKind::Llm, TaskKind::Sdxl, TaskKind::Llm, TaskKind::Sdxl]);
    }

    #[test]
    fn empty_horizon() {
        assert!(generate_workload(0, 0.5, MixtureRule::Alternating).is_empty());
    }

    #[test]
    fn first_llm_tasks_walk_the_grid_row_major() {
        let w = generate_workload(6, 0.5, MixtureRule::Alternating);
        let llm: Vec<_> = w
            .iter()
            .filter(|t| t.kind == TaskKind::Llm)
            .map(|t| (t.n_in, t.n_out))
            .collect();
        assert_eq!(llm, [(256, 32), (256, 64), (256, 128)]);
        assert_eq!(llm_bin(3), (512, 32));
        assert_eq!(llm_bin(8), (1024, 128));
        assert_eq!(llm_bin(9), (256, 32));
    }

    #[test]
    fn arrivals_strictly_increase() {
        let w = generate_workload(300, 0.5, MixtureRule::Alternating);
        assert!(w.windows(2).all(|p| p[1].arrival_ms > p[0].arrival_ms));
        assert!(w.iter().enumerate().all(|(i, t)| t.task_id == i));
    }
}

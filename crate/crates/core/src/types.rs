//! Domain newtypes shared by every layer of the stack.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulated time in milliseconds.
pub type Millis = f64;

/// Index of a device in the pool, assigned in profile order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u16);

impl DeviceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// The two generative workload families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Llm,
    Sdxl,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Llm => "llm",
            TaskKind::Sdxl => "sdxl",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llm" | "llama3.1-8b" | "llama3.1-8b-edge" => Ok(TaskKind::Llm),
            "sdxl" | "sd" | "stable-diffusion-xl" => Ok(TaskKind::Sdxl),
            other => Err(format!("unknown model kind `{other}` (expected llm or sdxl)")),
        }
    }
}

/// Service-time coefficients for one device.
///
/// LLM service is `alpha * n_in + beta * n_out`; diffusion service is the
/// constant `gamma`. All values are milliseconds (per token for LLM).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ServiceModel {
    Llm { alpha: f64, beta: f64 },
    Sdxl { gamma: f64 },
}

impl ServiceModel {
    pub fn kind(&self) -> TaskKind {
        match self {
            ServiceModel::Llm { .. } => TaskKind::Llm,
            ServiceModel::Sdxl { .. } => TaskKind::Sdxl,
        }
    }

    /// Service time for the given token counts; token counts are ignored for diffusion.
    pub fn service_ms(&self, n_in: u32, n_out: u32) -> Millis {
        match *self {
            ServiceModel::Llm { alpha, beta } => alpha * f64::from(n_in) + beta * f64::from(n_out),
            ServiceModel::Sdxl { gamma } => gamma,
        }
    }

    pub fn scaled(&self, factor: f64) -> ServiceModel {
        match *self {
            ServiceModel::Llm { alpha, beta } => ServiceModel::Llm {
                alpha: alpha * factor,
                beta: beta * factor,
            },
            ServiceModel::Sdxl { gamma } => ServiceModel::Sdxl { gamma: gamma * factor },
        }
    }
}

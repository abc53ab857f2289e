//! Device-model measurement ingestion.
//!
//! Profile files are JSONL, one measurement per line. LLM rows carry p99
//! TTFT and TPOT, diffusion rows carry the p99 end-to-end latency of one
//! 1024x1024, 20-step generation. Rows are converted into [`DevicePrior`]s
//! that seed the online performance model.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{DeviceId, ServiceModel, TaskKind};

/// The shipped 4-device pool (two LLM devices, two SDXL devices).
pub const FIXTURE_JSONL: &str = include_str!("../fixtures/edge_pool.jsonl");

/// Token count the TTFT measurement is normalized by.
pub const TTFT_REFERENCE_TOKENS: f64 = 1024.0;
pub const SD_IMAGE_SIZE: u32 = 1024;
pub const SD_STEPS: u32 = 20;

const SINGLE_STREAM: &str = "SingleStream";

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot read profile file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: field `{field}` {message}")]
    InvalidField {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("record for `{device}` is {actual}, expected {expected}")]
    KindMismatch {
        device: String,
        expected: TaskKind,
        actual: TaskKind,
    },
    #[error("record for `{device}` has unsupported configuration: {field}={value}")]
    Configuration {
        device: String,
        field: &'static str,
        value: String,
    },
}

/// One measurement row as it appears in the profile file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawProfileRecord {
    pub device_name: String,
    pub model_id: String,
    pub scenario: String,
    #[serde(default)]
    pub precision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttft_ms_p99: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpot_ms_p99: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms_p99: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u32>,
}

impl RawProfileRecord {
    /// Workload family implied by the model id.
    pub fn kind(&self) -> TaskKind {
        let id = self.model_id.to_ascii_lowercase();
        if id.contains("diffusion") || id.contains("sdxl") {
            TaskKind::Sdxl
        } else {
            TaskKind::Llm
        }
    }

    fn validate(&self, line: usize) -> Result<(), ProfileError> {
        let invalid = |field, message: &str| ProfileError::InvalidField {
            line,
            field,
            message: message.to_string(),
        };
        let positive = |field, value: Option<f64>| match value {
            Some(v) if !(v.is_finite() && v > 0.0) => Err(invalid(field, "must be strictly positive")),
            _ => Ok(()),
        };
        positive("ttft_ms_p99", self.ttft_ms_p99)?;
        positive("tpot_ms_p99", self.tpot_ms_p99)?;
        positive("latency_ms_p99", self.latency_ms_p99)?;
        positive("image_size", self.image_size.map(f64::from))?;
        positive("steps", self.steps.map(f64::from))?;

        match self.kind() {
            TaskKind::Llm => {
                if self.ttft_ms_p99.is_none() {
                    return Err(invalid("ttft_ms_p99", "is required for LLM records"));
                }
                if self.tpot_ms_p99.is_none() {
                    return Err(invalid("tpot_ms_p99", "is required for LLM records"));
                }
                if self.latency_ms_p99.is_some() {
                    return Err(invalid("latency_ms_p99", "is not allowed on LLM records"));
                }
            }
            TaskKind::Sdxl => {
                if self.latency_ms_p99.is_none() {
                    return Err(invalid("latency_ms_p99", "is required for diffusion records"));
                }
                if self.ttft_ms_p99.is_some() {
                    return Err(invalid("ttft_ms_p99", "is not allowed on diffusion records"));
                }
                if self.tpot_ms_p99.is_some() {
                    return Err(invalid("tpot_ms_p99", "is not allowed on diffusion records"));
                }
            }
        }
        Ok(())
    }
}

/// Parsed profile file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    pub records: Vec<RawProfileRecord>,
    /// Rows dropped because they were not SingleStream measurements.
    pub skipped: usize,
}

/// Per-device offline prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevicePrior {
    pub device_id: DeviceId,
    pub device_name: String,
    pub model: ServiceModel,
}

impl DevicePrior {
    pub fn kind(&self) -> TaskKind {
        self.model.kind()
    }
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfileSet, ProfileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_profiles(&text)
}

/// Parses JSONL profile text. Blank lines are ignored; line numbers are 1-based.
pub fn parse_profiles(text: &str) -> Result<ProfileSet, ProfileError> {
    let mut set = ProfileSet::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: RawProfileRecord = serde_json::from_str(raw).map_err(|e| ProfileError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if record.scenario != SINGLE_STREAM {
            log::warn!(
                "line {line}: skipping `{}` ({}) measured under scenario `{}`",
                record.device_name,
                record.model_id,
                record.scenario
            );
            set.skipped += 1;
            continue;
        }
        record.validate(line)?;
        set.records.push(record);
    }
    Ok(set)
}

pub fn prior_from_llm(device_id: DeviceId, record: &RawProfileRecord) -> Result<DevicePrior, ProfileError> {
    let (Some(ttft), Some(tpot)) = (record.ttft_ms_p99, record.tpot_ms_p99) else {
        return Err(ProfileError::KindMismatch {
            device: record.device_name.clone(),
            expected: TaskKind::Llm,
            actual: record.kind(),
        });
    };
    if record.kind() != TaskKind::Llm {
        return Err(ProfileError::KindMismatch {
            device: record.device_name.clone(),
            expected: TaskKind::Llm,
            actual: record.kind(),
        });
    }
    Ok(DevicePrior {
        device_id,
        device_name: record.device_name.clone(),
        model: ServiceModel::Llm {
            alpha: ttft / TTFT_REFERENCE_TOKENS,
            beta: tpot,
        },
    })
}

pub fn prior_from_sd(device_id: DeviceId, record: &RawProfileRecord) -> Result<DevicePrior, ProfileError> {
    let latency = match (record.kind(), record.latency_ms_p99) {
        (TaskKind::Sdxl, Some(latency)) => latency,
        _ => {
            return Err(ProfileError::KindMismatch {
                device: record.device_name.clone(),
                expected: TaskKind::Sdxl,
                actual: record.kind(),
            })
        }
    };
    let config_err = |field, value: Option<u32>| ProfileError::Configuration {
        device: record.device_name.clone(),
        field,
        value: value.map_or_else(|| "missing".to_string(), |v| v.to_string()),
    };
    if record.image_size != Some(SD_IMAGE_SIZE) {
        return Err(config_err("image_size", record.image_size));
    }
    if record.steps != Some(SD_STEPS) {
        return Err(config_err("steps", record.steps));
    }
    Ok(DevicePrior {
        device_id,
        device_name: record.device_name.clone(),
        model: ServiceModel::Sdxl { gamma: latency },
    })
}

/// Converts records to priors, numbering devices in record order.
pub fn priors_from_records(records: &[RawProfileRecord]) -> Result<Vec<DevicePrior>, ProfileError> {
    records
        .iter()
        .enumerate()
        .map(|(i, record)| {
            let id = DeviceId(i as u16);
            match record.kind() {
                TaskKind::Llm => prior_from_llm(id, record),
                TaskKind::Sdxl => prior_from_sd(id, record),
            }
        })
        .collect()
}

pub fn fixture_priors() -> Vec<DevicePrior> {
    let set = parse_profiles(FIXTURE_JSONL).expect("shipped fixture parses");
    priors_from_records(&set.records).expect("shipped fixture converts")
}

/// Writes priors as JSONL.
pub fn write_priors(path: impl AsRef<Path>, priors: &[DevicePrior]) -> std::io::Result<()> {
    let mut out = fs::File::create(path)?;
    for prior in priors {
        let line = serde_json::to_string(prior).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_priors(path: impl AsRef<Path>) -> Result<Vec<DevicePrior>, ProfileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ProfileError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

//! Online performance model.
//!
//! Learns per-device service coefficients from completed-task feedback
//! only. LLM devices are fitted with a two-feature least-squares solve over a
//! bounded window of recent records, diffusion devices with the window mean.
//! A multiplicative calibration factor sits on top of the fitted model and
//! is smoothed toward observed-to-predicted ratios.
//!
//! Every mutating call is appended to a journal, so an estimate table can be
//! rebuilt offline from the priors and the journal alone.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::DevicePrior;
use crate::simulator::{ExecutionRecord, TaskSpec};
use crate::types::{DeviceId, Millis, ServiceModel, TaskKind};

pub const DEFAULT_WINDOW_CAPACITY: usize = 40;
pub const RIDGE_DAMPING: f64 = 1e-6;
pub const CALIBRATION_SMOOTHING: f64 = 0.3;
pub const DRIFT_THRESHOLD: f64 = 1.3;
pub const DRIFT_WINDOW_MS: Millis = 60_000.0;

// det(A) / (a11 * a22) below this is treated as a singular normal system.
const SINGULAR_RELATIVE_DET: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OpmError {
    #[error("duplicate prior for device {0}")]
    DuplicateDevice(DeviceId),
    #[error("no estimate for device {device} ({kind})")]
    MissingEstimate { device: DeviceId, kind: TaskKind },
    #[error("record for task {task} completes at {completion_ms} ms, after now={now_ms} ms")]
    Causality {
        task: usize,
        completion_ms: Millis,
        now_ms: Millis,
    },
    #[error("calibration ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
}

/// Fitted coefficients, named apart from the simulator's hidden parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Coefficients {
    Llm { alpha_hat: f64, beta_hat: f64 },
    Sdxl { gamma_hat: f64 },
}

impl Coefficients {
    fn from_model(model: ServiceModel) -> Self {
        match model {
            ServiceModel::Llm { alpha, beta } => Coefficients::Llm {
                alpha_hat: alpha.max(0.0),
                beta_hat: beta.max(0.0),
            },
            ServiceModel::Sdxl { gamma } => Coefficients::Sdxl {
                gamma_hat: gamma.max(0.0),
            },
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Coefficients::Llm { .. } => TaskKind::Llm,
            Coefficients::Sdxl { .. } => TaskKind::Sdxl,
        }
    }

    pub fn service_ms(&self, n_in: u32, n_out: u32) -> Millis {
        match *self {
            Coefficients::Llm { alpha_hat, beta_hat } => alpha_hat * f64::from(n_in) + beta_hat * f64::from(n_out),
            Coefficients::Sdxl { gamma_hat } => gamma_hat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSample {
    pub service_ms: Millis,
    pub n_in: u32,
    pub n_out: u32,
    pub completion_ms: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPair {
    pub completion_ms: Millis,
    pub predicted_ms: Millis,
    pub observed_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpmEstimate {
    pub device: DeviceId,
    pub coefficients: Coefficients,
    pub calibration_factor: f64,
    /// Records ingested over the whole run.
    pub sample_count: usize,
    pub last_refit: Option<usize>,
    pub window: VecDeque<FeedbackSample>,
    pub residuals: VecDeque<ResidualPair>,
}

impl OpmEstimate {
    pub fn kind(&self) -> TaskKind {
        self.coefficients.kind()
    }

    pub fn predict(&self, n_in: u32, n_out: u32) -> Millis {
        self.calibration_factor * self.coefficients.service_ms(n_in, n_out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReading {
    pub ratio: f64,
    pub sample_count: usize,
}

impl DriftReading {
    pub fn is_alarm(&self) -> bool {
        self.ratio > DRIFT_THRESHOLD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RefitOutcome {
    Insufficient {
        have: usize,
        need: usize,
    },
    Updated {
        old: Coefficients,
        new: Coefficients,
        old_calibration: f64,
        used: usize,
    },
}

/// One mutating operation, as recorded in the journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpmOp {
    Ingest {
        record: ExecutionRecord,
        now_ms: Millis,
    },
    Refit {
        device: DeviceId,
        kind: TaskKind,
        min_samples: usize,
        window: Option<usize>,
        task_index: usize,
    },
    Calibrate {
        device: DeviceId,
        kind: TaskKind,
        ratio: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Opm {
    estimates: BTreeMap<(DeviceId, TaskKind), OpmEstimate>,
    capacity: usize,
    journal: Vec<OpmOp>,
}

impl Opm {
    pub fn seed(priors: &[DevicePrior]) -> Result<Self, OpmError> {
        Self::seed_with_capacity(priors, DEFAULT_WINDOW_CAPACITY)
    }

    pub fn seed_with_capacity(priors: &[DevicePrior], capacity: usize) -> Result<Self, OpmError> {
        let mut estimates = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for prior in priors {
            if !seen.insert(prior.device_id) {
                return Err(OpmError::DuplicateDevice(prior.device_id));
            }
            estimates.insert(
                (prior.device_id, prior.kind()),
                OpmEstimate {
                    device: prior.device_id,
                    coefficients: Coefficients::from_model(prior.model),
                    calibration_factor: 1.0,
                    sample_count: 0,
                    last_refit: None,
                    window: VecDeque::with_capacity(capacity),
                    residuals: VecDeque::with_capacity(capacity),
                },
            );
        }
        Ok(Opm {
            estimates,
            capacity: capacity.max(1),
            journal: Vec::new(),
        })
    }

    /// Rebuilds a model from priors and a journal.
    pub fn replay(priors: &[DevicePrior], capacity: usize, journal: &[OpmOp]) -> Result<Self, OpmError> {
        let mut opm = Self::seed_with_capacity(priors, capacity)?;
        for op in journal {
            match *op {
                OpmOp::Ingest { record, now_ms } => opm.ingest_feedback(&record, now_ms)?,
                OpmOp::Refit {
                    device,
                    kind,
                    min_samples,
                    window,
                    task_index,
                } => {
                    opm.refit(device, kind, min_samples, window, task_index)?;
                }
                OpmOp::Calibrate { device, kind, ratio } => {
                    opm.apply_calibration(device, kind, ratio)?;
                }
            }
        }
        Ok(opm)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn journal(&self) -> &[OpmOp] {
        &self.journal
    }

    pub fn estimates(&self) -> impl Iterator<Item = &OpmEstimate> {
        self.estimates.values()
    }

    pub fn keys(&self) -> Vec<(DeviceId, TaskKind)> {
        self.estimates.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn estimate(&self, device: DeviceId, kind: TaskKind) -> Result<&OpmEstimate, OpmError> {
        self.estimates
            .get(&(device, kind))
            .ok_or(OpmError::MissingEstimate { device, kind })
    }

    fn estimate_mut(&mut self, device: DeviceId, kind: TaskKind) -> Result<&mut OpmEstimate, OpmError> {
        self.estimates
            .get_mut(&(device, kind))
            .ok_or(OpmError::MissingEstimate { device, kind })
    }

    /// Appends a completed record to its device window. Coefficients are untouched.
    pub fn ingest_feedback(&mut self, record: &ExecutionRecord, now_ms: Millis) -> Result<(), OpmError> {
        if record.completion_ms > now_ms {
            return Err(OpmError::Causality {
                task: record.task_id,
                completion_ms: record.completion_ms,
                now_ms,
            });
        }
        let capacity = self.capacity;
        let est = self.estimate_mut(record.device, record.kind)?;
        let predicted = est.predict(record.n_in, record.n_out);
        push_capped(
            &mut est.window,
            FeedbackSample {
                service_ms: record.service_ms,
                n_in: record.n_in,
                n_out: record.n_out,
                completion_ms: record.completion_ms,
            },
            capacity,
        );
        push_capped(
            &mut est.residuals,
            ResidualPair {
                completion_ms: record.completion_ms,
                predicted_ms: predicted,
                observed_ms: record.service_ms,
            },
            capacity,
        );
        est.sample_count += 1;
        self.journal.push(OpmOp::Ingest {
            record: *record,
            now_ms,
        });
        Ok(())
    }

    /// Refits one device from its most recent `window` records (all when `None`).
    pub fn refit(
        &mut self,
        device: DeviceId,
        kind: TaskKind,
        min_samples: usize,
        window: Option<usize>,
        task_index: usize,
    ) -> Result<RefitOutcome, OpmError> {
        let est = self.estimate_mut(device, kind)?;
        let take = window.unwrap_or(usize::MAX).min(est.window.len());
        let recent: Vec<FeedbackSample> = est.window.iter().skip(est.window.len() - take).copied().collect();
        let need = min_samples.max(1);
        let outcome = if recent.len() < need {
            RefitOutcome::Insufficient {
                have: recent.len(),
                need,
            }
        } else {
            let new = match kind {
                TaskKind::Llm => {
                    let (alpha_hat, beta_hat) = fit_llm(&recent);
                    Coefficients::Llm { alpha_hat, beta_hat }
                }
                TaskKind::Sdxl => Coefficients::Sdxl {
                    gamma_hat: fit_sdxl(&recent),
                },
            };
            let old = est.coefficients;
            let old_calibration = est.calibration_factor;
            est.coefficients = new;
            est.calibration_factor = 1.0;
            est.last_refit = Some(task_index);
            RefitOutcome::Updated {
                old,
                new,
                old_calibration,
                used: recent.len(),
            }
        };
        self.journal.push(OpmOp::Refit {
            device,
            kind,
            min_samples,
            window,
            task_index,
        });
        Ok(outcome)
    }

    /// Refits every device, in key order.
    pub fn refit_all(
        &mut self,
        min_samples: usize,
        window: Option<usize>,
        task_index: usize,
    ) -> Vec<((DeviceId, TaskKind), RefitOutcome)> {
        self.keys()
            .into_iter()
            .map(|(d, k)| {
                let outcome = self
                    .refit(d, k, min_samples, window, task_index)
                    .expect("key taken from the table");
                ((d, k), outcome)
            })
            .collect()
    }

    pub fn predict(&self, device: DeviceId, task: &TaskSpec) -> Result<Millis, OpmError> {
        Ok(self.estimate(device, task.kind)?.predict(task.n_in, task.n_out))
    }

    /// `1 / (1 + n)`; unknown devices are maximally uncertain.
    pub fn uncertainty(&self, device: DeviceId, kind: TaskKind) -> f64 {
        let n = self.estimate(device, kind).map_or(0, |e| e.sample_count);
        1.0 / (1.0 + n as f64)
    }

    /// Observed-to-predicted ratio over residuals completed in `[now - window, now]`.
    pub fn drift_ratio(&self, device: DeviceId, kind: TaskKind, window_ms: Millis, now_ms: Millis) -> DriftReading {
        let Ok(est) = self.estimate(device, kind) else {
            return DriftReading {
                ratio: 1.0,
                sample_count: 0,
            };
        };
        let lo = now_ms - window_ms;
        let (mut obs, mut pred, mut n) = (0.0, 0.0, 0usize);
        for r in est
            .residuals
            .iter()
            .filter(|r| r.completion_ms >= lo && r.completion_ms <= now_ms)
        {
            obs += r.observed_ms;
            pred += r.predicted_ms;
            n += 1;
        }
        let ratio = if n == 0 {
            1.0
        } else if pred > 0.0 {
            obs / pred
        } else if obs > 0.0 {
            f64::INFINITY
        } else {
            1.0
        };
        DriftReading { ratio, sample_count: n }
    }

    /// Length of the trailing run of residuals in the window whose
    /// observed-to-predicted ratio exceeds `threshold`.
    pub fn trailing_exceedances(
        &self,
        device: DeviceId,
        kind: TaskKind,
        threshold: f64,
        window_ms: Millis,
        now_ms: Millis,
    ) -> usize {
        let Ok(est) = self.estimate(device, kind) else {
            return 0;
        };
        let lo = now_ms - window_ms;
        est.residuals
            .iter()
            .rev()
            .filter(|r| r.completion_ms >= lo && r.completion_ms <= now_ms)
            .take_while(|r| r.observed_ms > threshold * r.predicted_ms)
            .count()
    }

    /// Smooths the calibration factor toward `observed_ratio`; returns `(old, new)`.
    pub fn apply_calibration(
        &mut self,
        device: DeviceId,
        kind: TaskKind,
        observed_ratio: f64,
    ) -> Result<(f64, f64), OpmError> {
        if !(observed_ratio.is_finite() && observed_ratio > 0.0) {
            return Err(OpmError::InvalidRatio(observed_ratio));
        }
        let est = self.estimate_mut(device, kind)?;
        let old = est.calibration_factor;
        let new = CALIBRATION_SMOOTHING * observed_ratio + (1.0 - CALIBRATION_SMOOTHING) * old;
        est.calibration_factor = new;
        self.journal.push(OpmOp::Calibrate {
            device,
            kind,
            ratio: observed_ratio,
        });
        Ok((old, new))
    }

    /// One line per device-kind: coefficients, calibration, sample count.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for est in self.estimates.values() {
            let coeffs = match est.coefficients {
                Coefficients::Llm { alpha_hat, beta_hat } => {
                    format!("alpha_hat={alpha_hat:.6} beta_hat={beta_hat:.6}")
                }
                Coefficients::Sdxl { gamma_hat } => format!("gamma_hat={gamma_hat:.6}"),
            };
            let _ = writeln!(
                out,
                "device={} kind={} {coeffs} calibration={:.6} n={}",
                est.device.0,
                est.kind(),
                est.calibration_factor,
                est.sample_count
            );
        }
        out
    }
}

fn push_capped<T>(buf: &mut VecDeque<T>, item: T, capacity: usize) {
    if buf.len() == capacity {
        buf.pop_front();
    }
    buf.push_back(item);
}

/// Least squares for `service = a * n_in + b * n_out` with no intercept,
/// falling back to ridge damping on a singular system; results clipped at zero.
fn fit_llm(samples: &[FeedbackSample]) -> (f64, f64) {
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let (x1, x2, y) = (f64::from(s.n_in), f64::from(s.n_out), s.service_ms);
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        b1 += x1 * y;
        b2 += x2 * y;
    }
    let det = s11 * s22 - s12 * s12;
    let singular = !(det.is_finite() && det > SINGULAR_RELATIVE_DET * s11 * s22);
    let (s11, s22, det) = if singular {
        let (a, d) = (s11 + RIDGE_DAMPING, s22 + RIDGE_DAMPING);
        (a, d, a * d - s12 * s12)
    } else {
        (s11, s22, det)
    };
    let alpha = (b1 * s22 - b2 * s12) / det;
    let beta = (s11 * b2 - s12 * b1) / det;
    (clip(alpha), clip(beta))
}

fn clip(v: f64) -> f64 {
    if v.is_finite() {
        v.max(0.0)
    } else {
        0.0
    }
}

fn fit_sdxl(samples: &[FeedbackSample]) -> f64 {
    samples.iter().map(|s| s.service_ms).sum::<f64>() / samples.len() as f64
}

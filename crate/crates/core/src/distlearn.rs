//! Training data for the disturbance learner.
//!
//! Each new state estimate yields one sample of the sensitivity disturbance:
//! the part of the row-`i*` transition that the nominal model does not
//! explain, scaled by the disturbance input gain. Samples taken while an
//! announced meal is being absorbed, and samples whose magnitude is
//! implausibly large (typically a forgotten meal), are kept in the buffer for
//! inspection but never reach the regression.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{DiscreteModel, StateVector, GUT_OUT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardReason {
    None,
    MealGate,
    OutOfRange,
}

impl DiscardReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DiscardReason::None => "none",
            DiscardReason::MealGate => "meal-gate",
            DiscardReason::OutOfRange => "out-of-range",
        }
    }
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DiscardReason {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(DiscardReason::None),
            "meal-gate" => Ok(DiscardReason::MealGate),
            "out-of-range" => Ok(DiscardReason::OutOfRange),
            other => Err(format!("unknown discard reason {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPoint {
    /// Collection time, min.
    pub t: f64,
    pub u_kis: f64,
    pub discarded: DiscardReason,
}

impl TrainingPoint {
    pub fn new(t: f64, u_kis: f64) -> Self {
        TrainingPoint {
            t,
            u_kis,
            discarded: DiscardReason::None,
        }
    }

    pub fn is_retained(&self) -> bool {
        self.discarded == DiscardReason::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    /// Glucose appearance above which collection pauses, mg/min.
    pub gate_threshold: f64,
    /// Largest admissible `|u_kis|`.
    pub range_limit: f64,
    /// Glucose distribution volume converting the gut outflow to mg/min, dl.
    pub distribution_volume: f64,
    /// Window length, min.
    pub max_age: f64,
    pub capacity: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            gate_threshold: 150.0,
            range_limit: 2.0,
            distribution_volume: 32.0,
            max_age: 7.0 * 1440.0,
            capacity: 2016,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_threshold >= 0.0 && self.range_limit > 0.0) {
            return Err(Error::Config(
                "gate threshold and range limit must be positive".into(),
            ));
        }
        if !(self.distribution_volume > 0.0 && self.max_age > 0.0 && self.capacity > 0) {
            return Err(Error::Config(
                "distribution volume, max age and capacity must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Disturbance sample explaining the transition `x_km1 → x_k` under `u_km1`.
pub fn extract_point(
    x_k: &StateVector,
    x_km1: &StateVector,
    u_km1: f64,
    model: &DiscreteModel,
) -> Result<f64> {
    let i = model.is_row;
    let divisor = model.bd_kis[i];
    if divisor == 0.0 || !divisor.is_finite() {
        return Err(Error::Config(format!(
            "disturbance gain in row {} is {divisor}",
            i + 1
        )));
    }
    let nominal = (model.ad.row(i) * x_km1)[0] + model.bd[i] * u_km1;
    Ok((x_k[i] - nominal) / divisor)
}

/// Rate of glucose entering the blood from the gut, mg/min.
pub fn gut_appearance(x_hat: &StateVector, transfer: f64, distribution_volume: f64) -> f64 {
    transfer * x_hat[GUT_OUT] * distribution_volume
}

/// Applies the meal gate first, then the range check.
pub fn postprocess(point: TrainingPoint, appearance: f64, cfg: &LearningConfig) -> TrainingPoint {
    let discarded = if appearance > cfg.gate_threshold {
        DiscardReason::MealGate
    } else if !(point.u_kis.abs() <= cfg.range_limit) {
        DiscardReason::OutOfRange
    } else {
        DiscardReason::None
    };
    TrainingPoint { discarded, ..point }
}

/// Sliding window of training points, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBuffer {
    points: VecDeque<TrainingPoint>,
    max_age: f64,
    capacity: usize,
}

impl TrainingBuffer {
    pub fn new(max_age: f64, capacity: usize) -> Self {
        TrainingBuffer {
            points: VecDeque::new(),
            max_age,
            capacity,
        }
    }

    pub fn from_config(cfg: &LearningConfig) -> Self {
        Self::new(cfg.max_age, cfg.capacity)
    }

    /// Appends `point` and evicts what fell out of the window; the evicted
    /// points are returned oldest first.
    pub fn push(&mut self, point: TrainingPoint) -> Result<Vec<TrainingPoint>> {
        if let Some(last) = self.points.back() {
            if !(point.t > last.t) {
                return Err(Error::Domain(format!(
                    "training timestamps must increase ({} after {})",
                    point.t, last.t
                )));
            }
        }
        self.points.push_back(point);
        let mut evicted = Vec::new();
        while let Some(front) = self.points.front() {
            if self.points.len() > self.capacity || point.t - front.t >= self.max_age {
                evicted.extend(self.points.pop_front());
            } else {
                break;
            }
        }
        Ok(evicted)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrainingPoint> {
        self.points.iter()
    }

    pub fn retained(&self) -> impl Iterator<Item = &TrainingPoint> {
        self.points.iter().filter(|p| p.is_retained())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t_min,u_kis,discarded_reason\n");
        for p in &self.points {
            out.push_str(&format!("{:.16e},{:.16e},{}\n", p.t, p.u_kis, p.discarded));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::distlearn::LearningConfig;
use crate::error::{Error, Result};
use crate::estimator::EstimatorSettings;
use crate::gp::KernelParams;
use crate::linmodel::InsulinSensitivityProfile;
use crate::mpc::MpcConfig;
use crate::plant::{Meal, PatientParams};

pub const MINUTES_PER_DAY: f64 = 1440.0;

/// The seven-day randomized meal schedule, as committed in `scenarios/`.
pub const TABLE3_CFG: &str = include_str!("../../scenarios/table3.cfg");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Mpc,
    GpMpc,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Mpc => "mpc",
            ControllerKind::GpMpc => "gp-mpc",
        }
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mpc" => Ok(ControllerKind::Mpc),
            "gp-mpc" => Ok(ControllerKind::GpMpc),
            other => Err(format!(
                "unknown controller {other:?} (expected mpc or gp-mpc)"
            )),
        }
    }
}

/// Which glucose signal the percent-time metrics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlucoseSignal {
    #[default]
    True,
    Cgm,
}

/// Time of day in minutes after midnight, written `HH:MM`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ClockTime(pub f64);

impl ClockTime {
    pub fn hm(h: u32, m: u32) -> Self {
        ClockTime((h * 60 + m) as f64)
    }

    pub fn minutes(&self) -> f64 {
        self.0
    }
}

impl FromStr for ClockTime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (h, m) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| format!("expected HH:MM, got {s:?}"))?;
        let h: u32 = h.parse().map_err(|_| format!("bad hour in {s:?}"))?;
        let m: u32 = m.parse().map_err(|_| format!("bad minute in {s:?}"))?;
        if h > 24 || m > 59 || (h == 24 && m != 0) {
            return Err(format!("clock time out of range: {s:?}"));
        }
        Ok(ClockTime::hm(h, m))
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total = self.0.round() as u32;
        write!(f, "{:02}:{:02}", total / 60, total % 60)
    }
}

impl Serialize for ClockTime {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClockTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Daily clock interval `[start, end)`; wraps past midnight when `start > end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockWindow {
    pub start: ClockTime,
    pub end: ClockTime,
}

impl Default for ClockWindow {
    fn default() -> Self {
        ClockWindow {
            start: ClockTime::hm(0, 0),
            end: ClockTime::hm(7, 0),
        }
    }
}

impl ClockWindow {
    pub fn contains(&self, t: f64) -> bool {
        let tod = t.rem_euclid(MINUTES_PER_DAY);
        let (s, e) = (self.start.0, self.end.0);
        if s <= e {
            tod >= s && tod < e
        } else {
            tod >= s || tod < e
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MealEntry {
    /// 1-based.
    pub day: u32,
    pub time: ClockTime,
    pub grams: f64,
    #[serde(default = "yes")]
    pub announced: bool,
}

fn yes() -> bool {
    true
}

impl MealEntry {
    pub fn start_minute(&self) -> f64 {
        (self.day as f64 - 1.0) * MINUTES_PER_DAY + self.time.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub duration_days: f64,
    pub controller: ControllerKind,
    /// CGM noise stream.
    pub seed: u64,
    /// Plant mismatch draw, used when `patient.perturbation > 0`.
    pub perturbation_seed: u64,
    pub insulin_sensitivity: InsulinSensitivityProfile,
    pub patient: PatientParams,
    pub mpc: MpcConfig,
    pub estimator: EstimatorSettings,
    pub gp: KernelParams,
    pub learning: LearningConfig,
    pub overnight: ClockWindow,
    pub metrics_signal: GlucoseSignal,
    /// Keep learning but hand the controller an all-zero preview.
    pub force_zero_preview: bool,
    pub meals: Vec<MealEntry>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_days: 7.0,
            controller: ControllerKind::GpMpc,
            seed: 1,
            perturbation_seed: 0,
            insulin_sensitivity: InsulinSensitivityProfile::sinusoid(0.3),
            patient: PatientParams::default(),
            mpc: MpcConfig::default(),
            estimator: EstimatorSettings::default(),
            gp: KernelParams::default(),
            learning: LearningConfig::default(),
            overnight: ClockWindow::default(),
            metrics_signal: GlucoseSignal::True,
            force_zero_preview: false,
            meals: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|m| Error::parse(path, m))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Seven days of meals with randomized size and timing.
    pub fn table3() -> Self {
        Self::from_toml(TABLE3_CFG).expect("committed table3.cfg parses")
    }

    pub fn duration_minutes(&self) -> f64 {
        self.duration_days * MINUTES_PER_DAY
    }

    pub fn steps(&self) -> usize {
        (self.duration_minutes() / self.mpc.ts).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.patient.validate()?;
        self.mpc.validate()?;
        self.gp.validate()?;
        self.learning.validate()?;
        self.insulin_sensitivity.validate()?;
        if !(self.duration_days > 0.0 && self.duration_days.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        let steps = self.duration_minutes() / self.mpc.ts;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::Config(
                "duration must be a whole number of control steps".into(),
            ));
        }
        if (self.mpc.ts - self.patient.cgm_period).abs() > 1e-12 {
            return Err(Error::Config(
                "controller sample time must equal the CGM period".into(),
            ));
        }
        if (self.mpc.u_basal - self.patient.u_basal).abs() > 1e-12 {
            return Err(Error::Config(
                "mpc.u_basal must equal patient.u_basal".into(),
            ));
        }
        for m in &self.meals {
            if m.day == 0 || !(m.grams > 0.0) {
                return Err(Error::Config(format!("invalid meal {m:?}")));
            }
            let start = m.start_minute();
            if start < 0.0 || start >= self.duration_minutes() {
                return Err(Error::Config(format!(
                    "meal on day {} at {} lies outside the scenario",
                    m.day, m.time
                )));
            }
        }
        Ok(())
    }

    fn meals_where(&self, pred: impl Fn(&MealEntry) -> bool) -> Vec<Meal> {
        self.meals
            .iter()
            .filter(|m| pred(m))
            .map(|m| Meal {
                start: m.start_minute(),
                grams: m.grams,
                duration: self.patient.meal_duration,
            })
            .collect()
    }

    /// Everything the patient eats.
    pub fn plant_meals(&self) -> Vec<Meal> {
        self.meals_where(|_| true)
    }

    /// What the controller is told about.
    pub fn announced_meals(&self) -> Vec<Meal> {
        self.meals_where(|m| m.announced)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table3_parses() {
        let cfg = ScenarioConfig::table3();
        cfg.validate().unwrap();
        assert_eq!(cfg.meals.len(), 21);
        assert_eq!(cfg.steps(), 2016);
        let grams: Vec<f64> = cfg
            .meals
            .iter()
            .filter(|m| m.day == 3)
            .map(|m| m.grams)
            .collect();
        assert_eq!(grams, vec![60.0, 80.0, 85.0]);
        let first = &cfg.meals[0];
        assert_eq!(first.start_minute(), 480.0);
        assert!(cfg.meals.iter().all(|m| m.announced));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::table3();
        let back = ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn clock_parsing() {
        assert_eq!("7:30".parse::<ClockTime>().unwrap().0, 450.0);
        assert_eq!("19:00".parse::<ClockTime>().unwrap().to_string(), "19:00");
        assert!("25:00".parse::<ClockTime>().is_err());
        assert!("noon".parse::<ClockTime>().is_err());
    }

    #[test]
    fn window_wraps() {
        let w = ClockWindow {
            start: ClockTime::hm(22, 0),
            end: ClockTime::hm(6, 0),
        };
        assert!(w.contains(23.0 * 60.0));
        assert!(w.contains(1440.0 + 60.0));
        assert!(!w.contains(12.0 * 60.0));
        let d = ClockWindow::default();
        assert!(d.contains(0.0));
        assert!(!d.contains(420.0));
    }

    #[test]
    fn rejects_meal_outside_duration() {
        let mut cfg = ScenarioConfig::table3();
        cfg.duration_days = 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.patient.u_basal = 15.0;
        assert!(cfg.validate().is_err());
    }
}

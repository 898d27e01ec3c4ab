use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ClockWindow, MINUTES_PER_DAY};
use crate::error::{Error, Result};

const SEVEN_AM: f64 = 420.0;

/// Glycemic summary over one window. Percentages are of samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub pct_below_54: f64,
    pub pct_below_60: f64,
    pub pct_below_70: f64,
    pub pct_70_140: f64,
    pub pct_70_180: f64,
    pub pct_above_180: f64,
    pub pct_above_250: f64,
    pub pct_above_300: f64,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub sd: f64,
    /// `sd / mean`.
    pub cv: f64,
    /// Mean of the 07:00 samples; absent for the overnight block.
    pub mean_at_7am: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub day_and_night: MetricBlock,
    pub overnight: MetricBlock,
}

pub const METRIC_ROWS: [&str; 13] = [
    "pct_below_54",
    "pct_below_60",
    "pct_below_70",
    "pct_70_140",
    "pct_70_180",
    "pct_above_180",
    "pct_above_250",
    "pct_above_300",
    "mean",
    "median",
    "sd",
    "cv",
    "mean_at_7am",
];

impl MetricBlock {
    pub fn get(&self, key: &str) -> Option<f64> {
        Some(match key {
            "pct_below_54" => self.pct_below_54,
            "pct_below_60" => self.pct_below_60,
            "pct_below_70" => self.pct_below_70,
            "pct_70_140" => self.pct_70_140,
            "pct_70_180" => self.pct_70_180,
            "pct_above_180" => self.pct_above_180,
            "pct_above_250" => self.pct_above_250,
            "pct_above_300" => self.pct_above_300,
            "mean" => self.mean,
            "median" => self.median,
            "sd" => self.sd,
            "cv" => self.cv,
            "mean_at_7am" => return self.mean_at_7am,
            _ => return None,
        })
    }
}

/// Summarizes `glucose` sampled at `times` (minutes), optionally restricted to
/// a daily clock window. Range bands include both edges.
pub fn compute_metrics(
    times: &[f64],
    glucose: &[f64],
    window: Option<&ClockWindow>,
) -> Result<MetricBlock> {
    if times.len() != glucose.len() {
        return Err(Error::Domain(format!(
            "{} times but {} glucose values",
            times.len(),
            glucose.len()
        )));
    }
    if glucose.iter().any(|g| !g.is_finite()) {
        return Err(Error::Domain("non-finite glucose sample".into()));
    }
    let mut g: Vec<f64> = times
        .iter()
        .zip(glucose)
        .filter(|(t, _)| window.is_none_or(|w| w.contains(**t)))
        .map(|(_, g)| *g)
        .collect();
    if g.is_empty() {
        return Err(Error::Domain(
            "no glucose samples in the metric window".into(),
        ));
    }
    let n = g.len() as f64;
    let pct =
        |pred: &dyn Fn(f64) -> bool| 100.0 * g.iter().filter(|v| pred(**v)).count() as f64 / n;
    let below_70 = pct(&|v| v < 70.0);
    let in_70_180 = pct(&|v| (70.0..=180.0).contains(&v));
    let mean = g.iter().sum::<f64>() / n;
    let sd = (g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();

    let mean_at_7am = if window.is_some() {
        None
    } else {
        let at7: Vec<f64> = times
            .iter()
            .zip(glucose)
            .filter(|(t, _)| (t.rem_euclid(MINUTES_PER_DAY) - SEVEN_AM).abs() < 1e-6)
            .map(|(_, g)| *g)
            .collect();
        (!at7.is_empty()).then(|| at7.iter().sum::<f64>() / at7.len() as f64)
    };

    let block = MetricBlock {
        pct_below_54: pct(&|v| v < 54.0),
        pct_below_60: pct(&|v| v < 60.0),
        pct_below_70: below_70,
        pct_70_140: pct(&|v| (70.0..=140.0).contains(&v)),
        pct_70_180: in_70_180,
        // grouped so that below + in range + above is exactly 100
        pct_above_180: 100.0 - (below_70 + in_70_180),
        pct_above_250: pct(&|v| v > 250.0),
        pct_above_300: pct(&|v| v > 300.0),
        mean,
        median: median(&mut g),
        sd,
        cv: sd / mean,
        mean_at_7am,
    };
    Ok(block)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Side-by-side table of two runs, one line per metric and block.
pub fn comparison_table(a: &RunMetrics, b: &RunMetrics, label_a: &str, label_b: &str) -> String {
    let mut out = String::new();
    for (name, ba, bb) in [
        ("day-and-night", &a.day_and_night, &b.day_and_night),
        ("overnight", &a.overnight, &b.overnight),
    ] {
        let _ = writeln!(out, "{name}");
        let _ = writeln!(out, "{:<16}{:>12}{:>12}", "metric", label_a, label_b);
        for key in METRIC_ROWS {
            let cell = |v: Option<f64>| v.map_or("---".to_string(), |x| format!("{x:.2}"));
            let _ = writeln!(
                out,
                "{key:<16}{:>12}{:>12}",
                cell(ba.get(key)),
                cell(bb.get(key))
            );
        }
        out.push('\n');
    }
    out
}

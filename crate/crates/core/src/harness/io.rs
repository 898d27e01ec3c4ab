use std::fs;
use std::io::Write;
use std::path::Path;

use super::metrics::RunMetrics;
use super::run::{RunRecord, StepRow};
use crate::distlearn::DiscardReason;
use crate::error::{Error, Result};
use crate::gp::write_prediction_csv;

pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BUFFER_FILE: &str = "training_buffer.csv";
pub const GP_FILE: &str = "gp_prediction.csv";
pub const QP_FILE: &str = "qp_diagnostics.csv";

const TIMESERIES_HEADER: [&str; 8] = [
    "t_min",
    "glucose_true",
    "cgm",
    "insulin_mU_min",
    "gp_mean",
    "gp_var",
    "train_u",
    "train_discard",
];

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.16e}"))
}

pub fn timeseries_csv(rows: &[StepRow]) -> String {
    let mut out = TIMESERIES_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
            r.t,
            r.glucose_true,
            r.cgm,
            r.insulin,
            r.gp_mean,
            r.gp_var,
            opt(r.train_u),
            r.train_discard.map_or("", |d| d.as_str()),
        ));
    }
    out
}

/// Writes the time series, metrics, final buffer, GP trace and QP diagnostics
/// into `dir`, creating it if needed.
pub fn write_outputs(record: &RunRecord, dir: &Path) -> Result<()> {
    if record.rows.is_empty() {
        return Err(Error::Domain(
            "refusing to write an empty run record".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    write_text(&dir.join(TIMESERIES_FILE), &timeseries_csv(&record.rows))?;

    let json = serde_json::to_string_pretty(&record.metrics)
        .map_err(|e| Error::Numerical(format!("metrics do not serialize: {e}")))?;
    write_text(&dir.join(METRICS_FILE), &json)?;

    record.buffer.write_csv(&dir.join(BUFFER_FILE))?;

    let t = record.times();
    let mean: Vec<f64> = record.rows.iter().map(|r| r.gp_mean).collect();
    let var: Vec<f64> = record.rows.iter().map(|r| r.gp_var).collect();
    write_prediction_csv(&dir.join(GP_FILE), &t, &mean, &var)?;

    let mut qp = String::from("t_min,status,J_star,iterations,u_command\n");
    for d in &record.diagnostics {
        qp.push_str(&format!(
            "{:.16e},{},{:.16e},{},{:.16e}\n",
            d.t,
            d.status.as_str(),
            d.j_star,
            d.iterations,
            d.u_command
        ));
    }
    write_text(&dir.join(QP_FILE), &qp)
}

pub fn read_timeseries(path: &Path) -> Result<Vec<StepRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    if header.iter().ne(TIMESERIES_HEADER) {
        return Err(Error::parse(path, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let bad = |col: &str| Error::parse(path, format!("line {}: bad {col}", i + 2));
        let num =
            |j: usize| -> Result<f64> { rec[j].parse().map_err(|_| bad(TIMESERIES_HEADER[j])) };
        let train_u = match &rec[6] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("train_u"))?),
        };
        let train_discard = match &rec[7] {
            "" => None,
            s => Some(
                s.parse::<DiscardReason>()
                    .map_err(|_| bad("train_discard"))?,
            ),
        };
        rows.push(StepRow {
            t: num(0)?,
            glucose_true: num(1)?,
            cgm: num(2)?,
            insulin: num(3)?,
            gp_mean: num(4)?,
            gp_var: num(5)?,
            train_u,
            train_discard,
        });
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

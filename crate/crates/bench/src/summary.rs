use std::io::Write;

use mrbsp_core::Backend;

use crate::{BenchError, ExperimentKind, Outcome, RunRecord};

pub const CSV_COLUMNS: [&str; 8] = ["experiment", "backend", "shape", "value", "mean_s", "stddev_s", "ok", "fail"];

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub experiment: ExperimentKind,
    pub backend: Backend,
    pub shape: String,
    pub value: usize,
    /// Over Ok runs; `None` when there were none.
    pub mean_s: Option<f64>,
    /// Sample standard deviation over Ok runs.
    pub stddev_s: Option<f64>,
    pub ok: usize,
    pub fail: usize,
    /// Failures that were worker-cap exhaustion.
    pub too_many_threads: usize,
}

/// One row per (experiment, backend, shape, value), in the order the
/// cells first appear in `records`.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<(SummaryRow, Vec<f64>)> = Vec::new();
    for r in records {
        let i = match rows.iter().position(|(row, _)| {
            row.experiment == r.experiment && row.backend == r.backend && row.shape == r.shape && row.value == r.value
        }) {
            Some(i) => i,
            None => {
                rows.push((
                    SummaryRow {
                        experiment: r.experiment,
                        backend: r.backend,
                        shape: r.shape.clone(),
                        value: r.value,
                        mean_s: None,
                        stddev_s: None,
                        ok: 0,
                        fail: 0,
                        too_many_threads: 0,
                    },
                    Vec::new(),
                ));
                rows.len() - 1
            }
        };
        let (row, times) = &mut rows[i];
        match r.outcome {
            Outcome::Ok => {
                row.ok += 1;
                times.push(r.wall_s);
            }
            Outcome::TooManyThreads => {
                row.fail += 1;
                row.too_many_threads += 1;
            }
            Outcome::Error(_) => row.fail += 1,
        }
    }
    rows.into_iter()
        .map(|(mut row, times)| {
            if !times.is_empty() {
                let (mean, sd) = mean_sd(&times);
                row.mean_s = Some(mean);
                row.stddev_s = Some(sd);
            }
            row
        })
        .collect()
}

/// Mean and sample standard deviation; a single sample has deviation 0.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    let na = |x: Option<f64>| x.map_or_else(|| "N/A".to_string(), |v| format!("{v:.6}"));
    for r in rows {
        w.write_record([
            r.experiment.id().to_string(),
            r.backend.short_name().to_string(),
            r.shape.clone(),
            r.value.to_string(),
            na(r.mean_s),
            na(r.stddev_s),
            r.ok.to_string(),
            r.fail.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

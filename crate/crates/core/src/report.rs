//! Plain-text tables and CSV output for simulation and calibration results.

use std::io::Write;

use crate::error::{Error, Result};
use crate::simulation::{CalibrationRow, MethodResult, SimulationResults};

fn csv_error(err: csv::Error) -> Error {
    Error::Io {
        path: "<csv>".into(),
        message: err.to_string(),
    }
}

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                out.push_str(&format!("{cell:<w$}"));
            } else {
                out.push_str(&format!("  {cell:>w$}"));
            }
        }
        out.push('\n');
        out
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    ));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// The aggregate table: method, abs error, sdev, win %.
pub fn summary_table(summary: &[MethodResult]) -> String {
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|m| {
            vec![
                m.method.name().to_string(),
                format!("{:.4}", m.abs_error),
                format!("{:.4}", m.sd_error),
                m.win_pct.map_or("--".to_string(), |w| format!("{w:.1}")),
            ]
        })
        .collect();
    render(&["method", "abs error", "sdev", "win %"], &rows)
}

/// One row per method × size × simulation, full precision.
pub fn write_results_csv<W: Write>(results: &SimulationResults, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["simulation", "method", "fraction", "n", "abs_error", "sd_error"])
        .map_err(csv_error)?;
    for c in &results.cells {
        w.write_record([
            results.simulations[c.simulation].clone(),
            c.method.name().to_string(),
            c.fraction.to_string(),
            c.n.to_string(),
            c.mean_abs_error.to_string(),
            c.sd_error.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io(std::path::Path::new("<csv>"), e))
}

/// Per-size curve data: one series per method, one point per sample size.
pub fn write_curves_csv<W: Write>(summary: &[MethodResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "fraction", "abs_error", "sd_error", "win_pct"])
        .map_err(csv_error)?;
    for m in summary {
        for s in &m.per_size {
            w.write_record([
                m.method.name().to_string(),
                s.fraction.to_string(),
                s.mean_abs_error.to_string(),
                s.sd_error.to_string(),
                s.win_pct.map_or(String::new(), |p| p.to_string()),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| Error::io(std::path::Path::new("<csv>"), e))
}

/// Calibration table: size, method, cal %, slack, t.
pub fn calibration_table(rows: &[CalibrationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:.0}%", r.fraction * 100.0),
                r.method.name().to_string(),
                format!("{:.1}", r.cal_pct),
                format!("{:.3}", r.slack),
                format!("{:.3}", r.t),
            ]
        })
        .collect();
    render(&["size", "method", "cal", "slack", "t"], &body)
}

pub fn write_calibration_csv<W: Write>(rows: &[CalibrationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fraction", "method", "cal_pct", "slack", "t"])
        .map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.fraction.to_string(),
            r.method.name().to_string(),
            r.cal_pct.to_string(),
            r.slack.to_string(),
            r.t.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io(std::path::Path::new("<csv>"), e))
}

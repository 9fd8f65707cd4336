//! CSV output with fixed headers and round-trippable floats.

use std::path::Path;

use kan_core::optim::HistoryRow;
use kan_core::spectra::SpectraReport;

use crate::error::{BenchError, Result};
use crate::experiment::ResultRow;

pub const RESULTS_HEADER: [&str; 9] = [
    "problem",
    "arch",
    "basis",
    "free_knots",
    "schedule",
    "params",
    "mse_mean",
    "mse_std",
    "seconds",
];
pub const HISTORY_HEADER: [&str; 4] = ["level", "epoch", "loss", "grad_norm"];
pub const SPECTRA_HEADER: [&str; 3] = ["quantity", "size", "value"];

/// 17 significant digits, enough to parse back the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(csv::Writer::from_path(path)?)
}

pub fn emit_report(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.problem.clone(),
            r.arch.clone(),
            r.basis.clone(),
            r.free_knots.to_string(),
            r.schedule.clone(),
            r.params.to_string(),
            fmt_f64(r.mse_mean),
            fmt_f64(r.mse_std),
            fmt_f64(r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a loss history; rows must be ordered by `(level, epoch)`.
pub fn emit_history(history: &[HistoryRow], path: &Path) -> Result<()> {
    if history
        .windows(2)
        .any(|w| (w[1].level, w[1].epoch) < (w[0].level, w[0].epoch))
    {
        return Err(BenchError::Config("history rows are out of order".into()));
    }
    let mut w = writer(path)?;
    w.write_record(HISTORY_HEADER)?;
    for h in history {
        w.write_record([h.level.to_string(), h.epoch.to_string(), fmt_f64(h.loss), fmt_f64(h.grad_norm)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_spectra(report: &SpectraReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SPECTRA_HEADER)?;
    for r in &report.rows {
        w.write_record([r.quantity.clone(), r.size.to_string(), fmt_f64(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(BenchError::Config(format!("unexpected header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(BenchError::from)).collect()
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(BenchError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mse: f64) -> ResultRow {
        ResultRow {
            problem: "xor".into(),
            arch: "kan[2,5,5,1]".into(),
            basis: "spline".into(),
            free_knots: true,
            schedule: "[32,16,8,4]".into(),
            params: 1300,
            mse_mean: mse,
            mse_std: mse / 3.0,
            seconds: 0.1,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        emit_report(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), RESULTS_HEADER.join(",") + "\n");
    }

    #[test]
    fn report_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/r.csv");
        let rows = vec![row(1.0 / 3.0), row(2.79e-6), row(f64::MIN_POSITIVE)];
        emit_report(&rows, &p).unwrap();
        assert_eq!(read_report(&p).unwrap(), rows);
    }

    #[test]
    fn history_round_trips_and_rejects_disorder() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let h = vec![
            HistoryRow { level: 0, epoch: 0, loss: 0.1, grad_norm: 2.0 / 7.0 },
            HistoryRow { level: 0, epoch: 1, loss: 0.05, grad_norm: 1e-3 },
            HistoryRow { level: 1, epoch: 1, loss: 0.05, grad_norm: 1e-3 },
        ];
        emit_history(&h, &p).unwrap();
        assert_eq!(read_history(&p).unwrap(), h);
        let bad = vec![h[2], h[0]];
        assert!(emit_history(&bad, &p).is_err());
    }
}

//! Tables over saved latency reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::LatencyReport;

/// One row of the comparison table; the first input is the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub report: String,
    pub mode: String,
    pub frames: usize,
    pub total_ms: f64,
    pub total_p50_ms: f64,
    pub total_p95_ms: f64,
    /// Baseline mean latency over this row's, or `None` for a lone report.
    pub speedup: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 7] = [
    "report",
    "mode",
    "frames",
    "total_ms",
    "total_p50_ms",
    "total_p95_ms",
    "speedup",
];

/// Reads a latency report, naming the offending field on schema errors.
pub fn load_report(path: &Path) -> Result<LatencyReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: report schema mismatch: {e}", path.display())))
}

pub fn rows(inputs: &[(String, LatencyReport)]) -> Result<Vec<ReportRow>> {
    let Some((_, base)) = inputs.first() else {
        return Err(Error::Usage("report needs at least one input".into()));
    };
    let compare = inputs.len() > 1;
    Ok(inputs
        .iter()
        .map(|(name, r)| ReportRow {
            report: name.clone(),
            mode: r.mode.clone(),
            frames: r.frames,
            total_ms: r.total_ms,
            total_p50_ms: r.total_p50_ms,
            total_p95_ms: r.total_p95_ms,
            speedup: compare.then(|| round2(base.total_ms / r.total_ms.max(f64::MIN_POSITIVE))),
        })
        .collect())
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Fixed-width table; the speedup column only appears when comparing.
pub fn table(rows: &[ReportRow]) -> String {
    let compare = rows.iter().any(|r| r.speedup.is_some());
    let width = rows
        .iter()
        .map(|r| r.report.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = format!(
        "{:<width$}  {:<14} {:>6} {:>10} {:>10} {:>10}",
        "report", "mode", "frames", "mean_ms", "p50_ms", "p95_ms"
    );
    if compare {
        out.push_str(&format!(" {:>8}", "speedup"));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{:<width$}  {:<14} {:>6} {:>10.3} {:>10.3} {:>10.3}",
            r.report, r.mode, r.frames, r.total_ms, r.total_p50_ms, r.total_p95_ms
        );
        if let Some(s) = r.speedup {
            let _ = write!(out, " {:>7.2}x", s);
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.report.clone(),
            r.mode.clone(),
            r.frames.to_string(),
            format!("{:.4}", r.total_ms),
            format!("{:.4}", r.total_p50_ms),
            format!("{:.4}", r.total_p95_ms),
            r.speedup.map(|s| format!("{s:.2}")).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(CSV_COLUMNS) {
        return Err(Error::Format(format!(
            "{}: expected columns {}",
            path.display(),
            CSV_COLUMNS.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| {
                Error::Format(format!(
                    "{}: bad {} value {:?}",
                    path.display(),
                    CSV_COLUMNS[i],
                    &rec[i]
                ))
            })
        };
        out.push(ReportRow {
            report: rec[0].to_string(),
            mode: rec[1].to_string(),
            frames: num(2)? as usize,
            total_ms: num(3)?,
            total_p50_ms: num(4)?,
            total_p95_ms: num(5)?,
            speedup: if rec[6].is_empty() {
                None
            } else {
                Some(num(6)?)
            },
        });
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Loads every input and names rows by file stem.
pub fn load_all(paths: &[PathBuf]) -> Result<Vec<(String, LatencyReport)>> {
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("report")
                .to_string();
            Ok((name, load_report(p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::FrameTiming;

    fn report(mode: &str, ms: f64) -> LatencyReport {
        let f = FrameTiming {
            total_ms: ms,
            ..Default::default()
        };
        LatencyReport::from_frames(mode, &[f, f])
    }

    #[test]
    fn single_report_passes_through() {
        let r = rows(&[("a".into(), report("serial_dynamic", 12.5))]).unwrap();
        assert_eq!(r[0].total_ms, 12.5);
        assert_eq!(r[0].speedup, None);
        assert!(!table(&r).contains("speedup"));
    }

    #[test]
    fn two_reports_get_speedup() {
        let r = rows(&[
            ("serial".into(), report("serial_dynamic", 10.0)),
            ("fast".into(), report("fast_static", 3.0)),
        ])
        .unwrap();
        assert_eq!(r[0].speedup, Some(1.0));
        assert_eq!(r[1].speedup, Some(3.33));
        assert!(table(&r).contains("speedup"));
        assert!(table(&r).contains("3.33x"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = rows(&[
            ("serial".into(), report("serial_dynamic", 10.123456)),
            ("fast".into(), report("fast_static", 1.987654)),
        ])
        .unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &r).unwrap();
        let back = read_csv(&p).unwrap();
        for (a, b) in r.iter().zip(&back) {
            assert_eq!(
                (&a.report, &a.mode, a.frames),
                (&b.report, &b.mode, b.frames)
            );
            assert!((a.total_ms - b.total_ms).abs() <= 1e-3);
            assert!((a.total_p95_ms - b.total_p95_ms).abs() <= 1e-3);
            assert_eq!(a.speedup, b.speedup);
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        let mut v = serde_json::to_value(report("x", 1.0)).unwrap();
        v.as_object_mut().unwrap().remove("total_ms");
        std::fs::write(&p, v.to_string()).unwrap();
        let e = load_report(&p).unwrap_err().to_string();
        assert!(e.contains("total_ms"), "{e}");
        v.as_object_mut()
            .unwrap()
            .insert("total_ms".into(), 1.0.into());
        v.as_object_mut()
            .unwrap()
            .insert("bogus".into(), 1.0.into());
        std::fs::write(&p, v.to_string()).unwrap();
        let e = load_report(&p).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }
}

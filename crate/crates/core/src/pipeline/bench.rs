use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BatchMode, CropPrep, DetectorKind, Engine, Frame, FrameTiming, HandBoxSource, LatencyReport,
    PipelineConfig, PlanMode,
};
use crate::decoder::{Decoder, LayerSelection};
use crate::error::{Error, Result};

/// One named configuration of a benchmark matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRow {
    pub toggle: String,
    pub config: PipelineConfig,
}

/// Serial baseline followed by each optimization applied cumulatively.
pub fn waterfall_rows() -> Vec<BenchRow> {
    let mut c = PipelineConfig::serial();
    let mut rows = vec![BenchRow {
        toggle: "serial baseline".into(),
        config: c.clone(),
    }];
    let mut push = |name: &str, c: &PipelineConfig| {
        rows.push(BenchRow {
            toggle: name.into(),
            config: c.clone(),
        })
    };
    c.detector = DetectorKind::Stub;
    c.hand_boxes = HandBoxSource::Prior;
    push("+ detector stub", &c);
    c.batch = BatchMode::FullBatch;
    c.crop_prep = CropPrep::Direct;
    push("+ batched encode", &c);
    c.body_layers = LayerSelection::from_indices(&[0, 1, 2]).expect("valid layers");
    c.hand_layers = LayerSelection::empty();
    push("+ gated layers", &c);
    c.refine = false;
    push("+ refinement off", &c);
    c.plan = PlanMode::Static;
    push("+ static plan", &c);
    c.consolidated = true;
    push("+ operator consolidation", &c);
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterfallRow {
    pub toggle: String,
    /// Median per-frame latency with this and every earlier toggle applied.
    pub cum_ms: f64,
    /// Change from the previous row.
    pub delta_ms: f64,
    pub report: LatencyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waterfall {
    pub rows: Vec<WaterfallRow>,
}

impl Waterfall {
    /// First row's latency over the last row's.
    pub fn speedup(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) if b.cum_ms > 0.0 => a.cum_ms / b.cum_ms,
            _ => 1.0,
        }
    }

    /// Rows whose latency exceeds the previous row's by more than `band`
    /// (relative).
    pub fn regressions(&self, band: f64) -> Vec<usize> {
        (1..self.rows.len())
            .filter(|&i| self.rows[i].cum_ms > self.rows[i - 1].cum_ms * (1.0 + band))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["toggle", "cum_ms", "delta_ms"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.toggle.clone(),
                format!("{:.4}", r.cum_ms),
                format!("{:.4}", r.delta_ms),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Measures every row on the same frames. Rows run interleaved frame by
/// frame so slow drifts in machine load hit all rows alike.
pub fn bench(
    decoder: &Decoder,
    rows: &[BenchRow],
    frames: &[Frame],
    measured: usize,
    warmup: usize,
) -> Result<Waterfall> {
    if rows.is_empty() || frames.is_empty() || measured == 0 {
        return Err(Error::Usage(
            "bench needs rows, frames and a measured count".into(),
        ));
    }
    let mut engines = rows
        .iter()
        .map(|r| Engine::new(decoder, r.config.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut timings = vec![Vec::<FrameTiming>::with_capacity(measured); rows.len()];
    for i in 0..warmup + measured {
        let frame = &frames[i % frames.len()];
        for (e, t) in engines.iter_mut().zip(&mut timings) {
            let out = e.run(frame)?;
            if i >= warmup {
                t.push(out.timing);
            }
        }
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut prev = None;
    for ((row, e), t) in rows.iter().zip(&engines).zip(&timings) {
        let mut report = LatencyReport::from_frames(&e.config().mode_label(), t);
        report.config = serde_json::to_value(e.config()).ok();
        let cum = report.total_p50_ms;
        out.push(WaterfallRow {
            toggle: row.toggle.clone(),
            cum_ms: cum,
            delta_ms: prev.map_or(0.0, |p| cum - p),
            report,
        });
        prev = Some(cum);
    }
    Ok(Waterfall { rows: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waterfall_starts_serial_ends_fast() {
        let rows = waterfall_rows();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].config, PipelineConfig::serial());
        assert_eq!(rows.last().unwrap().config, PipelineConfig::fast());
    }
}

use serde::{Deserialize, Serialize};

use super::STAGES;
use crate::bodymodel::{PoseState, Vec3, HAND_JOINTS, SHAPE_OFFSET};

/// Per-frame stage timings in milliseconds and invocation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub stage_ms: [f64; STAGES.len()],
    pub stage_calls: [u32; STAGES.len()],
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageStats {
    pub name: String,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub calls: u64,
}

/// Aggregated latency over measured frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyReport {
    pub mode: String,
    pub frames: usize,
    pub stages: Vec<StageStats>,
    /// Mean end-to-end frame latency.
    pub total_ms: f64,
    pub total_p50_ms: f64,
    pub total_p95_ms: f64,
    /// Resolved configuration that produced the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

impl LatencyReport {
    pub fn from_frames(mode: &str, frames: &[FrameTiming]) -> Self {
        let stages = STAGES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let ms: Vec<f64> = frames.iter().map(|f| f.stage_ms[i]).collect();
                StageStats {
                    name: (*name).to_string(),
                    mean_ms: mean(&ms),
                    p50_ms: percentile(&ms, 50.0),
                    p95_ms: percentile(&ms, 95.0),
                    calls: frames.iter().map(|f| f.stage_calls[i] as u64).sum(),
                }
            })
            .collect();
        let totals: Vec<f64> = frames.iter().map(|f| f.total_ms).collect();
        Self {
            mode: mode.to_string(),
            frames: frames.len(),
            stages,
            total_ms: mean(&totals),
            total_p50_ms: percentile(&totals, 50.0),
            total_p95_ms: percentile(&totals, 95.0),
            config: None,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Tolerance tier for a comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "tier", content = "bound")]
pub enum Tolerance {
    /// Every field must match bit for bit.
    Exact,
    /// Deltas up to the bound are reported but not failed.
    Bounded(f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldDelta {
    pub field: String,
    pub max_abs: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub tolerance: Tolerance,
    pub fields: Vec<FieldDelta>,
    pub max_abs: f32,
    pub bit_identical: bool,
    pub pass: bool,
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Per-field deltas between two merged predictions.
pub fn check_equivalence(
    a: (&PoseState, Vec3),
    b: (&PoseState, Vec3),
    tolerance: Tolerance,
) -> EquivalenceReport {
    let (pa, pb) = (a.0.as_slice(), b.0.as_slice());
    let h = 3 * HAND_JOINTS[0];
    let fields = vec![
        FieldDelta {
            field: "global_orient".into(),
            max_abs: max_abs(&pa[..3], &pb[..3]),
        },
        FieldDelta {
            field: "body_pose".into(),
            max_abs: max_abs(&pa[3..h], &pb[3..h]),
        },
        FieldDelta {
            field: "hand_pose".into(),
            max_abs: max_abs(&pa[h..SHAPE_OFFSET], &pb[h..SHAPE_OFFSET]),
        },
        FieldDelta {
            field: "shape".into(),
            max_abs: max_abs(&pa[SHAPE_OFFSET..], &pb[SHAPE_OFFSET..]),
        },
        FieldDelta {
            field: "camera".into(),
            max_abs: max_abs(&a.1, &b.1),
        },
    ];
    let m = fields.iter().map(|f| f.max_abs).fold(0.0, f32::max);
    let bit_identical = a.0.bit_eq(b.0) && a.1.map(f32::to_bits) == b.1.map(f32::to_bits);
    let pass = match tolerance {
        Tolerance::Exact => bit_identical,
        Tolerance::Bounded(t) => m <= t,
    };
    EquivalenceReport {
        tolerance,
        fields,
        max_abs: m,
        bit_identical,
        pass,
    }
}

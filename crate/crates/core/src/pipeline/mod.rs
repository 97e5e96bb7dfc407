//! End-to-end execution pathways.
//!
//! One [`Engine`] covers both ends of the design space. The serial baseline
//! detects on the full image, encodes the body crop, waits for the body
//! decoder to localize the hands, encodes each hand crop separately and
//! finishes with a keypoint-prompted second pass. The fast variant derives
//! every box from detector keypoints up front, encodes all three crops in
//! one batch, prunes intermediate prediction and skips refinement, inside a
//! preallocated plan. Each toggle can be flipped independently.

mod alloc;
mod bench;
mod report;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use alloc::CountingAllocator;
pub use bench::{bench, waterfall_rows, BenchRow, Waterfall, WaterfallRow};
pub use report::{
    check_equivalence, percentile, EquivalenceReport, FieldDelta, FrameTiming, LatencyReport,
    StageStats, Tolerance,
};

use crate::bodymodel::{BodyTemplate, CameraIntrinsics, PoseState, Vec3, WRIST_JOINTS};
use crate::decoder::{
    merge, BodyOutput, BodyPrompt, Decoder, LayerDump, LayerSelection, Ops, Pass, Probe, Workspace,
    MAX_BATCH,
};
use crate::error::{Error, Result};
use crate::numkit::bilinear_sample_into;
use crate::priors::{
    crop_grid_into, crop_window, detect_dense, detect_stub, hand_box, BBox, Keypoints2D,
    ProjectedScene, Scene, DEFAULT_ALPHA,
};

/// Stage names in report order.
pub const STAGES: [&str; 8] = [
    "detect",
    "hand_boxes",
    "crop",
    "encode",
    "decode_body",
    "decode_hands",
    "merge",
    "refine",
];
const DETECT: usize = 0;
const HAND_BOXES: usize = 1;
const CROP: usize = 2;
const ENCODE: usize = 3;
const DECODE_BODY: usize = 4;
const DECODE_HANDS: usize = 5;
const MERGE: usize = 6;
const REFINE: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Full-image filter response; yields a body box only.
    Dense,
    /// Keypoint stub over the projected ground-truth joints.
    Stub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandBoxSource {
    /// Wrists of the first body-decoder prediction.
    Decoder,
    /// Wrist keypoints from the detector.
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Body and both hands in one encoder call.
    FullBatch,
    /// Body first, then both hands together.
    HandBatch,
    /// One encoder call per crop, hands decoded one at a time.
    NoBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Fresh buffers every frame.
    Dynamic,
    /// Buffers allocated once and reused.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPrep {
    /// Copy a sub-image window, then resample it.
    Window,
    /// Resample straight from the source image.
    Direct,
}

/// Pipeline toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub detector: DetectorKind,
    /// Keypoint noise of the detector stub, in pixels.
    pub keypoint_sigma: f32,
    pub alpha: f32,
    pub hands: bool,
    pub hand_boxes: HandBoxSource,
    pub batch: BatchMode,
    pub body_layers: LayerSelection,
    pub hand_layers: LayerSelection,
    pub refine: bool,
    pub plan: PlanMode,
    /// Consolidated operators instead of the generic ones.
    pub consolidated: bool,
    pub correctives: bool,
    pub crop_prep: CropPrep,
    /// Prepare crops on the rayon pool.
    pub parallel_prep: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::fast()
    }
}

impl PipelineConfig {
    pub fn serial() -> Self {
        Self {
            detector: DetectorKind::Dense,
            keypoint_sigma: 0.0,
            alpha: DEFAULT_ALPHA,
            hands: true,
            hand_boxes: HandBoxSource::Decoder,
            batch: BatchMode::NoBatch,
            body_layers: LayerSelection::full(5),
            hand_layers: LayerSelection::full(5),
            refine: true,
            plan: PlanMode::Dynamic,
            consolidated: false,
            correctives: false,
            crop_prep: CropPrep::Window,
            parallel_prep: false,
        }
    }

    pub fn fast() -> Self {
        Self {
            detector: DetectorKind::Stub,
            keypoint_sigma: 0.0,
            alpha: DEFAULT_ALPHA,
            hands: true,
            hand_boxes: HandBoxSource::Prior,
            batch: BatchMode::FullBatch,
            body_layers: LayerSelection::from_indices(&[0, 1, 2]).expect("valid layers"),
            hand_layers: LayerSelection::empty(),
            refine: false,
            plan: PlanMode::Static,
            consolidated: true,
            correctives: false,
            crop_prep: CropPrep::Direct,
            parallel_prep: false,
        }
    }

    pub fn validate(&self, body_layers: usize, hand_layers: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.keypoint_sigma >= 0.0 && self.keypoint_sigma.is_finite()) {
            return Err(Error::Config(
                "keypoint_sigma must be a finite non-negative value".into(),
            ));
        }
        self.body_layers.validate(body_layers)?;
        self.hand_layers.validate(hand_layers)?;
        if self.hand_boxes == HandBoxSource::Prior && self.detector == DetectorKind::Dense {
            return Err(Error::Config(
                "prior hand boxes need detector keypoints; use the stub detector".into(),
            ));
        }
        if self.hands
            && self.batch == BatchMode::FullBatch
            && self.hand_boxes != HandBoxSource::Prior
        {
            return Err(Error::Config(
                "full_batch encodes hands with the body, so hand boxes must come from the prior"
                    .into(),
            ));
        }
        Ok(())
    }

    /// `serial_dynamic`, `fast_static` and so on.
    pub fn mode_label(&self) -> String {
        let path = if self.batch == BatchMode::NoBatch {
            "serial"
        } else {
            "fast"
        };
        let plan = match self.plan {
            PlanMode::Dynamic => "dynamic",
            PlanMode::Static => "static",
        };
        format!("{path}_{plan}")
    }

    fn ops(&self) -> Ops {
        if self.consolidated {
            Ops::consolidated()
        } else {
            Ops::generic()
        }
    }
}

/// One input frame: the rendered image plus what the detector stub sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub projected: ProjectedScene,
    /// Seeds the detector stub's keypoint noise.
    pub seed: u64,
}

impl Frame {
    pub fn from_scene(scene: &Scene, template: &BodyTemplate, seed: u64) -> Result<Self> {
        Ok(Self {
            image: scene.render(template)?,
            width: scene.image_width,
            height: scene.image_height,
            intrinsics: scene.intrinsics,
            projected: scene.project_joints(template)?,
            seed,
        })
    }

    /// Frame of [`Scene::synthetic`]`(seed)`.
    pub fn synthetic(seed: u64, template: &BodyTemplate) -> Result<Self> {
        Self::from_scene(&Scene::synthetic(seed), template, seed)
    }
}

/// Merged prediction of one frame with its instrumentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineOutput {
    pub params: PoseState,
    pub camera: Vec3,
    pub body_box: BBox,
    pub hand_boxes: [Option<BBox>; 2],
    pub probe: Probe,
    pub timing: FrameTiming,
}

/// A pipeline instance: decoder, configuration and, for static plans, the
/// buffers reused across frames. Not shared between threads.
#[derive(Debug)]
pub struct Engine {
    decoder: Decoder,
    config: PipelineConfig,
    workspace: Option<Workspace>,
    grids: Vec<f32>,
}

impl Engine {
    pub fn new(decoder: &Decoder, config: PipelineConfig) -> Result<Self> {
        let c = &decoder.weights().config;
        config.validate(c.body_layers, c.hand_layers)?;
        let mut decoder = decoder.clone();
        decoder.ops = config.ops();
        decoder.use_correctives = config.correctives;
        let (workspace, grids) = match config.plan {
            PlanMode::Static => (
                Some(decoder.workspace(MAX_BATCH)),
                vec![0.0; MAX_BATCH * c.crop_size * c.crop_size * 2],
            ),
            PlanMode::Dynamic => (None, Vec::new()),
        };
        Ok(Self {
            decoder,
            config,
            workspace,
            grids,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// The static plan's workspace, if any.
    pub fn workspace(&self) -> Option<&Workspace> {
        self.workspace.as_ref()
    }

    pub fn workspace_mut(&mut self) -> Option<&mut Workspace> {
        self.workspace.as_mut()
    }

    /// Runs one frame.
    pub fn run(&mut self, frame: &Frame) -> Result<PipelineOutput> {
        self.run_inner(frame, false).map(|(out, _)| out)
    }

    /// Runs one frame and returns the tokens after every decoder layer of
    /// every pass, for differential debugging. Recording allocates.
    pub fn run_recorded(&mut self, frame: &Frame) -> Result<(PipelineOutput, Vec<LayerDump>)> {
        self.run_inner(frame, true)
    }

    fn run_inner(
        &mut self,
        frame: &Frame,
        record: bool,
    ) -> Result<(PipelineOutput, Vec<LayerDump>)> {
        let start = Instant::now();
        let mut timing = FrameTiming::default();
        let mut local;
        let (ws, grids) = match self.config.plan {
            PlanMode::Static => (
                self.workspace
                    .as_mut()
                    .expect("static plans own a workspace"),
                &mut self.grids[..],
            ),
            PlanMode::Dynamic => {
                let s = self.decoder.weights().config.crop_size;
                local = (
                    self.decoder.workspace(MAX_BATCH),
                    vec![0.0; MAX_BATCH * s * s * 2],
                );
                (&mut local.0, &mut local.1[..])
            }
        };
        ws.record = record;
        let out = execute(&self.decoder, &self.config, frame, ws, grids, &mut timing);
        ws.record = false;
        let dumps = std::mem::take(&mut ws.dumps);
        let mut out = out?;
        timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
        out.timing = timing;
        Ok((out, dumps))
    }

    /// Runs `warmup + measured` frames, cycling through `frames`, and
    /// reports over the measured ones.
    pub fn run_frames(
        &mut self,
        frames: &[Frame],
        measured: usize,
        warmup: usize,
    ) -> Result<(Vec<PipelineOutput>, LatencyReport)> {
        if frames.is_empty() || measured == 0 {
            return Err(Error::Usage("need at least one frame to measure".into()));
        }
        let mut outs = Vec::with_capacity(measured);
        for i in 0..warmup + measured {
            let o = self.run(&frames[i % frames.len()])?;
            if i >= warmup {
                outs.push(o);
            }
        }
        let timings: Vec<FrameTiming> = outs.iter().map(|o| o.timing).collect();
        let mut report = LatencyReport::from_frames(&self.config.mode_label(), &timings);
        report.config = serde_json::to_value(&self.config).ok();
        Ok((outs, report))
    }
}

/// Serial baseline on one frame.
pub fn run_serial(decoder: &Decoder, frame: &Frame) -> Result<(PipelineOutput, LatencyReport)> {
    run_once(decoder, frame, PipelineConfig::serial())
}

/// Fast pathway on one frame.
pub fn run_fast(
    decoder: &Decoder,
    frame: &Frame,
    config: &PipelineConfig,
) -> Result<(PipelineOutput, LatencyReport)> {
    run_once(decoder, frame, config.clone())
}

fn run_once(
    decoder: &Decoder,
    frame: &Frame,
    config: PipelineConfig,
) -> Result<(PipelineOutput, LatencyReport)> {
    let mut e = Engine::new(decoder, config)?;
    let (outs, report) = e.run_frames(std::slice::from_ref(frame), 1, 0)?;
    Ok((outs[0], report))
}

fn timed<T>(timing: &mut FrameTiming, stage: usize, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let r = f();
    timing.stage_ms[stage] += t.elapsed().as_secs_f64() * 1e3;
    timing.stage_calls[stage] += 1;
    r
}

/// Resamples `bbox` into an `s×s×3` crop.
fn prepare_crop(
    frame: &Frame,
    bbox: &BBox,
    s: usize,
    prep: CropPrep,
    grid: &mut [f32],
    out: &mut [f32],
) -> Result<()> {
    let (w, h) = (frame.width, frame.height);
    crop_grid_into(bbox, s, grid)?;
    match prep {
        CropPrep::Direct => bilinear_sample_into(&frame.image, h, w, 3, grid, out),
        CropPrep::Window => {
            let (x0, y0, x1, y1) = crop_window(bbox, w, h);
            let (ww, wh) = (x1 - x0 + 1, y1 - y0 + 1);
            let mut window = Vec::with_capacity(ww * wh * 3);
            for y in y0..=y1 {
                window.extend_from_slice(&frame.image[(y * w + x0) * 3..(y * w + x1 + 1) * 3]);
            }
            // Integer shifts of pixel coordinates are exact in f32, so this
            // samples the same taps with the same weights as `Direct`.
            for g in grid.chunks_exact_mut(2) {
                g[0] -= x0 as f32;
                g[1] -= y0 as f32;
            }
            bilinear_sample_into(&window, wh, ww, 3, grid, out);
        }
    }
    Ok(())
}

/// Crops `boxes` into workspace slots `first..`.
fn prepare_crops(
    frame: &Frame,
    boxes: &[BBox],
    first: usize,
    s: usize,
    cfg: &PipelineConfig,
    ws: &mut Workspace,
    grids: &mut [f32],
) -> Result<()> {
    let crop_len = s * s * 3;
    let grid_len = s * s * 2;
    let crops = &mut ws.crops_mut()[first * crop_len..(first + boxes.len()) * crop_len];
    let grids = &mut grids[first * grid_len..(first + boxes.len()) * grid_len];
    if cfg.parallel_prep {
        crops
            .par_chunks_exact_mut(crop_len)
            .zip(grids.par_chunks_exact_mut(grid_len))
            .zip(boxes.par_iter())
            .try_for_each(|((c, g), b)| prepare_crop(frame, b, s, cfg.crop_prep, g, c))
    } else {
        for ((c, g), b) in crops
            .chunks_exact_mut(crop_len)
            .zip(grids.chunks_exact_mut(grid_len))
            .zip(boxes)
        {
            prepare_crop(frame, b, s, cfg.crop_prep, g, c)?;
        }
        Ok(())
    }
}

fn prior_hand_boxes(
    kp: &Keypoints2D,
    body: &BBox,
    cfg: &PipelineConfig,
    frame: &Frame,
) -> Result<[BBox; 2]> {
    let b = |j: usize| hand_box(kp.xy(j), body, cfg.alpha, frame.width, frame.height);
    Ok([b(WRIST_JOINTS[0])?, b(WRIST_JOINTS[1])?])
}

fn execute(
    dec: &Decoder,
    cfg: &PipelineConfig,
    frame: &Frame,
    ws: &mut Workspace,
    grids: &mut [f32],
    timing: &mut FrameTiming,
) -> Result<PipelineOutput> {
    let mut probe = Probe::default();
    let (w, h) = (frame.width, frame.height);
    let s = dec.weights().config.crop_size;
    let k = &frame.intrinsics;

    let (body_box, keypoints) = timed(timing, DETECT, || match cfg.detector {
        DetectorKind::Dense => Ok::<_, Error>((detect_dense(&frame.image, w, h)?, None)),
        DetectorKind::Stub => {
            let (b, kp) = detect_stub(&frame.projected, cfg.keypoint_sigma, frame.seed);
            Ok((b, Some(kp)))
        }
    })?;
    let prior = |timing: &mut FrameTiming| {
        timed(timing, HAND_BOXES, || {
            let kp = keypoints
                .as_ref()
                .ok_or_else(|| Error::Config("prior hand boxes need keypoints".into()))?;
            prior_hand_boxes(kp, &body_box, cfg, frame)
        })
    };

    let mut hand_boxes = None;
    if cfg.hands && cfg.batch == BatchMode::FullBatch {
        let hb = prior(timing)?;
        let boxes = [body_box, hb[0], hb[1]];
        timed(timing, CROP, || {
            prepare_crops(frame, &boxes, 0, s, cfg, ws, grids)
        })?;
        timed(timing, ENCODE, || dec.encode(0, 3, ws, &mut probe))?;
        hand_boxes = Some(hb);
    } else {
        timed(timing, CROP, || {
            prepare_crops(frame, &[body_box], 0, s, cfg, ws, grids)
        })?;
        timed(timing, ENCODE, || dec.encode(0, 1, ws, &mut probe))?;
    }

    let prompt = BodyPrompt {
        bbox: body_box,
        keypoints: None,
    };
    let first = timed(timing, DECODE_BODY, || {
        dec.decode_body(
            0,
            &prompt,
            cfg.body_layers,
            k,
            (w, h),
            Pass::First,
            ws,
            &mut probe,
        )
    })?;

    let mut hands: [Option<Vec3>; 2] = [None; 2];
    if cfg.hands {
        let hb = match hand_boxes {
            Some(hb) => hb,
            None => {
                let hb = match cfg.hand_boxes {
                    HandBoxSource::Prior => prior(timing)?,
                    HandBoxSource::Decoder => timed(timing, HAND_BOXES, || {
                        let uv = dec.project_output(&first, k, ws)?;
                        let b = |j: usize| hand_box(uv[j], &body_box, cfg.alpha, w, h);
                        Ok::<_, Error>([b(WRIST_JOINTS[0])?, b(WRIST_JOINTS[1])?])
                    })?,
                };
                if cfg.batch == BatchMode::HandBatch {
                    timed(timing, CROP, || {
                        prepare_crops(frame, &hb, 1, s, cfg, ws, grids)
                    })?;
                    timed(timing, ENCODE, || dec.encode(1, 2, ws, &mut probe))?;
                } else {
                    for (i, b) in hb.iter().enumerate() {
                        let one = std::slice::from_ref(b);
                        timed(timing, CROP, || {
                            prepare_crops(frame, one, 1 + i, s, cfg, ws, grids)
                        })?;
                        timed(timing, ENCODE, || dec.encode(1 + i, 1, ws, &mut probe))?;
                    }
                }
                hand_boxes = Some(hb);
                hb
            }
        };
        let mut rot = [[0.0f32; 3]; 2];
        if cfg.batch == BatchMode::NoBatch {
            for i in 0..2 {
                timed(timing, DECODE_HANDS, || {
                    dec.decode_hands(
                        &[(1 + i, hb[i])],
                        cfg.hand_layers,
                        (w, h),
                        ws,
                        &mut probe,
                        &mut rot[i..i + 1],
                    )
                })?;
            }
        } else {
            timed(timing, DECODE_HANDS, || {
                dec.decode_hands(
                    &[(1, hb[0]), (2, hb[1])],
                    cfg.hand_layers,
                    (w, h),
                    ws,
                    &mut probe,
                    &mut rot,
                )
            })?;
        }
        hands = [Some(rot[0]), Some(rot[1])];
    }

    let mut out = timed(timing, MERGE, || BodyOutput {
        params: merge(&first.params, hands[0], hands[1]),
        camera: first.camera,
    });
    if cfg.refine {
        out = timed(timing, REFINE, || {
            let prompt = dec.refine_prompt(&out, body_box, k, ws, &mut probe)?;
            let second = dec.decode_body(
                0,
                &prompt,
                cfg.body_layers,
                k,
                (w, h),
                Pass::Refine,
                ws,
                &mut probe,
            )?;
            Ok::<_, Error>(BodyOutput {
                params: merge(&second.params, hands[0], hands[1]),
                camera: second.camera,
            })
        })?;
    }
    Ok(PipelineOutput {
        params: out.params,
        camera: out.camera,
        body_box,
        hand_boxes: match hand_boxes {
            Some([l, r]) => [Some(l), Some(r)],
            None => [None, None],
        },
        probe,
        timing: FrameTiming::default(),
    })
}

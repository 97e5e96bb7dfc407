//! Feedforward replacement for per-mesh fitting: a three-layer MLP from a
//! centered vertex subsample to target-model parameters.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_bridged, mean_vertex_error, FitConfig};
use super::{bridge, bridge_into, BaryMap};
use crate::bodymodel::Mat3;
use crate::bodymodel::{
    rodrigues, rotation_log, skin, skin_backward, skin_forward, BodyTemplate, PoseSampler,
    PoseState, SkinKernel, Vec3, HAND_JOINTS, POSE_DIM,
};
use crate::error::{shape_err, Error, Result};
use crate::numkit::fsb1::{self, take};
use crate::numkit::kernels::{linear_into, relu_in_place, MatmulKernel};
use crate::numkit::{cosine_lr, grad, Adam, Array, GradTape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    /// Number of target vertices fed to the network.
    pub subsample: usize,
    pub hidden: [usize; 2],
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            subsample: 300,
            hidden: [512, 256],
        }
    }
}

impl ProjectorConfig {
    pub fn input_dim(&self) -> usize {
        3 * self.subsample
    }

    fn dims(&self) -> [usize; 4] {
        [self.input_dim(), self.hidden[0], self.hidden[1], POSE_DIM]
    }
}

/// Evenly strided target-vertex indices: `i·n / count`.
pub fn stride_subsample(n: usize, count: usize) -> Result<Vec<u32>> {
    if count == 0 || count > n {
        return Err(Error::Config(format!(
            "cannot subsample {count} of {n} target vertices"
        )));
    }
    Ok((0..count).map(|i| (i * n / count) as u32).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `in×out`, row-major.
    pub w: Array,
    pub b: Vec<f32>,
}

impl Affine {
    fn zeros(fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: Array::zeros(&[fan_in, fan_out])?,
            b: vec![0.0; fan_out],
        })
    }

    fn dims(&self) -> (usize, usize) {
        (self.w.shape()[0], self.w.shape()[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorWeights {
    pub config: ProjectorConfig,
    /// Target vertices forming the input, in input order.
    pub subsample: Vec<u32>,
    pub layers: [Affine; 3],
}

const HAND_SLOTS: [usize; 2] = [3 * HAND_JOINTS[0], 3 * HAND_JOINTS[1]];

fn is_hand_slot(i: usize) -> bool {
    HAND_SLOTS.iter().any(|&s| (s..s + 3).contains(&i))
}

impl ProjectorWeights {
    pub fn zeros(config: ProjectorConfig, target_vertices: usize) -> Result<Self> {
        let d = config.dims();
        Ok(Self {
            config,
            subsample: stride_subsample(target_vertices, config.subsample)?,
            layers: [
                Affine::zeros(d[0], d[1])?,
                Affine::zeros(d[1], d[2])?,
                Affine::zeros(d[2], d[3])?,
            ],
        })
    }

    /// He-normal hidden layers and a small output layer.
    pub fn init(config: ProjectorConfig, target_vertices: usize, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config, target_vertices)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, l) in w.layers.iter_mut().enumerate() {
            let (fan_in, fan_out) = l.dims();
            let std = if i < 2 {
                (2.0 / fan_in as f32).sqrt()
            } else {
                0.1 / (fan_in as f32).sqrt()
            };
            let n = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let data = (0..fan_in * fan_out).map(|_| n.sample(&mut rng)).collect();
            l.w = Array::new(vec![fan_in, fan_out], data)?;
        }
        Ok(w)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn save(&self, json: &Path) -> Result<()> {
        let sub = Array::new(
            vec![self.subsample.len()],
            self.subsample.iter().map(|&i| i as f32).collect(),
        )?;
        let biases = self
            .layers
            .iter()
            .map(|l| Array::new(vec![l.b.len()], l.b.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut tensors = vec![("subsample".to_string(), &sub)];
        for (i, (l, b)) in self.layers.iter().zip(&biases).enumerate() {
            tensors.push((format!("l{i}.w"), &l.w));
            tensors.push((format!("l{i}.b"), b));
        }
        let meta = serde_json::to_value(self.config).map_err(|e| Error::json(json, e))?;
        fsb1::write_bundle(json, meta, &tensors)
    }

    pub fn load(json: &Path) -> Result<Self> {
        let (meta, mut t) = fsb1::read_bundle(json)?;
        let config: ProjectorConfig =
            serde_json::from_value(meta).map_err(|e| Error::json(json, e))?;
        let d = config.dims();
        let subsample = take(&mut t, "subsample", &[config.subsample])?
            .data()
            .iter()
            .map(|&x| x as u32)
            .collect();
        let mut layer = |i: usize| -> Result<Affine> {
            Ok(Affine {
                w: take(&mut t, &format!("l{i}.w"), &[d[i], d[i + 1]])?,
                b: take(&mut t, &format!("l{i}.b"), &[d[i + 1]])?.into_data(),
            })
        };
        let layers = [layer(0)?, layer(1)?, layer(2)?];
        if let Some(name) = t.keys().next() {
            return Err(Error::Format(format!(
                "{}: unexpected tensor {name}",
                json.display()
            )));
        }
        Ok(Self {
            config,
            subsample,
            layers,
        })
    }
}

/// Buffers for repeated forward passes.
#[derive(Clone, Debug, Default)]
pub struct ProjectorScratch {
    centered: Vec<Vec3>,
    bridged: Vec<Vec3>,
    x: Vec<f32>,
    h1: Vec<f32>,
    h2: Vec<f32>,
}

/// Network input for one source mesh: the source is centered first, then
/// bridged, subsampled and centered again on the subsample.
///
/// Centering uses `(n·v − Σv) / n`. When the inputs and the translation are
/// on a grid where these sums are exact (as they are for the test lattices)
/// a translated mesh produces the same bits; otherwise the difference is at
/// rounding level.
pub fn prepare_input(
    v_mhr: &[Vec3],
    map: &BaryMap,
    subsample: &[u32],
    scratch: &mut ProjectorScratch,
    x: &mut [f32],
) -> Result<()> {
    if v_mhr.len() != map.source_vertices() {
        return Err(shape_err!(
            "{} source vertices, map expects {}",
            v_mhr.len(),
            map.source_vertices()
        ));
    }
    if x.len() != 3 * subsample.len() {
        return Err(shape_err!(
            "input buffer {} for {} vertices",
            x.len(),
            subsample.len()
        ));
    }
    if let Some(&bad) = subsample.iter().find(|&&i| i as usize >= map.len()) {
        return Err(shape_err!(
            "subsample index {bad} past {} target vertices",
            map.len()
        ));
    }
    scratch.centered.resize(v_mhr.len(), [0.0; 3]);
    center_into(v_mhr, &mut scratch.centered);
    scratch.bridged.resize(map.len(), [0.0; 3]);
    bridge_into(&scratch.centered, map, &mut scratch.bridged)?;
    let n = subsample.len() as f32;
    let mut c = [0.0f32; 3];
    for &i in subsample {
        let v = scratch.bridged[i as usize];
        for k in 0..3 {
            c[k] += v[k];
        }
    }
    let c = c.map(|s| s / n);
    for (row, &i) in x.chunks_exact_mut(3).zip(subsample) {
        let v = scratch.bridged[i as usize];
        for k in 0..3 {
            row[k] = v[k] - c[k];
        }
    }
    Ok(())
}

fn center_into(v: &[Vec3], out: &mut [Vec3]) {
    let n = v.len() as f32;
    let mut s = [0.0f32; 3];
    for p in v {
        for k in 0..3 {
            s[k] += p[k];
        }
    }
    for (o, p) in out.iter_mut().zip(v) {
        for k in 0..3 {
            o[k] = (n * p[k] - s[k]) / n;
        }
    }
}

/// MLP forward on a prepared input, hand slots zeroed.
pub fn mlp_forward(w: &ProjectorWeights, x: &[f32], scratch: &mut ProjectorScratch) -> PoseState {
    let d = w.config.dims();
    let k = MatmulKernel::Streaming;
    scratch.h1.resize(d[1], 0.0);
    scratch.h2.resize(d[2], 0.0);
    let [l0, l1, l2] = &w.layers;
    linear_into(
        k,
        x,
        l0.w.data(),
        Some(&l0.b),
        &mut scratch.h1,
        1,
        d[0],
        d[1],
    );
    relu_in_place(&mut scratch.h1);
    linear_into(
        k,
        &scratch.h1,
        l1.w.data(),
        Some(&l1.b),
        &mut scratch.h2,
        1,
        d[1],
        d[2],
    );
    relu_in_place(&mut scratch.h2);
    let mut out = PoseState::zeros();
    linear_into(
        k,
        &scratch.h2,
        l2.w.data(),
        Some(&l2.b),
        out.as_mut_slice(),
        1,
        d[2],
        d[3],
    );
    out.clear_hand_joints();
    out
}

pub fn project_forward_with(
    v_mhr: &[Vec3],
    map: &BaryMap,
    weights: &ProjectorWeights,
    scratch: &mut ProjectorScratch,
) -> Result<PoseState> {
    let mut x = std::mem::take(&mut scratch.x);
    x.resize(weights.config.input_dim(), 0.0);
    let r = prepare_input(v_mhr, map, &weights.subsample, scratch, &mut x);
    let out = r.map(|_| mlp_forward(weights, &x, scratch));
    scratch.x = x;
    out
}

pub fn project_forward(
    v_mhr: &[Vec3],
    map: &BaryMap,
    weights: &ProjectorWeights,
) -> Result<PoseState> {
    project_forward_with(v_mhr, map, weights, &mut ProjectorScratch::default())
}

/// Source meshes with their fitted target parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversionSet {
    pub meshes: Vec<Vec<Vec3>>,
    /// Parameters used to skin each source mesh.
    pub ground_truth: Vec<PoseState>,
    /// Fitted target parameters.
    pub fitted: Vec<PoseState>,
    /// Fit error of each entry of `fitted`.
    pub fit_error: Vec<f32>,
}

impl ConversionSet {
    pub fn len(&self) -> usize {
        self.meshes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meshes.is_empty()
    }

    /// Skins `n` sampled poses on `source` and fits each with `cfg`, starting
    /// from the zero pose. Fits run in parallel; results keep sample order.
    pub fn generate(
        source: &BodyTemplate,
        target: &BodyTemplate,
        map: &BaryMap,
        n: usize,
        seed: u64,
        cfg: &FitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut sampler = PoseSampler::new(seed);
        let poses: Vec<PoseState> = (0..n).map(|_| sampler.sample()).collect();
        let rows = poses
            .par_iter()
            .map(|p| {
                let mesh = skin(source, p, true, SkinKernel::Sparse)?;
                let t = bridge(&mesh, map)?;
                let r = fit_bridged(&t, target, cfg, &PoseState::zeros())?;
                Ok((mesh, r.pose, r.error))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = Self {
            meshes: Vec::with_capacity(n),
            ground_truth: poses,
            fitted: Vec::with_capacity(n),
            fit_error: Vec::with_capacity(n),
        };
        for (m, p, e) in rows {
            set.meshes.push(m);
            set.fitted.push(p);
            set.fit_error.push(e);
        }
        Ok(set)
    }

    /// Splits off the last `count` entries.
    pub fn split_tail(mut self, count: usize) -> Result<(Self, Self)> {
        if count == 0 || count >= self.len() {
            return Err(Error::Config(format!(
                "held-out count {count} must be in 1..{}",
                self.len()
            )));
        }
        let k = self.len() - count;
        let tail = Self {
            meshes: self.meshes.split_off(k),
            ground_truth: self.ground_truth.split_off(k),
            fitted: self.fitted.split_off(k),
            fit_error: self.fit_error.split_off(k),
        };
        Ok((self, tail))
    }

    pub fn save(&self, json: &Path) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Usage("empty conversion set".into()));
        }
        let nv = self.meshes[0].len();
        if self.meshes.iter().any(|m| m.len() != nv) {
            return Err(shape_err!("meshes differ in vertex count"));
        }
        let flat = |ps: &[PoseState]| ps.iter().flat_map(|p| p.as_slice().to_vec()).collect();
        let meshes = Array::new(
            vec![n, nv, 3],
            self.meshes.iter().flatten().flatten().copied().collect(),
        )?;
        let gt = Array::new(vec![n, POSE_DIM], flat(&self.ground_truth))?;
        let fitted = Array::new(vec![n, POSE_DIM], flat(&self.fitted))?;
        let err = Array::new(vec![n], self.fit_error.clone())?;
        let meta =
            serde_json::json!({ "kind": "conversion_set", "count": n, "source_vertices": nv });
        fsb1::write_bundle(
            json,
            meta,
            &[
                ("meshes".into(), &meshes),
                ("ground_truth".into(), &gt),
                ("fitted".into(), &fitted),
                ("fit_error".into(), &err),
            ],
        )
    }

    pub fn load(json: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Meta {
            kind: String,
            count: usize,
            source_vertices: usize,
        }
        let (meta, mut t) = fsb1::read_bundle(json)?;
        let m: Meta = serde_json::from_value(meta).map_err(|e| Error::json(json, e))?;
        if m.kind != "conversion_set" {
            return Err(Error::Format(format!(
                "{}: not a conversion set",
                json.display()
            )));
        }
        let (n, nv) = (m.count, m.source_vertices);
        let meshes = take(&mut t, "meshes", &[n, nv, 3])?;
        let poses = |a: Array| -> Result<Vec<PoseState>> {
            a.data()
                .chunks_exact(POSE_DIM)
                .map(PoseState::from_slice)
                .collect()
        };
        Ok(Self {
            meshes: meshes
                .data()
                .chunks_exact(3 * nv)
                .map(|c| c.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect())
                .collect(),
            ground_truth: poses(take(&mut t, "ground_truth", &[n, POSE_DIM])?)?,
            fitted: poses(take(&mut t, "fitted", &[n, POSE_DIM])?)?,
            fit_error: take(&mut t, "fit_error", &[n])?.into_data(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f32,
    pub lambda_v: f32,
    pub lambda_reg: f32,
    /// Decoupled weight decay on the weight matrices.
    pub weight_decay: f32,
    /// Standard deviation (radians, per axis-angle component) of the random
    /// rotation applied to each training sample; 0 disables it.
    pub augment_rotation: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 64,
            lr: 1e-3,
            lr_floor: 0.01,
            lambda_v: 1.0,
            lambda_reg: 0.1,
            weight_decay: 0.0,
            augment_rotation: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(
                "lr must be positive and lr_floor in [0, 1]".into(),
            ));
        }
        if !(self.lambda_v >= 0.0 && self.lambda_reg >= 0.0)
            || self.lambda_v + self.lambda_reg == 0.0
        {
            return Err(Error::Config(
                "loss weights must be nonnegative and not both zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f32,
    /// Mean per-vertex error of the held-out predictions.
    pub heldout_vertex_err: f32,
    /// Mean squared parameter error of the held-out predictions.
    pub heldout_param_mse: f32,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest held-out vertex error.
    pub weights: ProjectorWeights,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochStats {
        &self.curve[self.best_epoch]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_curve(path, &self.curve)
    }
}

pub(crate) fn write_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,heldout_vertex_err\n");
    for e in curve {
        text.push_str(&format!(
            "{},{},{}\n",
            e.epoch, e.train_loss, e.heldout_vertex_err
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Inputs and targets prepared once per sample.
struct Prepared {
    x: Vec<f32>,
    targets: Vec<f32>,
    theta: Vec<f32>,
}

fn prepare_set(
    set: &ConversionSet,
    map: &BaryMap,
    subsample: &[u32],
    zero_hands: bool,
) -> Result<Prepared> {
    let n = set.len();
    let dx = 3 * subsample.len();
    let mut p = Prepared {
        x: vec![0.0; n * dx],
        targets: Vec::with_capacity(n * 3 * map.len()),
        theta: Vec::with_capacity(n * POSE_DIM),
    };
    let mut scratch = ProjectorScratch::default();
    for (i, mesh) in set.meshes.iter().enumerate() {
        prepare_input(
            mesh,
            map,
            subsample,
            &mut scratch,
            &mut p.x[i * dx..(i + 1) * dx],
        )?;
        p.targets.extend(bridge(mesh, map)?.into_iter().flatten());
        let mut th = set.fitted[i];
        if zero_hands {
            th.clear_hand_joints();
        }
        p.theta.extend_from_slice(th.as_slice());
    }
    Ok(p)
}

fn rows(data: &[f32], width: usize, idx: &[usize]) -> Vec<f32> {
    idx.iter()
        .flat_map(|&i| data[i * width..(i + 1) * width].iter().copied())
        .collect()
}

fn to_vec3(flat: &[f32]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Batched skinning as a tape operation whose backward pass is the
/// analytic skinning gradient, one sample per row.
fn skin_op(
    tape: &mut GradTape,
    template: &Arc<BodyTemplate>,
    params: crate::numkit::Var,
) -> Result<crate::numkit::Var> {
    let value = tape.value(params)?;
    let (b, d) = value.dims2()?;
    debug_assert_eq!(d, POSE_DIM);
    let poses = value
        .data()
        .chunks_exact(POSE_DIM)
        .map(PoseState::from_slice)
        .collect::<Result<Vec<_>>>()?;
    let fwds = poses
        .par_iter()
        .map(|p| skin_forward(template, p, true, SkinKernel::Sparse))
        .collect::<Result<Vec<_>>>()?;
    let nv = template.num_vertices();
    let out = Array::new(
        vec![b, 3 * nv],
        fwds.iter()
            .flat_map(|f| f.vertices.iter().flatten().copied())
            .collect(),
    )?;
    let template = Arc::clone(template);
    tape.custom(&[params], out, move |g| {
        let grads = poses
            .par_iter()
            .zip(&fwds)
            .zip(g.data().par_chunks_exact(3 * nv))
            .map(|((p, f), gr)| skin_backward(&template, p, f, &to_vec3(gr), None, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(vec![Array::new(vec![b, POSE_DIM], grads.concat())?])
    })
}

/// Per-feature standardization of inputs and outputs used while training.
/// Trained weights have it folded into the first and last layers.
struct Scaling {
    x_mean: Vec<f32>,
    x_std: Vec<f32>,
    y_mean: Vec<f32>,
    y_std: Vec<f32>,
}

fn column_stats(data: &[f32], width: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (data.len() / width) as f64;
    let mut mean = vec![0.0f64; width];
    let mut var = vec![0.0f64; width];
    for row in data.chunks_exact(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64 / n;
        }
    }
    for row in data.chunks_exact(width) {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(row) {
            *s += (*v as f64 - m).powi(2) / n;
        }
    }
    let std = var
        .iter()
        .map(|v| {
            if v.sqrt() > 1e-6 {
                v.sqrt() as f32
            } else {
                1.0
            }
        })
        .collect();
    (mean.iter().map(|m| *m as f32).collect(), std)
}

impl Scaling {
    fn identity(dx: usize) -> Self {
        Self {
            x_mean: vec![0.0; dx],
            x_std: vec![1.0; dx],
            y_mean: vec![0.0; POSE_DIM],
            y_std: vec![1.0; POSE_DIM],
        }
    }

    fn fit(data: &Prepared, dx: usize) -> Self {
        let (x_mean, x_std) = column_stats(&data.x, dx);
        let (mut y_mean, y_std) = column_stats(&data.theta, POSE_DIM);
        for (i, m) in y_mean.iter_mut().enumerate() {
            if is_hand_slot(i) {
                *m = 0.0;
            }
        }
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    fn normalize(&self, x: &[f32]) -> Vec<f32> {
        let d = self.x_mean.len();
        x.chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.x_mean)
                    .zip(&self.x_std)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect()
    }

    /// Weights acting on raw inputs and producing raw parameters.
    fn fold(&self, w: &ProjectorWeights) -> Result<ProjectorWeights> {
        let mut out = w.clone();
        let [l0, _, l2] = &mut out.layers;
        let (din, h) = l0.dims();
        let mut w0 = l0.w.data().to_vec();
        for i in 0..din {
            let row = &mut w0[i * h..(i + 1) * h];
            let shift = self.x_mean[i] / self.x_std[i];
            for (j, v) in row.iter_mut().enumerate() {
                l0.b[j] -= shift * *v;
                *v /= self.x_std[i];
            }
        }
        l0.w = Array::new(vec![din, h], w0)?;
        let (h2, dout) = l2.dims();
        let mut w2 = l2.w.data().to_vec();
        for row in w2.chunks_exact_mut(dout) {
            for (v, s) in row.iter_mut().zip(&self.y_std) {
                *v *= s;
            }
        }
        l2.w = Array::new(vec![h2, dout], w2)?;
        for ((b, s), m) in l2.b.iter_mut().zip(&self.y_std).zip(&self.y_mean) {
            *b = *b * s + m;
        }
        Ok(out)
    }
}

/// Conversion loss on one minibatch, recorded on `tape`: mean over the
/// batch of `λ_v‖V̂ − Ṽ‖₁ + λ_reg‖Θ̂ − Θ*‖²`. Returns the loss handle and
/// the six parameter handles.
#[allow(clippy::too_many_arguments)]
fn record_loss(
    tape: &mut GradTape,
    w: &ProjectorWeights,
    scaling: &Scaling,
    template: &Arc<BodyTemplate>,
    x: Array,
    targets: Array,
    theta: Array,
    cfg: &TrainConfig,
) -> Result<(crate::numkit::Var, Vec<crate::numkit::Var>)> {
    let b = x.shape()[0];
    let xv = tape.constant(x);
    let mut params = Vec::with_capacity(6);
    let mut h = xv;
    for (i, l) in w.layers.iter().enumerate() {
        let wv = tape.leaf(l.w.clone());
        let bv = tape.leaf(Array::new(vec![l.b.len()], l.b.clone())?);
        params.push(wv);
        params.push(bv);
        let z = tape.matmul(h, wv)?;
        h = tape.add_row_bias(z, bv)?;
        if i < 2 {
            h = tape.relu(h)?;
        }
    }
    let gain: Vec<f32> = (0..POSE_DIM)
        .map(|i| {
            if is_hand_slot(i) {
                0.0
            } else {
                scaling.y_std[i]
            }
        })
        .collect();
    let gain = tape.constant(Array::new(vec![b, POSE_DIM], gain.repeat(b))?);
    let scaled = tape.mul(h, gain)?;
    let mean = tape.constant(Array::new(vec![POSE_DIM], scaling.y_mean.clone())?);
    let out = tape.add_row_bias(scaled, mean)?;
    let mut terms = Vec::new();
    if cfg.lambda_v > 0.0 {
        let verts = skin_op(tape, template, out)?;
        let t = tape.constant(targets);
        let diff = tape.sub(verts, t)?;
        let l1 = tape.sum_abs(diff)?;
        terms.push(tape.scale(l1, cfg.lambda_v / b as f32)?);
    }
    if cfg.lambda_reg > 0.0 {
        let th = tape.constant(theta);
        let diff = tape.sub(out, th)?;
        let sq = tape.sum_squares(diff)?;
        terms.push(tape.scale(sq, cfg.lambda_reg / b as f32)?);
    }
    let mut loss = terms[0];
    for t in &terms[1..] {
        loss = tape.add(loss, *t)?;
    }
    Ok((loss, params))
}

/// Conversion loss for one batch of prepared inputs; exposed for gradient
/// checks of the full composite.
pub fn conversion_loss(
    w: &ProjectorWeights,
    template: &Arc<BodyTemplate>,
    x: &[f32],
    targets: &[Vec3],
    theta: &[PoseState],
    cfg: &TrainConfig,
) -> Result<(f32, Vec<Array>)> {
    let b = theta.len();
    let nv = template.num_vertices();
    if targets.len() != b * nv || x.len() != b * w.config.input_dim() {
        return Err(shape_err!(
            "batch of {b}: {} targets, {} inputs",
            targets.len(),
            x.len()
        ));
    }
    let mut tape = GradTape::new();
    let (loss, params) = record_loss(
        &mut tape,
        w,
        &Scaling::identity(w.config.input_dim()),
        template,
        Array::new(vec![b, w.config.input_dim()], x.to_vec())?,
        Array::new(vec![b, 3 * nv], targets.iter().flatten().copied().collect())?,
        Array::new(
            vec![b, POSE_DIM],
            theta.iter().flat_map(|p| p.as_slice().to_vec()).collect(),
        )?,
        cfg,
    )?;
    let g = grad(&tape, loss)?;
    let grads = params
        .iter()
        .map(|p| g.get(*p).cloned())
        .collect::<Result<_>>()?;
    Ok((tape.value(loss)?.item()?, grads))
}

/// Held-out metrics for `w`.
fn evaluate(
    w: &ProjectorWeights,
    template: &BodyTemplate,
    data: &Prepared,
    n: usize,
) -> Result<(f32, f32)> {
    let dx = w.config.input_dim();
    let nv = template.num_vertices();
    let per = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut scratch = ProjectorScratch::default();
            let pred = mlp_forward(w, &data.x[i * dx..(i + 1) * dx], &mut scratch);
            let v = skin(template, &pred, true, SkinKernel::Sparse)?;
            let t = to_vec3(&data.targets[i * 3 * nv..(i + 1) * 3 * nv]);
            let th = &data.theta[i * POSE_DIM..(i + 1) * POSE_DIM];
            let mse = pred
                .as_slice()
                .iter()
                .zip(th)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                / POSE_DIM as f32;
            Ok((mean_vertex_error(&v, &t)?, mse))
        })
        .collect::<Result<Vec<_>>>()?;
    let (ve, pm) = per
        .iter()
        .fold((0.0f32, 0.0f32), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok((ve / n as f32, pm / n as f32))
}

/// Rotates one training sample about the root joint. Inputs are centered,
/// so they rotate directly; the target mesh rotates about the root and the
/// rotation composes onto the global orientation.
fn rotate_sample(r: &Mat3, root: Vec3, x: &mut [f32], targets: &mut [f32], theta: &mut [f32]) {
    let apply = |v: &mut [f32], o: Vec3| {
        let p = [v[0] - o[0], v[1] - o[1], v[2] - o[2]];
        for k in 0..3 {
            v[k] = r[k][0] * p[0] + r[k][1] * p[1] + r[k][2] * p[2] + o[k];
        }
    };
    x.chunks_exact_mut(3).for_each(|v| apply(v, [0.0; 3]));
    targets.chunks_exact_mut(3).for_each(|v| apply(v, root));
    let g = rodrigues([theta[0], theta[1], theta[2]]);
    let mut rg = [[0.0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rg[i][j] = (0..3).map(|k| r[i][k] * g[k][j]).sum();
        }
    }
    theta[..3].copy_from_slice(&rotation_log(&rg));
}

const DIVERGE_FACTOR: f32 = 10.0;
const DIVERGE_STEPS: usize = 100;

/// Minibatch Adam with cosine decay on the conversion loss. Returns the
/// weights from the best held-out epoch.
pub fn train_projector(
    train: &ConversionSet,
    heldout: &ConversionSet,
    map: &BaryMap,
    template: &Arc<BodyTemplate>,
    config: ProjectorConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Usage(
            "training and held-out sets must be nonempty".into(),
        ));
    }
    if map.len() != template.num_vertices() {
        return Err(shape_err!(
            "map has {} rows, template {} vertices",
            map.len(),
            template.num_vertices()
        ));
    }
    let mut w = ProjectorWeights::init(config, template.num_vertices(), cfg.seed)?;
    let tr = prepare_set(train, map, &w.subsample, true)?;
    let ho = prepare_set(heldout, map, &w.subsample, true)?;
    let n = train.len();
    let dx = config.input_dim();
    let scaling = Scaling::fit(&tr, dx);
    let root = template.joints_rest()[0];
    let rot = Normal::new(0.0, cfg.augment_rotation.max(0.0))
        .map_err(|e| Error::Config(e.to_string()))?;

    let nv = template.num_vertices();
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let mut adams: Vec<Adam> = w
        .layers
        .iter()
        .flat_map(|l| [Adam::new(l.w.len()), Adam::new(l.b.len())])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5452_4149_4e00);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f32, usize, ProjectorWeights)> = None;
    let mut initial_loss = None;
    let mut above = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for idx in order.chunks(cfg.batch) {
            let b = idx.len();
            let mut x = rows(&tr.x, dx, idx);
            let mut targets = rows(&tr.targets, 3 * nv, idx);
            let mut theta = rows(&tr.theta, POSE_DIM, idx);
            if cfg.augment_rotation > 0.0 {
                for i in 0..b {
                    let r = rodrigues([0; 3].map(|_| rot.sample(&mut rng)));
                    rotate_sample(
                        &r,
                        root,
                        &mut x[i * dx..(i + 1) * dx],
                        &mut targets[i * 3 * nv..(i + 1) * 3 * nv],
                        &mut theta[i * POSE_DIM..(i + 1) * POSE_DIM],
                    );
                }
            }
            let mut tape = GradTape::new();
            let (loss, params) = record_loss(
                &mut tape,
                &w,
                &scaling,
                template,
                Array::new(vec![b, dx], scaling.normalize(&x))?,
                Array::new(vec![b, 3 * nv], targets)?,
                Array::new(vec![b, POSE_DIM], theta)?,
                cfg,
            )?;
            let lv = tape.value(loss)?.item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            let init = *initial_loss.get_or_insert(lv);
            above = if lv > DIVERGE_FACTOR * init {
                above + 1
            } else {
                0
            };
            if above >= DIVERGE_STEPS {
                return Err(Error::Diverged(format!(
                    "loss {lv} above {DIVERGE_FACTOR}x the initial {init} for {DIVERGE_STEPS} steps (epoch {epoch})"
                )));
            }
            loss_sum += lv as f64;
            let g = grad(&tape, loss)?;
            let lr = cosine_lr(cfg.lr, step, total, cfg.lr_floor);
            for (k, l) in w.layers.iter_mut().enumerate() {
                let gw = g.get(params[2 * k])?;
                let gb = g.get(params[2 * k + 1])?;
                let mut data = std::mem::replace(&mut l.w, Array::scalar(0.0)?).into_data();
                adams[2 * k].step(&mut data, gw.data(), lr);
                if cfg.weight_decay > 0.0 {
                    let keep = 1.0 - lr * cfg.weight_decay;
                    data.iter_mut().for_each(|v| *v *= keep);
                }
                l.w = Array::new(gw.shape().to_vec(), data)?;
                adams[2 * k + 1].step(&mut l.b, gb.data(), lr);
            }
            step += 1;
        }
        let folded = scaling.fold(&w)?;
        let (ve, pm) = evaluate(&folded, template, &ho, heldout.len())?;
        curve.push(EpochStats {
            epoch,
            train_loss: (loss_sum / steps_per_epoch as f64) as f32,
            heldout_vertex_err: ve,
            heldout_param_mse: pm,
        });
        if best.as_ref().is_none_or(|b| ve < b.0) {
            best = Some((ve, epoch, folded));
        }
    }
    let (_, best_epoch, weights) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        weights,
        curve,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{make_toy_models, ToySizes};

    #[test]
    fn stride_is_even_and_checked() {
        assert_eq!(stride_subsample(10, 5).unwrap(), vec![0, 2, 4, 6, 8]);
        assert_eq!(stride_subsample(600, 300).unwrap().len(), 300);
        assert!(stride_subsample(3, 4).is_err());
        assert!(stride_subsample(3, 0).is_err());
    }

    #[test]
    fn zero_weights_give_rest_pose() {
        let toy = make_toy_models(1, ToySizes::default()).unwrap();
        let w =
            ProjectorWeights::zeros(ProjectorConfig::default(), toy.smpl.num_vertices()).unwrap();
        let v = toy.mhr.vertices_rest();
        let p = project_forward(v, &toy.ground_truth, &w).unwrap();
        assert!(p.bit_eq(&PoseState::zeros()));
    }

    #[test]
    fn hands_are_zero_and_params_count() {
        let toy = make_toy_models(1, ToySizes::default()).unwrap();
        let mut w =
            ProjectorWeights::init(ProjectorConfig::default(), toy.smpl.num_vertices(), 3).unwrap();
        w.layers[2].b = vec![0.5; POSE_DIM];
        let p = project_forward(toy.mhr.vertices_rest(), &toy.ground_truth, &w).unwrap();
        for j in HAND_JOINTS {
            assert_eq!(p.joint_rotation(j), [0.0; 3]);
        }
        assert_eq!(
            w.num_params(),
            900 * 512 + 512 + 512 * 256 + 256 + 256 * 76 + 76
        );
    }

    #[test]
    fn save_load_round_trip() {
        let w = ProjectorWeights::init(
            ProjectorConfig {
                subsample: 20,
                hidden: [8, 6],
            },
            40,
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.json");
        w.save(&path).unwrap();
        assert_eq!(ProjectorWeights::load(&path).unwrap(), w);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let toy = make_toy_models(1, ToySizes::default()).unwrap();
        let w =
            ProjectorWeights::zeros(ProjectorConfig::default(), toy.smpl.num_vertices()).unwrap();
        let short = &toy.mhr.vertices_rest()[..10];
        assert!(matches!(
            project_forward(short, &toy.ground_truth, &w),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conversion_set_round_trip_and_split() {
        let toy = make_toy_models(1, ToySizes::default()).unwrap();
        let cfg = FitConfig {
            steps: 3,
            ..Default::default()
        };
        let set =
            ConversionSet::generate(&toy.mhr, &toy.smpl, &toy.ground_truth, 3, 9, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.json");
        set.save(&path).unwrap();
        assert_eq!(ConversionSet::load(&path).unwrap(), set);
        let (a, b) = set.split_tail(1).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        assert!(a.split_tail(2).is_err());
    }
}

//! Residual denoiser that pulls a regressed body pose back towards the
//! manifold of plausible poses.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bodymodel::{PoseSampler, PoseState};
use crate::error::{Error, Result};
use crate::numkit::fsb1::{self, take};
use crate::numkit::kernels::{linear_into, relu_in_place, MatmulKernel};
use crate::numkit::{cosine_lr, grad, Adam, Array, GradTape};

/// Body-pose coordinates the denoiser reads and writes (joints 1..=21).
pub const BODY_DIM: usize = 63;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    /// `63×hidden`.
    pub w1: Array,
    pub b1: Vec<f32>,
    /// `hidden×63`.
    pub w2: Array,
    pub b2: Vec<f32>,
}

impl DenoiserWeights {
    /// Random first layer, zero second layer: the identity map.
    pub fn init(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config(
                "denoiser hidden width must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, (2.0 / BODY_DIM as f32).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            w1: Array::new(
                vec![BODY_DIM, hidden],
                (0..BODY_DIM * hidden).map(|_| n.sample(&mut rng)).collect(),
            )?,
            b1: vec![0.0; hidden],
            w2: Array::zeros(&[hidden, BODY_DIM])?,
            b2: vec![0.0; BODY_DIM],
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn save(&self, json: &Path) -> Result<()> {
        let b1 = Array::new(vec![self.b1.len()], self.b1.clone())?;
        let b2 = Array::new(vec![BODY_DIM], self.b2.clone())?;
        fsb1::write_bundle(
            json,
            serde_json::json!({ "kind": "denoiser", "hidden": self.hidden() }),
            &[
                ("w1".into(), &self.w1),
                ("b1".into(), &b1),
                ("w2".into(), &self.w2),
                ("b2".into(), &b2),
            ],
        )
    }

    pub fn load(json: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Meta {
            kind: String,
            hidden: usize,
        }
        let (meta, mut t) = fsb1::read_bundle(json)?;
        let m: Meta = serde_json::from_value(meta).map_err(|e| Error::json(json, e))?;
        if m.kind != "denoiser" {
            return Err(Error::Format(format!(
                "{}: not denoiser weights",
                json.display()
            )));
        }
        let h = m.hidden;
        Ok(Self {
            w1: take(&mut t, "w1", &[BODY_DIM, h])?,
            b1: take(&mut t, "b1", &[h])?.into_data(),
            w2: take(&mut t, "w2", &[h, BODY_DIM])?,
            b2: take(&mut t, "b2", &[BODY_DIM])?.into_data(),
        })
    }
}

/// `out = p + W2ᵀ relu(W1ᵀ p + b1) + b2` on the 63 body coordinates.
/// `hidden` must hold at least `w.hidden()` values; nothing allocates.
pub fn denoise_into(w: &DenoiserWeights, pose: &[f32], hidden: &mut [f32], out: &mut [f32]) {
    let h = w.hidden();
    let k = MatmulKernel::Streaming;
    let hidden = &mut hidden[..h];
    linear_into(k, pose, w.w1.data(), Some(&w.b1), hidden, 1, BODY_DIM, h);
    relu_in_place(hidden);
    linear_into(k, hidden, w.w2.data(), Some(&w.b2), out, 1, h, BODY_DIM);
    for (o, p) in out.iter_mut().zip(pose) {
        *o += p;
    }
}

/// Denoises the body pose; global orientation and shape pass through.
pub fn denoise(w: &DenoiserWeights, pose: &PoseState) -> PoseState {
    let mut out = *pose;
    let mut hidden = vec![0.0; w.hidden()];
    denoise_into(w, pose.body_pose(), &mut hidden, out.body_pose_mut());
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden: usize,
    /// Standard deviation of the Gaussian noise added to each coordinate.
    pub noise_sigma: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub lr_floor: f32,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            noise_sigma: 0.1,
            epochs: 60,
            batch: 64,
            lr: 1e-3,
            lr_floor: 0.01,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config(
                "hidden, epochs and batch must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(
                "noise_sigma ≥ 0, lr > 0 and lr_floor in [0, 1] required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserEpoch {
    pub epoch: usize,
    pub train_loss: f32,
    /// Mean squared distance to the clean pose on held-out noisy inputs.
    pub heldout_loss: f32,
}

#[derive(Clone, Debug)]
pub struct DenoiserOutcome {
    pub weights: DenoiserWeights,
    pub curve: Vec<DenoiserEpoch>,
}

/// `sequences` smooth random walks of `frames` poses each from one seeded
/// pose model, standing in for captured motion. Split by sequence to get a
/// held-out set from the same distribution.
pub fn motion_dataset(sequences: usize, frames: usize, seed: u64) -> Vec<Vec<PoseState>> {
    let mut sampler = PoseSampler::new(seed);
    (0..sequences).map(|_| sampler.sequence(frames)).collect()
}

fn noisy(clean: &[f32], noise: &Normal<f32>, rng: &mut ChaCha8Rng, sigma: f32) -> Vec<f32> {
    if sigma == 0.0 {
        return clean.to_vec();
    }
    clean.iter().map(|v| v + noise.sample(rng)).collect()
}

fn batch_loss(w: &DenoiserWeights, x: &[f32], clean: &[f32]) -> Result<f32> {
    let mut hidden = vec![0.0; w.hidden()];
    let mut out = vec![0.0; BODY_DIM];
    let mut s = 0.0f32;
    for (xi, ci) in x.chunks_exact(BODY_DIM).zip(clean.chunks_exact(BODY_DIM)) {
        denoise_into(w, xi, &mut hidden, &mut out);
        s += out
            .iter()
            .zip(ci)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>();
    }
    Ok(s / (x.len() / BODY_DIM) as f32)
}

/// Trains on `clean` poses corrupted with fresh Gaussian noise each step,
/// minimizing the squared distance to the clean pose.
pub fn train_denoiser(
    clean: &[PoseState],
    heldout: &[PoseState],
    cfg: &DenoiserConfig,
) -> Result<DenoiserOutcome> {
    cfg.validate()?;
    if clean.is_empty() || heldout.is_empty() {
        return Err(Error::Usage(
            "denoiser needs training and held-out poses".into(),
        ));
    }
    let mut w = DenoiserWeights::init(cfg.hidden, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6465_6e6f);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let flat =
        |ps: &[PoseState]| -> Vec<f32> { ps.iter().flat_map(|p| p.body_pose().to_vec()).collect() };
    let train = flat(clean);
    let held = flat(heldout);
    let held_noisy = noisy(
        &held,
        &noise,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x686f),
        cfg.noise_sigma,
    );
    let n = clean.len();
    let steps = cfg.epochs * n.div_ceil(cfg.batch);
    let mut adams = [
        Adam::new(w.w1.len()),
        Adam::new(w.b1.len()),
        Adam::new(w.w2.len()),
        Adam::new(BODY_DIM),
    ];
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut initial = None;
    let mut above = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for idx in order.chunks(cfg.batch) {
            let b = idx.len();
            let target: Vec<f32> = idx
                .iter()
                .flat_map(|&i| train[i * BODY_DIM..(i + 1) * BODY_DIM].iter().copied())
                .collect();
            let input = noisy(&target, &noise, &mut rng, cfg.noise_sigma);
            let mut t = GradTape::new();
            let x = t.constant(Array::new(vec![b, BODY_DIM], input)?);
            let w1 = t.leaf(w.w1.clone());
            let b1 = t.leaf(Array::new(vec![w.hidden()], w.b1.clone())?);
            let w2 = t.leaf(w.w2.clone());
            let b2 = t.leaf(Array::new(vec![BODY_DIM], w.b2.clone())?);
            let z = t.matmul(x, w1)?;
            let z = t.add_row_bias(z, b1)?;
            let h = t.relu(z)?;
            let r = t.matmul(h, w2)?;
            let r = t.add_row_bias(r, b2)?;
            let out = t.add(x, r)?;
            let c = t.constant(Array::new(vec![b, BODY_DIM], target)?);
            let d = t.sub(out, c)?;
            let sq = t.sum_squares(d)?;
            let loss = t.scale(sq, 1.0 / b as f32)?;
            let lv = t.value(loss)?.item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite denoiser loss at epoch {epoch}"
                )));
            }
            // Zero-noise training starts at zero loss; any positive loss
            // then counts as divergence only against a positive reference.
            let init = *initial.get_or_insert(lv);
            above = if init > 0.0 && lv > 10.0 * init {
                above + 1
            } else {
                0
            };
            if above >= 100 {
                return Err(Error::Diverged(format!(
                    "denoiser loss {lv} stayed above 10x {init}"
                )));
            }
            total += lv as f64;
            let g = grad(&t, loss)?;
            let lr = cosine_lr(cfg.lr, step, steps, cfg.lr_floor);
            step_array(&mut adams[0], &mut w.w1, g.get(w1)?.data(), lr)?;
            adams[1].step(&mut w.b1, g.get(b1)?.data(), lr);
            step_array(&mut adams[2], &mut w.w2, g.get(w2)?.data(), lr)?;
            adams[3].step(&mut w.b2, g.get(b2)?.data(), lr);
            step += 1;
        }
        curve.push(DenoiserEpoch {
            epoch,
            train_loss: (total / n.div_ceil(cfg.batch) as f64) as f32,
            heldout_loss: batch_loss(&w, &held_noisy, &held)?,
        });
    }
    Ok(DenoiserOutcome { weights: w, curve })
}

fn step_array(adam: &mut Adam, a: &mut Array, g: &[f32], lr: f32) -> Result<()> {
    let shape = a.shape().to_vec();
    let mut data = std::mem::replace(a, Array::scalar(0.0)?).into_data();
    adam.step(&mut data, g, lr);
    *a = Array::new(shape, data)?;
    Ok(())
}

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BODY_PROMPT_DIM, HAND_PROMPT_DIM, HAND_TOKENS, NUM_PROMPT_TOKENS};
use crate::bodymodel::{PoseSampler, NUM_JOINTS, POSE_DIM};
use crate::error::{Error, Result};
use crate::numkit::fsb1::{self, take, Tensors};
use crate::numkit::{Array, AttnWeights, LayerNorm};

/// Architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub crop_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub body_layers: usize,
    pub hand_layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            patch_size: 8,
            dim: 64,
            heads: 4,
            mlp_hidden: 128,
            body_layers: 5,
            hand_layers: 5,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.patch_size == 0 || c.crop_size % c.patch_size != 0 {
            return Err(Error::Shape(format!(
                "crop size {} is not divisible by patch size {}",
                c.crop_size, c.patch_size
            )));
        }
        if c.heads == 0 || c.dim % c.heads != 0 {
            return Err(Error::Shape(format!(
                "{} heads do not divide width {}",
                c.heads, c.dim
            )));
        }
        if c.body_layers == 0 || c.hand_layers == 0 || c.body_layers > 32 || c.hand_layers > 32 {
            return Err(Error::Config("layer counts must be in 1..=32".into()));
        }
        if c.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Feature-map side `h = w = S / p`.
    pub fn grid(&self) -> usize {
        self.crop_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// `M = 1 + prompts + J + J + 2`.
    pub fn body_tokens(&self) -> usize {
        1 + NUM_PROMPT_TOKENS + 2 * NUM_JOINTS + 2
    }
}

/// Attention (optionally with cross-attention) followed by a two-layer
/// MLP; every sub-block is residual with post-normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub self_attn: AttnWeights,
    pub cross_attn: Option<AttnWeights>,
    pub mlp_w1: Array,
    pub mlp_b1: Vec<f32>,
    pub mlp_w2: Array,
    pub mlp_b2: Vec<f32>,
    pub mlp_norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub patch_w: Array,
    pub patch_b: Vec<f32>,
    pub pos: Array,
    pub block: Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyDecoderWeights {
    /// Initial token rows `[t_mhr, prompts, kp2d, kp3d, hand]`.
    pub init_tokens: Array,
    /// Prompt vector to the concatenated prompt-token offsets.
    pub prompt_w: Array,
    pub phi2d_w: Array,
    pub phi2d_b: Vec<f32>,
    pub phi3d_w: Array,
    pub phi3d_b: Vec<f32>,
    pub layers: Vec<Block>,
    pub head_params: Array,
    pub mean_params: Vec<f32>,
    pub head_cam: Array,
    pub cam_bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandDecoderWeights {
    pub init_tokens: Array,
    pub prompt_w: Array,
    pub phi_w: Array,
    pub phi_b: Vec<f32>,
    pub layers: Vec<Block>,
    pub head: Array,
    pub head_b: Vec<f32>,
}

/// Frozen encoder plus body and hand decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: DecoderConfig,
    pub encoder: EncoderWeights,
    pub body: BodyDecoderWeights,
    pub hand: HandDecoderWeights,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f32) -> Array {
        let n: usize = shape.iter().product();
        let d = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..n).map(|_| d.sample(&mut self.rng)).collect();
        Array::new(shape.to_vec(), data).expect("finite normal draws")
    }

    fn vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        self.normal(&[n], std).into_data()
    }

    fn attn(&mut self, d: usize, heads: usize) -> AttnWeights {
        let s = 1.0 / (d as f32).sqrt();
        AttnWeights {
            heads,
            wq: self.normal(&[d, d], s),
            wk: self.normal(&[d, d], s),
            wv: self.normal(&[d, d], s),
            wo: self.normal(&[d, d], s),
            residual: true,
            norm: Some(LayerNorm::identity(d)),
        }
    }

    fn block(&mut self, c: &DecoderConfig, cross: bool) -> Block {
        let (d, h) = (c.dim, c.mlp_hidden);
        Block {
            self_attn: self.attn(d, c.heads),
            cross_attn: cross.then(|| self.attn(d, c.heads)),
            mlp_w1: self.normal(&[d, h], 1.0 / (d as f32).sqrt()),
            mlp_b1: self.vec(h, 0.02),
            mlp_w2: self.normal(&[h, d], 1.0 / (h as f32).sqrt()),
            mlp_b2: self.vec(d, 0.02),
            mlp_norm: LayerNorm::identity(d),
        }
    }
}

impl ModelWeights {
    /// Seeded random initialization.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut g = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = &config;
        let d = c.dim;
        let encoder = EncoderWeights {
            patch_w: g.normal(&[c.patch_dim(), d], 1.0 / (c.patch_dim() as f32).sqrt()),
            patch_b: g.vec(d, 0.02),
            pos: g.normal(&[c.num_patches(), d], 0.5),
            block: g.block(c, false),
        };
        let mut mean = PoseSampler::new(seed ^ 0x6d65_616e).sample();
        for v in &mut mean.as_mut_slice()[..3] {
            *v = 0.0;
        }
        for v in mean.as_mut_slice().iter_mut() {
            *v *= 0.5;
        }
        let body = BodyDecoderWeights {
            init_tokens: g.normal(&[c.body_tokens(), d], 1.0),
            prompt_w: g.normal(&[BODY_PROMPT_DIM, NUM_PROMPT_TOKENS * d], 0.1),
            phi2d_w: g.normal(&[2, d], 1.0),
            phi2d_b: g.vec(d, 0.1),
            phi3d_w: g.normal(&[3, d], 1.0),
            phi3d_b: g.vec(d, 0.1),
            layers: (0..c.body_layers).map(|_| g.block(c, true)).collect(),
            head_params: g.normal(&[d, POSE_DIM], 0.01),
            mean_params: mean.as_slice().to_vec(),
            head_cam: g.normal(&[d, 3], 0.02),
            cam_bias: vec![0.0; 3],
        };
        let hand = HandDecoderWeights {
            init_tokens: g.normal(&[HAND_TOKENS, d], 1.0),
            prompt_w: g.normal(&[HAND_PROMPT_DIM, NUM_PROMPT_TOKENS * d], 0.1),
            phi_w: g.normal(&[3, d], 1.0),
            phi_b: g.vec(d, 0.1),
            layers: (0..c.hand_layers).map(|_| g.block(c, true)).collect(),
            head: g.normal(&[d, 3], 0.02),
            head_b: vec![0.0; 3],
        };
        Ok(Self {
            config,
            encoder,
            body,
            hand,
        })
    }

    /// Replaces both prompt projections with zeros, so prompt tokens no
    /// longer depend on the prompt vector.
    pub fn zero_prompt_weights(&mut self) {
        let z = |a: &Array| Array::zeros(a.shape()).expect("valid shape");
        self.body.prompt_w = z(&self.body.prompt_w);
        self.hand.prompt_w = z(&self.hand.prompt_w);
    }

    pub fn save(&self, json: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Array)> = Vec::new();
        let mut push = |name: String, a: Array| tensors.push((name, a));
        let v = |x: &[f32]| Array::new(vec![x.len()], x.to_vec()).expect("finite weights");
        push("enc.patch_w".into(), self.encoder.patch_w.clone());
        push("enc.patch_b".into(), v(&self.encoder.patch_b));
        push("enc.pos".into(), self.encoder.pos.clone());
        block_tensors("enc.block", &self.encoder.block, &mut push);
        let b = &self.body;
        push("body.init".into(), b.init_tokens.clone());
        push("body.prompt_w".into(), b.prompt_w.clone());
        push("body.phi2d_w".into(), b.phi2d_w.clone());
        push("body.phi2d_b".into(), v(&b.phi2d_b));
        push("body.phi3d_w".into(), b.phi3d_w.clone());
        push("body.phi3d_b".into(), v(&b.phi3d_b));
        for (i, l) in b.layers.iter().enumerate() {
            block_tensors(&format!("body.l{i}"), l, &mut push);
        }
        push("body.head_params".into(), b.head_params.clone());
        push("body.mean_params".into(), v(&b.mean_params));
        push("body.head_cam".into(), b.head_cam.clone());
        push("body.cam_bias".into(), v(&b.cam_bias));
        let h = &self.hand;
        push("hand.init".into(), h.init_tokens.clone());
        push("hand.prompt_w".into(), h.prompt_w.clone());
        push("hand.phi_w".into(), h.phi_w.clone());
        push("hand.phi_b".into(), v(&h.phi_b));
        for (i, l) in h.layers.iter().enumerate() {
            block_tensors(&format!("hand.l{i}"), l, &mut push);
        }
        push("hand.head".into(), h.head.clone());
        push("hand.head_b".into(), v(&h.head_b));
        let refs: Vec<(String, &Array)> = tensors.iter().map(|(n, a)| (n.clone(), a)).collect();
        let meta = serde_json::to_value(self.config).expect("config serializes");
        fsb1::write_bundle(json, meta, &refs)
    }

    pub fn load(json: &Path) -> Result<Self> {
        let (meta, mut t) = fsb1::read_bundle(json)?;
        let config: DecoderConfig =
            serde_json::from_value(meta).map_err(|e| Error::json(json, e))?;
        config.validate()?;
        let c = &config;
        let d = c.dim;
        let t = &mut t;
        let v = |t: &mut Tensors, n: &str, len: usize| take(t, n, &[len]).map(Array::into_data);
        let encoder = EncoderWeights {
            patch_w: take(t, "enc.patch_w", &[c.patch_dim(), d])?,
            patch_b: v(t, "enc.patch_b", d)?,
            pos: take(t, "enc.pos", &[c.num_patches(), d])?,
            block: read_block(t, "enc.block", c, false)?,
        };
        let body = BodyDecoderWeights {
            init_tokens: take(t, "body.init", &[c.body_tokens(), d])?,
            prompt_w: take(
                t,
                "body.prompt_w",
                &[BODY_PROMPT_DIM, NUM_PROMPT_TOKENS * d],
            )?,
            phi2d_w: take(t, "body.phi2d_w", &[2, d])?,
            phi2d_b: v(t, "body.phi2d_b", d)?,
            phi3d_w: take(t, "body.phi3d_w", &[3, d])?,
            phi3d_b: v(t, "body.phi3d_b", d)?,
            layers: (0..c.body_layers)
                .map(|i| read_block(t, &format!("body.l{i}"), c, true))
                .collect::<Result<_>>()?,
            head_params: take(t, "body.head_params", &[d, POSE_DIM])?,
            mean_params: v(t, "body.mean_params", POSE_DIM)?,
            head_cam: take(t, "body.head_cam", &[d, 3])?,
            cam_bias: v(t, "body.cam_bias", 3)?,
        };
        let hand = HandDecoderWeights {
            init_tokens: take(t, "hand.init", &[HAND_TOKENS, d])?,
            prompt_w: take(
                t,
                "hand.prompt_w",
                &[HAND_PROMPT_DIM, NUM_PROMPT_TOKENS * d],
            )?,
            phi_w: take(t, "hand.phi_w", &[3, d])?,
            phi_b: v(t, "hand.phi_b", d)?,
            layers: (0..c.hand_layers)
                .map(|i| read_block(t, &format!("hand.l{i}"), c, true))
                .collect::<Result<_>>()?,
            head: take(t, "hand.head", &[d, 3])?,
            head_b: v(t, "hand.head_b", 3)?,
        };
        if let Some(extra) = t.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            config,
            encoder,
            body,
            hand,
        })
    }
}

fn block_tensors(prefix: &str, b: &Block, push: &mut impl FnMut(String, Array)) {
    let v = |x: &[f32]| Array::new(vec![x.len()], x.to_vec()).expect("finite weights");
    let mut attn = |name: &str, a: &AttnWeights| {
        push(format!("{prefix}.{name}.wq"), a.wq.clone());
        push(format!("{prefix}.{name}.wk"), a.wk.clone());
        push(format!("{prefix}.{name}.wv"), a.wv.clone());
        push(format!("{prefix}.{name}.wo"), a.wo.clone());
        let n = a.norm.as_ref().expect("blocks are normalized");
        push(format!("{prefix}.{name}.gamma"), v(&n.gamma));
        push(format!("{prefix}.{name}.beta"), v(&n.beta));
    };
    attn("sa", &b.self_attn);
    if let Some(c) = &b.cross_attn {
        attn("ca", c);
    }
    push(format!("{prefix}.mlp_w1"), b.mlp_w1.clone());
    push(format!("{prefix}.mlp_b1"), v(&b.mlp_b1));
    push(format!("{prefix}.mlp_w2"), b.mlp_w2.clone());
    push(format!("{prefix}.mlp_b2"), v(&b.mlp_b2));
    push(format!("{prefix}.mlp_gamma"), v(&b.mlp_norm.gamma));
    push(format!("{prefix}.mlp_beta"), v(&b.mlp_norm.beta));
}

fn read_block(t: &mut Tensors, prefix: &str, c: &DecoderConfig, cross: bool) -> Result<Block> {
    let (d, h) = (c.dim, c.mlp_hidden);
    let v = |t: &mut Tensors, n: String, len: usize| take(t, &n, &[len]).map(Array::into_data);
    let attn = |t: &mut Tensors, name: &str| -> Result<AttnWeights> {
        Ok(AttnWeights {
            heads: c.heads,
            wq: take(t, &format!("{prefix}.{name}.wq"), &[d, d])?,
            wk: take(t, &format!("{prefix}.{name}.wk"), &[d, d])?,
            wv: take(t, &format!("{prefix}.{name}.wv"), &[d, d])?,
            wo: take(t, &format!("{prefix}.{name}.wo"), &[d, d])?,
            residual: true,
            norm: Some(LayerNorm {
                gamma: v(t, format!("{prefix}.{name}.gamma"), d)?,
                beta: v(t, format!("{prefix}.{name}.beta"), d)?,
                eps: 1e-5,
            }),
        })
    };
    Ok(Block {
        self_attn: attn(t, "sa")?,
        cross_attn: if cross { Some(attn(t, "ca")?) } else { None },
        mlp_w1: take(t, &format!("{prefix}.mlp_w1"), &[d, h])?,
        mlp_b1: v(t, format!("{prefix}.mlp_b1"), h)?,
        mlp_w2: take(t, &format!("{prefix}.mlp_w2"), &[h, d])?,
        mlp_b2: v(t, format!("{prefix}.mlp_b2"), d)?,
        mlp_norm: LayerNorm {
            gamma: v(t, format!("{prefix}.mlp_gamma"), d)?,
            beta: v(t, format!("{prefix}.mlp_beta"), d)?,
            eps: 1e-5,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bit_exact() {
        let w = ModelWeights::init(DecoderConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        w.save(&path).unwrap();
        assert_eq!(ModelWeights::load(&path).unwrap(), w);
    }

    #[test]
    fn init_is_seeded() {
        let c = DecoderConfig::default();
        assert_eq!(
            ModelWeights::init(c, 1).unwrap(),
            ModelWeights::init(c, 1).unwrap()
        );
        assert_ne!(
            ModelWeights::init(c, 1).unwrap(),
            ModelWeights::init(c, 2).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        let mut c = DecoderConfig::default();
        c.patch_size = 7;
        assert!(matches!(c.validate(), Err(Error::Shape(_))));
        let mut c = DecoderConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}

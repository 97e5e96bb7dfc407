//! Frozen toy encoder and promptable body/hand decoders.
//!
//! The body decoder runs a fixed token sequence
//! `[t_mhr, prompt×4, kp2d×J, kp3d×J, hand×2]` through `L` cross-attention
//! layers. After each layer in the selection set it decodes parameters,
//! poses the mesh, projects the joints and writes the results back into the
//! keypoint positional encodings; layers outside the set keep the cached
//! encodings.

mod exec;
mod weights;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use exec::{
    merge, BodyOutput, BodyPrompt, Decoder, LayerDump, Ops, Pass, Probe, TokenSequence, Workspace,
};
pub use weights::{
    Block, BodyDecoderWeights, DecoderConfig, EncoderWeights, HandDecoderWeights, ModelWeights,
};

use crate::bodymodel::NUM_JOINTS;
use crate::error::{Error, Result};

pub const NUM_PROMPT_TOKENS: usize = 4;
/// Normalized box (4), crop-normalized keypoints (2J) and a keypoint flag.
pub const BODY_PROMPT_DIM: usize = 4 + 2 * NUM_JOINTS + 1;
/// Normalized hand box.
pub const HAND_PROMPT_DIM: usize = 4;
/// `[t_hand, prompt×4, kp×2]`.
pub const HAND_TOKENS: usize = 1 + NUM_PROMPT_TOKENS + 2;

pub const TOKEN_MHR: usize = 0;
pub const TOKEN_PROMPT: usize = 1;
pub const TOKEN_KP2D: usize = TOKEN_PROMPT + NUM_PROMPT_TOKENS;
pub const TOKEN_KP3D: usize = TOKEN_KP2D + NUM_JOINTS;
pub const TOKEN_HAND: usize = TOKEN_KP3D + NUM_JOINTS;
const HAND_TOKEN_KP: usize = 1 + NUM_PROMPT_TOKENS;

/// Maximum crops per encoder batch (body plus two hands).
pub const MAX_BATCH: usize = 3;

/// Set of decoder layers that run intermediate prediction. Serialized as a
/// sorted list of layer indices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LayerSelection(u32);

impl LayerSelection {
    pub const fn empty() -> Self {
        Self(0)
    }

    pub fn full(layers: usize) -> Self {
        assert!(layers <= 32);
        Self(if layers == 32 {
            u32::MAX
        } else {
            (1u32 << layers) - 1
        })
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        let mut bits = 0u32;
        for &i in indices {
            if i >= 32 {
                return Err(Error::Config(format!("layer index {i} is out of range")));
            }
            bits |= 1 << i;
        }
        Ok(Self(bits))
    }

    pub fn contains(&self, layer: usize) -> bool {
        layer < 32 && self.0 & (1 << layer) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..32).filter(|&l| self.contains(l))
    }

    /// Smallest layer not in the set.
    pub fn first_skipped(&self) -> usize {
        self.0.trailing_ones() as usize
    }

    /// Every element must be a valid layer index.
    pub fn validate(&self, layers: usize) -> Result<()> {
        match self.indices().find(|&l| l >= layers) {
            Some(l) => Err(Error::Config(format!(
                "layer selection contains {l} but the decoder has {layers} layers"
            ))),
            None => Ok(()),
        }
    }
}

impl Serialize for LayerSelection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.indices())
    }
}

impl<'de> Deserialize<'de> for LayerSelection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        Self::from_indices(&v).map_err(serde::de::Error::custom)
    }
}

use std::sync::Arc;

use serde::Serialize;

use super::weights::Block;
use super::{
    LayerSelection, ModelWeights, BODY_PROMPT_DIM, HAND_PROMPT_DIM, HAND_TOKENS, HAND_TOKEN_KP,
    NUM_PROMPT_TOKENS, TOKEN_KP2D, TOKEN_KP3D, TOKEN_MHR, TOKEN_PROMPT,
};
use crate::bodymodel::{
    forward_kinematics_into, project_into, rodrigues, skin_into, to_camera_frame, BodyTemplate,
    CameraIntrinsics, FkKernel, JointTransforms, PoseState, SkinKernel, Vec3, HAND_JOINTS,
    NUM_JOINTS, POSE_DIM,
};
use crate::error::{shape_err, Error, Result};
use crate::numkit::kernels::{add_assign, all_finite, gelu_in_place, layer_norm_rows, linear_into};
use crate::numkit::{attend_into, attention_into, project_kv, AttnScratch, MatmulKernel};
use crate::priors::BBox;

/// Operator choices. The consolidated bundle uses the streaming matmul,
/// fixed-size FK loops, sparse skinning and reuses cross-attention keys and
/// values across decoder passes over the same features. Every choice is
/// bit-identical to its generic counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ops {
    pub matmul: MatmulKernel,
    pub fk: FkKernel,
    pub skin: SkinKernel,
    pub kv_cache: bool,
}

impl Ops {
    pub const fn consolidated() -> Self {
        Self {
            matmul: MatmulKernel::Streaming,
            fk: FkKernel::Inline,
            skin: SkinKernel::Sparse,
            kv_cache: true,
        }
    }

    pub const fn generic() -> Self {
        Self {
            matmul: MatmulKernel::Generic,
            fk: FkKernel::Generic,
            skin: SkinKernel::Dense,
            kv_cache: false,
        }
    }
}

impl Default for Ops {
    fn default() -> Self {
        Self::consolidated()
    }
}

/// Instrumented call counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Probe {
    pub encoder_calls: usize,
    pub encoder_crops: usize,
    pub last_batch: usize,
    /// Body intermediate-prediction FK and projection calls.
    pub fk_calls: usize,
    pub projection_calls: usize,
    pub interm_preds: usize,
    pub hand_interm_preds: usize,
    pub refine_fk_calls: usize,
    pub refine_projection_calls: usize,
    pub body_passes: usize,
    pub hand_passes: usize,
    pub hands_decoded: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    First,
    Refine,
    Hand,
}

/// Token rows and their positional encodings. `pos_updated` is the last
/// layer whose intermediate prediction rewrote the keypoint encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub rows: usize,
    pub dim: usize,
    pub tokens: Vec<f32>,
    pub pos: Vec<f32>,
    pub pos_updated: Option<usize>,
}

impl TokenSequence {
    fn new(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            tokens: vec![0.0; rows * dim],
            pos: vec![0.0; rows * dim],
            pos_updated: None,
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.tokens[r * self.dim..(r + 1) * self.dim]
    }
}

/// Tokens and encodings after one decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDump {
    pub pass: Pass,
    pub layer: usize,
    pub pos_updated: Option<usize>,
    pub tokens: Vec<f32>,
    pub pos: Vec<f32>,
}

/// Body prompt: the crop box and, on the refinement pass, 2D keypoints in
/// image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyPrompt {
    pub bbox: BBox,
    pub keypoints: Option<[[f32; 2]; NUM_JOINTS]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyOutput {
    pub params: PoseState,
    /// Model-to-camera translation `(tx, ty, tz)`.
    pub camera: Vec3,
}

/// Preallocated buffers for one frame of up to `max_batch` crops.
#[derive(Clone, Debug)]
pub struct Workspace {
    max_batch: usize,
    crops: Vec<f32>,
    patches: Vec<f32>,
    features: Vec<f32>,
    enc_tmp: Vec<f32>,
    enc_hidden: Vec<f32>,
    scratch: AttnScratch,
    body: TokenSequence,
    hand: TokenSequence,
    h: Vec<f32>,
    tmp: Vec<f32>,
    hidden: Vec<f32>,
    prompt_vec: Vec<f32>,
    prompt_out: Vec<f32>,
    kv: Vec<f32>,
    kv_slot: Option<usize>,
    hand_kv: Vec<f32>,
    fk: JointTransforms,
    mesh: Vec<Vec3>,
    joints_cam: [Vec3; NUM_JOINTS],
    uv: [[f32; 2]; NUM_JOINTS],
    kp2: [f32; 2 * NUM_JOINTS],
    kp3: [f32; 3 * NUM_JOINTS],
    head: [f32; POSE_DIM],
    /// When set, every decoder layer appends a [`LayerDump`].
    pub record: bool,
    pub dumps: Vec<LayerDump>,
}

impl Workspace {
    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    /// Mutable `S×S×3` crop buffer for batch slot `slot`.
    pub fn crop_mut(&mut self, slot: usize) -> &mut [f32] {
        let n = self.crops.len() / self.max_batch;
        &mut self.crops[slot * n..(slot + 1) * n]
    }

    /// Every crop slot, back to back.
    pub fn crops_mut(&mut self) -> &mut [f32] {
        &mut self.crops
    }

    pub fn crop(&self, slot: usize) -> &[f32] {
        let n = self.crops.len() / self.max_batch;
        &self.crops[slot * n..(slot + 1) * n]
    }

    /// `h·w×D` feature map of batch slot `slot` after the last encode.
    pub fn features(&self, slot: usize) -> &[f32] {
        let n = self.features.len() / self.max_batch;
        &self.features[slot * n..(slot + 1) * n]
    }

    /// Body tokens after the last body decoder layer.
    pub fn body_tokens(&self) -> &TokenSequence {
        &self.body
    }

    pub fn hand_tokens(&self) -> &TokenSequence {
        &self.hand
    }

    /// Posed source mesh from the most recent intermediate prediction.
    pub fn mesh(&self) -> &[Vec3] {
        &self.mesh
    }
}

/// Frozen encoder with body and hand decoders over a source body template.
#[derive(Clone, Debug)]
pub struct Decoder {
    weights: Arc<ModelWeights>,
    template: Arc<BodyTemplate>,
    pub ops: Ops,
    pub use_correctives: bool,
}

impl Decoder {
    pub fn new(weights: Arc<ModelWeights>, template: Arc<BodyTemplate>) -> Result<Self> {
        weights.config.validate()?;
        if template.num_joints() != NUM_JOINTS {
            return Err(shape_err!(
                "decoder needs a {NUM_JOINTS}-joint template, got {}",
                template.num_joints()
            ));
        }
        Ok(Self {
            weights,
            template,
            ops: Ops::default(),
            use_correctives: false,
        })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn template(&self) -> &BodyTemplate {
        &self.template
    }

    pub fn workspace(&self, max_batch: usize) -> Workspace {
        let c = &self.weights.config;
        let max_batch = max_batch.max(1);
        let (s, hw, d, hd) = (c.crop_size, c.num_patches(), c.dim, c.mlp_hidden);
        let m = c.body_tokens();
        let rows = m.max(2 * HAND_TOKENS);
        Workspace {
            max_batch,
            crops: vec![0.0; max_batch * s * s * 3],
            patches: vec![0.0; max_batch * hw * c.patch_dim()],
            features: vec![0.0; max_batch * hw * d],
            enc_tmp: vec![0.0; max_batch * hw * d],
            enc_hidden: vec![0.0; max_batch * hw * hd],
            scratch: AttnScratch::new(hw.max(rows), hw.max(rows), d),
            body: TokenSequence::new(m, d),
            hand: TokenSequence::new(2 * HAND_TOKENS, d),
            h: vec![0.0; rows * d],
            tmp: vec![0.0; rows * d],
            hidden: vec![0.0; rows * hd],
            prompt_vec: vec![0.0; BODY_PROMPT_DIM.max(HAND_PROMPT_DIM)],
            prompt_out: vec![0.0; NUM_PROMPT_TOKENS * d],
            kv: vec![0.0; c.body_layers * 2 * hw * d],
            kv_slot: None,
            hand_kv: vec![0.0; 2 * 2 * hw * d],
            fk: JointTransforms::default(),
            mesh: vec![[0.0; 3]; self.template.num_vertices()],
            joints_cam: [[0.0; 3]; NUM_JOINTS],
            uv: [[0.0; 2]; NUM_JOINTS],
            kp2: [0.0; 2 * NUM_JOINTS],
            kp3: [0.0; 3 * NUM_JOINTS],
            head: [0.0; POSE_DIM],
            record: false,
            dumps: Vec::new(),
        }
    }

    /// Encodes the crops in slots `first..first + batch` in one pass. Each
    /// crop's features depend only on that crop.
    pub fn encode(
        &self,
        first: usize,
        batch: usize,
        ws: &mut Workspace,
        probe: &mut Probe,
    ) -> Result<()> {
        if batch == 0 || first + batch > ws.max_batch {
            return Err(shape_err!(
                "encoder slots {first}..{} outside 0..{}",
                first + batch,
                ws.max_batch
            ));
        }
        let c = &self.weights.config;
        let e = &self.weights.encoder;
        let k = self.ops.matmul;
        let (s, p, g, hw, d, pd) = (
            c.crop_size,
            c.patch_size,
            c.grid(),
            c.num_patches(),
            c.dim,
            c.patch_dim(),
        );
        let crop_len = s * s * 3;
        for b in first..first + batch {
            let crop = &ws.crops[b * crop_len..(b + 1) * crop_len];
            let out = &mut ws.patches[b * hw * pd..(b + 1) * hw * pd];
            for gy in 0..g {
                for gx in 0..g {
                    let dst = &mut out[(gy * g + gx) * pd..][..pd];
                    for dy in 0..p {
                        let src = ((gy * p + dy) * s + gx * p) * 3;
                        dst[dy * p * 3..(dy + 1) * p * 3].copy_from_slice(&crop[src..src + p * 3]);
                    }
                }
            }
        }
        let rows = first * hw..(first + batch) * hw;
        let n = batch * hw;
        let fr = rows.start * d..rows.end * d;
        let feats = &mut ws.features[fr.clone()];
        linear_into(
            k,
            &ws.patches[rows.start * pd..rows.end * pd],
            e.patch_w.data(),
            Some(&e.patch_b),
            feats,
            n,
            pd,
            d,
        );
        for f in feats.chunks_exact_mut(hw * d) {
            add_assign(f, e.pos.data());
        }
        for b in first..first + batch {
            let r = b * hw * d..(b + 1) * hw * d;
            let f = &ws.features[r.clone()];
            attention_into(
                k,
                &e.block.self_attn,
                f,
                hw,
                f,
                hw,
                None,
                &mut ws.scratch,
                &mut ws.enc_tmp[r],
            )?;
        }
        mlp_into(
            k,
            &e.block,
            &ws.enc_tmp[fr.clone()],
            n,
            &mut ws.enc_hidden,
            &mut ws.features[fr.clone()],
        );
        probe.encoder_calls += 1;
        probe.encoder_crops += batch;
        probe.last_batch = batch;
        if ws
            .kv_slot
            .is_some_and(|s| (first..first + batch).contains(&s))
        {
            ws.kv_slot = None;
        }
        if !all_finite(&ws.features[fr]) {
            return Err(Error::Numeric("non-finite encoder features".into()));
        }
        Ok(())
    }

    /// Runs the body decoder on the features in `slot`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_body(
        &self,
        slot: usize,
        prompt: &BodyPrompt,
        selection: LayerSelection,
        intrinsics: &CameraIntrinsics,
        image: (usize, usize),
        pass: Pass,
        ws: &mut Workspace,
        probe: &mut Probe,
    ) -> Result<BodyOutput> {
        let c = &self.weights.config;
        selection.validate(c.body_layers)?;
        if slot >= ws.max_batch {
            return Err(shape_err!("feature slot {slot} out of range"));
        }
        prompt.bbox.validate()?;
        let w = &self.weights.body;
        let k = self.ops.matmul;
        let (hw, d, m) = (c.num_patches(), c.dim, c.body_tokens());

        // Prompt vector: normalized box, crop-normalized keypoints, flag.
        let (iw, ih) = (image.0 as f32, image.1 as f32);
        let b = &prompt.bbox;
        let pv = &mut ws.prompt_vec[..BODY_PROMPT_DIM];
        pv[..4].copy_from_slice(&[b.x_min / iw, b.y_min / ih, b.x_max / iw, b.y_max / ih]);
        match &prompt.keypoints {
            Some(kp) => {
                for (j, uv) in kp.iter().enumerate() {
                    let n = crop_normalize(b, *uv);
                    pv[4 + 2 * j] = n[0];
                    pv[5 + 2 * j] = n[1];
                }
                pv[BODY_PROMPT_DIM - 1] = 1.0;
            }
            None => pv[4..].fill(0.0),
        }
        let seq = &mut ws.body;
        seq.tokens.copy_from_slice(w.init_tokens.data());
        linear_into(
            k,
            pv,
            w.prompt_w.data(),
            None,
            &mut ws.prompt_out,
            1,
            BODY_PROMPT_DIM,
            NUM_PROMPT_TOKENS * d,
        );
        add_assign(
            &mut seq.tokens[TOKEN_PROMPT * d..(TOKEN_PROMPT + NUM_PROMPT_TOKENS) * d],
            &ws.prompt_out,
        );
        seq.pos.fill(0.0);
        seq.pos_updated = None;

        let feats = &ws.features[slot * hw * d..(slot + 1) * hw * d];
        if !(self.ops.kv_cache && ws.kv_slot == Some(slot)) {
            for (l, layer) in w.layers.iter().enumerate() {
                let ca = layer
                    .cross_attn
                    .as_ref()
                    .expect("decoder layers cross-attend");
                let (kk, vv) = ws.kv[l * 2 * hw * d..(l + 1) * 2 * hw * d].split_at_mut(hw * d);
                project_kv(k, ca, feats, hw, kk, vv);
            }
            ws.kv_slot = self.ops.kv_cache.then_some(slot);
        }

        for (l, layer) in w.layers.iter().enumerate() {
            decoder_layer(
                k,
                layer,
                &mut ws.body.tokens,
                &ws.body.pos,
                1,
                m,
                &ws.kv[l * 2 * hw * d..(l + 1) * 2 * hw * d],
                hw,
                &mut ws.scratch,
                &mut ws.h,
                &mut ws.tmp,
                &mut ws.hidden,
            )?;
            if selection.contains(l) {
                self.intermediate_prediction(l, intrinsics, b, ws, probe)?;
            }
            if ws.record {
                ws.dumps.push(LayerDump {
                    pass,
                    layer: l,
                    pos_updated: ws.body.pos_updated,
                    tokens: ws.body.tokens.clone(),
                    pos: ws.body.pos.clone(),
                });
            }
        }
        probe.body_passes += 1;
        self.body_head(
            &ws.body.tokens[TOKEN_MHR * d..(TOKEN_MHR + 1) * d],
            &mut ws.head,
        )
    }

    fn body_head(&self, x0: &[f32], head: &mut [f32; POSE_DIM]) -> Result<BodyOutput> {
        let w = &self.weights.body;
        let k = self.ops.matmul;
        let d = self.weights.config.dim;
        linear_into(
            k,
            x0,
            w.head_params.data(),
            Some(&w.mean_params),
            head,
            1,
            d,
            POSE_DIM,
        );
        let params = PoseState::from_slice(head)?;
        let mut r = [0.0f32; 3];
        linear_into(k, x0, w.head_cam.data(), Some(&w.cam_bias), &mut r, 1, d, 3);
        let camera = [
            0.3 * r[1].tanh(),
            0.3 * r[2].tanh(),
            3.0 * (0.2 * r[0].tanh()).exp(),
        ];
        Ok(BodyOutput { params, camera })
    }

    /// Decode, pose, project and re-encode the keypoint positions.
    fn intermediate_prediction(
        &self,
        layer: usize,
        intrinsics: &CameraIntrinsics,
        bbox: &BBox,
        ws: &mut Workspace,
        probe: &mut Probe,
    ) -> Result<()> {
        let w = &self.weights.body;
        let k = self.ops.matmul;
        let d = self.weights.config.dim;
        let out = self.body_head(
            &ws.body.tokens[TOKEN_MHR * d..(TOKEN_MHR + 1) * d],
            &mut ws.head,
        )?;
        skin_into(
            &self.template,
            &out.params,
            self.use_correctives,
            self.ops.skin,
            self.ops.fk,
            &mut ws.fk,
            &mut ws.mesh,
        )?;
        probe.fk_calls += 1;
        for (c, p) in ws.joints_cam.iter_mut().zip(&ws.fk.positions) {
            *c = to_camera_frame(*p, out.camera);
        }
        project_into(intrinsics, &ws.joints_cam, &mut ws.uv)?;
        probe.projection_calls += 1;
        let pelvis = ws.fk.positions[0];
        for j in 0..NUM_JOINTS {
            let n = crop_normalize(bbox, ws.uv[j]);
            ws.kp2[2 * j..2 * j + 2].copy_from_slice(&n);
            let p = ws.fk.positions[j];
            for c in 0..3 {
                ws.kp3[3 * j + c] = p[c] - pelvis[c];
            }
        }
        let pos = &mut ws.body.pos;
        linear_into(
            k,
            &ws.kp2,
            w.phi2d_w.data(),
            Some(&w.phi2d_b),
            &mut pos[TOKEN_KP2D * d..(TOKEN_KP2D + NUM_JOINTS) * d],
            NUM_JOINTS,
            2,
            d,
        );
        linear_into(
            k,
            &ws.kp3,
            w.phi3d_w.data(),
            Some(&w.phi3d_b),
            &mut pos[TOKEN_KP3D * d..(TOKEN_KP3D + NUM_JOINTS) * d],
            NUM_JOINTS,
            3,
            d,
        );
        ws.body.pos_updated = Some(layer);
        probe.interm_preds += 1;
        Ok(())
    }

    /// Decodes up to two hands in one batched pass. `hands[i]` is the
    /// feature slot and crop box of hand `i`; `out[i]` receives its wrist-
    /// child rotation.
    pub fn decode_hands(
        &self,
        hands: &[(usize, BBox)],
        selection: LayerSelection,
        image: (usize, usize),
        ws: &mut Workspace,
        probe: &mut Probe,
        out: &mut [Vec3],
    ) -> Result<()> {
        let n = hands.len();
        if n == 0 {
            return Ok(());
        }
        if n > 2 || out.len() < n {
            return Err(shape_err!("hand batch of {n} with {} outputs", out.len()));
        }
        let c = &self.weights.config;
        selection.validate(c.hand_layers)?;
        let w = &self.weights.hand;
        let k = self.ops.matmul;
        let (hw, d) = (c.num_patches(), c.dim);
        let (iw, ih) = (image.0 as f32, image.1 as f32);
        let tl = HAND_TOKENS * d;
        for (g, (slot, b)) in hands.iter().enumerate() {
            if *slot >= ws.max_batch {
                return Err(shape_err!("feature slot {slot} out of range"));
            }
            b.validate()?;
            let pv = &mut ws.prompt_vec[..HAND_PROMPT_DIM];
            pv.copy_from_slice(&[b.x_min / iw, b.y_min / ih, b.x_max / iw, b.y_max / ih]);
            let toks = &mut ws.hand.tokens[g * tl..(g + 1) * tl];
            toks.copy_from_slice(w.init_tokens.data());
            linear_into(
                k,
                pv,
                w.prompt_w.data(),
                None,
                &mut ws.prompt_out,
                1,
                HAND_PROMPT_DIM,
                NUM_PROMPT_TOKENS * d,
            );
            add_assign(
                &mut toks[TOKEN_PROMPT * d..(TOKEN_PROMPT + NUM_PROMPT_TOKENS) * d],
                &ws.prompt_out,
            );
        }
        ws.hand.pos[..n * tl].fill(0.0);
        ws.hand.pos_updated = None;
        for (l, layer) in w.layers.iter().enumerate() {
            let ca = layer
                .cross_attn
                .as_ref()
                .expect("decoder layers cross-attend");
            for (g, (slot, _)) in hands.iter().enumerate() {
                let feats = &ws.features[slot * hw * d..(slot + 1) * hw * d];
                let (kk, vv) =
                    ws.hand_kv[g * 2 * hw * d..(g + 1) * 2 * hw * d].split_at_mut(hw * d);
                project_kv(k, ca, feats, hw, kk, vv);
            }
            decoder_layer(
                k,
                layer,
                &mut ws.hand.tokens[..n * tl],
                &ws.hand.pos[..n * tl],
                n,
                HAND_TOKENS,
                &ws.hand_kv,
                hw,
                &mut ws.scratch,
                &mut ws.h,
                &mut ws.tmp,
                &mut ws.hidden,
            )?;
            if selection.contains(l) {
                for g in 0..n {
                    let omega = self.hand_head(&ws.hand.tokens[g * tl..g * tl + d]);
                    let r = rodrigues(omega);
                    let axis = [r[0][0], r[1][0], r[2][0]];
                    let pos = &mut ws.hand.pos[g * tl..(g + 1) * tl];
                    let kp = &mut pos[HAND_TOKEN_KP * d..(HAND_TOKEN_KP + 2) * d];
                    let (p0, p1) = kp.split_at_mut(d);
                    linear_into(k, &omega, w.phi_w.data(), Some(&w.phi_b), p0, 1, 3, d);
                    linear_into(k, &axis, w.phi_w.data(), Some(&w.phi_b), p1, 1, 3, d);
                    probe.hand_interm_preds += 1;
                }
                ws.hand.pos_updated = Some(l);
            }
            if ws.record {
                ws.dumps.push(LayerDump {
                    pass: Pass::Hand,
                    layer: l,
                    pos_updated: ws.hand.pos_updated,
                    tokens: ws.hand.tokens[..n * tl].to_vec(),
                    pos: ws.hand.pos[..n * tl].to_vec(),
                });
            }
        }
        for (g, o) in out.iter_mut().take(n).enumerate() {
            *o = self.hand_head(&ws.hand.tokens[g * tl..g * tl + d]);
            if !o.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite hand rotation".into()));
            }
        }
        probe.hand_passes += 1;
        probe.hands_decoded += n;
        Ok(())
    }

    fn hand_head(&self, x0: &[f32]) -> Vec3 {
        let w = &self.weights.hand;
        let mut o = [0.0f32; 3];
        linear_into(
            self.ops.matmul,
            x0,
            w.head.data(),
            Some(&w.head_b),
            &mut o,
            1,
            self.weights.config.dim,
            3,
        );
        o
    }

    /// Image-space joints of `out`: FK of its parameters, projected with
    /// its camera.
    pub fn project_output(
        &self,
        out: &BodyOutput,
        intrinsics: &CameraIntrinsics,
        ws: &mut Workspace,
    ) -> Result<[[f32; 2]; NUM_JOINTS]> {
        forward_kinematics_into(&self.template, &out.params, self.ops.fk, &mut ws.fk)?;
        for (c, p) in ws.joints_cam.iter_mut().zip(&ws.fk.positions) {
            *c = to_camera_frame(*p, out.camera);
        }
        project_into(intrinsics, &ws.joints_cam, &mut ws.uv)?;
        Ok(ws.uv)
    }

    /// Keypoint prompt for the refinement pass: the joints of the merged
    /// prediction, posed and projected.
    pub fn refine_prompt(
        &self,
        merged: &BodyOutput,
        bbox: BBox,
        intrinsics: &CameraIntrinsics,
        ws: &mut Workspace,
        probe: &mut Probe,
    ) -> Result<BodyPrompt> {
        let keypoints = self.project_output(merged, intrinsics, ws)?;
        probe.refine_fk_calls += 1;
        probe.refine_projection_calls += 1;
        Ok(BodyPrompt {
            bbox,
            keypoints: Some(keypoints),
        })
    }
}

/// Overwrites the wrist-child rotations with hand-decoder outputs.
pub fn merge(body: &PoseState, left: Option<Vec3>, right: Option<Vec3>) -> PoseState {
    let mut out = *body;
    if let Some(l) = left {
        out.set_joint_rotation(HAND_JOINTS[0], l);
    }
    if let Some(r) = right {
        out.set_joint_rotation(HAND_JOINTS[1], r);
    }
    out
}

/// Maps an image point into the box's `[-1, 1]` frame.
fn crop_normalize(b: &BBox, uv: [f32; 2]) -> [f32; 2] {
    [
        2.0 * (uv[0] - b.x_min) / b.width() - 1.0,
        2.0 * (uv[1] - b.y_min) / b.height() - 1.0,
    ]
}

/// `out = LN(x + W2·gelu(W1·x + b1) + b2)` over `rows` rows.
fn mlp_into(
    k: MatmulKernel,
    blk: &Block,
    x: &[f32],
    rows: usize,
    hidden: &mut [f32],
    out: &mut [f32],
) {
    let (d, h) = (blk.mlp_w1.shape()[0], blk.mlp_w1.shape()[1]);
    let hidden = &mut hidden[..rows * h];
    linear_into(
        k,
        x,
        blk.mlp_w1.data(),
        Some(&blk.mlp_b1),
        hidden,
        rows,
        d,
        h,
    );
    gelu_in_place(hidden);
    let out = &mut out[..rows * d];
    linear_into(
        k,
        hidden,
        blk.mlp_w2.data(),
        Some(&blk.mlp_b2),
        out,
        rows,
        h,
        d,
    );
    add_assign(out, &x[..rows * d]);
    let n = &blk.mlp_norm;
    layer_norm_rows(out, &n.gamma, &n.beta, n.eps);
}

/// One post-norm decoder layer over `groups` independent token groups of
/// `m` rows. `kv` holds each group's cross-attention keys then values.
#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    k: MatmulKernel,
    blk: &Block,
    x: &mut [f32],
    pos: &[f32],
    groups: usize,
    m: usize,
    kv: &[f32],
    mk: usize,
    scratch: &mut AttnScratch,
    h: &mut [f32],
    tmp: &mut [f32],
    hidden: &mut [f32],
) -> Result<()> {
    let d = blk.self_attn.dim();
    let n = groups * m * d;
    for ((hv, xv), pv) in h[..n].iter_mut().zip(&x[..n]).zip(&pos[..n]) {
        *hv = xv + pv;
    }
    let ca = blk
        .cross_attn
        .as_ref()
        .expect("decoder layers cross-attend");
    for g in 0..groups {
        let r = g * m * d..(g + 1) * m * d;
        let hg = &h[r.clone()];
        attention_into(
            k,
            &blk.self_attn,
            hg,
            m,
            hg,
            m,
            None,
            scratch,
            &mut tmp[r.clone()],
        )?;
        let kvg = &kv[g * 2 * mk * d..(g + 1) * 2 * mk * d];
        attend_into(
            k,
            ca,
            &tmp[r.clone()],
            m,
            &kvg[..mk * d],
            &kvg[mk * d..],
            mk,
            None,
            scratch,
            &mut h[r],
        )?;
    }
    mlp_into(k, blk, &h[..n], groups * m, hidden, x);
    Ok(())
}

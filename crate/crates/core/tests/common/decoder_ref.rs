//! Ungated body decoder: every layer runs its intermediate prediction.
//! Written as a plain per-layer loop over freshly allocated arrays, with
//! no workspace, layer selection or key/value reuse.

use fsb_core::bodymodel::{
    forward_kinematics, project, to_camera_frame, BodyTemplate, CameraIntrinsics, FkKernel,
    PoseState, Vec3, NUM_JOINTS, POSE_DIM,
};
use fsb_core::decoder::{
    Block, ModelWeights, BODY_PROMPT_DIM, NUM_PROMPT_TOKENS, TOKEN_KP2D, TOKEN_KP3D, TOKEN_MHR,
    TOKEN_PROMPT,
};
use fsb_core::numkit::kernels::{gelu_in_place, layer_norm_rows};
use fsb_core::numkit::{attention_block, cross_attention_block, Array};
use fsb_core::priors::BBox;

/// Row-major `a[m×k] · b[k×n]`, one dot product per output.
pub fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn affine(x: &[f32], w: &Array, b: &[f32]) -> Vec<f32> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut y = mm(x, w.data(), x.len() / k, k, n);
    for row in y.chunks_mut(n) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

fn layer(blk: &Block, x: &[f32], pos: &[f32], feats: &Array, m: usize, d: usize) -> Vec<f32> {
    let h: Vec<f32> = x.iter().zip(pos).map(|(a, b)| a + b).collect();
    let h = Array::new(vec![m, d], h).unwrap();
    let a = attention_block(&h, &blk.self_attn).unwrap();
    let c = cross_attention_block(&a, feats, blk.cross_attn.as_ref().unwrap()).unwrap();
    let mut hidden = affine(c.data(), &blk.mlp_w1, &blk.mlp_b1);
    gelu_in_place(&mut hidden);
    let mut out = affine(&hidden, &blk.mlp_w2, &blk.mlp_b2);
    for (o, r) in out.iter_mut().zip(c.data()) {
        *o += r;
    }
    let n = &blk.mlp_norm;
    layer_norm_rows(&mut out, &n.gamma, &n.beta, n.eps);
    out
}

fn head(w: &ModelWeights, x0: &[f32]) -> (PoseState, Vec3) {
    let b = &w.body;
    let p = affine(x0, &b.head_params, &b.mean_params);
    let r = affine(x0, &b.head_cam, &b.cam_bias);
    let cam = [
        0.3 * r[1].tanh(),
        0.3 * r[2].tanh(),
        3.0 * (0.2 * r[0].tanh()).exp(),
    ];
    assert_eq!(p.len(), POSE_DIM);
    (PoseState::from_slice(&p).unwrap(), cam)
}

fn crop_norm(b: &BBox, uv: [f32; 2]) -> [f32; 2] {
    [
        2.0 * (uv[0] - b.x_min) / b.width() - 1.0,
        2.0 * (uv[1] - b.y_min) / b.height() - 1.0,
    ]
}

/// Image-space joints of a prediction.
pub fn joints_2d(
    t: &BodyTemplate,
    params: &PoseState,
    cam: Vec3,
    k: &CameraIntrinsics,
) -> Vec<[f32; 2]> {
    let fk = forward_kinematics(t, params, FkKernel::Generic).unwrap();
    let pts: Vec<Vec3> = fk
        .positions
        .iter()
        .map(|p| to_camera_frame(*p, cam))
        .collect();
    project(k, &pts).unwrap()
}

/// One body pass over the `h·w×D` features of the body crop.
#[allow(clippy::too_many_arguments)]
pub fn decode_body_ungated(
    w: &ModelWeights,
    t: &BodyTemplate,
    feats: &[f32],
    bbox: &BBox,
    keypoints: Option<&[[f32; 2]]>,
    k: &CameraIntrinsics,
    image: (usize, usize),
) -> (PoseState, Vec3) {
    let c = &w.config;
    let (d, m, hw) = (c.dim, c.body_tokens(), c.num_patches());
    let (iw, ih) = (image.0 as f32, image.1 as f32);
    let mut pv = vec![0.0f32; BODY_PROMPT_DIM];
    pv[..4].copy_from_slice(&[
        bbox.x_min / iw,
        bbox.y_min / ih,
        bbox.x_max / iw,
        bbox.y_max / ih,
    ]);
    if let Some(kp) = keypoints {
        for (j, uv) in kp.iter().enumerate() {
            let n = crop_norm(bbox, *uv);
            pv[4 + 2 * j] = n[0];
            pv[5 + 2 * j] = n[1];
        }
        pv[BODY_PROMPT_DIM - 1] = 1.0;
    }
    let mut x = w.body.init_tokens.data().to_vec();
    let off = mm(
        &pv,
        w.body.prompt_w.data(),
        1,
        BODY_PROMPT_DIM,
        NUM_PROMPT_TOKENS * d,
    );
    for (a, b) in x[TOKEN_PROMPT * d..].iter_mut().zip(&off) {
        *a += b;
    }
    let mut pos = vec![0.0f32; m * d];
    let feats = Array::new(vec![hw, d], feats.to_vec()).unwrap();
    for blk in &w.body.layers {
        x = layer(blk, &x, &pos, &feats, m, d);
        let (params, cam) = head(w, &x[TOKEN_MHR * d..(TOKEN_MHR + 1) * d]);
        let fk = forward_kinematics(t, &params, FkKernel::Generic).unwrap();
        let uv = joints_2d(t, &params, cam, k);
        let pelvis = fk.positions[0];
        let mut kp2 = Vec::with_capacity(2 * NUM_JOINTS);
        let mut kp3 = Vec::with_capacity(3 * NUM_JOINTS);
        for j in 0..NUM_JOINTS {
            kp2.extend(crop_norm(bbox, uv[j]));
            kp3.extend((0..3).map(|a| fk.positions[j][a] - pelvis[a]));
        }
        let e2 = affine(&kp2, &w.body.phi2d_w, &w.body.phi2d_b);
        let e3 = affine(&kp3, &w.body.phi3d_w, &w.body.phi3d_b);
        pos[TOKEN_KP2D * d..(TOKEN_KP2D + NUM_JOINTS) * d].copy_from_slice(&e2);
        pos[TOKEN_KP3D * d..(TOKEN_KP3D + NUM_JOINTS) * d].copy_from_slice(&e3);
    }
    head(w, &x[TOKEN_MHR * d..(TOKEN_MHR + 1) * d])
}

//! Topology bridge, fitting objective and projector training against
//! independent references.

use std::sync::{Arc, OnceLock};

use fsb_core::bodymodel::{
    skin, skin_backward, skin_forward, PoseSampler, SkinKernel, ToyModels, Vec3, POSE_DIM,
};
use fsb_core::numkit::{cosine_lr, Adam};
use fsb_core::projection::{
    bridge, precompute_bary, project_forward, train_projector, BaryMap, ConversionSet, FitConfig,
    ProjectorConfig, TrainConfig,
};

mod common;
use common::{grad, props};

fn toy() -> &'static ToyModels {
    common::toy()
}

fn smpl() -> Arc<fsb_core::bodymodel::BodyTemplate> {
    static T: OnceLock<Arc<fsb_core::bodymodel::BodyTemplate>> = OnceLock::new();
    T.get_or_init(|| Arc::new(toy().smpl.clone())).clone()
}

#[test]
fn fit_objective_gradient_matches_differences() {
    grad::fit_objective_suite().unwrap();
}

#[test]
fn conversion_loss_gradient_matches_differences() {
    grad::conversion_loss_suite().unwrap();
}

#[test]
fn precompute_recovers_ground_truth() {
    let t = toy();
    let map = precompute_bary(&t.mhr, &t.smpl).unwrap();
    assert_eq!(map.len(), t.smpl.num_vertices());
    assert!(map.degenerate_rows().is_empty());
    let got = bridge(t.mhr.vertices_rest(), &map).unwrap();
    let want = bridge(t.mhr.vertices_rest(), &t.ground_truth).unwrap();
    for ((g, w), r) in got.iter().zip(&want).zip(t.smpl.vertices_rest()) {
        for k in 0..3 {
            assert!((g[k] - w[k]).abs() < 1e-5);
            assert!((g[k] - r[k]).abs() < 1e-5);
        }
    }
    // Posed meshes bridge to the same points as well, so the recovered
    // faces carry the same surface points.
    let mesh = skin(
        &t.mhr,
        &PoseSampler::new(1).sample(),
        true,
        SkinKernel::Sparse,
    )
    .unwrap();
    let (a, b) = (
        bridge(&mesh, &map).unwrap(),
        bridge(&mesh, &t.ground_truth).unwrap(),
    );
    for (g, w) in a.iter().zip(&b) {
        for k in 0..3 {
            assert!((g[k] - w[k]).abs() < 1e-4);
        }
    }
}

#[test]
fn self_map_is_identity() {
    let t = toy();
    let map = precompute_bary(&t.smpl, &t.smpl).unwrap();
    for (v, (c, w)) in map.corners().iter().zip(map.weights()).enumerate() {
        let k = c
            .iter()
            .position(|&i| i as usize == v)
            .expect("vertex is a corner of its face");
        assert_eq!(w[k], 1.0);
    }
    assert_eq!(
        bridge(t.smpl.vertices_rest(), &map).unwrap(),
        t.smpl.vertices_rest()
    );
}

#[test]
fn bary_rows_are_convex() {
    props::bary_rows_convex().unwrap();
}

#[test]
fn bridge_is_linear() {
    props::bridge_linearity().unwrap();
}

#[test]
fn projector_is_translation_invariant() {
    props::projector_translation_invariance().unwrap();
}

#[test]
fn arbitrary_translation_moves_output_only_at_rounding_level() {
    let t = toy();
    let mesh = skin(
        &t.mhr,
        &PoseSampler::new(2).sample(),
        true,
        SkinKernel::Sparse,
    )
    .unwrap();
    let moved: Vec<Vec3> = mesh
        .iter()
        .map(|v| [v[0] + 0.137, v[1] - 1.91, v[2] + 0.003])
        .collect();
    let w = props::projector();
    let a = project_forward(&mesh, &t.ground_truth, w).unwrap();
    let b = project_forward(&moved, &t.ground_truth, w).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-4);
}

fn conversion_set(n: usize, seed: u64) -> ConversionSet {
    let t = toy();
    ConversionSet::generate(
        &t.mhr,
        &t.smpl,
        &t.ground_truth,
        n,
        seed,
        &FitConfig::default(),
    )
    .unwrap()
}

/// Irreducible L1 vertex loss for one pair: the minimum over parameters of
/// `λ_v‖V(Θ) − Ṽ‖₁`, found by optimizing Θ directly from the fit.
fn bridge_floor(set: &ConversionSet, map: &BaryMap, lambda_v: f32) -> f32 {
    let t = toy();
    let target = bridge(&set.meshes[0], map).unwrap();
    let l1 = |v: &[Vec3]| -> f32 {
        v.iter()
            .zip(&target)
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f32>())
            .sum()
    };
    let mut pose = set.fitted[0];
    pose.clear_hand_joints();
    let mut adam = Adam::new(POSE_DIM);
    let mut best = f32::INFINITY;
    let steps = 4000;
    for step in 0..steps {
        let fwd = skin_forward(&t.smpl, &pose, true, SkinKernel::Sparse).unwrap();
        best = best.min(l1(&fwd.vertices));
        let dv: Vec<Vec3> = fwd
            .vertices
            .iter()
            .zip(&target)
            .map(|(a, b)| [0, 1, 2].map(|k| (a[k] - b[k]).signum()))
            .collect();
        let g = skin_backward(&t.smpl, &pose, &fwd, &dv, None, true).unwrap();
        adam.step(pose.as_mut_slice(), &g, cosine_lr(1e-2, step, steps, 0.001));
        pose.clear_hand_joints();
    }
    lambda_v * best
}

#[test]
fn single_pair_is_memorized() {
    let t = toy();
    let set = conversion_set(1, 77);
    let cfg = TrainConfig {
        epochs: 6000,
        lr: 1e-2,
        batch: 1,
        lambda_reg: 0.0,
        // Fixed inputs: augmentation would change the pair every step.
        augment_rotation: 0.0,
        ..TrainConfig::default()
    };
    let out = train_projector(
        &set,
        &set,
        &t.ground_truth,
        &smpl(),
        ProjectorConfig::default(),
        &cfg,
    )
    .unwrap();
    let floor = bridge_floor(&set, &t.ground_truth, cfg.lambda_v);
    let last = out.curve.last().unwrap().train_loss;
    assert!(
        (last - floor).abs() <= 0.05 * floor,
        "final loss {last}, floor {floor}"
    );
}

#[test]
fn parameter_regression_improves_monotonically() {
    let t = toy();
    let (train, heldout) = conversion_set(150, 78).split_tail(30).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        batch: 16,
        lambda_v: 0.0,
        lambda_reg: 1.0,
        ..TrainConfig::default()
    };
    let out = train_projector(
        &train,
        &heldout,
        &t.ground_truth,
        &smpl(),
        ProjectorConfig::default(),
        &cfg,
    )
    .unwrap();
    let mse: Vec<f32> = out.curve.iter().map(|e| e.heldout_param_mse).collect();
    let mut best = f32::INFINITY;
    for (e, &m) in mse.iter().enumerate() {
        assert!(
            m <= 1.10 * best,
            "epoch {e}: {m} above the running best {best}"
        );
        best = best.min(m);
    }
    assert!(mse[mse.len() - 1] < mse[0], "{mse:?}");
}

//! Forward kinematics and skinning against an f64 homogeneous-matrix
//! reference, plus structural properties over random poses.

use fsb_core::bodymodel::{
    forward_kinematics, rodrigues, rotation_log, skin, skin_into, BodyTemplate, FkKernel,
    JointTransforms, PoseSampler, PoseState, SkinKernel, Vec3, NUM_JOINTS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{fk_oracle, pose64, props, rot64, skin_oracle, to64};

fn models() -> (&'static BodyTemplate, &'static BodyTemplate) {
    let t = common::toy();
    (&t.mhr, &t.smpl)
}

#[test]
fn fk_matches_homogeneous_chain() {
    let (mhr, _) = models();
    let mut s = PoseSampler::new(11);
    for _ in 0..20 {
        let pose = s.sample();
        let fk = forward_kinematics(mhr, &pose, FkKernel::Inline).unwrap();
        let g = fk_oracle(mhr, &pose64(&pose));
        for j in 0..NUM_JOINTS {
            for r in 0..3 {
                assert!((fk.positions[j][r] as f64 - g[j][r][3]).abs() < 1e-5);
                for c in 0..3 {
                    assert!((fk.rotations[j][r][c] as f64 - g[j][r][c]).abs() < 1e-5);
                }
            }
        }
        let generic = forward_kinematics(mhr, &pose, FkKernel::Generic).unwrap();
        assert_eq!(generic, fk);
    }
}

#[test]
fn skinning_matches_reference() {
    let (mhr, smpl) = models();
    let mut s = PoseSampler::new(12);
    for t in [mhr, smpl] {
        for _ in 0..10 {
            let pose = s.sample();
            for corr in [false, true] {
                let got = skin(t, &pose, corr, SkinKernel::Sparse).unwrap();
                let want = skin_oracle(t, &pose64(&pose), corr);
                let err = got
                    .iter()
                    .zip(&want)
                    .flat_map(|(g, w)| (0..3).map(move |c| (g[c] as f64 - w[c]).abs()))
                    .fold(0.0, f64::max);
                assert!(err < 1e-5, "{} corr={corr}: {err}", t.name());
                let dense = skin(t, &pose, corr, SkinKernel::Dense).unwrap();
                assert_eq!(dense, got);
            }
        }
    }
}

#[test]
fn rest_pose_returns_rest_mesh() {
    let (mhr, _) = models();
    let out = skin(mhr, &PoseState::zeros(), true, SkinKernel::Sparse).unwrap();
    assert_eq!(out, mhr.vertices_rest());
}

#[test]
fn skin_into_matches_skin() {
    let (mhr, _) = models();
    let pose = PoseSampler::new(3).sample();
    let mut fk = JointTransforms::default();
    let mut out = vec![[0.0; 3]; mhr.num_vertices()];
    skin_into(
        mhr,
        &pose,
        true,
        SkinKernel::Dense,
        FkKernel::Generic,
        &mut fk,
        &mut out,
    )
    .unwrap();
    assert_eq!(out, skin(mhr, &pose, true, SkinKernel::Sparse).unwrap());
    let mut short = vec![[0.0; 3]; 3];
    assert!(skin_into(
        mhr,
        &pose,
        true,
        SkinKernel::Dense,
        FkKernel::Inline,
        &mut fk,
        &mut short
    )
    .is_err());
}

#[test]
fn skin_backward_matches_reference_differences() {
    common::grad::skin_backward_suite().unwrap();
}

#[test]
fn rotation_log_inverts_rodrigues() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let mut w: Vec3 = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let target = rng.gen_range(0.0..3.0f32);
        w = w.map(|x| x / n * target);
        let back = rotation_log(&rodrigues(w));
        for c in 0..3 {
            assert!((back[c] - w[c]).abs() < 1e-4, "{w:?} -> {back:?}");
        }
        let r = rodrigues(w);
        let want = rot64(to64(w));
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] as f64 - want[i][j]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn skin_weight_rows_sum_to_one() {
    props::skin_weight_rows().unwrap();
}

#[test]
fn fk_is_a_rigid_composition() {
    props::fk_rigid_composition().unwrap();
}

#[test]
fn global_rotation_rotates_whole_mesh() {
    props::global_rotation().unwrap();
}

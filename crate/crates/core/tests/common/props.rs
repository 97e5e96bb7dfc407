//! Randomized geometry properties, 128 cases each.

use std::sync::OnceLock;

use fsb_core::bodymodel::{
    forward_kinematics, make_toy_models, rodrigues, skin, FkKernel, PoseSampler, PoseState,
    SkinKernel, ToySizes, Vec3, HAND_JOINTS, NUM_JOINTS, NUM_SHAPE, SHAPE_OFFSET,
};
use fsb_core::projection::{
    bridge, precompute_bary, project_forward, ProjectorConfig, ProjectorWeights,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::toy;

pub const CASES: u32 = 128;

fn check<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// Skin-weight rows are nonnegative and sum to one on random toy models.
pub fn skin_weight_rows() -> Result<(), String> {
    check(
        (0u64..10_000, 700usize..1400, 320usize..650),
        |(seed, nv, ns)| {
            let m = make_toy_models(
                seed,
                ToySizes {
                    mhr_vertices: nv,
                    smpl_vertices: ns,
                },
            )
            .unwrap();
            for t in [&m.mhr, &m.smpl] {
                for row in t.skin_weights().chunks(NUM_JOINTS) {
                    let s: f64 = row.iter().map(|&w| w as f64).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-5);
                    prop_assert!(row.iter().all(|&w| w >= 0.0));
                }
            }
            Ok(())
        },
    )
}

fn det(m: &[[f32; 3]; 3]) -> f32 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn pose_strategy() -> impl Strategy<Value = PoseState> {
    (
        prop::collection::vec(-1.5f32..1.5, SHAPE_OFFSET),
        prop::collection::vec(-2.0f32..2.0, NUM_SHAPE),
    )
        .prop_map(|(rot, shape)| {
            let mut v = rot;
            v.extend(shape);
            PoseState::from_slice(&v).unwrap()
        })
}

/// Joint frames are rotations composed parent to child, and bones are
/// carried rigidly.
pub fn fk_rigid_composition() -> Result<(), String> {
    check(pose_strategy(), |pose| {
        let mhr = &toy().mhr;
        let fk = forward_kinematics(mhr, &pose, FkKernel::Inline).unwrap();
        let rest = mhr.joints_rest();
        for j in 0..NUM_JOINTS {
            let q = &fk.rotations[j];
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f32 = (0..3).map(|k| q[k][a] * q[k][b]).sum();
                    prop_assert!((dot - (a == b) as u8 as f32).abs() < 1e-5);
                }
            }
            prop_assert!((det(q) - 1.0).abs() < 1e-5);
            if let Some(p) = mhr.parents()[j] {
                let qp = &fk.rotations[p];
                for a in 0..3 {
                    // Q_j = Q_parent · R_j.
                    for b in 0..3 {
                        let want: f32 = (0..3).map(|k| qp[a][k] * fk.local[j][k][b]).sum();
                        prop_assert!((q[a][b] - want).abs() < 1e-5);
                    }
                    // The bone is carried rigidly by the parent.
                    let bone: f32 = (0..3).map(|k| qp[a][k] * (rest[j][k] - rest[p][k])).sum();
                    prop_assert!((fk.positions[j][a] - fk.positions[p][a] - bone).abs() < 1e-4);
                }
            }
            // A rest-space joint lands on its posed position.
            for a in 0..3 {
                let moved: f32 =
                    (0..3).map(|k| q[a][k] * rest[j][k]).sum::<f32>() + fk.translations[j][a];
                prop_assert!((moved - fk.positions[j][a]).abs() < 1e-4);
            }
        }
        Ok(())
    })
}

/// Rotating only the root turns every vertex about the pelvis.
pub fn global_rotation() -> Result<(), String> {
    check(prop::array::uniform3(-2.0f32..2.0), |w| {
        let mhr = &toy().mhr;
        let mut pose = PoseState::zeros();
        pose.set_joint_rotation(0, w);
        let out = skin(mhr, &pose, false, SkinKernel::Sparse).unwrap();
        let r = rodrigues(w);
        let c = mhr.joints_rest()[0];
        for (v, o) in mhr.vertices_rest().iter().zip(&out) {
            for a in 0..3 {
                let want: f32 = c[a] + (0..3).map(|k| r[a][k] * (v[k] - c[k])).sum::<f32>();
                prop_assert!((o[a] - want).abs() < 1e-4);
            }
        }
        Ok(())
    })
}

/// Computed and ground-truth correspondences are convex combinations of
/// valid source triangles.
pub fn bary_rows_convex() -> Result<(), String> {
    check(
        (0u64..1_000_000, 420usize..700, 320usize..410),
        |(seed, nv, ns)| {
            let m = make_toy_models(
                seed,
                ToySizes {
                    mhr_vertices: nv,
                    smpl_vertices: ns,
                },
            )
            .unwrap();
            let map = precompute_bary(&m.mhr, &m.smpl).unwrap();
            for maps in [&map, &m.ground_truth] {
                for (w, f) in maps.weights().iter().zip(maps.faces()) {
                    let s: f64 = w.iter().map(|&x| x as f64).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                    prop_assert!(w.iter().all(|&x| x >= 0.0));
                    prop_assert!((*f as usize) < m.mhr.faces().len());
                }
            }
            Ok(())
        },
    )
}

/// `bridge(a·u + b·w) = a·bridge(u) + b·bridge(w)`.
pub fn bridge_linearity() -> Result<(), String> {
    check(
        (any::<u64>(), -3.0f32..3.0, -3.0f32..3.0),
        |(seed, a, b)| {
            let t = toy();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = t.mhr.num_vertices();
            let mut draw = || -> Vec<Vec3> {
                (0..n)
                    .map(|_| [0; 3].map(|_| rng.gen_range(-1.0f32..1.0)))
                    .collect()
            };
            let (u, w) = (draw(), draw());
            let mix: Vec<Vec3> = u
                .iter()
                .zip(&w)
                .map(|(p, q)| [0, 1, 2].map(|k| a * p[k] + b * q[k]))
                .collect();
            let lhs = bridge(&mix, &t.ground_truth).unwrap();
            let bu = bridge(&u, &t.ground_truth).unwrap();
            let bw = bridge(&w, &t.ground_truth).unwrap();
            for ((l, p), q) in lhs.iter().zip(&bu).zip(&bw) {
                for k in 0..3 {
                    prop_assert!((l[k] - (a * p[k] + b * q[k])).abs() <= 1e-5);
                }
            }
            Ok(())
        },
    )
}

/// Untrained projector with distinct output biases, so hand slots would
/// be nonzero if they were not cleared.
pub fn projector() -> &'static ProjectorWeights {
    static W: OnceLock<ProjectorWeights> = OnceLock::new();
    W.get_or_init(|| {
        let mut w =
            ProjectorWeights::init(ProjectorConfig::default(), toy().smpl.num_vertices(), 5)
                .unwrap();
        w.layers[2]
            .b
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = 0.01 * i as f32);
        w
    })
}

fn lattice(rng: &mut ChaCha8Rng, v: Vec3) -> Vec3 {
    v.map(|x| ((x * 64.0).round() + rng.gen_range(-4..=4) as f32) / 64.0)
}

/// Shifting the source mesh leaves the projector output bit-identical, and
/// the wrist-child slots are zero.
pub fn projector_translation_invariance() -> Result<(), String> {
    check(
        (any::<u64>(), prop::array::uniform3(-256i32..=256)),
        |(seed, shift)| {
            // Coordinates and shifts on a 1/64 grid keep every centering sum
            // exact.
            let t = toy();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = PoseSampler::new(seed).sample();
            let mesh: Vec<Vec3> = skin(&t.mhr, &pose, true, SkinKernel::Sparse)
                .unwrap()
                .into_iter()
                .map(|v| lattice(&mut rng, v))
                .collect();
            let d = shift.map(|s| s as f32 / 64.0);
            let moved: Vec<Vec3> = mesh
                .iter()
                .map(|v| [v[0] + d[0], v[1] + d[1], v[2] + d[2]])
                .collect();
            let w = projector();
            let a = project_forward(&mesh, &t.ground_truth, w).unwrap();
            let b = project_forward(&moved, &t.ground_truth, w).unwrap();
            prop_assert!(a.bit_eq(&b));
            for j in HAND_JOINTS {
                prop_assert_eq!(a.joint_rotation(j), [0.0; 3]);
            }
            Ok(())
        },
    )
}

/// Every property suite, by name.
pub const SUITES: &[(&str, fn() -> Result<(), String>)] = &[
    ("bary row sums", bary_rows_convex),
    ("bridge linearity", bridge_linearity),
    (
        "projector translation invariance",
        projector_translation_invariance,
    ),
    ("skin-weight row sums", skin_weight_rows),
    ("fk rigid composition", fk_rigid_composition),
    ("global rotation", global_rotation),
];

//! Reference implementations shared by the integration tests.

#![allow(dead_code)]

pub mod decoder_ref;
pub mod grad;
pub mod props;

use std::sync::OnceLock;

use fsb_core::bodymodel::{
    make_toy_models, BodyTemplate, PoseState, ToyModels, ToySizes, Vec3, NUM_JOINTS, NUM_SHAPE,
    SHAPE_OFFSET,
};

/// Default-size toy models, seed 0.
pub fn toy() -> &'static ToyModels {
    static M: OnceLock<ToyModels> = OnceLock::new();
    M.get_or_init(|| make_toy_models(0, ToySizes::default()).unwrap())
}

pub type M4 = [[f64; 4]; 4];

pub fn rot64(w: [f64; 3]) -> [[f64; 3]; 3] {
    let t = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if t == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [w[0] / t, w[1] / t, w[2] / t];
    let (s, c) = t.sin_cos();
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = c * (i == j) as u8 as f64 + (1.0 - c) * k[i] * k[j];
        }
    }
    r[0][1] -= s * k[2];
    r[0][2] += s * k[1];
    r[1][0] += s * k[2];
    r[1][2] -= s * k[0];
    r[2][0] -= s * k[1];
    r[2][1] += s * k[0];
    r
}

pub fn m4(r: [[f64; 3]; 3], t: [f64; 3]) -> M4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&r[i]);
        m[i][3] = t[i];
    }
    m[3][3] = 1.0;
    m
}

pub fn mul4(a: &M4, b: &M4) -> M4 {
    let mut o = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            o[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

pub fn apply(m: &M4, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
}

pub fn joint_w(pose: &[f64], j: usize) -> [f64; 3] {
    [pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]
}

pub fn to64(v: Vec3) -> [f64; 3] {
    v.map(|x| x as f64)
}

/// Global joint transforms `G_j = G_parent · [R_j | J_j − J_parent]`.
pub fn fk_oracle(t: &BodyTemplate, pose: &[f64]) -> Vec<M4> {
    let rest: Vec<[f64; 3]> = t.joints_rest().iter().map(|&j| to64(j)).collect();
    let mut g: Vec<M4> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let r = rot64(joint_w(pose, j));
        g.push(match t.parents()[j] {
            None => m4(r, rest[j]),
            Some(p) => {
                let off = [
                    rest[j][0] - rest[p][0],
                    rest[j][1] - rest[p][1],
                    rest[j][2] - rest[p][2],
                ];
                mul4(&g[p], &m4(r, off))
            }
        });
    }
    g
}

/// Textbook LBS: each joint maps a shaped rest vertex through
/// `G_j · translate(−J_j)`.
pub fn skin_oracle(t: &BodyTemplate, pose: &[f64], correctives: bool) -> Vec<[f64; 3]> {
    let g = fk_oracle(t, pose);
    let rest_j: Vec<[f64; 3]> = t.joints_rest().iter().map(|&j| to64(j)).collect();
    let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let a: Vec<M4> = (0..NUM_JOINTS)
        .map(|j| mul4(&g[j], &m4(id, rest_j[j].map(|x| -x))))
        .collect();
    let beta = &pose[SHAPE_OFFSET..];
    let corr = t.correctives().filter(|_| correctives);
    (0..t.num_vertices())
        .map(|v| {
            let mut u = to64(t.vertices_rest()[v]);
            for c in 0..3 {
                for k in 0..NUM_SHAPE {
                    u[c] += t.shape_basis()[(v * 3 + c) * NUM_SHAPE + k] as f64 * beta[k];
                }
                if let Some(cr) = corr {
                    let nc = cr.count();
                    for (i, &j) in cr.joints.iter().enumerate() {
                        let w = joint_w(pose, j);
                        let gate = cr.scale as f64 * (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
                        u[c] += gate * cr.basis[(v * 3 + c) * nc + i] as f64;
                    }
                }
            }
            let mut out = [0.0; 3];
            for j in 0..NUM_JOINTS {
                let w = t.skin_weights()[v * NUM_JOINTS + j] as f64;
                if w != 0.0 {
                    let p = apply(&a[j], u);
                    for c in 0..3 {
                        out[c] += w * p[c];
                    }
                }
            }
            out
        })
        .collect()
}

pub fn pose64(p: &PoseState) -> Vec<f64> {
    p.as_slice().iter().map(|&x| x as f64).collect()
}

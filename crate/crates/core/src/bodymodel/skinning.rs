//! Linear blend skinning in displacement form:
//! `v' = u + Σ_j w_j ((Q_j − I) u + t_j)`, where `u` is the shaped rest
//! vertex. With rows summing to one this is ordinary LBS, and it returns the
//! rest mesh exactly when every transform is the identity.

use super::kinematics::{
    forward_kinematics_into, mat_t_vec, minus_identity, FkKernel, JointTransforms, Mat3,
};
use super::{BodyTemplate, PoseState, Vec3, NUM_JOINTS, NUM_SHAPE, POSE_DIM, SHAPE_OFFSET};
use crate::error::{shape_err, Result};

/// Weight traversal. `Dense` walks the full `N_v×N_j` matrix as a standard
/// LBS matmul would; `Sparse` skips zero weights. Both produce identical
/// bits because skipped terms are exact zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SkinKernel {
    Dense,
    #[default]
    Sparse,
}

/// Forward state kept for [`skin_backward`].
#[derive(Clone, Debug)]
pub struct SkinForward {
    pub vertices: Vec<Vec3>,
    pub fk: JointTransforms,
    shaped: Vec<Vec3>,
}

/// Posed mesh for `pose`.
pub fn skin(
    template: &BodyTemplate,
    pose: &PoseState,
    use_correctives: bool,
    kernel: SkinKernel,
) -> Result<Vec<Vec3>> {
    Ok(skin_forward(template, pose, use_correctives, kernel)?.vertices)
}

pub fn skin_forward(
    template: &BodyTemplate,
    pose: &PoseState,
    use_correctives: bool,
    kernel: SkinKernel,
) -> Result<SkinForward> {
    let n = template.num_vertices();
    let mut fk = JointTransforms::default();
    let mut vertices = vec![[0.0; 3]; n];
    let mut shaped = vec![[0.0; 3]; n];
    skin_impl(
        template,
        pose,
        use_correctives,
        kernel,
        FkKernel::Inline,
        &mut fk,
        &mut vertices,
        Some(&mut shaped),
    )?;
    Ok(SkinForward {
        vertices,
        fk,
        shaped,
    })
}

/// Allocation-free skinning into caller buffers.
pub fn skin_into(
    template: &BodyTemplate,
    pose: &PoseState,
    use_correctives: bool,
    kernel: SkinKernel,
    fk_kernel: FkKernel,
    fk: &mut JointTransforms,
    out: &mut [Vec3],
) -> Result<()> {
    skin_impl(
        template,
        pose,
        use_correctives,
        kernel,
        fk_kernel,
        fk,
        out,
        None,
    )
}

fn corrective_gates(template: &BodyTemplate, pose: &PoseState, on: bool) -> [f32; 16] {
    let mut gates = [0.0f32; 16];
    if let (true, Some(c)) = (on, template.correctives()) {
        for (g, &j) in gates.iter_mut().zip(&c.joints) {
            let w = pose.joint_rotation(j);
            *g = c.scale * (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
        }
    }
    gates
}

#[inline]
fn shaped_vertex(
    template: &BodyTemplate,
    v: usize,
    beta: &[f32],
    gates: &[f32],
    nc: usize,
) -> Vec3 {
    let rest = template.vertices_rest()[v];
    let basis = &template.shape_basis()[v * 3 * NUM_SHAPE..(v + 1) * 3 * NUM_SHAPE];
    let mut u = [0.0f32; 3];
    for c in 0..3 {
        let row = &basis[c * NUM_SHAPE..(c + 1) * NUM_SHAPE];
        let mut s = 0.0f32;
        for k in 0..NUM_SHAPE {
            s += row[k] * beta[k];
        }
        if nc > 0 {
            let corr = &template.correctives().expect("gated").basis[(v * 3 + c) * nc..][..nc];
            for i in 0..nc {
                s += gates[i] * corr[i];
            }
        }
        u[c] = rest[c] + s;
    }
    u
}

#[inline]
fn displace(a: &Mat3, t: Vec3, u: Vec3, w: f32, d: &mut Vec3) {
    for r in 0..3 {
        let e = ((a[r][0] * u[0] + a[r][1] * u[1]) + a[r][2] * u[2]) + t[r];
        d[r] += w * e;
    }
}

#[allow(clippy::too_many_arguments)]
fn skin_impl(
    template: &BodyTemplate,
    pose: &PoseState,
    use_correctives: bool,
    kernel: SkinKernel,
    fk_kernel: FkKernel,
    fk: &mut JointTransforms,
    out: &mut [Vec3],
    mut shaped_out: Option<&mut Vec<Vec3>>,
) -> Result<()> {
    let n = template.num_vertices();
    if out.len() != n {
        return Err(shape_err!(
            "output holds {} vertices, template {n}",
            out.len()
        ));
    }
    forward_kinematics_into(template, pose, fk_kernel, fk)?;
    let a: [Mat3; NUM_JOINTS] = std::array::from_fn(|j| minus_identity(&fk.rotations[j]));
    let gates = corrective_gates(template, pose, use_correctives);
    let nc = if use_correctives {
        template.correctives().map_or(0, |c| c.count())
    } else {
        0
    };
    let beta = pose.shape();
    let dense = template.skin_weights();
    let sparse = template.sparse_weights();
    for v in 0..n {
        let u = shaped_vertex(template, v, beta, &gates, nc);
        if let Some(s) = shaped_out.as_deref_mut() {
            s[v] = u;
        }
        let mut d = [0.0f32; 3];
        match kernel {
            SkinKernel::Dense => {
                let row = &dense[v * NUM_JOINTS..(v + 1) * NUM_JOINTS];
                for j in 0..NUM_JOINTS {
                    displace(&a[j], fk.translations[j], u, row[j], &mut d);
                }
            }
            SkinKernel::Sparse => {
                let (lo, hi) = (sparse.offsets[v] as usize, sparse.offsets[v + 1] as usize);
                for e in lo..hi {
                    let j = sparse.joints[e] as usize;
                    displace(&a[j], fk.translations[j], u, sparse.weights[e], &mut d);
                }
            }
        }
        out[v] = [u[0] + d[0], u[1] + d[1], u[2] + d[2]];
    }
    Ok(())
}

/// Vector-Jacobian product of skinning (and optionally of the posed joint
/// positions) with respect to the full pose vector.
pub fn skin_backward(
    template: &BodyTemplate,
    pose: &PoseState,
    fwd: &SkinForward,
    d_vertices: &[Vec3],
    d_joints: Option<&[Vec3]>,
    use_correctives: bool,
) -> Result<[f32; POSE_DIM]> {
    let n = template.num_vertices();
    if d_vertices.len() != n {
        return Err(shape_err!(
            "vertex gradient holds {} rows, template {n}",
            d_vertices.len()
        ));
    }
    let fk = &fwd.fk;
    let sparse = template.sparse_weights();
    let mut dq = [[[0.0f32; 3]; 3]; NUM_JOINTS];
    let mut dp = [[0.0f32; 3]; NUM_JOINTS];
    let mut du = vec![[0.0f32; 3]; n];
    for v in 0..n {
        let g = d_vertices[v];
        let u = fwd.shaped[v];
        let mut gu = g;
        let (lo, hi) = (sparse.offsets[v] as usize, sparse.offsets[v + 1] as usize);
        for e in lo..hi {
            let j = sparse.joints[e] as usize;
            let w = sparse.weights[e];
            let gw = [w * g[0], w * g[1], w * g[2]];
            for r in 0..3 {
                for c in 0..3 {
                    dq[j][r][c] += gw[r] * u[c];
                }
                dp[j][r] += gw[r];
            }
            // (Q − I)ᵀ g contribution to the shaped vertex.
            let qt = mat_t_vec(&fk.rotations[j], gw);
            for c in 0..3 {
                gu[c] += qt[c] - gw[c];
            }
        }
        du[v] = gu;
    }
    // Up to here `dp` holds dL/dt; t_j = p_j − Q_j J_j.
    let rest = template.joints_rest();
    for j in 0..NUM_JOINTS {
        for r in 0..3 {
            for c in 0..3 {
                dq[j][r][c] -= dp[j][r] * rest[j][c];
            }
        }
    }
    if let Some(dj) = d_joints {
        if dj.len() != NUM_JOINTS {
            return Err(shape_err!("joint gradient must have {NUM_JOINTS} rows"));
        }
        for j in 0..NUM_JOINTS {
            for r in 0..3 {
                dp[j][r] += dj[j][r];
            }
        }
    }
    let mut grad = [0.0f32; POSE_DIM];
    let parents = template.parents();
    for j in (0..NUM_JOINTS).rev() {
        let dr = match parents[j] {
            None => dq[j],
            Some(p) => {
                let qp = fk.rotations[p];
                let rj = fk.local[j];
                let mut dr = [[0.0f32; 3]; 3];
                let mut dqp = [[0.0f32; 3]; 3];
                for r in 0..3 {
                    for c in 0..3 {
                        for k in 0..3 {
                            dr[r][c] += qp[k][r] * dq[j][k][c];
                            dqp[r][c] += dq[j][r][k] * rj[c][k];
                        }
                    }
                }
                let off = [
                    rest[j][0] - rest[p][0],
                    rest[j][1] - rest[p][1],
                    rest[j][2] - rest[p][2],
                ];
                for r in 0..3 {
                    for c in 0..3 {
                        dq[p][r][c] += dqp[r][c] + dp[j][r] * off[c];
                    }
                    dp[p][r] += dp[j][r];
                }
                dr
            }
        };
        let w = pose.joint_rotation(j);
        let gw = super::kinematics::rodrigues_vjp(w, &fk.coeffs[j], &dr);
        grad[3 * j..3 * j + 3].copy_from_slice(&gw);
    }
    let basis = template.shape_basis();
    for v in 0..n {
        for c in 0..3 {
            let row = &basis[(v * 3 + c) * NUM_SHAPE..][..NUM_SHAPE];
            for k in 0..NUM_SHAPE {
                grad[SHAPE_OFFSET + k] += du[v][c] * row[k];
            }
        }
    }
    if use_correctives {
        if let Some(corr) = template.correctives() {
            let nc = corr.count();
            for (i, &j) in corr.joints.iter().enumerate() {
                let mut dg = 0.0f32;
                for v in 0..n {
                    for c in 0..3 {
                        dg += du[v][c] * corr.basis[(v * 3 + c) * nc + i];
                    }
                }
                let w = pose.joint_rotation(j);
                for r in 0..3 {
                    grad[3 * j + r] += dg * corr.scale * 2.0 * w[r];
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{make_toy_models, ToySizes};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, scale: f32) -> PoseState {
        let mut p = PoseState::zeros();
        for v in p.as_mut_slice().iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        p
    }

    #[test]
    fn dense_and_sparse_agree_bitwise() {
        let toy = make_toy_models(2, ToySizes::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let pose = random_pose(&mut rng, 1.0);
            for corr in [false, true] {
                let a = skin(&toy.mhr, &pose, corr, SkinKernel::Dense).unwrap();
                let b = skin(&toy.mhr, &pose, corr, SkinKernel::Sparse).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn rest_pose_is_exact() {
        let toy = make_toy_models(2, ToySizes::default()).unwrap();
        let v = skin(&toy.smpl, &PoseState::zeros(), false, SkinKernel::Sparse).unwrap();
        assert_eq!(v, toy.smpl.vertices_rest());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let toy = make_toy_models(4, ToySizes::default()).unwrap();
        let t = &toy.smpl;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pose = random_pose(&mut rng, 0.6);
        let target: Vec<Vec3> = (0..t.num_vertices())
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let loss = |p: &PoseState| -> f64 {
            let v = skin(t, p, true, SkinKernel::Sparse).unwrap();
            v.iter()
                .zip(&target)
                .map(|(a, b)| (0..3).map(|c| (a[c] as f64) * (b[c] as f64)).sum::<f64>())
                .sum()
        };
        let fwd = skin_forward(t, &pose, true, SkinKernel::Sparse).unwrap();
        let g = skin_backward(t, &pose, &fwd, &target, None, true).unwrap();
        let h = 1e-3f32;
        for i in 0..POSE_DIM {
            let mut p = pose;
            p.as_mut_slice()[i] += h;
            let mut m = pose;
            m.as_mut_slice()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h as f64);
            let err = (fd - g[i] as f64).abs() / fd.abs().max(1.0);
            assert!(err < 1e-2, "coord {i}: fd {fd} vs {}", g[i]);
        }
    }
}

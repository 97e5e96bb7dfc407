use super::{BodyTemplate, PoseState, Vec3, NUM_JOINTS};
use crate::error::Result;
use crate::numkit::{matmul_with, Array, MatmulKernel};

pub type Mat3 = [[f32; 3]; 3];

const TAYLOR_EPS: f64 = 1e-6;
const DERIV_SERIES_EPS: f64 = 1e-3;

/// How joint transforms are composed. `Generic` routes every 3×3 product
/// through the general-purpose [`Array`] matmul; `Inline` uses fixed-size
/// loops with the same summation order, so both give identical bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FkKernel {
    Generic,
    #[default]
    Inline,
}

/// Coefficients of `R = I + a W + b W²` and their angle derivatives
/// `c = a'(θ)/θ`, `d = b'(θ)/θ`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Rodrigues {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Rodrigues {
    pub fn of(w: Vec3) -> Self {
        let t2 = w.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        let t = t2.sqrt();
        let (a, b) = if t < TAYLOR_EPS {
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
        } else {
            let h = (0.5 * t).sin();
            (t.sin() / t, 2.0 * h * h / t2)
        };
        let (c, d) = if t < DERIV_SERIES_EPS {
            (-1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0)
        } else {
            let (s, co) = t.sin_cos();
            let h = (0.5 * t).sin();
            ((t * co - s) / (t2 * t), (t * s - 4.0 * h * h) / (t2 * t2))
        };
        Self { a, b, c, d }
    }
}

/// Rotation matrix of an axis-angle vector (Rodrigues formula, evaluated in
/// f64 and rounded once).
pub fn rodrigues(w: Vec3) -> Mat3 {
    rodrigues_with(w, &Rodrigues::of(w))
}

fn rodrigues_with(w: Vec3, k: &Rodrigues) -> Mat3 {
    let [x, y, z] = w.map(|v| v as f64);
    let t2 = x * x + y * y + z * z;
    let diag = 1.0 - k.b * t2;
    let om = [x, y, z];
    let wm = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let mut r = [[0.0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { diag } else { 0.0 };
            r[i][j] = (id + k.a * wm[i][j] + k.b * om[i] * om[j]) as f32;
        }
    }
    r
}

/// Inverse of [`rodrigues`] for rotation angles below π.
pub fn rotation_log(r: &Mat3) -> Vec3 {
    let m = r.map(|row| row.map(|v| v as f64));
    let c = ((m[0][0] + m[1][1] + m[2][2] - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = c.acos();
    let v = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
    // angle / (2 sin angle), with its series near zero.
    let k = if angle < 1e-4 {
        0.5 + angle * angle / 12.0
    } else {
        angle / (2.0 * angle.sin())
    };
    v.map(|x| (k * x) as f32)
}

/// Vector-Jacobian product of [`rodrigues`]: maps `dL/dR` to `dL/dω`.
pub(crate) fn rodrigues_vjp(w: Vec3, k: &Rodrigues, g: &Mat3) -> Vec3 {
    let [x, y, z] = w.map(|v| v as f64);
    let wm = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let gm = g.map(|r| r.map(|v| v as f64));
    let mut w2 = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for l in 0..3 {
                w2[i][j] += wm[i][l] * wm[l][j];
            }
        }
    }
    let dot = |m: &[[f64; 3]; 3]| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += gm[i][j] * m[i][j];
            }
        }
        s
    };
    let gw = dot(&wm);
    let gw2 = dot(&w2);
    let om = [x, y, z];
    let mut out = [0.0f32; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let e = skew(unit(i));
        let mut sym = [[0.0f64; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                for l in 0..3 {
                    sym[r][c] += e[r][l] * wm[l][c] + wm[r][l] * e[l][c];
                }
            }
        }
        let v = k.a * dot(&e) + k.b * dot(&sym) + om[i] * (k.c * gw + k.d * gw2);
        *o = v as f32;
    }
    out
}

fn unit(i: usize) -> [f64; 3] {
    let mut e = [0.0; 3];
    e[i] = 1.0;
    e
}

fn skew(v: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

/// Per-joint rigid transforms produced by forward kinematics.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms {
    /// Local rotations `R_j`.
    pub local: [Mat3; NUM_JOINTS],
    /// Global rotations `Q_j = Q_parent · R_j`.
    pub rotations: [Mat3; NUM_JOINTS],
    /// Posed joint origins `J`.
    pub positions: [Vec3; NUM_JOINTS],
    /// Skinning offsets `t_j = p_j − Q_j · J_rest_j`, so a rest-space point
    /// `v` maps to `Q_j v + t_j`. Computed as `o_j − (Q_j − I) J_rest_j` with
    /// `o_j = p_j − J_rest_j`.
    pub translations: [Vec3; NUM_JOINTS],
    pub(crate) coeffs: [Rodrigues; NUM_JOINTS],
}

impl Default for JointTransforms {
    fn default() -> Self {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Self {
            local: [id; NUM_JOINTS],
            rotations: [id; NUM_JOINTS],
            positions: [[0.0; 3]; NUM_JOINTS],
            translations: [[0.0; 3]; NUM_JOINTS],
            coeffs: [Rodrigues::default(); NUM_JOINTS],
        }
    }
}

/// Forward kinematics: composes local axis-angle rotations about the rest
/// joints down the tree. Shape does not move the skeleton.
pub fn forward_kinematics(
    template: &BodyTemplate,
    pose: &PoseState,
    kernel: FkKernel,
) -> Result<JointTransforms> {
    let mut out = JointTransforms::default();
    forward_kinematics_into(template, pose, kernel, &mut out)?;
    Ok(out)
}

pub fn forward_kinematics_into(
    template: &BodyTemplate,
    pose: &PoseState,
    kernel: FkKernel,
    out: &mut JointTransforms,
) -> Result<()> {
    template.check_pose_compatible()?;
    let rest = template.joints_rest();
    let parents = template.parents();
    // Joint displacements o_j = p_j − J_j are propagated instead of absolute
    // positions so that identity rotations give exactly zero offsets.
    let mut offsets = [[0.0f32; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let w = pose.joint_rotation(j);
        out.coeffs[j] = Rodrigues::of(w);
        out.local[j] = rodrigues_with(w, &out.coeffs[j]);
        if let Some(p) = parents[j] {
            let d = sub(rest[j], rest[p]);
            let ap = minus_identity(&out.rotations[p]);
            let (q, m) = match kernel {
                FkKernel::Inline => (mat_mul(&out.rotations[p], &out.local[j]), mat_vec(&ap, d)),
                FkKernel::Generic => (
                    generic_mat_mul(&out.rotations[p], &out.local[j])?,
                    generic_mat_vec(&ap, d)?,
                ),
            };
            out.rotations[j] = q;
            offsets[j] = add(offsets[p], m);
        } else {
            out.rotations[j] = out.local[j];
        }
        out.positions[j] = add(rest[j], offsets[j]);
        let aj = minus_identity(&out.rotations[j]);
        let m = match kernel {
            FkKernel::Inline => mat_vec(&aj, rest[j]),
            FkKernel::Generic => generic_mat_vec(&aj, rest[j])?,
        };
        out.translations[j] = sub(offsets[j], m);
    }
    Ok(())
}

pub(crate) fn minus_identity(q: &Mat3) -> Mat3 {
    let mut a = *q;
    for r in 0..3 {
        a[r][r] -= 1.0;
    }
    a
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0f32;
            for k in 0..3 {
                acc += a[i][k] * b[k][j];
            }
            o[i][j] = acc;
        }
    }
    o
}

pub(crate) fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    let mut o = [0.0f32; 3];
    for i in 0..3 {
        let mut acc = 0.0f32;
        for k in 0..3 {
            acc += a[i][k] * v[k];
        }
        o[i] = acc;
    }
    o
}

pub(crate) fn mat_t_vec(a: &Mat3, v: Vec3) -> Vec3 {
    let mut o = [0.0f32; 3];
    for i in 0..3 {
        let mut acc = 0.0f32;
        for k in 0..3 {
            acc += a[k][i] * v[k];
        }
        o[i] = acc;
    }
    o
}

fn generic_mat_mul(a: &Mat3, b: &Mat3) -> Result<Mat3> {
    let p = matmul_with(&mat_array(a)?, &mat_array(b)?, MatmulKernel::Generic)?;
    let d = p.data();
    Ok([[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]])
}

fn generic_mat_vec(a: &Mat3, v: Vec3) -> Result<Vec3> {
    let col = Array::new(vec![3, 1], v.to_vec())?;
    let p = matmul_with(&mat_array(a)?, &col, MatmulKernel::Generic)?;
    let d = p.data();
    Ok([d[0], d[1], d[2]])
}

fn mat_array(a: &Mat3) -> Result<Array> {
    Array::new(vec![3, 3], a.concat())
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{make_toy_models, ToySizes, NUM_JOINTS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_w(rng: &mut ChaCha8Rng, scale: f32) -> Vec3 {
        [
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        ]
    }

    #[test]
    fn log_inverts_rodrigues() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w: Vec3 = [0; 3].map(|_| rng.gen_range(-1.5f32..1.5));
            let back = rotation_log(&rodrigues(w));
            for k in 0..3 {
                assert!((back[k] - w[k]).abs() < 1e-5, "{w:?} -> {back:?}");
            }
        }
        assert_eq!(rotation_log(&rodrigues([0.0; 3])), [0.0; 3]);
    }

    #[test]
    fn rodrigues_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = rodrigues(random_w(&mut rng, 3.0));
            let rt = [0, 1, 2].map(|i| [r[0][i], r[1][i], r[2][i]]);
            let p = mat_mul(&r, &rt);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((p[i][j] - e).abs() < 1e-5);
                }
            }
        }
        let z = rodrigues([0.0, 0.0, std::f32::consts::PI]);
        assert!((z[0][0] + 1.0).abs() < 1e-6 && (z[1][1] + 1.0).abs() < 1e-6);
        assert_eq!(rodrigues([0.0; 3]), JointTransforms::default().local[0]);
    }

    #[test]
    fn rodrigues_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let scale = if case % 4 == 0 { 1e-4 } else { 2.0 };
            let w = random_w(&mut rng, scale);
            let g: Mat3 = [0, 1, 2].map(|_| random_w(&mut rng, 1.0));
            let got = rodrigues_vjp(w, &Rodrigues::of(w), &g);
            for i in 0..3 {
                let h = 1e-6f64;
                let f = |s: f64| {
                    let mut wd = w.map(|v| v as f64);
                    wd[i] += s;
                    let [x, y, z] = wd;
                    let t2 = x * x + y * y + z * z;
                    let t = t2.sqrt();
                    let (a, b) = if t < 1e-8 {
                        (1.0, 0.5)
                    } else {
                        (t.sin() / t, (1.0 - t.cos()) / t2)
                    };
                    let wm = skew([x, y, z]);
                    let mut acc = 0.0;
                    for r in 0..3 {
                        for c in 0..3 {
                            let id = if r == c { 1.0 - b * t2 } else { 0.0 };
                            let om = [x, y, z];
                            acc += g[r][c] as f64 * (id + a * wm[r][c] + b * om[r] * om[c]);
                        }
                    }
                    acc
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!(
                    (fd - got[i] as f64).abs() <= 1e-3 * fd.abs().max(1.0),
                    "case {case} coord {i}: fd {fd} vs {}",
                    got[i]
                );
            }
        }
    }

    #[test]
    fn kernels_agree_bitwise() {
        let toy = make_toy_models(5, ToySizes::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pose = PoseState::zeros();
        for v in pose.as_mut_slice().iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let a = forward_kinematics(&toy.mhr, &pose, FkKernel::Inline).unwrap();
        let b = forward_kinematics(&toy.mhr, &pose, FkKernel::Generic).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positions.len(), NUM_JOINTS);
    }
}

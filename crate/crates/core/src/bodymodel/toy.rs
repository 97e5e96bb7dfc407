//! Procedural tube-mesh body models.
//!
//! Both topologies wrap the same 22-joint skeleton in one tube per bone plus
//! caps at the feet, head and hands. The dense ("MHR-like") mesh is built
//! directly; every coarse ("SMPL-like") vertex is placed on a dense face, so
//! the true correspondence is known. Coarse skin weights, shape basis and
//! correctives are the barycentric blends of the dense ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BodyTemplate, Correctives, TemplateParts, Vec3, NUM_JOINTS, NUM_SHAPE, PARENTS};
use crate::error::{Error, Result};
use crate::projection::BaryMap;

pub const MHR_RING_SEGMENTS: usize = 8;
pub const SMPL_RING_SEGMENTS: usize = 6;
const CORRECTIVE_JOINTS: [usize; 8] = [1, 2, 4, 5, 14, 15, 16, 17];
const CORRECTIVE_SCALE: f32 = 0.5;

/// Requested vertex counts. Each is rounded down to a whole number of rings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySizes {
    pub mhr_vertices: usize,
    pub smpl_vertices: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        Self {
            mhr_vertices: 1200,
            smpl_vertices: 600,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyModels {
    pub mhr: BodyTemplate,
    pub smpl: BodyTemplate,
    /// Construction-time map from `mhr` faces to `smpl` vertices.
    pub ground_truth: BaryMap,
}

/// Rest joint positions: T-pose, y up, facing +z, left side at +x.
pub const REST_JOINTS: [Vec3; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, -0.01],
    [0.10, -0.46, 0.01],
    [-0.10, -0.46, 0.01],
    [0.0, 0.24, 0.0],
    [0.10, -0.86, -0.02],
    [-0.10, -0.86, -0.02],
    [0.0, 0.30, 0.01],
    [0.0, 0.52, -0.01],
    [0.08, 0.44, 0.0],
    [-0.08, 0.44, 0.0],
    [0.0, 0.62, 0.03],
    [0.18, 0.45, -0.01],
    [-0.18, 0.45, -0.01],
    [0.44, 0.45, -0.02],
    [-0.44, 0.45, -0.02],
    [0.70, 0.45, 0.0],
    [-0.70, 0.45, 0.0],
    [0.80, 0.45, 0.0],
    [-0.80, 0.45, 0.0],
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Group {
    Torso,
    Leg,
    Arm,
    Head,
}

struct Tube {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    primary: usize,
    before: Option<usize>,
    after: Option<usize>,
    group: Group,
}

impl Tube {
    fn length(&self) -> f64 {
        norm(sub(self.b, self.a))
    }
}

fn bone_radius(j: usize) -> f64 {
    match j {
        1 | 2 => 0.08,
        3 | 6 => 0.12,
        9 => 0.13,
        4 | 5 => 0.07,
        7 | 8 => 0.05,
        10 | 11 | 12 => 0.06,
        13 | 14 | 15 => 0.055,
        16 | 17 => 0.045,
        18 | 19 => 0.037,
        _ => 0.03,
    }
}

fn group_of(j: usize) -> Group {
    match j {
        4 | 5 | 7 | 8 => Group::Leg,
        10 | 13 => Group::Head,
        14..=21 => Group::Arm,
        _ => Group::Torso,
    }
}

fn tubes() -> Vec<Tube> {
    let jp = |j: usize| REST_JOINTS[j].map(|x| x as f64);
    let mut out = Vec::new();
    for j in 1..NUM_JOINTS {
        let p = PARENTS[j].expect("non-root");
        out.push(Tube {
            a: jp(p),
            b: jp(j),
            radius: bone_radius(j),
            primary: p,
            before: PARENTS[p],
            after: Some(j),
            group: group_of(j),
        });
    }
    let caps: [(usize, [f64; 3], f64, Group); 5] = [
        (7, [0.0, -0.03, 0.14], 0.04, Group::Leg),
        (8, [0.0, -0.03, 0.14], 0.04, Group::Leg),
        (13, [0.0, 0.16, 0.0], 0.09, Group::Head),
        (20, [0.08, 0.0, 0.0], 0.028, Group::Arm),
        (21, [-0.08, 0.0, 0.0], 0.028, Group::Arm),
    ];
    for (j, d, r, g) in caps {
        let a = jp(j);
        out.push(Tube {
            a,
            b: [a[0] + d[0], a[1] + d[1], a[2] + d[2]],
            radius: r,
            primary: j,
            before: PARENTS[j],
            after: None,
            group: g,
        });
    }
    out
}

/// Rings per tube: two each, the rest proportional to tube length with
/// largest-remainder rounding.
fn allocate_rings(total: usize, tubes: &[Tube]) -> Vec<usize> {
    let base = 2;
    let extra = total - base * tubes.len();
    let lengths: Vec<f64> = tubes.iter().map(Tube::length).collect();
    let sum: f64 = lengths.iter().sum();
    let shares: Vec<f64> = lengths.iter().map(|l| extra as f64 * l / sum).collect();
    let mut rings: Vec<usize> = shares.iter().map(|s| base + s.floor() as usize).collect();
    let mut left = total - rings.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..tubes.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = shares[i] - shares[i].floor();
        let fj = shares[j] - shares[j].floor();
        fj.partial_cmp(&fi).expect("finite").then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        rings[i] += 1;
        left -= 1;
    }
    rings
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Per-vertex attributes of the dense mesh used to derive weights and bases.
struct DenseVertex {
    tube: usize,
    u: f64,
    normal: [f64; 3],
    center: [f64; 3],
}

struct DenseMesh {
    vertices: Vec<Vec3>,
    attrs: Vec<DenseVertex>,
    faces: Vec<[u32; 3]>,
    /// Per tube: (first vertex, rings, first face).
    layout: Vec<(usize, usize, usize)>,
}

fn build_dense(tubes: &[Tube], rings: &[usize], segs: usize) -> DenseMesh {
    let mut vertices = Vec::new();
    let mut attrs = Vec::new();
    let mut faces = Vec::new();
    let mut layout = Vec::new();
    for (ti, (tube, &r)) in tubes.iter().zip(rings).enumerate() {
        let v0 = vertices.len();
        layout.push((v0, r, faces.len()));
        let axis = normalize(sub(tube.b, tube.a));
        let reference = if axis[2].abs() > 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let e1 = normalize(cross(axis, reference));
        let e2 = cross(axis, e1);
        for i in 0..r {
            let u = i as f64 / (r - 1) as f64;
            let center = [0, 1, 2].map(|c| tube.a[c] + u * (tube.b[c] - tube.a[c]));
            let radius = tube.radius * (1.0 + 0.1 * (std::f64::consts::PI * u).sin());
            for k in 0..segs {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / segs as f64;
                let n = [0, 1, 2].map(|c| phi.cos() * e1[c] + phi.sin() * e2[c]);
                let p = [0, 1, 2].map(|c| (center[c] + radius * n[c]) as f32);
                vertices.push(p);
                attrs.push(DenseVertex {
                    tube: ti,
                    u,
                    normal: n,
                    center,
                });
            }
        }
        let idx = |i: usize, k: usize| (v0 + i * segs + k % segs) as u32;
        for i in 0..r - 1 {
            for k in 0..segs {
                faces.push([idx(i, k), idx(i + 1, k), idx(i, k + 1)]);
                faces.push([idx(i + 1, k), idx(i + 1, k + 1), idx(i, k + 1)]);
            }
        }
    }
    DenseMesh {
        vertices,
        attrs,
        faces,
        layout,
    }
}

fn dense_skin_weights(tubes: &[Tube], attrs: &[DenseVertex]) -> Vec<f32> {
    let mut w = vec![0.0f32; attrs.len() * NUM_JOINTS];
    for (v, a) in attrs.iter().enumerate() {
        let t = &tubes[a.tube];
        let wb = t
            .before
            .map_or(0.0, |_| 0.5 * smoothstep((0.3 - a.u) / 0.3)) as f32;
        let wa = t.after.map_or(0.0, |_| 0.5 * smoothstep((a.u - 0.7) / 0.3)) as f32;
        let row = &mut w[v * NUM_JOINTS..(v + 1) * NUM_JOINTS];
        row[t.primary] += 1.0 - wb - wa;
        if let Some(b) = t.before {
            row[b] += wb;
        }
        if let Some(c) = t.after {
            row[c] += wa;
        }
    }
    w
}

fn dense_shape_basis(tubes: &[Tube], attrs: &[DenseVertex], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let amps: Vec<f64> = (0..NUM_SHAPE)
        .map(|_| 0.015 * (0.75 + 0.5 * rng.gen::<f64>()))
        .collect();
    let mut basis = vec![0.0f32; attrs.len() * 3 * NUM_SHAPE];
    for (v, a) in attrs.iter().enumerate() {
        let g = tubes[a.tube].group;
        let is = |x: Group| if g == x { 1.0 } else { 0.0 };
        let pi_u = (std::f64::consts::PI * a.u).sin();
        let modes = [
            1.0,
            is(Group::Torso),
            is(Group::Leg),
            is(Group::Arm),
            is(Group::Head),
            is(Group::Torso) * pi_u,
            a.normal[2],
            2.0 * a.u - 1.0,
            (8.0 * a.center[0]).tanh(),
            a.normal[0] * a.normal[0] * is(Group::Torso) - 0.3 * is(Group::Leg),
        ];
        for c in 0..3 {
            for k in 0..NUM_SHAPE {
                basis[(v * 3 + c) * NUM_SHAPE + k] = (amps[k] * modes[k] * a.normal[c]) as f32;
            }
        }
    }
    basis
}

/// Smooth bumps around the gating joints, orthonormalized over the flattened
/// `3·N_v` vertex space.
fn dense_correctives(attrs: &[DenseVertex], vertices: &[Vec3], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = attrs.len();
    let nc = CORRECTIVE_JOINTS.len();
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(nc);
    for (i, &j) in CORRECTIVE_JOINTS.iter().enumerate() {
        let jp = REST_JOINTS[j].map(|x| x as f64);
        let freq = 1.0 + i as f64;
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let mut d = vec![0.0f64; 3 * n];
        for (v, a) in attrs.iter().enumerate() {
            let p = vertices[v].map(|x| x as f64);
            let r2 = {
                let q = sub(p, jp);
                q[0] * q[0] + q[1] * q[1] + q[2] * q[2]
            };
            let bump = (-r2 / (2.0 * 0.12 * 0.12)).exp();
            let ang = a.normal[1].atan2(a.normal[0]);
            let s = bump * (1.0 + 0.3 * (freq * ang + phase).cos());
            for c in 0..3 {
                d[v * 3 + c] = s * a.normal[c];
            }
        }
        for prev in &dirs {
            let dot: f64 = d.iter().zip(prev).map(|(x, y)| x * y).sum();
            for (x, y) in d.iter_mut().zip(prev) {
                *x -= dot * y;
            }
        }
        let nrm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut d {
            *x /= nrm;
        }
        dirs.push(d);
    }
    let mut basis = vec![0.0f32; 3 * n * nc];
    for (i, d) in dirs.iter().enumerate() {
        for (e, x) in d.iter().enumerate() {
            basis[e * nc + i] = *x as f32;
        }
    }
    basis
}

/// Blends `stride` values per vertex: `(w0·a + w1·b) + w2·c`.
fn blend_rows(src: &[f32], stride: usize, corners: &[[u32; 3]], weights: &[[f32; 3]]) -> Vec<f32> {
    let mut out = vec![0.0f32; corners.len() * stride];
    for (v, (c, w)) in corners.iter().zip(weights).enumerate() {
        let a = &src[c[0] as usize * stride..][..stride];
        let b = &src[c[1] as usize * stride..][..stride];
        let d = &src[c[2] as usize * stride..][..stride];
        for k in 0..stride {
            out[v * stride + k] = (w[0] * a[k] + w[1] * b[k]) + w[2] * d[k];
        }
    }
    out
}

fn ring_total(count: usize, segs: usize, tubes: usize, what: &str) -> Result<usize> {
    let rings = count / segs;
    if rings < 2 * tubes {
        return Err(Error::Usage(format!(
            "{what} needs at least {} vertices, got {count}",
            2 * tubes * segs
        )));
    }
    Ok(rings)
}

/// Builds the dense/coarse template pair and their ground-truth
/// correspondence. Deterministic in `seed`.
pub fn make_toy_models(seed: u64, sizes: ToySizes) -> Result<ToyModels> {
    if sizes.mhr_vertices <= sizes.smpl_vertices {
        return Err(Error::Usage(format!(
            "dense vertex count ({}) must exceed the coarse count ({})",
            sizes.mhr_vertices, sizes.smpl_vertices
        )));
    }
    let tubes = tubes();
    let fine_total = ring_total(
        sizes.mhr_vertices,
        MHR_RING_SEGMENTS,
        tubes.len(),
        "dense mesh",
    )?;
    let coarse_total = ring_total(
        sizes.smpl_vertices,
        SMPL_RING_SEGMENTS,
        tubes.len(),
        "coarse mesh",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let fine_rings = allocate_rings(fine_total, &tubes);
    let dense = build_dense(&tubes, &fine_rings, MHR_RING_SEGMENTS);
    let weights = dense_skin_weights(&tubes, &dense.attrs);
    let basis = dense_shape_basis(&tubes, &dense.attrs, &mut rng);
    let corr = dense_correctives(&dense.attrs, &dense.vertices, &mut rng);
    let joints_rest = REST_JOINTS.to_vec();
    let parents = PARENTS.to_vec();

    // Coarse vertices: one per coarse ring slot, dropped onto a dense face.
    let coarse_rings = allocate_rings(coarse_total, &tubes);
    let mut face_ids = Vec::new();
    let mut bary = Vec::new();
    let mut coarse_faces = Vec::new();
    for (ti, &rc) in coarse_rings.iter().enumerate() {
        let (_, rf, f0) = dense.layout[ti];
        let v0 = face_ids.len();
        for ic in 0..rc {
            let u = (ic as f64 + 0.5) / rc as f64;
            let cell = ((u * (rf - 1) as f64).floor() as usize).min(rf - 2);
            for kc in 0..SMPL_RING_SEGMENTS {
                let frac = (kc as f64 + 0.5) / SMPL_RING_SEGMENTS as f64;
                let k = (frac * MHR_RING_SEGMENTS as f64).floor() as usize % MHR_RING_SEGMENTS;
                let tri = usize::from(rng.gen::<bool>());
                let face = f0 + 2 * (cell * MHR_RING_SEGMENTS + k) + tri;
                let raw: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(0.2..1.0));
                let s: f64 = raw.iter().sum();
                face_ids.push(face as u32);
                bary.push(raw.map(|x| (x / s) as f32));
            }
        }
        let idx =
            |i: usize, k: usize| (v0 + i * SMPL_RING_SEGMENTS + k % SMPL_RING_SEGMENTS) as u32;
        for i in 0..rc - 1 {
            for k in 0..SMPL_RING_SEGMENTS {
                coarse_faces.push([idx(i, k), idx(i + 1, k), idx(i, k + 1)]);
                coarse_faces.push([idx(i + 1, k), idx(i + 1, k + 1), idx(i, k + 1)]);
            }
        }
    }
    let ground_truth = BaryMap::new(&dense.faces, dense.vertices.len(), face_ids, bary)?;
    let corners = ground_truth.corners();
    let gt_w = ground_truth.weights();
    let coarse_vertices: Vec<Vec3> = crate::projection::bridge(&dense.vertices, &ground_truth)?;
    let nc = CORRECTIVE_JOINTS.len();
    let smpl = BodyTemplate::new(TemplateParts {
        name: "smpl".into(),
        vertices_rest: coarse_vertices,
        faces: coarse_faces,
        parents: parents.clone(),
        joints_rest: joints_rest.clone(),
        skin_weights: blend_rows(&weights, NUM_JOINTS, corners, gt_w),
        shape_basis: blend_rows(&basis, 3 * NUM_SHAPE, corners, gt_w),
        correctives: Some(Correctives {
            basis: blend_rows(&corr, 3 * nc, corners, gt_w),
            joints: CORRECTIVE_JOINTS.to_vec(),
            scale: CORRECTIVE_SCALE,
        }),
    })?;
    let mhr = BodyTemplate::new(TemplateParts {
        name: "mhr".into(),
        vertices_rest: dense.vertices,
        faces: dense.faces,
        parents,
        joints_rest,
        skin_weights: weights,
        shape_basis: basis,
        correctives: Some(Correctives {
            basis: corr,
            joints: CORRECTIVE_JOINTS.to_vec(),
            scale: CORRECTIVE_SCALE,
        }),
    })?;
    Ok(ToyModels {
        mhr,
        smpl,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let t = make_toy_models(0, ToySizes::default()).unwrap();
        assert_eq!(t.mhr.num_vertices(), 1200);
        assert_eq!(t.smpl.num_vertices(), 600);
        assert_eq!(t.ground_truth.len(), 600);
        assert_eq!(t.mhr.num_joints(), NUM_JOINTS);
    }

    #[test]
    fn counts_round_down_to_whole_rings() {
        let t = make_toy_models(
            0,
            ToySizes {
                mhr_vertices: 1203,
                smpl_vertices: 605,
            },
        )
        .unwrap();
        assert_eq!(t.mhr.num_vertices(), 1200);
        assert_eq!(t.smpl.num_vertices(), 600);
    }

    #[test]
    fn degenerate_sizes_are_usage_errors() {
        for (m, s) in [(600, 600), (500, 900), (100, 50), (1200, 100)] {
            let r = make_toy_models(
                0,
                ToySizes {
                    mhr_vertices: m,
                    smpl_vertices: s,
                },
            );
            assert!(matches!(r, Err(Error::Usage(_))), "{m}/{s}");
        }
    }

    #[test]
    fn weights_are_local() {
        let t = make_toy_models(0, ToySizes::default()).unwrap();
        for row in t.mhr.skin_weights().chunks(NUM_JOINTS) {
            assert!(row.iter().filter(|w| **w > 0.0).count() <= 3);
        }
    }
}

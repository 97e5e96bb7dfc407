//! Parametric body models: templates, pose parameters, forward kinematics,
//! linear blend skinning and pinhole projection.

mod io;
mod kinematics;
mod sampler;
mod skinning;
mod toy;

pub use io::{load_template, save_template};
pub use kinematics::{
    forward_kinematics, forward_kinematics_into, rodrigues, rotation_log, FkKernel,
    JointTransforms, Mat3,
};
pub use sampler::PoseSampler;
pub use skinning::{skin, skin_backward, skin_forward, skin_into, SkinForward, SkinKernel};
pub use toy::{make_toy_models, ToyModels, ToySizes};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Pelvis plus 21 body joints.
pub const NUM_JOINTS: usize = 22;
pub const NUM_BODY_JOINTS: usize = 21;
pub const NUM_SHAPE: usize = 10;
/// Global orientation (3) + body pose (63) + shape (10).
pub const POSE_DIM: usize = 3 + 3 * NUM_BODY_JOINTS + NUM_SHAPE;
pub const SHAPE_OFFSET: usize = 3 * NUM_JOINTS;
pub const WRIST_JOINTS: [usize; 2] = [18, 19];
/// Wrist children; their rotations come from the hand decoder.
pub const HAND_JOINTS: [usize; 2] = [20, 21];

/// Kinematic tree shared by both toy topologies.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(9),
    Some(9),
    Some(9),
    Some(10),
    Some(11),
    Some(12),
    Some(14),
    Some(15),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub type Vec3 = [f32; 3];

/// Global orientation, per-joint axis-angle rotations and shape
/// coefficients, flattened as `[global(3), body(63), shape(10)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct PoseState {
    params: [f32; POSE_DIM],
}

impl Default for PoseState {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PoseState {
    pub const fn zeros() -> Self {
        Self {
            params: [0.0; POSE_DIM],
        }
    }

    pub fn from_slice(values: &[f32]) -> Result<Self> {
        if values.len() != POSE_DIM {
            return Err(shape_err!(
                "pose needs {POSE_DIM} values, got {}",
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pose parameter".into()));
        }
        let mut params = [0.0; POSE_DIM];
        params.copy_from_slice(values);
        Ok(Self { params })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn global_orient(&self) -> Vec3 {
        self.joint_rotation(0)
    }

    /// Axis-angle rotation of joint `j`; joint 0 is the global orientation.
    pub fn joint_rotation(&self, j: usize) -> Vec3 {
        let o = 3 * j;
        [self.params[o], self.params[o + 1], self.params[o + 2]]
    }

    pub fn set_joint_rotation(&mut self, j: usize, r: Vec3) {
        self.params[3 * j..3 * j + 3].copy_from_slice(&r);
    }

    pub fn body_pose(&self) -> &[f32] {
        &self.params[3..SHAPE_OFFSET]
    }

    pub fn body_pose_mut(&mut self) -> &mut [f32] {
        &mut self.params[3..SHAPE_OFFSET]
    }

    pub fn shape(&self) -> &[f32] {
        &self.params[SHAPE_OFFSET..]
    }

    /// Zeroes the wrist-child (hand) rotations.
    pub fn clear_hand_joints(&mut self) {
        for j in HAND_JOINTS {
            self.set_joint_rotation(j, [0.0; 3]);
        }
    }

    pub fn max_abs_diff(&self, other: &PoseState) -> f32 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn bit_eq(&self, other: &PoseState) -> bool {
        self.params
            .iter()
            .zip(&other.params)
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl TryFrom<Vec<f32>> for PoseState {
    type Error = Error;
    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<PoseState> for Vec<f32> {
    fn from(p: PoseState) -> Self {
        p.params.to_vec()
    }
}

/// Pinhole intrinsics without skew.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
}

impl CameraIntrinsics {
    pub fn new(fx: f32, fy: f32, cx: f32, cy: f32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Usage(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// The 3×3 matrix `K` (row-major), with `K[2][2] = 1`.
    pub fn matrix(&self) -> [[f32; 3]; 3] {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }
}

/// Pinhole projection of camera-frame points.
pub fn project(k: &CameraIntrinsics, points: &[Vec3]) -> Result<Vec<[f32; 2]>> {
    let mut out = vec![[0.0; 2]; points.len()];
    project_into(k, points, &mut out)?;
    Ok(out)
}

pub fn project_into(k: &CameraIntrinsics, points: &[Vec3], out: &mut [[f32; 2]]) -> Result<()> {
    for (i, (p, o)) in points.iter().zip(out.iter_mut()).enumerate() {
        if !(p[2] > 0.0) {
            return Err(Error::Projection(format!(
                "point {i} has non-positive depth {}",
                p[2]
            )));
        }
        *o = [k.fx * (p[0] / p[2]) + k.cx, k.fy * (p[1] / p[2]) + k.cy];
    }
    Ok(())
}

/// Model frame (y up, facing +z) to camera frame (y down, looking along +z):
/// a half-turn about x followed by `translation`.
pub fn to_camera_frame(p: Vec3, translation: Vec3) -> Vec3 {
    [
        p[0] + translation[0],
        -p[1] + translation[1],
        -p[2] + translation[2],
    ]
}

/// Sparse view of a skin-weight matrix: nonzero entries per vertex in
/// increasing joint order.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct SparseWeights {
    pub offsets: Vec<u32>,
    pub joints: Vec<u16>,
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correctives {
    /// `N_v×3×N_c`, row-major.
    pub basis: Vec<f32>,
    /// Joint whose squared rotation angle gates each direction.
    pub joints: Vec<usize>,
    pub scale: f32,
}

impl Correctives {
    pub fn count(&self) -> usize {
        self.joints.len()
    }
}

/// Everything needed to build a [`BodyTemplate`].
#[derive(Clone, Debug)]
pub struct TemplateParts {
    pub name: String,
    pub vertices_rest: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub parents: Vec<Option<usize>>,
    pub joints_rest: Vec<Vec3>,
    /// `N_v×N_j`, row-major.
    pub skin_weights: Vec<f32>,
    /// `N_v×3×NUM_SHAPE`, row-major.
    pub shape_basis: Vec<f32>,
    pub correctives: Option<Correctives>,
}

/// Rest mesh, kinematic tree, skin weights and blend-shape bases for one
/// topology. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    name: String,
    vertices_rest: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    parents: Vec<Option<usize>>,
    joints_rest: Vec<Vec3>,
    skin_weights: Vec<f32>,
    shape_basis: Vec<f32>,
    correctives: Option<Correctives>,
    sparse: SparseWeights,
}

impl BodyTemplate {
    pub fn new(parts: TemplateParts) -> Result<Self> {
        let nv = parts.vertices_rest.len();
        let nj = parts.joints_rest.len();
        if nv == 0 || nj == 0 {
            return Err(shape_err!("template needs vertices and joints"));
        }
        if parts.parents.len() != nj {
            return Err(shape_err!(
                "{} parents for {nj} joints",
                parts.parents.len()
            ));
        }
        if parts.parents[0].is_some() {
            return Err(shape_err!("joint 0 must be the root"));
        }
        for (j, p) in parts.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(shape_err!(
                        "joint {j} needs a parent with a smaller index, got {p:?}"
                    ))
                }
            }
        }
        if let Some(f) = parts
            .faces
            .iter()
            .find(|f| f.iter().any(|&i| i as usize >= nv))
        {
            return Err(shape_err!("face {f:?} indexes past {nv} vertices"));
        }
        if parts.skin_weights.len() != nv * nj {
            return Err(shape_err!("skin weights must be {nv}x{nj}"));
        }
        for (v, row) in parts.skin_weights.chunks_exact(nj).enumerate() {
            let s: f32 = row.iter().sum();
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) || (s - 1.0).abs() > 1e-5 {
                return Err(shape_err!("skin weights of vertex {v} sum to {s}"));
            }
        }
        if parts.shape_basis.len() != nv * 3 * NUM_SHAPE {
            return Err(shape_err!("shape basis must be {nv}x3x{NUM_SHAPE}"));
        }
        if let Some(c) = &parts.correctives {
            if c.basis.len() != nv * 3 * c.count() || c.joints.iter().any(|&j| j >= nj) {
                return Err(shape_err!("corrective basis does not match the template"));
            }
        }
        let sparse = sparsify(&parts.skin_weights, nj);
        Ok(Self {
            name: parts.name,
            vertices_rest: parts.vertices_rest,
            faces: parts.faces,
            parents: parts.parents,
            joints_rest: parts.joints_rest,
            skin_weights: parts.skin_weights,
            shape_basis: parts.shape_basis,
            correctives: parts.correctives,
            sparse,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn num_vertices(&self) -> usize {
        self.vertices_rest.len()
    }
    pub fn num_joints(&self) -> usize {
        self.joints_rest.len()
    }
    pub fn vertices_rest(&self) -> &[Vec3] {
        &self.vertices_rest
    }
    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }
    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }
    pub fn joints_rest(&self) -> &[Vec3] {
        &self.joints_rest
    }
    pub fn skin_weights(&self) -> &[f32] {
        &self.skin_weights
    }
    pub fn shape_basis(&self) -> &[f32] {
        &self.shape_basis
    }
    pub fn correctives(&self) -> Option<&Correctives> {
        self.correctives.as_ref()
    }
    pub(crate) fn sparse_weights(&self) -> &SparseWeights {
        &self.sparse
    }

    pub(crate) fn check_pose_compatible(&self) -> Result<()> {
        if self.num_joints() != NUM_JOINTS {
            return Err(shape_err!(
                "pose drives {NUM_JOINTS} joints, template has {}",
                self.num_joints()
            ));
        }
        Ok(())
    }

    pub fn into_parts(self) -> TemplateParts {
        TemplateParts {
            name: self.name,
            vertices_rest: self.vertices_rest,
            faces: self.faces,
            parents: self.parents,
            joints_rest: self.joints_rest,
            skin_weights: self.skin_weights,
            shape_basis: self.shape_basis,
            correctives: self.correctives,
        }
    }
}

fn sparsify(weights: &[f32], nj: usize) -> SparseWeights {
    let mut offsets = vec![0u32];
    let mut joints = Vec::new();
    let mut ws = Vec::new();
    for row in weights.chunks_exact(nj) {
        for (j, &w) in row.iter().enumerate() {
            if w != 0.0 {
                joints.push(j as u16);
                ws.push(w);
            }
        }
        offsets.push(joints.len() as u32);
    }
    SparseWeights {
        offsets,
        joints,
        weights: ws,
    }
}

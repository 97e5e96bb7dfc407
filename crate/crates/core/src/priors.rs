//! Spatial priors: synthetic scenes, a keypoint detector stub, a dense
//! baseline detector, the analytic hand-box rule and crop-grid construction.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bodymodel::{
    forward_kinematics, project, skin, to_camera_frame, BodyTemplate, CameraIntrinsics, FkKernel,
    PoseSampler, PoseState, SkinKernel, Vec3, NUM_JOINTS,
};
use crate::error::{shape_err, Error, Result};

/// Default hand-box scale divisor.
pub const DEFAULT_ALPHA: f32 = 3.0;
/// Body boxes are the keypoint extent, squared and grown by this factor.
const BODY_BOX_GROWTH: f32 = 1.2;

/// Axis-aligned box in pixel-centre coordinates: an image of width `W`
/// spans `x ∈ [0, W − 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(Error::Usage(format!("inverted or empty box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> [f32; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    /// Whole image `[0, 0, W − 1, H − 1]`.
    pub fn image(width: usize, height: usize) -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: (width - 1) as f32,
            y_max: (height - 1) as f32,
        }
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Per-joint `(x, y, confidence)` in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoints2D {
    pub points: [[f32; 3]; NUM_JOINTS],
}

impl Default for Keypoints2D {
    fn default() -> Self {
        Self {
            points: [[0.0; 3]; NUM_JOINTS],
        }
    }
}

impl Keypoints2D {
    pub fn xy(&self, j: usize) -> [f32; 2] {
        [self.points[j][0], self.points[j][1]]
    }
}

/// A single-person synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub image_width: usize,
    pub image_height: usize,
    pub intrinsics: CameraIntrinsics,
    pub pose: PoseState,
    /// Model-to-camera translation applied after the half-turn about x.
    pub translation: Vec3,
}

impl Scene {
    /// Seeded scene: person roughly facing the camera about three units away.
    pub fn synthetic(seed: u64) -> Self {
        let mut s = PoseSampler::new(seed);
        s.global_sigma = 0.15;
        let pose = s.sample();
        let translation = [
            s.uniform(-0.2, 0.2),
            s.uniform(-0.15, 0.15),
            s.uniform(2.7, 3.3),
        ];
        Self {
            image_width: 256,
            image_height: 256,
            intrinsics: CameraIntrinsics {
                fx: 200.0,
                fy: 200.0,
                cx: 127.5,
                cy: 127.5,
            },
            pose,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_width < 2 || self.image_height < 2 {
            return Err(Error::Config(format!(
                "image must be at least 2x2, got {}x{}",
                self.image_width, self.image_height
            )));
        }
        self.intrinsics.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Scene = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        s.validate()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Ground-truth 2D joints.
    pub fn project_joints(&self, template: &BodyTemplate) -> Result<ProjectedScene> {
        self.validate()?;
        let fk = forward_kinematics(template, &self.pose, FkKernel::Inline)?;
        let cam: Vec<Vec3> = fk
            .positions
            .iter()
            .map(|p| to_camera_frame(*p, self.translation))
            .collect();
        let uv = project(&self.intrinsics, &cam)?;
        let mut joints2d = [[0.0; 2]; NUM_JOINTS];
        joints2d.copy_from_slice(&uv);
        Ok(ProjectedScene {
            width: self.image_width,
            height: self.image_height,
            joints2d,
        })
    }

    /// Renders an `H×W×3` image: a smooth background plus Gaussian splats
    /// at the projected posed-mesh vertices, tinted by dominant joint.
    pub fn render(&self, template: &BodyTemplate) -> Result<Vec<f32>> {
        self.validate()?;
        let (w, h) = (self.image_width, self.image_height);
        let verts = skin(template, &self.pose, false, SkinKernel::Sparse)?;
        let cam: Vec<Vec3> = verts
            .iter()
            .map(|p| to_camera_frame(*p, self.translation))
            .collect();
        let uv = project(&self.intrinsics, &cam)?;
        let mut img = vec![0.0f32; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f32, y as f32);
                let px = &mut img[(y * w + x) * 3..][..3];
                px[0] = 0.35 + 0.08 * (xf / 17.0).sin();
                px[1] = 0.30 + 0.08 * (yf / 23.0).cos();
                px[2] = 0.32 + 0.05 * ((xf + yf) / 31.0).sin();
            }
        }
        let nj = template.num_joints();
        let sigma = 1.6f32;
        let reach = 4i64;
        for (v, p) in uv.iter().enumerate() {
            let row = &template.skin_weights()[v * nj..(v + 1) * nj];
            let j = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, w)| if *w > row[b] { i } else { b });
            let tint = [
                0.5 + 0.5 * (j as f32 * 0.9).sin(),
                0.5 + 0.5 * (j as f32 * 1.7).cos(),
                0.5 + 0.5 * (j as f32 * 2.3).sin(),
            ];
            let (cx, cy) = (p[0].round() as i64, p[1].round() as i64);
            for yy in cy - reach..=cy + reach {
                for xx in cx - reach..=cx + reach {
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let dx = xx as f32 - p[0];
                    let dy = yy as f32 - p[1];
                    let g = 0.6 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let px = &mut img[(yy as usize * w + xx as usize) * 3..][..3];
                    for c in 0..3 {
                        px[c] = (1.0 - g) * px[c] + g * tint[c];
                    }
                }
            }
        }
        Ok(img)
    }
}

/// Scene reduced to what the detector stub sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedScene {
    pub width: usize,
    pub height: usize,
    pub joints2d: [[f32; 2]; NUM_JOINTS],
}

/// Square box around points, grown and clamped to the image.
fn body_box_from_points(points: &[[f32; 3]; NUM_JOINTS], width: usize, height: usize) -> BBox {
    let mut lo = [f32::INFINITY; 2];
    let mut hi = [f32::NEG_INFINITY; 2];
    for p in points {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let side = BODY_BOX_GROWTH * (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    clamp_square(center, side, width, height)
}

/// Box of side `side` around `center` (centre first clamped into the image),
/// intersected with the image.
fn clamp_square(center: [f32; 2], side: f32, width: usize, height: usize) -> BBox {
    let xmax = (width - 1) as f32;
    let ymax = (height - 1) as f32;
    let cx = center[0].clamp(0.0, xmax);
    let cy = center[1].clamp(0.0, ymax);
    let half = 0.5 * side;
    let mut b = BBox {
        x_min: (cx - half).max(0.0),
        y_min: (cy - half).max(0.0),
        x_max: (cx + half).min(xmax),
        y_max: (cy + half).min(ymax),
    };
    // A clamped centre sits inside the image, so only a sub-pixel side can
    // collapse the box; widen it to one pixel.
    if b.x_max - b.x_min < 1.0 {
        b.x_min = (cx - 0.5).clamp(0.0, xmax - 1.0);
        b.x_max = b.x_min + 1.0;
    }
    if b.y_max - b.y_min < 1.0 {
        b.y_min = (cy - 0.5).clamp(0.0, ymax - 1.0);
        b.y_max = b.y_min + 1.0;
    }
    b
}

/// Ground-truth 2D joints plus isotropic Gaussian noise. Confidence decays
/// with the drawn noise magnitude. Deterministic in `seed`; allocation-free.
pub fn detect_stub(scene: &ProjectedScene, noise_sigma: f32, seed: u64) -> (BBox, Keypoints2D) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kp = Keypoints2D::default();
    for (p, gt) in kp.points.iter_mut().zip(&scene.joints2d) {
        let ex: f32 = StandardNormal.sample(&mut rng);
        let ey: f32 = StandardNormal.sample(&mut rng);
        let (dx, dy) = (noise_sigma * ex, noise_sigma * ey);
        let conf = (-(dx * dx + dy * dy) / 200.0).exp();
        *p = [gt[0] + dx, gt[1] + dy, conf];
    }
    let b = body_box_from_points(&kp.points, scene.width, scene.height);
    (b, kp)
}

/// Heavier detector baseline: Laplacian response over the whole image, box
/// blur, threshold at a fraction of the peak, and the extent of what
/// survives. Yields only a body box.
pub fn detect_dense(image: &[f32], width: usize, height: usize) -> Result<BBox> {
    if image.len() != width * height * 3 || width < 3 || height < 3 {
        return Err(shape_err!("image buffer does not match {width}x{height}x3"));
    }
    let gray: Vec<f32> = image
        .chunks_exact(3)
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect();
    let mut lap = vec![0.0f32; width * height];
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let i = y * width + x;
            let v = 4.0 * gray[i] - gray[i - 1] - gray[i + 1] - gray[i - width] - gray[i + width];
            lap[i] = v.abs();
        }
    }
    let r = 2usize;
    let mut resp = vec![0.0f32; width * height];
    let mut peak = 0.0f32;
    for y in r..height - r {
        for x in r..width - r {
            let mut acc = 0.0f32;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    acc += lap[yy * width + xx];
                }
            }
            resp[y * width + x] = acc;
            peak = peak.max(acc);
        }
    }
    let thr = 0.15 * peak;
    let mut pts = [[0.0f32; 3]; NUM_JOINTS];
    let (mut lo, mut hi) = ([f32::INFINITY; 2], [f32::NEG_INFINITY; 2]);
    for y in 0..height {
        for x in 0..width {
            if peak > 0.0 && resp[y * width + x] > thr {
                lo = [lo[0].min(x as f32), lo[1].min(y as f32)];
                hi = [hi[0].max(x as f32), hi[1].max(y as f32)];
            }
        }
    }
    if !lo[0].is_finite() {
        return Ok(BBox::image(width, height));
    }
    pts[0] = [lo[0], lo[1], 1.0];
    for p in pts.iter_mut().skip(1) {
        *p = [hi[0], hi[1], 1.0];
    }
    Ok(body_box_from_points(&pts, width, height))
}

/// Side of the analytic hand box: `min(w_body, h_body) / α`.
pub fn hand_box_side(body: &BBox, alpha: f32) -> f32 {
    body.width().min(body.height()) / alpha
}

/// Square hand box of side `s = min(w_body, h_body) / α` centred on the
/// wrist, before any clamping.
pub fn hand_box_unclamped(wrist: [f32; 2], body: &BBox, alpha: f32) -> Result<BBox> {
    if !(alpha > 0.0) {
        return Err(Error::Usage(format!("alpha must be positive, got {alpha}")));
    }
    let half = 0.5 * hand_box_side(body, alpha);
    Ok(BBox {
        x_min: wrist[0] - half,
        y_min: wrist[1] - half,
        x_max: wrist[0] + half,
        y_max: wrist[1] + half,
    })
}

/// [`hand_box_unclamped`] clamped to the image; always keeps positive area.
pub fn hand_box(
    wrist: [f32; 2],
    body: &BBox,
    alpha: f32,
    width: usize,
    height: usize,
) -> Result<BBox> {
    if !(alpha > 0.0) {
        return Err(Error::Usage(format!("alpha must be positive, got {alpha}")));
    }
    Ok(clamp_square(
        wrist,
        hand_box_side(body, alpha),
        width,
        height,
    ))
}

/// `out_size × out_size × 2` grid of `(x, y)` sample positions spanning the
/// box inclusively with uniform spacing.
pub fn crop_grid(b: &BBox, out_size: usize) -> Result<crate::numkit::Array> {
    let mut g = vec![0.0f32; out_size * out_size * 2];
    crop_grid_into(b, out_size, &mut g)?;
    crate::numkit::Array::new(vec![out_size, out_size, 2], g)
}

pub fn crop_grid_into(b: &BBox, out_size: usize, out: &mut [f32]) -> Result<()> {
    if out_size < 2 {
        return Err(Error::Usage(format!(
            "crop size must be at least 2, got {out_size}"
        )));
    }
    b.validate()?;
    if out.len() != out_size * out_size * 2 {
        return Err(shape_err!("grid buffer must hold {out_size}x{out_size}x2"));
    }
    let n = (out_size - 1) as f32;
    let (w, h) = (b.width(), b.height());
    for r in 0..out_size {
        let y = b.y_min + (r as f32 * h) / n;
        for c in 0..out_size {
            let x = b.x_min + (c as f32 * w) / n;
            let o = (r * out_size + c) * 2;
            out[o] = x;
            out[o + 1] = y;
        }
    }
    Ok(())
}

/// Integer pixel window `[x0, x1] × [y0, y1]` covering every bilinear tap of
/// a crop of `b`.
pub fn crop_window(b: &BBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x0 = b.x_min.max(0.0).floor() as usize;
    let y0 = b.y_min.max(0.0).floor() as usize;
    let x1 = ((b.x_max.ceil() as usize) + 1).min(width - 1);
    let y1 = ((b.y_max.ceil() as usize) + 1).min(height - 1);
    (x0.min(width - 1), y0.min(height - 1), x1, y1)
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{PoseState, NUM_BODY_JOINTS, NUM_SHAPE, SHAPE_OFFSET};

const LATENT: usize = 8;
const RHO: f32 = 0.9;

/// Per-joint angular spread in radians (joints 1..=21); the two hand joints
/// stay at rest.
const JOINT_SCALE: [f32; NUM_BODY_JOINTS] = [
    0.35, 0.35, 0.15, 0.40, 0.40, 0.12, 0.15, 0.15, 0.12, 0.15, 0.10, 0.10, 0.20, 0.35, 0.35, 0.40,
    0.40, 0.25, 0.25, 0.0, 0.0,
];

/// Seeded generator of plausible poses: body rotations come from a low-rank
/// latent factor model plus per-coordinate jitter, so joints co-vary the way
/// captured motion does. [`PoseSampler::step`] advances a smooth AR(1) walk
/// in the latent space; [`PoseSampler::sample`] draws independently.
#[derive(Clone, Debug)]
pub struct PoseSampler {
    rng: ChaCha8Rng,
    loadings: Vec<f32>,
    latent: [f32; LATENT],
    pub global_sigma: f32,
    pub shape_sigma: f32,
}

impl PoseSampler {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * NUM_BODY_JOINTS;
        let mut loadings = vec![0.0f32; n * LATENT];
        for (i, row) in loadings.chunks_mut(LATENT).enumerate() {
            let s = JOINT_SCALE[i / 3] / (LATENT as f32).sqrt();
            for x in row {
                let z: f32 = StandardNormal.sample(&mut rng);
                *x = s * z;
            }
        }
        let mut latent = [0.0f32; LATENT];
        for z in &mut latent {
            *z = StandardNormal.sample(&mut rng);
        }
        Self {
            rng,
            loadings,
            latent,
            global_sigma: 0.25,
            shape_sigma: 1.0,
        }
    }

    fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.rng)
    }

    fn compose(&mut self, latent: [f32; LATENT]) -> PoseState {
        let mut p = PoseState::zeros();
        let params = p.as_mut_slice();
        for c in 0..3 {
            params[c] = self.global_sigma * self.normal();
        }
        for i in 0..3 * NUM_BODY_JOINTS {
            let row = &self.loadings[i * LATENT..(i + 1) * LATENT];
            let mut acc = 0.0f32;
            for l in 0..LATENT {
                acc += row[l] * latent[l];
            }
            let jitter = 0.25 * JOINT_SCALE[i / 3] * self.normal();
            params[3 + i] = acc + jitter;
        }
        for k in 0..NUM_SHAPE {
            params[SHAPE_OFFSET + k] = self.shape_sigma * self.normal();
        }
        p.clear_hand_joints();
        p
    }

    /// Independent draw from the stationary distribution.
    pub fn sample(&mut self) -> PoseState {
        let mut z = [0.0f32; LATENT];
        for v in &mut z {
            *v = self.normal();
        }
        self.compose(z)
    }

    /// Next frame of the smooth walk. Global orientation and shape are held
    /// fixed within a walk, so consecutive frames differ only in body pose.
    pub fn step(&mut self, prev: &PoseState) -> PoseState {
        let k = (1.0 - RHO * RHO).sqrt();
        for l in 0..LATENT {
            let e = self.normal();
            self.latent[l] = RHO * self.latent[l] + k * e;
        }
        let mut next = self.compose(self.latent);
        let params = next.as_mut_slice();
        params[..3].copy_from_slice(&prev.as_slice()[..3]);
        params[SHAPE_OFFSET..].copy_from_slice(prev.shape());
        next
    }

    /// `n` consecutive frames of one walk.
    pub fn sequence(&mut self, n: usize) -> Vec<PoseState> {
        let mut out = Vec::with_capacity(n);
        let mut cur = self.sample();
        for _ in 0..n {
            cur = self.step(&cur);
            out.push(cur);
        }
        out
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.rng.gen_range(lo..hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::HAND_JOINTS;

    #[test]
    fn deterministic_and_hands_zero() {
        let a: Vec<_> = (0..5)
            .map({
                let mut s = PoseSampler::new(7);
                move |_| s.sample()
            })
            .collect();
        let mut s = PoseSampler::new(7);
        for p in &a {
            assert_eq!(*p, s.sample());
            for j in HAND_JOINTS {
                assert_eq!(p.joint_rotation(j), [0.0; 3]);
            }
        }
    }

    #[test]
    fn walk_is_smooth() {
        let mut s = PoseSampler::new(1);
        let seq = s.sequence(50);
        let step: f32 = seq
            .windows(2)
            .map(|w| w[0].max_abs_diff(&w[1]))
            .sum::<f32>()
            / 49.0;
        let mut t = PoseSampler::new(2);
        let (a, b) = (t.sample(), t.sample());
        assert!(step < a.max_abs_diff(&b));
    }
}

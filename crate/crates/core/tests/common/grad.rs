//! Finite-difference gradient suites, 20 seeds each.

use fsb_core::bodymodel::{
    skin, skin_backward, skin_forward, PoseSampler, PoseState, SkinKernel, Vec3, HAND_JOINTS,
    POSE_DIM, SHAPE_OFFSET,
};
use fsb_core::numkit::{grad, Array, GradTape, Var};
use fsb_core::projection::{
    bridge, conversion_loss, fit_objective, prepare_input, FitConfig, ProjectorConfig,
    ProjectorScratch, ProjectorWeights, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pose64, skin_oracle, toy};

pub const SEEDS: u64 = 20;
pub const TOLERANCE: f64 = 1e-2;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Builds a loss on a fresh tape from leaf values.
pub type Build = fn(&mut GradTape, &[Var]) -> Var;

/// Relative error between analytic and central-difference gradients over
/// every coordinate, in the max-norm.
pub fn fd_check(leaves: &[Array], build: Build) -> Result<f64, String> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = leaves.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &vars);
    let g = grad(&tape, loss).unwrap();
    let eval = |vals: &[Array]| -> f64 {
        let mut t = GradTape::new();
        let v: Vec<Var> = vals.iter().map(|a| t.leaf(a.clone())).collect();
        let l = build(&mut t, &v);
        t.value(l).unwrap().item().unwrap() as f64
    };
    let h = 1e-3f32;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let (mut checked, mut skipped) = (0usize, 0usize);
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = g.get(vars[li]).unwrap();
        for i in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            let mut minus = leaves.to_vec();
            let bump = |a: &Array, d: f32| {
                let mut data = a.data().to_vec();
                data[i] += d;
                Array::new(a.shape().to_vec(), data).unwrap()
            };
            plus[li] = bump(leaf, h);
            minus[li] = bump(leaf, -h);
            let (fp, f0, fm) = (eval(&plus), eval(leaves), eval(&minus));
            let fd = (fp - fm) / (2.0 * h as f64);
            let an = analytic.data()[i] as f64;
            // One-sided slopes that disagree mark a ReLU or |x| kink inside
            // the stencil, where no finite difference is meaningful.
            let (right, left) = ((fp - f0) / h as f64, (f0 - fm) / h as f64);
            if (right - left).abs() > 0.05 * (1.0 + fd.abs()) {
                skipped += 1;
                continue;
            }
            checked += 1;
            num = num.max((fd - an).abs());
            den = den.max(fd.abs().max(an.abs()));
        }
    }
    if skipped * 10 > checked {
        return Err(format!("{skipped} kinks among {checked} coordinates"));
    }
    Ok(num / den.max(1e-12))
}

pub struct KernelSuite {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub build: Build,
}

fn cube(t: &mut GradTape, v: &[Var]) -> Var {
    // Elementwise cube with a hand-written VJP.
    let x = t.value(v[0]).unwrap().clone();
    let out = Array::new(
        x.shape().to_vec(),
        x.data().iter().map(|a| a * a * a).collect(),
    )
    .unwrap();
    let y = t
        .custom(&[v[0]], out, move |g| {
            let d = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, g)| 3.0 * a * a * g)
                .collect();
            Ok(vec![Array::new(x.shape().to_vec(), d).unwrap()])
        })
        .unwrap();
    t.sum(y).unwrap()
}

/// Every differentiable tape operation, alone or composed.
pub const KERNEL_SUITES: &[KernelSuite] = &[
    KernelSuite {
        name: "matmul",
        shapes: &[&[3, 4], &[4, 2]],
        build: |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum(p).unwrap()
        },
    },
    KernelSuite {
        name: "add/sub/mul",
        shapes: &[&[2, 3], &[2, 3], &[2, 3]],
        build: |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let b = t.sub(a, v[2]).unwrap();
            let c = t.mul(b, v[0]).unwrap();
            t.sum(c).unwrap()
        },
    },
    KernelSuite {
        name: "bias/relu/scale",
        shapes: &[&[4, 3], &[3, 5], &[5]],
        build: |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row_bias(h, v[2]).unwrap();
            let h = t.relu(h).unwrap();
            let h = t.scale(h, 0.7).unwrap();
            t.sum_squares(h).unwrap()
        },
    },
    KernelSuite {
        name: "sum_abs",
        shapes: &[&[3, 3], &[3, 3]],
        build: |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum_abs(p).unwrap()
        },
    },
    KernelSuite {
        name: "mlp",
        shapes: &[&[5, 6], &[6, 8], &[8], &[8, 3], &[3], &[5, 3]],
        build: |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row_bias(h, v[2]).unwrap();
            let h = t.relu(h).unwrap();
            let y = t.matmul(h, v[3]).unwrap();
            let y = t.add_row_bias(y, v[4]).unwrap();
            let e = t.sub(y, v[5]).unwrap();
            let a = t.sum_squares(e).unwrap();
            let b = t.sum_abs(e).unwrap();
            let b = t.scale(b, 0.3).unwrap();
            t.add(a, b).unwrap()
        },
    },
    KernelSuite {
        name: "custom",
        shapes: &[&[2, 4]],
        build: cube,
    },
];

impl KernelSuite {
    pub fn run(&self) -> Result<(), String> {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let leaves: Vec<Array> = self
                .shapes
                .iter()
                .map(|s| random(&mut rng, s, 1.0))
                .collect();
            let rel = fd_check(&leaves, self.build).map_err(|e| format!("{}: {e}", self.name))?;
            if rel > TOLERANCE {
                return Err(format!("{} seed {seed}: relative error {rel}", self.name));
            }
        }
        Ok(())
    }
}

pub fn kernel_suite(name: &str) -> &'static KernelSuite {
    KERNEL_SUITES.iter().find(|s| s.name == name).unwrap()
}

fn sq_dist(a: [f64; 3], b: Vec3) -> f64 {
    (0..3).map(|k| (a[k] - b[k] as f64).powi(2)).sum()
}

/// The fitting objective written out in f64 from the reference skinning.
fn fit_objective_oracle(targets: &[Vec3], pose: &[f64], cfg: &FitConfig) -> f64 {
    let verts = skin_oracle(&toy().smpl, pose, cfg.correctives);
    let data: f64 = verts
        .iter()
        .zip(targets)
        .map(|(v, t)| sq_dist(*v, *t))
        .sum();
    let body: f64 = pose[3..SHAPE_OFFSET].iter().map(|x| x * x).sum();
    let shape: f64 = pose[SHAPE_OFFSET..].iter().map(|x| x * x).sum();
    data + cfg.lambda_pose as f64 * body + cfg.lambda_shape as f64 * shape
}

/// Fitting-objective gradient against differences of the f64 objective,
/// alternating default and zero regularizers.
pub fn fit_objective_suite() -> Result<(), String> {
    let t = toy();
    let mut s = PoseSampler::new(21);
    for seed in 0..SEEDS {
        let cfg = if seed % 2 == 0 {
            FitConfig::default()
        } else {
            FitConfig {
                lambda_pose: 0.0,
                lambda_shape: 0.0,
                ..FitConfig::default()
            }
        };
        let mesh = skin(&t.mhr, &s.sample(), true, SkinKernel::Sparse).unwrap();
        let targets = bridge(&mesh, &t.ground_truth).unwrap();
        let pose = s.sample();
        let eval = fit_objective(&t.smpl, &targets, &pose, &cfg).unwrap();
        let base = pose64(&pose);
        let f0 = fit_objective_oracle(&targets, &base, &cfg);
        if (eval.loss as f64 - f0).abs() > 1e-4 * f0.max(1.0) {
            return Err(format!("seed {seed}: loss {} vs {f0}", eval.loss));
        }
        let h = 1e-6;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..POSE_DIM {
            let (mut a, mut b) = (base.clone(), base.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (fit_objective_oracle(&targets, &a, &cfg)
                - fit_objective_oracle(&targets, &b, &cfg))
                / (2.0 * h);
            num = num.max((fd - eval.grad[i] as f64).abs());
            den = den.max(fd.abs());
        }
        if num / den > TOLERANCE {
            return Err(format!("seed {seed}: relative error {}", num / den));
        }
    }
    Ok(())
}

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    din: usize,
    dout: usize,
}

fn layers64(w: &ProjectorWeights) -> Vec<Layer> {
    w.layers
        .iter()
        .map(|l| Layer {
            w: l.w.data().iter().map(|&v| v as f64).collect(),
            b: l.b.iter().map(|&v| v as f64).collect(),
            din: l.w.shape()[0],
            dout: l.w.shape()[1],
        })
        .collect()
}

fn is_hand_slot(i: usize) -> bool {
    HAND_JOINTS.iter().any(|&j| (3 * j..3 * j + 3).contains(&i))
}

/// Batch conversion loss in f64: MLP, hand slots zeroed, reference
/// skinning, L1 vertex term and squared parameter term, averaged.
fn conversion_oracle(
    layers: &[Layer],
    x: &[f32],
    targets: &[Vec3],
    theta: &[PoseState],
    cfg: &TrainConfig,
) -> f64 {
    let b = theta.len();
    let dx = layers[0].din;
    let nv = targets.len() / b;
    let mut total = 0.0;
    for s in 0..b {
        let mut h: Vec<f64> = x[s * dx..(s + 1) * dx].iter().map(|&v| v as f64).collect();
        for (li, l) in layers.iter().enumerate() {
            let mut o = l.b.clone();
            for i in 0..l.din {
                for j in 0..l.dout {
                    o[j] += h[i] * l.w[i * l.dout + j];
                }
            }
            if li < 2 {
                o.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = o;
        }
        for (i, v) in h.iter_mut().enumerate() {
            if is_hand_slot(i) {
                *v = 0.0;
            }
        }
        let verts = skin_oracle(&toy().smpl, &h, true);
        let l1: f64 = verts
            .iter()
            .zip(&targets[s * nv..(s + 1) * nv])
            .map(|(v, t)| (0..3).map(|k| (v[k] - t[k] as f64).abs()).sum::<f64>())
            .sum();
        let reg: f64 = h
            .iter()
            .zip(theta[s].as_slice())
            .map(|(a, t)| (a - *t as f64).powi(2))
            .sum();
        total += cfg.lambda_v as f64 * l1 + cfg.lambda_reg as f64 * reg;
    }
    total / b as f64
}

/// Projector training-loss gradient (network, kinematics and skinning)
/// against differences of the f64 loss on a small network.
pub fn conversion_loss_suite() -> Result<(), String> {
    let t = toy();
    let template = std::sync::Arc::new(t.smpl.clone());
    let config = ProjectorConfig {
        subsample: 20,
        hidden: [8, 6],
    };
    let cfg = TrainConfig::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut w = ProjectorWeights::init(config, template.num_vertices(), seed).unwrap();
        for l in &mut w.layers {
            l.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
        let mut s = PoseSampler::new(400 + seed);
        let b = 2;
        let dx = config.input_dim();
        let mut x = vec![0.0; b * dx];
        let mut targets = Vec::new();
        let mut theta = Vec::new();
        let mut scratch = ProjectorScratch::default();
        for i in 0..b {
            let mesh = skin(&t.mhr, &s.sample(), true, SkinKernel::Sparse).unwrap();
            prepare_input(
                &mesh,
                &t.ground_truth,
                &w.subsample,
                &mut scratch,
                &mut x[i * dx..(i + 1) * dx],
            )
            .unwrap();
            targets.extend(bridge(&mesh, &t.ground_truth).unwrap());
            theta.push(s.sample());
        }
        let (loss, grads) = conversion_loss(&w, &template, &x, &targets, &theta, &cfg).unwrap();
        let base = layers64(&w);
        let f0 = conversion_oracle(&base, &x, &targets, &theta, &cfg);
        if (loss as f64 - f0).abs() > 1e-4 * f0 {
            return Err(format!("seed {seed}: loss {loss} vs {f0}"));
        }

        // Every output-layer coordinate plus a random sample of the others.
        let mut coords: Vec<(usize, bool, usize)> = Vec::new();
        for j in 0..base[2].b.len() {
            coords.push((2, true, j));
        }
        for j in 0..base[2].w.len() {
            coords.push((2, false, j));
        }
        for li in 0..2 {
            for _ in 0..30 {
                coords.push((li, false, rng.gen_range(0..base[li].w.len())));
            }
            for _ in 0..5 {
                coords.push((li, true, rng.gen_range(0..base[li].b.len())));
            }
        }
        let h = 1e-6;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &(li, bias, j) in &coords {
            let eval = |d: f64| {
                let mut l = layers64(&w);
                if bias {
                    l[li].b[j] += d;
                } else {
                    l[li].w[j] += d;
                }
                conversion_oracle(&l, &x, &targets, &theta, &cfg)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[2 * li + bias as usize].data()[j] as f64;
            num = num.max((fd - an).abs());
            den = den.max(fd.abs());
        }
        if num / den > TOLERANCE {
            return Err(format!("seed {seed}: relative error {}", num / den));
        }
    }
    Ok(())
}

/// `skin_backward` against central differences of the f64 reference
/// skinning, correctives on.
pub fn skin_backward_suite() -> Result<(), String> {
    let mhr = &toy().mhr;
    let mut s = PoseSampler::new(13);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let pose = s.sample();
        let dv: Vec<Vec3> = (0..mhr.num_vertices())
            .map(|_| [0; 3].map(|_| rng.gen_range(-1.0f32..1.0)))
            .collect();
        let fwd = skin_forward(mhr, &pose, true, SkinKernel::Sparse).unwrap();
        let g = skin_backward(mhr, &pose, &fwd, &dv, None, true).unwrap();
        let loss = |p: &[f64]| -> f64 {
            skin_oracle(mhr, p, true)
                .iter()
                .zip(&dv)
                .map(|(v, d)| (0..3).map(|c| v[c] * d[c] as f64).sum::<f64>())
                .sum()
        };
        let base = pose64(&pose);
        let h = 1e-5;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..POSE_DIM {
            let (mut a, mut b) = (base.clone(), base.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            num = num.max((fd - g[i] as f64).abs());
            den = den.max(fd.abs());
        }
        if num / den > TOLERANCE {
            return Err(format!("seed {seed}: relative error {}", num / den));
        }
    }
    Ok(())
}

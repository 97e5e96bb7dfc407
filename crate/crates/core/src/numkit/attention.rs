use super::kernels::{self, MatmulKernel};
use super::Array;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            eps: 1e-5,
        }
    }
}

/// Multi-head attention block: `norm(residual + softmax(QKᵀ/√d)V·Wo)`.
/// Residual and normalization are optional so degenerate configurations
/// can be expressed.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub heads: usize,
    pub wq: Array,
    pub wk: Array,
    pub wv: Array,
    pub wo: Array,
    pub residual: bool,
    pub norm: Option<LayerNorm>,
}

impl AttnWeights {
    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn validate(&self) -> Result<usize> {
        let (d, d2) = self.wq.dims2()?;
        if d != d2 {
            return Err(shape_err!("wq must be square, got {d}x{d2}"));
        }
        for (name, w) in [("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.dims2()? != (d, d) {
                return Err(shape_err!("{name} must be {d}x{d}, got {:?}", w.shape()));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(shape_err!("{} heads do not divide width {d}", self.heads));
        }
        if let Some(n) = &self.norm {
            if n.gamma.len() != d || n.beta.len() != d {
                return Err(shape_err!("layer norm width mismatch"));
            }
        }
        Ok(d)
    }
}

/// Reusable buffers for [`attention_into`].
#[derive(Clone, Debug, Default)]
pub struct AttnScratch {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    o: Vec<f32>,
    scores: Vec<f32>,
}

impl AttnScratch {
    pub fn new(max_q: usize, max_kv: usize, d: usize) -> Self {
        Self {
            q: vec![0.0; max_q * d],
            k: vec![0.0; max_kv * d],
            v: vec![0.0; max_kv * d],
            o: vec![0.0; max_q * d],
            scores: vec![0.0; max_kv],
        }
    }

    // Both only grow, so a sized scratch never reallocates.
    fn ensure_query(&mut self, mq: usize, mk: usize, d: usize) {
        if self.q.len() < mq * d {
            self.q.resize(mq * d, 0.0);
            self.o.resize(mq * d, 0.0);
        }
        if self.scores.len() < mk {
            self.scores.resize(mk, 0.0);
        }
    }

    fn ensure_kv(&mut self, mk: usize, d: usize) {
        if self.k.len() < mk * d {
            self.k.resize(mk * d, 0.0);
            self.v.resize(mk * d, 0.0);
        }
    }
}

/// Projects a key/value source into `k_out`, `v_out` (each `rows×D`).
pub fn project_kv(
    kernel: MatmulKernel,
    w: &AttnWeights,
    kv_src: &[f32],
    rows: usize,
    k_out: &mut [f32],
    v_out: &mut [f32],
) {
    let d = w.dim();
    kernels::matmul_into(kernel, kv_src, w.wk.data(), k_out, rows, d, d);
    kernels::matmul_into(kernel, kv_src, w.wv.data(), v_out, rows, d, d);
}

/// Attention over precomputed keys and values.
#[allow(clippy::too_many_arguments)]
pub fn attend_into(
    kernel: MatmulKernel,
    w: &AttnWeights,
    q_src: &[f32],
    mq: usize,
    k: &[f32],
    v: &[f32],
    mk: usize,
    residual: Option<&[f32]>,
    scratch: &mut AttnScratch,
    out: &mut [f32],
) -> Result<()> {
    let d = w.dim();
    scratch.ensure_query(mq, mk, d);
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let q = &mut scratch.q[..mq * d];
    kernels::matmul_into(kernel, q_src, w.wq.data(), q, mq, d, d);
    let o = &mut scratch.o[..mq * d];
    let scores = &mut scratch.scores[..mk];
    for h in 0..w.heads {
        let off = h * dh;
        for i in 0..mq {
            let qi = &q[i * d + off..i * d + off + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                let mut acc = 0.0f32;
                for (a, b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *s = acc * scale;
            }
            if !kernels::all_finite(scores) {
                return Err(Error::Numeric(format!(
                    "non-finite attention logit (head {h}, query {i})"
                )));
            }
            kernels::softmax_in_place(scores);
            let oi = &mut o[i * d + off..i * d + off + dh];
            oi.fill(0.0);
            for (j, &p) in scores.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (acc, b) in oi.iter_mut().zip(vj) {
                    *acc += p * b;
                }
            }
        }
    }
    let out = &mut out[..mq * d];
    kernels::matmul_into(kernel, o, w.wo.data(), out, mq, d, d);
    if w.residual {
        kernels::add_assign(out, residual.unwrap_or(q_src));
    }
    if let Some(n) = &w.norm {
        kernels::layer_norm_rows(out, &n.gamma, &n.beta, n.eps);
    }
    Ok(())
}

/// Full attention block: project keys/values from `kv_src`, attend with
/// queries from `q_src`, add `residual` (defaults to `q_src`) and normalize.
#[allow(clippy::too_many_arguments)]
pub fn attention_into(
    kernel: MatmulKernel,
    w: &AttnWeights,
    q_src: &[f32],
    mq: usize,
    kv_src: &[f32],
    mk: usize,
    residual: Option<&[f32]>,
    scratch: &mut AttnScratch,
    out: &mut [f32],
) -> Result<()> {
    let d = w.dim();
    scratch.ensure_kv(mk, d);
    let mut k = std::mem::take(&mut scratch.k);
    let mut v = std::mem::take(&mut scratch.v);
    project_kv(kernel, w, kv_src, mk, &mut k[..mk * d], &mut v[..mk * d]);
    let res = attend_into(
        kernel,
        w,
        q_src,
        mq,
        &k[..mk * d],
        &v[..mk * d],
        mk,
        residual,
        scratch,
        out,
    );
    scratch.k = k;
    scratch.v = v;
    res
}

/// Self-attention block over the rows of `x` (`M×D`).
pub fn attention_block(x: &Array, w: &AttnWeights) -> Result<Array> {
    cross_attention_block(x, x, w)
}

/// Rows of `x` attend to the rows of `context`.
pub fn cross_attention_block(x: &Array, context: &Array, w: &AttnWeights) -> Result<Array> {
    let d = w.validate()?;
    let (m, dx) = x.dims2()?;
    let (mk, dc) = context.dims2()?;
    if dx != d || dc != d {
        return Err(shape_err!("attention width {d}, inputs {dx} and {dc}"));
    }
    let mut scratch = AttnScratch::new(m, mk, d);
    let mut out = vec![0.0; m * d];
    attention_into(
        MatmulKernel::Streaming,
        w,
        x.data(),
        m,
        context.data(),
        mk,
        None,
        &mut scratch,
        &mut out,
    )?;
    Array::new(vec![m, d], out)
}

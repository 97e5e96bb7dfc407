//! Dense f32 kernels, a reverse-mode gradient tape and the FSB1 array format.
//!
//! Every kernel here sums in a fixed left-to-right order per output element,
//! so results are bit-identical regardless of how rows are scheduled.

mod array;
mod attention;
pub mod fsb1;
pub mod kernels;
pub mod optim;
mod sample;
mod tape;

pub use array::Array;
pub use attention::{
    attend_into, attention_block, attention_into, cross_attention_block, project_kv, AttnScratch,
    AttnWeights, LayerNorm,
};
pub use kernels::MatmulKernel;
pub use optim::{cosine_lr, Adam};
pub use sample::{bilinear_sample, bilinear_sample_into};
pub use tape::{grad, GradTape, Gradients, Var};

use crate::error::{shape_err, Result};

/// Matrix product `a[m×k] · b[k×n]` using the streaming kernel.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    matmul_with(a, b, MatmulKernel::Streaming)
}

/// Matrix product with an explicit kernel choice. Both kernels produce
/// identical bits.
pub fn matmul_with(a: &Array, b: &Array, kernel: MatmulKernel) -> Result<Array> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dimensions differ: {m}x{k} vs {k2}x{n}"
        ));
    }
    let mut out = vec![0.0f32; m * n];
    kernels::matmul_into(kernel, a.data(), b.data(), &mut out, m, k, n);
    Array::new(vec![m, n], out)
}

/// Transpose of a rank-2 array.
pub fn transpose(a: &Array) -> Result<Array> {
    let (m, n) = a.dims2()?;
    let src = a.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Array::new(vec![n, m], out)
}

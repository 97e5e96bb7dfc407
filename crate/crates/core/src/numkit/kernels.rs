//! Slice-level kernels. These write into caller-provided buffers and never
//! allocate, which is what the static execution plan relies on.

/// Matrix-product implementation.
///
/// `Generic` is the textbook dot-product loop; `Streaming` walks rows of `b`
/// so the inner loop is contiguous. Both accumulate each output element from
/// zero over `k` in increasing order, so they agree bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MatmulKernel {
    Generic,
    #[default]
    Streaming,
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_into(
    kernel: MatmulKernel,
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    match kernel {
        MatmulKernel::Generic => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f32;
                    for kk in 0..k {
                        acc += a[i * k + kk] * b[kk * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        MatmulKernel::Streaming => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                row.fill(0.0);
                let a_row = &a[i * k..(i + 1) * k];
                for (kk, &aik) in a_row.iter().enumerate() {
                    let b_row = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(b_row) {
                        *o += aik * bv;
                    }
                }
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n] + bias[n]`. The bias is added after the
/// full dot product.
#[allow(clippy::too_many_arguments)]
pub fn linear_into(
    kernel: MatmulKernel,
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    matmul_into(kernel, x, w, out, m, k, n);
    if let Some(b) = bias {
        add_row_bias(&mut out[..m * n], b);
    }
}

pub fn add_row_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn add_assign(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Per-row layer normalization, in place.
pub fn layer_norm_rows(x: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let d = gamma.len();
    for row in x.chunks_exact_mut(d) {
        let mut mean = 0.0f32;
        for v in row.iter() {
            mean += v;
        }
        mean /= d as f32;
        let mut var = 0.0f32;
        for v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
}

/// Numerically stable softmax over one row, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn relu_in_place(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// tanh-approximated GELU, in place.
pub fn gelu_in_place(x: &mut [f32]) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    for v in x {
        let u = *v;
        *v = 0.5 * u * (1.0 + (C * (u + 0.044_715 * u * u * u)).tanh());
    }
}

pub fn all_finite(x: &[f32]) -> bool {
    x.iter().all(|v| v.is_finite())
}

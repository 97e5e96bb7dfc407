//! Array-level reverse-mode differentiation.
//!
//! Operations are appended to a [`GradTape`] as they execute; [`grad`] walks
//! the tape backwards in exact reverse recording order. Composite operations
//! with a hand-written vector-Jacobian product (skinning, for instance) enter
//! the tape through [`GradTape::custom`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, MatmulKernel};
use super::{transpose, Array};
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

type Vjp = Box<dyn Fn(&Array) -> Result<Vec<Array>>>;

enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Relu(usize),
    Scale(usize, f32),
    Sum(usize),
    SumSquares(usize),
    SumAbs(usize),
    Custom { inputs: Vec<usize>, vjp: Vjp },
}

struct Node {
    value: Array,
    op: Op,
    /// Whether any differentiable leaf feeds this node.
    live: bool,
}

pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "handle {v:?} is not recorded on tape {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let live = match &op {
            Op::Leaf => true,
            Op::Const => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b) => self.nodes[*a].live || self.nodes[*b].live,
            Op::Relu(x) | Op::Scale(x, _) | Op::Sum(x) | Op::SumSquares(x) | Op::SumAbs(x) => {
                self.nodes[*x].live
            }
            Op::Custom { inputs, .. } => inputs.iter().any(|i| self.nodes[*i].live),
        };
        self.nodes.push(Node { value, op, live });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an input (a differentiable leaf).
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a value that receives no gradient. Products with constants
    /// skip the corresponding half of their backward pass.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Const)
    }

    pub fn value(&self, v: Var) -> Result<&Array> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    fn val(&self, i: usize) -> &Array {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = super::matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    fn zip_same(&self, ia: usize, ib: usize, f: impl Fn(f32, f32) -> f32) -> Result<Array> {
        let (a, b) = (self.val(ia), self.val(ib));
        if a.shape() != b.shape() {
            return Err(shape_err!("{:?} vs {:?}", a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Array::new(a.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.zip_same(ia, ib, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.zip_same(ia, ib, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.zip_same(ia, ib, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (_, n) = self.val(ix).dims2()?;
        if self.val(ib).len() != n {
            return Err(shape_err!(
                "bias of length {} for width {n}",
                self.val(ib).len()
            ));
        }
        let mut data = self.val(ix).data().to_vec();
        kernels::add_row_bias(&mut data, self.val(ib).data());
        let out = Array::new(self.val(ix).shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias(ix, ib)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let mut data = self.val(ix).data().to_vec();
        kernels::relu_in_place(&mut data);
        let out = Array::new(self.val(ix).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Relu(ix)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let ix = self.check(x)?;
        let data = self.val(ix).data().iter().map(|v| v * s).collect();
        let out = Array::new(self.val(ix).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Scale(ix, s)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).data().iter().sum::<f32>();
        Ok(self.push(Array::scalar(s)?, Op::Sum(ix)))
    }

    /// `Σ x²`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).data().iter().map(|v| v * v).sum::<f32>();
        Ok(self.push(Array::scalar(s)?, Op::SumSquares(ix)))
    }

    /// `Σ |x|` (the L1 norm).
    pub fn sum_abs(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).data().iter().map(|v| v.abs()).sum::<f32>();
        Ok(self.push(Array::scalar(s)?, Op::SumAbs(ix)))
    }

    /// Records a composite operation with a caller-supplied vector-Jacobian
    /// product. `vjp` receives the output gradient and must return one
    /// gradient per input, shaped like that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Array,
        vjp: impl Fn(&Array) -> Result<Vec<Array>> + 'static,
    ) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|v| self.check(*v))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(
            output,
            Op::Custom {
                inputs: idx,
                vjp: Box::new(vjp),
            },
        ))
    }
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Array>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<&Array> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::Usage(format!("handle {v:?} not on this tape")));
        }
        Ok(&self.grads[v.index])
    }
}

fn accumulate(slot: &mut Array, g: &Array) -> Result<()> {
    if slot.shape() != g.shape() {
        return Err(shape_err!(
            "gradient shape {:?} for value {:?}",
            g.shape(),
            slot.shape()
        ));
    }
    let mut data = std::mem::replace(slot, Array::scalar(0.0)?).into_data();
    kernels::add_assign(&mut data, g.data());
    *slot = Array::new(g.shape().to_vec(), data)?;
    Ok(())
}

fn scaled(a: &Array, s: f32) -> Result<Array> {
    Array::new(a.shape().to_vec(), a.data().iter().map(|v| v * s).collect())
}

/// Reverse pass from the scalar `loss`.
pub fn grad(tape: &GradTape, loss: Var) -> Result<Gradients> {
    let li = tape.check(loss)?;
    if tape.val(li).len() != 1 {
        return Err(Error::Usage(format!(
            "loss must be a scalar, got shape {:?}",
            tape.val(li).shape()
        )));
    }
    let mut grads = tape
        .nodes
        .iter()
        .map(|n| Array::zeros(n.value.shape()))
        .collect::<Result<Vec<_>>>()?;
    grads[li] = Array::scalar(1.0)?;
    for i in (0..=li).rev() {
        if !tape.nodes[i].live {
            continue;
        }
        let g = grads[i].clone();
        if g.data().iter().all(|v| *v == 0.0) {
            continue;
        }
        let live = |j: usize| tape.nodes[j].live;
        match &tape.nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if live(*a) {
                    let bt = transpose(tape.val(*b))?;
                    let ga = super::matmul_with(&g, &bt, MatmulKernel::Streaming)?;
                    accumulate(&mut grads[*a], &ga)?;
                }
                if live(*b) {
                    let at = transpose(tape.val(*a))?;
                    let gb = super::matmul_with(&at, &g, MatmulKernel::Streaming)?;
                    accumulate(&mut grads[*b], &gb)?;
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[*a], &g)?;
                accumulate(&mut grads[*b], &g)?;
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[*a], &g)?;
                accumulate(&mut grads[*b], &scaled(&g, -1.0)?)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (tape.val(*a), tape.val(*b));
                let ga = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                accumulate(&mut grads[*a], &Array::new(g.shape().to_vec(), ga)?)?;
                accumulate(&mut grads[*b], &Array::new(g.shape().to_vec(), gb)?)?;
            }
            Op::AddRowBias(x, b) => {
                accumulate(&mut grads[*x], &g)?;
                let n = tape.val(*b).len();
                let mut gb = vec![0.0f32; n];
                for row in g.data().chunks_exact(n) {
                    kernels::add_assign(&mut gb, row);
                }
                accumulate(
                    &mut grads[*b],
                    &Array::new(tape.val(*b).shape().to_vec(), gb)?,
                )?;
            }
            Op::Relu(x) => {
                let vx = tape.val(*x);
                let gx = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[*x], &Array::new(g.shape().to_vec(), gx)?)?;
            }
            Op::Scale(x, s) => accumulate(&mut grads[*x], &scaled(&g, *s)?)?,
            Op::Sum(x) => {
                let s = g.data()[0];
                accumulate(&mut grads[*x], &Array::full(tape.val(*x).shape(), s)?)?;
            }
            Op::SumSquares(x) => {
                let s = g.data()[0];
                let vx = tape.val(*x);
                accumulate(&mut grads[*x], &scaled(vx, 2.0 * s)?)?;
            }
            Op::SumAbs(x) => {
                let s = g.data()[0];
                let vx = tape.val(*x);
                let gx = vx.data().iter().map(|v| s * sign(*v)).collect();
                accumulate(&mut grads[*x], &Array::new(vx.shape().to_vec(), gx)?)?;
            }
            Op::Custom { inputs, vjp } => {
                let gin = vjp(&g)?;
                if gin.len() != inputs.len() {
                    return Err(Error::Usage(format!(
                        "custom op returned {} gradients for {} inputs",
                        gin.len(),
                        inputs.len()
                    )));
                }
                for (inp, gi) in inputs.iter().zip(&gin) {
                    accumulate(&mut grads[*inp], gi)?;
                }
            }
        }
    }
    Ok(Gradients {
        tape: tape.id,
        grads,
    })
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records every forward op as a node holding the op kind, the
//! output shape, and the computed values. [`Tape::backward`] seeds the loss
//! adjoint with 1 and walks the nodes in reverse, accumulating gradients
//! into the [`ParamSet`] that supplied the leaves. Tapes are cheap and
//! short-lived: build one per sample, call backward, drop it.
//!
//! Every op validates shapes up front and scans fresh values for NaN or
//! infinity, so numerical blow-ups surface at the op that produced them
//! instead of corrupting a whole training run.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{kernels, numel, ParamId, ParamSet, Tensor};
use crate::{Error, Result};

/// Handle of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2d {
        input: Var,
        factor: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        input: Var,
        indices: Vec<u32>,
    },
    GroupRowMax {
        input: Var,
        argmax: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Forward recording plus reverse accumulation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Var {
        self.nodes.push(Node { op, shape, values });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(values: &[f64], op: &str) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(alloc::format!(
                "non-finite value produced by {op}"
            )))
        }
    }

    /// Leaf from raw data; gradients stop here.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::Dimension(alloc::format!(
                "constant shape {:?} does not match {} values",
                shape,
                values.len()
            )));
        }
        Self::check_finite(&values, "constant")?;
        Ok(self.push(Op::Const, shape, values))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.constant(t.shape().to_vec(), t.values().to_vec())
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(vec![1], vec![v])
    }

    /// Leaf backed by a parameter; backward accumulates into its grad.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        let t = &params.get(id).tensor;
        Self::check_finite(t.values(), "param")?;
        Ok(self.push(Op::Param(id), t.shape().to_vec(), t.values().to_vec()))
    }

    fn binary_values(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(alloc::format!(
                "{op}: shape {:?} vs {:?}",
                self.nodes[a.0].shape,
                self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_values(a, b, "add")?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Self::check_finite(&values, "add")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add(a, b), shape, values))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_values(a, b, "sub")?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        Self::check_finite(&values, "sub")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub(a, b), shape, values))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_values(a, b, "mul")?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Self::check_finite(&values, "mul")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul(a, b), shape, values))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        Self::check_finite(&values, "scale")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Scale(a, c), shape, values))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.abs()).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Abs(a), shape, values))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Relu(a), shape, values))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::LeakyRelu(a, slope), shape, values))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| math::softplus(x))
            .collect();
        Self::check_finite(&values, "softplus")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Softplus(a), shape, values))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = math::pairwise_sum(&self.nodes[a.0].values);
        Self::check_finite(&[s], "sum")?;
        Ok(self.push(Op::Sum(a), vec![1], vec![s]))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(Error::Degenerate("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// 2-D cross-correlation of `[c_in, h, w]` with kernel `[c_out, c_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ishape = &self.nodes[input.0].shape;
        let kshape = &self.nodes[kernel.0].shape;
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(Error::Dimension(alloc::format!(
                "conv2d wants input [c,h,w] and kernel [co,ci,kh,kw], got {ishape:?} and {kshape:?}"
            )));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c_in {
            return Err(Error::Dimension(alloc::format!(
                "conv2d channel mismatch: input has {c_in}, kernel expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, padding).ok_or_else(|| {
            Error::Dimension(alloc::format!("conv2d kernel {kh} too large for height {h}"))
        })?;
        let ow = kernels::conv_out_dim(w, kw, stride, padding).ok_or_else(|| {
            Error::Dimension(alloc::format!("conv2d kernel {kw} too large for width {w}"))
        })?;
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [c_out] {
                return Err(Error::Dimension(alloc::format!(
                    "conv2d bias shape {:?}, want [{c_out}]",
                    self.nodes[b.0].shape
                )));
            }
        }
        let values = kernels::conv2d_forward(
            &self.nodes[input.0].values,
            c_in,
            h,
            w,
            &self.nodes[kernel.0].values,
            c_out,
            kh,
            kw,
            bias.map(|b| self.nodes[b.0].values.as_slice()),
            stride,
            padding,
        );
        Self::check_finite(&values, "conv2d")?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            vec![c_out, oh, ow],
            values,
        ))
    }

    /// Max pooling over `window x window` cells; high-side overhang shrinks
    /// the cell, ties keep the lowest linear index. Also returns the argmax
    /// (flat indices into the input).
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<(Var, Vec<u32>)> {
        let ishape = &self.nodes[input.0].shape;
        if ishape.len() != 3 {
            return Err(Error::Dimension(alloc::format!(
                "max_pool2d wants [c,h,w], got {ishape:?}"
            )));
        }
        if window == 0 {
            return Err(Error::Argument("max_pool2d window must be positive".into()));
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (values, argmax, oh, ow) =
            kernels::max_pool2d_forward(&self.nodes[input.0].values, c, h, w, window);
        let arg_copy = argmax.clone();
        let v = self.push(Op::MaxPool2d { input, argmax }, vec![c, oh, ow], values);
        Ok((v, arg_copy))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample2d(&mut self, input: Var, factor: usize) -> Result<Var> {
        let ishape = &self.nodes[input.0].shape;
        if ishape.len() != 3 {
            return Err(Error::Dimension(alloc::format!(
                "upsample2d wants [c,h,w], got {ishape:?}"
            )));
        }
        if factor == 0 {
            return Err(Error::Argument("upsample2d factor must be positive".into()));
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        let values = kernels::upsample2d_forward(&self.nodes[input.0].values, c, h, w, factor);
        Ok(self.push(
            Op::Upsample2d { input, factor },
            vec![c, h * factor, w * factor],
            values,
        ))
    }

    /// Row-wise affine map: input `[..., f_in]`, weight `[f_out, f_in]`,
    /// bias `[f_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.nodes[input.0].shape.clone();
        let wshape = &self.nodes[weight.0].shape;
        if wshape.len() != 2 || ishape.is_empty() {
            return Err(Error::Dimension(alloc::format!(
                "linear wants input [..., f_in] and weight [f_out, f_in], got {ishape:?} and {wshape:?}"
            )));
        }
        let (f_out, f_in) = (wshape[0], wshape[1]);
        if *ishape.last().unwrap() != f_in {
            return Err(Error::Dimension(alloc::format!(
                "linear feature mismatch: input ends in {}, weight expects {f_in}",
                ishape.last().unwrap()
            )));
        }
        if self.nodes[bias.0].shape != [f_out] {
            return Err(Error::Dimension(alloc::format!(
                "linear bias shape {:?}, want [{f_out}]",
                self.nodes[bias.0].shape
            )));
        }
        let rows = numel(&ishape) / f_in;
        let values = kernels::linear_forward(
            &self.nodes[input.0].values,
            rows,
            f_in,
            &self.nodes[weight.0].values,
            f_out,
            &self.nodes[bias.0].values,
        );
        Self::check_finite(&values, "linear")?;
        let mut oshape = ishape;
        *oshape.last_mut().unwrap() = f_out;
        Ok(self.push(Op::Linear { input, weight, bias }, oshape, values))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[input.0].values.len() {
            return Err(Error::Dimension(alloc::format!(
                "reshape to {:?} changes element count from {}",
                shape,
                self.nodes[input.0].values.len()
            )));
        }
        let values = self.nodes[input.0].values.clone();
        Ok(self.push(Op::Reshape(input), shape, values))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let rank = self.nodes[inputs[0].0].shape.len();
        if axis >= rank {
            return Err(Error::Dimension(alloc::format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut oshape = self.nodes[inputs[0].0].shape.clone();
        for &v in &inputs[1..] {
            let s = &self.nodes[v.0].shape;
            if s.len() != rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != oshape[i])
            {
                return Err(Error::Dimension(alloc::format!(
                    "concat shapes {:?} and {s:?} differ outside axis {axis}",
                    oshape
                )));
            }
            oshape[axis] += s[axis];
        }
        let outer: usize = oshape[..axis].iter().product();
        let out_block: usize = oshape[axis..].iter().product();
        let mut values = vec![0.0; outer * out_block];
        let mut offset = 0;
        for &v in inputs {
            let s = &self.nodes[v.0].shape;
            let block: usize = s[axis..].iter().product();
            let src = &self.nodes[v.0].values;
            for o in 0..outer {
                values[o * out_block + offset..o * out_block + offset + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            oshape,
            values,
        ))
    }

    /// Select rows of a `[rows, cols]` tensor; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, indices: &[u32]) -> Result<Var> {
        let ishape = &self.nodes[input.0].shape;
        if ishape.len() != 2 {
            return Err(Error::Dimension(alloc::format!(
                "gather_rows wants [rows, cols], got {ishape:?}"
            )));
        }
        let (rows, cols) = (ishape[0], ishape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::Argument(alloc::format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = &self.nodes[input.0].values;
        let mut values = vec![0.0; indices.len() * cols];
        for (r, &i) in indices.iter().enumerate() {
            values[r * cols..(r + 1) * cols]
                .copy_from_slice(&src[i as usize * cols..(i as usize + 1) * cols]);
        }
        Ok(self.push(
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            vec![indices.len(), cols],
            values,
        ))
    }

    /// Column-wise max over consecutive groups of `group` rows.
    ///
    /// Input `[group * n, cols]` becomes `[n, cols]`; ties keep the earliest
    /// row in the group.
    pub fn group_row_max(&mut self, input: Var, group: usize) -> Result<Var> {
        let ishape = &self.nodes[input.0].shape;
        if ishape.len() != 2 {
            return Err(Error::Dimension(alloc::format!(
                "group_row_max wants [rows, cols], got {ishape:?}"
            )));
        }
        let (rows, cols) = (ishape[0], ishape[1]);
        if group == 0 || rows % group != 0 {
            return Err(Error::Dimension(alloc::format!(
                "group_row_max: {rows} rows not divisible into groups of {group}"
            )));
        }
        let n = rows / group;
        let src = &self.nodes[input.0].values;
        let mut values = vec![0.0; n * cols];
        let mut argmax = vec![0u32; n * cols];
        for g in 0..n {
            let base = g * group;
            let first = &src[base * cols..(base + 1) * cols];
            values[g * cols..(g + 1) * cols].copy_from_slice(first);
            for c in 0..cols {
                argmax[g * cols + c] = (base * cols + c) as u32;
            }
            for r in 1..group {
                let row = &src[(base + r) * cols..(base + r + 1) * cols];
                for c in 0..cols {
                    if row[c] > values[g * cols + c] {
                        values[g * cols + c] = row[c];
                        argmax[g * cols + c] = ((base + r) * cols + c) as u32;
                    }
                }
            }
        }
        Ok(self.push(
            Op::GroupRowMax { input, argmax },
            vec![n, cols],
            values,
        ))
    }

    /// Softmax cross-entropy of a `[classes]` logit vector against a label.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let ishape = &self.nodes[logits.0].shape;
        if ishape.len() != 1 {
            return Err(Error::Dimension(alloc::format!(
                "cross_entropy wants a rank-1 logit vector, got {ishape:?}"
            )));
        }
        let vals = &self.nodes[logits.0].values;
        if target >= vals.len() {
            return Err(Error::Argument(alloc::format!(
                "cross_entropy target {target} out of range for {} classes",
                vals.len()
            )));
        }
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in vals {
            z += math::exp(v - m);
        }
        let loss = m + math::ln(z) - vals[target];
        Self::check_finite(&[loss], "cross_entropy")?;
        Ok(self.push(Op::CrossEntropy { logits, target }, vec![1], vec![loss]))
    }

    /// Accumulate d(loss)/d(param) into the grads of `params`.
    ///
    /// `loss` must be scalar. Repeated calls keep accumulating; callers
    /// zero the grads when they want a fresh batch.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Argument("backward: unknown var".into()));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Argument(alloc::format!(
                "backward wants a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(id) => {
                    let grad = params
                        .get_mut(*id)
                        .tensor
                        .grad_mut()
                        .expect("parameters always track grads");
                    kernels::axpy(grad, 1.0, &g);
                }
                Op::Add(a, b) => {
                    kernels::axpy(self.adj_of(&mut adj, *a), 1.0, &g);
                    kernels::axpy(self.adj_of(&mut adj, *b), 1.0, &g);
                }
                Op::Sub(a, b) => {
                    kernels::axpy(self.adj_of(&mut adj, *a), 1.0, &g);
                    kernels::axpy(self.adj_of(&mut adj, *b), -1.0, &g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    {
                        let da = self.adj_of(&mut adj, a);
                        for ((d, gi), bv) in da.iter_mut().zip(&g).zip(&self.nodes[b.0].values) {
                            *d += gi * bv;
                        }
                    }
                    let db = self.adj_of(&mut adj, b);
                    for ((d, gi), av) in db.iter_mut().zip(&g).zip(&self.nodes[a.0].values) {
                        *d += gi * av;
                    }
                }
                Op::Scale(a, c) => {
                    kernels::axpy(self.adj_of(&mut adj, *a), *c, &g);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let da = self.adj_of(&mut adj, a);
                    for ((d, gi), &x) in da.iter_mut().zip(&g).zip(&self.nodes[a.0].values) {
                        // Subgradient 0 at the kink.
                        *d += gi * if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da = self.adj_of(&mut adj, a);
                    for ((d, gi), &x) in da.iter_mut().zip(&g).zip(&self.nodes[a.0].values) {
                        if x > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let (a, slope) = (*a, *slope);
                    let da = self.adj_of(&mut adj, a);
                    for ((d, gi), &x) in da.iter_mut().zip(&g).zip(&self.nodes[a.0].values) {
                        *d += gi * if x > 0.0 { 1.0 } else { slope };
                    }
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let da = self.adj_of(&mut adj, a);
                    for ((d, gi), &x) in da.iter_mut().zip(&g).zip(&self.nodes[a.0].values) {
                        *d += gi * math::sigmoid(x);
                    }
                }
                Op::Sum(a) => {
                    let da = self.adj_of(&mut adj, *a);
                    let gi = g[0];
                    for d in da.iter_mut() {
                        *d += gi;
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (input, kernel, bias) = (*input, *kernel, *bias);
                    let (stride, padding) = (*stride, *padding);
                    let ishape = &self.nodes[input.0].shape;
                    let kshape = &self.nodes[kernel.0].shape;
                    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (c_out, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                    // Scratch buffers keep the accumulation correct even if
                    // two operands alias the same var.
                    let mut dinput = vec![0.0; self.nodes[input.0].values.len()];
                    let mut dkernel = vec![0.0; self.nodes[kernel.0].values.len()];
                    let mut dbias = bias.map(|b| vec![0.0; self.nodes[b.0].values.len()]);
                    kernels::conv2d_backward(
                        &g,
                        &self.nodes[input.0].values,
                        &self.nodes[kernel.0].values,
                        c_in,
                        h,
                        w,
                        c_out,
                        kh,
                        kw,
                        stride,
                        padding,
                        Some(&mut dinput),
                        Some(&mut dkernel),
                        dbias.as_deref_mut(),
                    );
                    kernels::axpy(self.adj_of(&mut adj, input), 1.0, &dinput);
                    kernels::axpy(self.adj_of(&mut adj, kernel), 1.0, &dkernel);
                    if let Some(b) = bias {
                        kernels::axpy(self.adj_of(&mut adj, b), 1.0, &dbias.unwrap());
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    let di = self.adj_of(&mut adj, *input);
                    for (o, &src) in argmax.iter().enumerate() {
                        di[src as usize] += g[o];
                    }
                }
                Op::Upsample2d { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    let ishape = &self.nodes[input.0].shape;
                    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let di = self.adj_of(&mut adj, input);
                    kernels::upsample2d_backward(&g, c, h, w, factor, di);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let wshape = &self.nodes[weight.0].shape;
                    let (f_out, f_in) = (wshape[0], wshape[1]);
                    let rows = self.nodes[input.0].values.len() / f_in;
                    let mut dinput = vec![0.0; self.nodes[input.0].values.len()];
                    let mut dweight = vec![0.0; self.nodes[weight.0].values.len()];
                    let mut dbias = vec![0.0; f_out];
                    kernels::linear_backward(
                        &g,
                        &self.nodes[input.0].values,
                        &self.nodes[weight.0].values,
                        rows,
                        f_in,
                        f_out,
                        Some(&mut dinput),
                        Some(&mut dweight),
                        Some(&mut dbias),
                    );
                    kernels::axpy(self.adj_of(&mut adj, input), 1.0, &dinput);
                    kernels::axpy(self.adj_of(&mut adj, weight), 1.0, &dweight);
                    kernels::axpy(self.adj_of(&mut adj, bias), 1.0, &dbias);
                }
                Op::Reshape(a) => {
                    kernels::axpy(self.adj_of(&mut adj, *a), 1.0, &g);
                }
                Op::Concat { inputs, axis } => {
                    let oshape = &self.nodes[i].shape;
                    let outer: usize = oshape[..*axis].iter().product();
                    let out_block: usize = oshape[*axis..].iter().product();
                    let mut offset = 0;
                    for &v in inputs {
                        let block: usize =
                            self.nodes[v.0].shape[*axis..].iter().product();
                        let dv = self.adj_of(&mut adj, v);
                        for o in 0..outer {
                            kernels::axpy(
                                &mut dv[o * block..(o + 1) * block],
                                1.0,
                                &g[o * out_block + offset..o * out_block + offset + block],
                            );
                        }
                        offset += block;
                    }
                }
                Op::GatherRows { input, indices } => {
                    let input = *input;
                    let cols = self.nodes[input.0].shape[1];
                    let di = self.adj_of(&mut adj, input);
                    for (r, &idx) in indices.iter().enumerate() {
                        kernels::axpy(
                            &mut di[idx as usize * cols..(idx as usize + 1) * cols],
                            1.0,
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
                Op::GroupRowMax { input, argmax } => {
                    let input = *input;
                    let di = self.adj_of(&mut adj, input);
                    for (o, &src) in argmax.iter().enumerate() {
                        di[src as usize] += g[o];
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let (logits, target) = (*logits, *target);
                    let vals = &self.nodes[logits.0].values;
                    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for &v in vals {
                        z += math::exp(v - m);
                    }
                    let gi = g[0];
                    let dl = self.adj_of(&mut adj, logits);
                    for (c, d) in dl.iter_mut().enumerate() {
                        let p = math::exp(vals[c] - m) / z;
                        *d += gi * (p - if c == target { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Ok(())
    }

    fn adj_of<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let len = self.nodes[v.0].values.len();
        adj[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

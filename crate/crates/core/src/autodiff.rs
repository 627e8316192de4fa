//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in evaluation order, so the tape is
//! already a topological order and [`Graph::backward`] only has to walk it in
//! reverse. Nodes that no parameter reaches are never differentiated.

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    /// `y[b, ..] = input[b, ..] * weights[b, column]`
    ScaleByColumn {
        input: Var,
        weights: Var,
        column: usize,
    },
    IndexFirst {
        input: Var,
        index: usize,
    },
    Reshape(Var),
    SliceBatch {
        input: Var,
        index: usize,
    },
    ConcatBatch(Vec<Var>),
    ConcatCols(Var, Var),
    MulConst {
        input: Var,
        mask: Tensor<T>,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Tensor<T>,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], materialized only for nodes the
/// loss depends on.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `value` when the loss does not reach it.
    pub fn wrt(&self, v: Var, value: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| value.zeros_like())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let y = ops::depthwise_conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            y,
            Op::Depthwise {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let y = ops::global_average_pool(self.value(input))?;
        Ok(self.push(y, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = ops::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(y, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn fully_connected(&mut self, x: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weights)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis of a `[B, D]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.value(x).expect_rank(2, "softmax")?;
        let y = ops::softmax(self.value(x), 1)?;
        Ok(self.push(y, Op::Softmax(x), &[x]))
    }

    /// Scales example `b` of `input` by `weights[b, column]`.
    pub fn scale_by_column(&mut self, input: Var, weights: Var, column: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weights);
        w.expect_rank(2, "scale_by_column weights")?;
        let batch = x.shape()[0];
        if w.shape()[0] != batch || column >= w.shape()[1] {
            return shape_err(format!(
                "scale_by_column: weights {:?} (column {column}) incompatible with input {:?}",
                w.shape(),
                x.shape()
            ));
        }
        let n = w.shape()[1];
        let per = x.len() / batch;
        let mut y = x.clone();
        for (b, chunk) in y.data_mut().chunks_exact_mut(per).enumerate() {
            let s = w.data()[b * n + column];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(
            y,
            Op::ScaleByColumn {
                input,
                weights,
                column,
            },
            &[input, weights],
        ))
    }

    /// `input[index, ..]` along the leading axis.
    pub fn index_first(&mut self, input: Var, index: usize) -> Result<Var> {
        let y = self.value(input).index_first(index)?;
        Ok(self.push(y, Op::IndexFirst { input, index }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(input).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(input), &[input]))
    }

    /// Example `index` of a batch, keeping a leading extent of one.
    pub fn slice_batch(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let mut shape = x.shape().to_vec();
        let row = x.index_first(index)?;
        shape[0] = 1;
        let y = row.reshape(shape)?;
        Ok(self.push(y, Op::SliceBatch { input, index }, &[input]))
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_batch needs at least one input");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut data = Vec::new();
        let mut lead = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return shape_err(format!(
                    "concat_batch: {:?} does not match trailing extents {tail:?}",
                    v.shape()
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::ConcatBatch(parts.to_vec()), parts))
    }

    /// `[B,p] ++ [B,q] -> [B,p+q]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_rank(2, "concat_cols lhs")?;
        vb.expect_rank(2, "concat_cols rhs")?;
        let (rows, p, q) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        if vb.shape()[0] != rows {
            return shape_err(format!(
                "concat_cols: row counts differ between {:?} and {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&vb.data()[r * q..(r + 1) * q]);
        }
        let y = Tensor::new(vec![rows, p + q], data)?;
        Ok(self.push(y, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, input: Var, mask: Tensor<T>) -> Result<Var> {
        let y = self.value(input).zip_map(&mask, |a, b| a * b)?;
        Ok(self.push(y, Op::MulConst { input, mask }, &[input]))
    }

    /// Per-channel `x * scale + shift` over the trailing axis.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let (x, s, t) = (self.value(input), self.value(scale), self.value(shift));
        let c = *x.shape().last().expect("rank >= 1");
        if s.shape() != [c] || t.shape() != [c] {
            return shape_err(format!(
                "channel_affine: scale {:?} / shift {:?} do not match input {:?}",
                s.shape(),
                t.shape(),
                x.shape()
            ));
        }
        let mut y = x.clone();
        for px in y.data_mut().chunks_exact_mut(c) {
            for ((v, &a), &b) in px.iter_mut().zip(s.data()).zip(t.data()) {
                *v = *v * a + b;
            }
        }
        Ok(self.push(
            y,
            Op::ChannelAffine {
                input,
                scale,
                shift,
            },
            &[input, scale, shift],
        ))
    }

    /// Mean over the batch of `-sum_j targets[b,j] * log softmax(logits)[b,j]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        z.expect_rank(2, "softmax_cross_entropy logits")?;
        z.expect_same_shape(&targets, "softmax_cross_entropy")?;
        let (b, d) = (z.shape()[0], z.shape()[1]);
        let mut total = T::zero();
        for (row, trow) in z.data().chunks_exact(d).zip(targets.data().chunks_exact(d)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (&v, &t) in row.iter().zip(trow) {
                total += t * (lse - v);
            }
        }
        let y = Tensor::scalar(total / T::of(b as f64));
        Ok(self.push(y, Op::SoftmaxCrossEntropy { logits, targets }, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec())?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(T::one(), &delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (dx, dk) =
                    ops::conv2d_backward(self.value(*input), self.value(*kernel), g, *stride, *padding)?;
                acc(*input, dx)?;
                acc(*kernel, dk)?;
            }
            Op::Depthwise {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (dx, dk) = ops::depthwise_conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                )?;
                acc(*input, dx)?;
                acc(*kernel, dk)?;
            }
            Op::GlobalAvgPool(x) => {
                acc(*x, ops::global_average_pool_backward(self.shape(*x), g)?)?;
            }
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), g)?;
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::AddBias(x, bias) => {
                let d = self.shape(*bias)[0];
                let mut db = vec![T::zero(); d];
                for row in g.data().chunks_exact(d) {
                    for (s, &v) in db.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*x, g.clone())?;
                acc(*bias, Tensor::new(vec![d], db)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |s, up| up * s * (T::one() - s))?;
                acc(*x, d)?;
            }
            Op::Relu(x) => {
                let d = self.value(*x).zip_map(g, |v, up| if v > T::zero() { up } else { T::zero() })?;
                acc(*x, d)?;
            }
            Op::Softmax(x) => {
                let d = node.value.shape()[1];
                let mut dx = g.clone();
                for (row, s) in dx.data_mut().chunks_exact_mut(d).zip(node.value.data().chunks_exact(d)) {
                    let dot: T = row.iter().zip(s).map(|(&u, &p)| u * p).sum();
                    for (r, &p) in row.iter_mut().zip(s) {
                        *r = p * (*r - dot);
                    }
                }
                acc(*x, dx)?;
            }
            Op::ScaleByColumn {
                input,
                weights,
                column,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let (batch, n) = (w.shape()[0], w.shape()[1]);
                let per = x.len() / batch;
                let mut dx = g.clone();
                let mut dw = vec![T::zero(); batch * n];
                for b in 0..batch {
                    let s = w.data()[b * n + column];
                    let gs = &g.data()[b * per..(b + 1) * per];
                    let xs = &x.data()[b * per..(b + 1) * per];
                    dw[b * n + column] = gs.iter().zip(xs).map(|(&u, &v)| u * v).sum();
                    dx.data_mut()[b * per..(b + 1) * per].iter_mut().for_each(|v| *v *= s);
                }
                acc(*input, dx)?;
                acc(*weights, Tensor::new(w.shape().to_vec(), dw)?)?;
            }
            Op::IndexFirst { input, index } => {
                let x = self.value(*input);
                let per = x.len() / x.shape()[0];
                let mut dx = x.zeros_like();
                dx.data_mut()[index * per..(index + 1) * per].copy_from_slice(g.data());
                acc(*input, dx)?;
            }
            Op::Reshape(x) => {
                acc(*x, g.reshape(self.shape(*x).to_vec())?)?;
            }
            Op::SliceBatch { input, index } => {
                let x = self.value(*input);
                let per = x.len() / x.shape()[0];
                let mut dx = x.zeros_like();
                dx.data_mut()[index * per..(index + 1) * per].copy_from_slice(g.data());
                acc(*input, dx)?;
            }
            Op::ConcatBatch(parts) => {
                let mut at = 0;
                for &p in parts {
                    let v = self.value(p);
                    let slice = g.data()[at..at + v.len()].to_vec();
                    at += v.len();
                    acc(p, Tensor::new(v.shape().to_vec(), slice)?)?;
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.shape(*a)[1], self.shape(*b)[1]);
                let rows = self.shape(*a)[0];
                let mut da = Vec::with_capacity(rows * p);
                let mut db = Vec::with_capacity(rows * q);
                for row in g.data().chunks_exact(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                acc(*a, Tensor::new(vec![rows, p], da)?)?;
                acc(*b, Tensor::new(vec![rows, q], db)?)?;
            }
            Op::MulConst { input, mask } => {
                acc(*input, g.zip_map(mask, |u, m| u * m)?)?;
            }
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => {
                let x = self.value(*input);
                let s = self.value(*scale);
                let c = s.len();
                let mut dx = g.clone();
                let mut ds = vec![T::zero(); c];
                let mut dt = vec![T::zero(); c];
                for ((gp, xp), dxp) in g
                    .data()
                    .chunks_exact(c)
                    .zip(x.data().chunks_exact(c))
                    .zip(dx.data_mut().chunks_exact_mut(c))
                {
                    for ch in 0..c {
                        ds[ch] += gp[ch] * xp[ch];
                        dt[ch] += gp[ch];
                        dxp[ch] = gp[ch] * s.data()[ch];
                    }
                }
                acc(*input, dx)?;
                acc(*scale, Tensor::new(vec![c], ds)?)?;
                acc(*shift, Tensor::new(vec![c], dt)?)?;
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let z = self.value(*logits);
                let (b, d) = (z.shape()[0], z.shape()[1]);
                let up = g.data()[0] / T::of(b as f64);
                let p = ops::softmax(z, 1)?;
                let mut dz = p.clone();
                for ((row, prow), trow) in dz
                    .data_mut()
                    .chunks_exact_mut(d)
                    .zip(p.data().chunks_exact(d))
                    .zip(targets.data().chunks_exact(d))
                {
                    let mass: T = trow.iter().copied().sum();
                    for ((r, &pv), &t) in row.iter_mut().zip(prow).zip(trow) {
                        *r = up * (pv * mass - t);
                    }
                }
                acc(*logits, dz)?;
            }
            Op::Sum(x) => {
                let up = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x).to_vec(), up)?)?;
            }
        }
        Ok(())
    }
}

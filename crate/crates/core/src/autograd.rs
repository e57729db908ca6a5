//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed operation in order, so the node list is already a
//! topological order. [`Graph::backward`] walks it once in reverse and leaves a gradient on
//! every node that requires one.

use std::collections::HashMap;

use crate::deform;
use crate::error::{Error, Result};
use crate::kernels::{
    self, conv::ConvGrads, BatchNormSaved, BatchStats, ConvGeometry, NormMode, RunningStats,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    DeformConv2d {
        x: Var,
        w: Var,
        offsets: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Warp {
        x: Var,
        offsets: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    Relu(Var),
    Concat(Vec<Var>),
    Downsample(Var, usize),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    ReconLoss {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A named trainable leaf; repeated calls with the same name return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_owned(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn param_grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), g)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push("conv2d", out, Op::Conv2d { x, w, b, g }, &inputs)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv_transpose2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push("conv_transpose2d", out, Op::ConvTranspose2d { x, w, b, stride, padding }, &inputs)
    }

    pub fn deform_conv2d(&mut self, x: Var, w: Var, offsets: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = deform::deform_conv2d(
            self.value(x),
            self.value(w),
            self.value(offsets),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let inputs: Vec<Var> = [x, w, offsets].into_iter().chain(b).collect();
        self.push(
            "deform_conv2d",
            out,
            Op::DeformConv2d {
                x,
                w,
                offsets,
                b,
                stride,
                padding,
            },
            &inputs,
        )
    }

    pub fn warp(&mut self, x: Var, offsets: Var) -> Result<Var> {
        let out = deform::warp(self.value(x), self.value(offsets))?;
        self.push("warp", out, Op::Warp { x, offsets }, &[x, offsets])
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        mode: NormMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (out, saved, batch) = kernels::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), stats, mode, eps)?;
        let v = self.push("batch_norm", out, Op::BatchNorm { x, gamma, beta, saved }, &[x, gamma, beta])?;
        Ok((v, batch))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let [n, _, h, w] = self.value(first).dims4("concat")?;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4("concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat", format!("[{n}, *, {h}, {w}]"), format!("{:?}", self.value(p).shape())));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let len = t.numel() / n;
                data.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
            }
        }
        let out = Tensor::new([n, channels, h, w], data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::downsample_area(self.value(x), factor)?;
        self.push("downsample", out, Op::Downsample(x, factor), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, format!("{:?}", self.value(a).shape()), format!("{:?}", self.value(b).shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect())?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect())?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        self.push("scale", out, Op::Scale(x, k), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// Per-item `(1/(h*w)) * sum_p ||pred(p) - target(p)||^2` over channels, averaged over the batch.
    pub fn reconstruction_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("reconstruction_loss", pred, target)?;
        let [n, _, h, w] = self.value(pred).dims4("reconstruction_loss")?;
        let denom = T::from_usize(n * h * w).unwrap();
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let total: T = p.iter().zip(t).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        self.push("reconstruction_loss", Tensor::scalar(total / denom), Op::ReconLoss { pred, target }, &[pred, target])
    }

    /// Clears all gradients so that [`backward`](Self::backward) may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.consumed = false;
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            let contributions = self.input_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(dg.data()).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, g: geom } => {
                let want = ConvGrads {
                    input: self.wants(x),
                    weight: self.wants(w),
                    bias: b.is_some_and(|b| self.wants(b)),
                };
                let (dx, dw, db) = kernels::conv2d_backward(self.value(x), self.value(w), geom, g, want)?;
                out.extend(dx.map(|t| (x, t)));
                out.extend(dw.map(|t| (w, t)));
                out.extend(b.zip(db));
            }
            &Op::ConvTranspose2d { x, w, b, stride, padding } => {
                let want = ConvGrads {
                    input: self.wants(x),
                    weight: self.wants(w),
                    bias: b.is_some_and(|b| self.wants(b)),
                };
                let (dx, dw, db) = kernels::conv_transpose2d_backward(self.value(x), self.value(w), stride, padding, g, want)?;
                out.extend(dx.map(|t| (x, t)));
                out.extend(dw.map(|t| (w, t)));
                out.extend(b.zip(db));
            }
            &Op::DeformConv2d {
                x,
                w,
                offsets,
                b,
                stride,
                padding,
            } => {
                let d = deform::deform_conv2d_backward(self.value(x), self.value(w), self.value(offsets), stride, padding, g)?;
                out.push((x, d.input));
                out.push((w, d.weight));
                out.push((offsets, d.offsets));
                out.extend(b.map(|b| (b, d.bias)));
            }
            &Op::Warp { x, offsets } => {
                let (dx, doff) = deform::warp_backward(self.value(x), self.value(offsets), g)?;
                out.push((x, dx));
                out.push((offsets, doff));
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = kernels::batch_norm_backward(self.value(*gamma), saved, g)?;
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            &Op::Relu(x) => {
                let v = self.value(x);
                let d = v.data().iter().zip(g.data()).map(|(&a, &gg)| if a > T::zero() { gg } else { T::zero() }).collect();
                out.push((x, Tensor::new(v.shape().to_vec(), d)?));
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let total = g.numel() / n;
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel() / n;
                    let mut d = Vec::with_capacity(len * n);
                    for b in 0..n {
                        d.extend_from_slice(&g.data()[b * total + offset..b * total + offset + len]);
                    }
                    offset += len;
                    out.push((p, Tensor::new(self.value(p).shape().to_vec(), d)?));
                }
            }
            &Op::Downsample(x, factor) => out.push((x, kernels::downsample_area_backward(g, factor)?)),
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let da = vb.data().iter().zip(g.data()).map(|(y, gg)| *y * *gg).collect();
                let db = va.data().iter().zip(g.data()).map(|(x, gg)| *x * *gg).collect();
                out.push((a, Tensor::new(va.shape().to_vec(), da)?));
                out.push((b, Tensor::new(vb.shape().to_vec(), db)?));
            }
            &Op::Scale(x, k) => out.push((x, g.map(|v| v * k))),
            &Op::Square(x) => {
                let v = self.value(x);
                let two = T::one() + T::one();
                let d = v.data().iter().zip(g.data()).map(|(a, b)| two * *a * *b).collect();
                out.push((x, Tensor::new(v.shape().to_vec(), d)?));
            }
            &Op::Sum(x) => {
                let s = g.data()[0];
                out.push((x, Tensor::full(self.value(x).shape().to_vec(), s)));
            }
            &Op::ReconLoss { pred, target } => {
                let (p, t) = (self.value(pred), self.value(target));
                let [n, _, h, w] = p.dims4("reconstruction_loss")?;
                let k = (T::one() + T::one()) * g.data()[0] / T::from_usize(n * h * w).unwrap();
                let dp: Vec<T> = p.data().iter().zip(t.data()).map(|(a, b)| k * (*a - *b)).collect();
                let dt = dp.iter().map(|v| -*v).collect();
                out.push((pred, Tensor::new(p.shape().to_vec(), dp)?));
                out.push((target, Tensor::new(t.shape().to_vec(), dt)?));
            }
        }
        Ok(out)
    }
}

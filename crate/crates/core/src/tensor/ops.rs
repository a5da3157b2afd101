//! Operator set: forward kernels, vector-Jacobian products, and the
//! `Tensor` methods that build on them.
//!
//! Every VJP is expressed with other operators from this set, which is what
//! makes gradients differentiable again.

use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::{NdArray, Tensor};
use crate::error::{Error, Result};

/// Operator tag plus its attributes.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// A differentiable input registered on the tape.
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// `c * x`
    Scale(f64),
    /// `x + c`
    Shift(f64),
    Log,
    Sigmoid,
    Relu,
    Square,
    /// `x^p`, elementwise
    Powf(f64),
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// `[m, k] x [k, n]`
    MatMul,
    /// 2-D transpose
    Transpose,
    /// "Same"-padded 2-D convolution of `[n, c, h, w]` by `[o, c, kh, kw]`.
    Conv2d {
        stride: usize,
    },
    /// Adjoint of [`OpKind::Conv2d`] in its input: `(grad_out, kernel) -> grad_in`.
    Conv2dInputGrad {
        stride: usize,
        in_hw: (usize, usize),
    },
    /// Adjoint of [`OpKind::Conv2d`] in its kernel: `(input, grad_out) -> grad_kernel`.
    Conv2dWeightGrad {
        stride: usize,
        k_hw: (usize, usize),
    },
    /// `out[i] = x[index[i]]`; max pooling with the argmax frozen.
    Gather {
        index: Rc<Vec<usize>>,
        out_shape: Vec<usize>,
    },
    /// Adjoint of [`OpKind::Gather`]: scatter-add into zeros of `in_shape`.
    Scatter {
        index: Rc<Vec<usize>>,
        in_shape: Vec<usize>,
    },
    /// Sum of all elements, giving a scalar.
    Sum,
    /// Mean of all elements, giving a scalar.
    Mean,
    /// Scalar broadcast to `shape`.
    Broadcast {
        shape: Vec<usize>,
    },
    /// `[n, c, h, w] -> [c]`, summing over batch and space.
    ChannelSum,
    /// `[c] -> shape`, the adjoint of [`OpKind::ChannelSum`].
    ChannelBroadcast {
        shape: Vec<usize>,
    },
    /// `[n, c, h, w] -> [n, c]`
    SpatialSum,
    /// `[n, c] -> [n, c, h, w]`
    SpatialBroadcast {
        h: usize,
        w: usize,
    },
    /// Concatenation of 4-D tensors along the channel axis.
    Concat,
    /// Channels `start..start + len` of a 4-D tensor.
    ChannelSlice {
        start: usize,
        len: usize,
    },
    /// Places a 4-D tensor at channel offset `start` inside zeros with `total` channels.
    ChannelEmbed {
        start: usize,
        total: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

fn same_shape(op: &'static str, a: &NdArray, b: &NdArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn arity(op: &'static str, inputs: &[&NdArray], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

fn rank(op: &'static str, a: &NdArray, r: usize) -> Result<()> {
    if a.shape().len() != r {
        return Err(Error::shape(op, format!("expected rank {r}, got {:?}", a.shape())));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Square => "square",
            OpKind::Powf(_) => "powf",
            OpKind::Clamp { .. } => "clamp",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Conv2dInputGrad { .. } => "conv2d_input_grad",
            OpKind::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            OpKind::Gather { .. } => "gather",
            OpKind::Scatter { .. } => "scatter",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::ChannelSum => "channel_sum",
            OpKind::ChannelBroadcast { .. } => "channel_broadcast",
            OpKind::SpatialSum => "spatial_sum",
            OpKind::SpatialBroadcast { .. } => "spatial_broadcast",
            OpKind::Concat => "concat",
            OpKind::ChannelSlice { .. } => "channel_slice",
            OpKind::ChannelEmbed { .. } => "channel_embed",
            OpKind::Reshape { .. } => "reshape",
        }
    }

    pub(crate) fn forward(&self, x: &[&NdArray]) -> Result<NdArray> {
        let op = self.name();
        match self {
            OpKind::Leaf => Err(Error::shape(op, "leaves are created with Tape::var")),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                arity(op, x, 2)?;
                same_shape(op, x[0], x[1])?;
                Ok(match self {
                    OpKind::Add => x[0].zip_map(x[1], |a, b| a + b),
                    OpKind::Sub => x[0].zip_map(x[1], |a, b| a - b),
                    OpKind::Mul => x[0].zip_map(x[1], |a, b| a * b),
                    _ => x[0].zip_map(x[1], |a, b| a / b),
                })
            }
            OpKind::Scale(c) => {
                arity(op, x, 1)?;
                Ok(x[0].map(|v| c * v))
            }
            OpKind::Shift(c) => {
                arity(op, x, 1)?;
                Ok(x[0].map(|v| v + c))
            }
            OpKind::Log => {
                arity(op, x, 1)?;
                if let Some(bad) = x[0].data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain { op, detail: format!("non-positive argument {bad}") });
                }
                Ok(x[0].map(f64::ln))
            }
            OpKind::Sigmoid => {
                arity(op, x, 1)?;
                Ok(x[0].map(sigmoid))
            }
            OpKind::Relu => {
                arity(op, x, 1)?;
                Ok(x[0].map(|v| if v > 0.0 { v } else { 0.0 }))
            }
            OpKind::Square => {
                arity(op, x, 1)?;
                Ok(x[0].map(|v| v * v))
            }
            OpKind::Powf(p) => {
                arity(op, x, 1)?;
                Ok(x[0].map(|v| v.powf(*p)))
            }
            OpKind::Clamp { lo, hi } => {
                arity(op, x, 1)?;
                Ok(x[0].map(|v| v.clamp(*lo, *hi)))
            }
            OpKind::MatMul => {
                arity(op, x, 2)?;
                rank(op, x[0], 2)?;
                rank(op, x[1], 2)?;
                let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
                let (k2, n) = (x[1].shape()[0], x[1].shape()[1]);
                if k != k2 {
                    return Err(Error::shape(op, format!("inner dims {:?} x {:?}", x[0].shape(), x[1].shape())));
                }
                NdArray::new(vec![m, n], conv::matmul(x[0].data(), x[1].data(), m, k, n))
            }
            OpKind::Transpose => {
                arity(op, x, 1)?;
                rank(op, x[0], 2)?;
                let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
                let d = x[0].data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = d[i * c + j];
                    }
                }
                NdArray::new(vec![c, r], out)
            }
            OpKind::Conv2d { stride } => {
                arity(op, x, 2)?;
                let g = ConvGeom::new(x[0].shape(), x[1].shape(), *stride)?;
                NdArray::new(g.out_shape(), conv::conv_forward(&g, x[0].data(), x[1].data()))
            }
            OpKind::Conv2dInputGrad { stride, in_hw } => {
                arity(op, x, 2)?;
                rank(op, x[0], 4)?;
                rank(op, x[1], 4)?;
                let (gs, ks) = (x[0].shape(), x[1].shape());
                let g = ConvGeom::new(&[gs[0], ks[1], in_hw.0, in_hw.1], ks, *stride)?;
                if g.out_shape() != gs {
                    return Err(Error::shape(op, format!("grad {gs:?} vs expected {:?}", g.out_shape())));
                }
                NdArray::new(g.in_shape(), conv::conv_input_grad(&g, x[0].data(), x[1].data()))
            }
            OpKind::Conv2dWeightGrad { stride, k_hw } => {
                arity(op, x, 2)?;
                rank(op, x[0], 4)?;
                rank(op, x[1], 4)?;
                let (xs, gs) = (x[0].shape(), x[1].shape());
                let g = ConvGeom::new(xs, &[gs[1], xs[1], k_hw.0, k_hw.1], *stride)?;
                if g.out_shape() != gs {
                    return Err(Error::shape(op, format!("grad {gs:?} vs expected {:?}", g.out_shape())));
                }
                NdArray::new(g.kernel_shape(), conv::conv_weight_grad(&g, x[0].data(), x[1].data()))
            }
            OpKind::Gather { index, out_shape } => {
                arity(op, x, 1)?;
                let d = x[0].data();
                if index.iter().any(|&i| i >= d.len()) {
                    return Err(Error::shape(op, "index out of range"));
                }
                NdArray::new(out_shape.clone(), index.iter().map(|&i| d[i]).collect())
            }
            OpKind::Scatter { index, in_shape } => {
                arity(op, x, 1)?;
                if x[0].len() != index.len() {
                    return Err(Error::shape(op, format!("{} values for {} indices", x[0].len(), index.len())));
                }
                let mut out = NdArray::zeros(in_shape);
                let o = out.data_mut();
                if index.iter().any(|&i| i >= o.len()) {
                    return Err(Error::shape(op, "index out of range"));
                }
                for (&i, &v) in index.iter().zip(x[0].data()) {
                    o[i] += v;
                }
                Ok(out)
            }
            OpKind::Sum => {
                arity(op, x, 1)?;
                Ok(NdArray::scalar(x[0].sum()))
            }
            OpKind::Mean => {
                arity(op, x, 1)?;
                if x[0].is_empty() {
                    return Err(Error::shape(op, "mean of empty tensor"));
                }
                Ok(NdArray::scalar(x[0].sum() / x[0].len() as f64))
            }
            OpKind::Broadcast { shape } => {
                arity(op, x, 1)?;
                if x[0].len() != 1 {
                    return Err(Error::shape(op, format!("source must hold one value, got {:?}", x[0].shape())));
                }
                Ok(NdArray::full(shape, x[0].data()[0]))
            }
            OpKind::ChannelSum => {
                arity(op, x, 1)?;
                rank(op, x[0], 4)?;
                let s = x[0].shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut out = vec![0.0; c];
                for b in 0..n {
                    for (ch, o) in out.iter_mut().enumerate() {
                        let start = (b * c + ch) * hw;
                        *o += x[0].data()[start..start + hw].iter().sum::<f64>();
                    }
                }
                NdArray::new(vec![c], out)
            }
            OpKind::ChannelBroadcast { shape } => {
                arity(op, x, 1)?;
                if shape.len() != 4 || x[0].shape() != [shape[1]] {
                    return Err(Error::shape(op, format!("{:?} into {shape:?}", x[0].shape())));
                }
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut out = Vec::with_capacity(n * c * hw);
                for _ in 0..n {
                    for &v in x[0].data() {
                        out.extend(std::iter::repeat_n(v, hw));
                    }
                }
                NdArray::new(shape.clone(), out)
            }
            OpKind::SpatialSum => {
                arity(op, x, 1)?;
                rank(op, x[0], 4)?;
                let s = x[0].shape();
                let hw = s[2] * s[3];
                let out = x[0].data().chunks(hw.max(1)).map(|c| c.iter().sum()).collect();
                NdArray::new(vec![s[0], s[1]], out)
            }
            OpKind::SpatialBroadcast { h, w } => {
                arity(op, x, 1)?;
                rank(op, x[0], 2)?;
                let s = x[0].shape();
                let mut out = Vec::with_capacity(x[0].len() * h * w);
                for &v in x[0].data() {
                    out.extend(std::iter::repeat_n(v, h * w));
                }
                NdArray::new(vec![s[0], s[1], *h, *w], out)
            }
            OpKind::Concat => {
                let first = x.first().ok_or_else(|| Error::shape(op, "no inputs"))?;
                rank(op, first, 4)?;
                let (n, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
                let mut total = 0;
                for t in x {
                    rank(op, t, 4)?;
                    let s = t.shape();
                    if s[0] != n || s[2] != h || s[3] != w {
                        return Err(Error::shape(op, format!("{:?} vs {:?}", first.shape(), s)));
                    }
                    total += s[1];
                }
                let hw = h * w;
                let mut out = Vec::with_capacity(n * total * hw);
                for b in 0..n {
                    for t in x {
                        let c = t.shape()[1];
                        out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
                    }
                }
                NdArray::new(vec![n, total, h, w], out)
            }
            OpKind::ChannelSlice { start, len } => {
                arity(op, x, 1)?;
                rank(op, x[0], 4)?;
                let s = x[0].shape();
                if start + len > s[1] {
                    return Err(Error::shape(op, format!("channels {start}..{} of {:?}", start + len, s)));
                }
                let hw = s[2] * s[3];
                let mut out = Vec::with_capacity(s[0] * len * hw);
                for b in 0..s[0] {
                    let base = (b * s[1] + start) * hw;
                    out.extend_from_slice(&x[0].data()[base..base + len * hw]);
                }
                NdArray::new(vec![s[0], *len, s[2], s[3]], out)
            }
            OpKind::ChannelEmbed { start, total } => {
                arity(op, x, 1)?;
                rank(op, x[0], 4)?;
                let s = x[0].shape();
                if start + s[1] > *total {
                    return Err(Error::shape(op, format!("{:?} at {start} into {total} channels", s)));
                }
                let hw = s[2] * s[3];
                let mut out = NdArray::zeros(&[s[0], *total, s[2], s[3]]);
                for b in 0..s[0] {
                    let dst = (b * total + start) * hw;
                    let src = b * s[1] * hw;
                    out.data_mut()[dst..dst + s[1] * hw].copy_from_slice(&x[0].data()[src..src + s[1] * hw]);
                }
                Ok(out)
            }
            OpKind::Reshape { shape } => {
                arity(op, x, 1)?;
                x[0].clone().reshaped(shape)
            }
        }
    }

    /// Vector-Jacobian products for each input, given the upstream gradient
    /// `gy`. `inputs` and `out` are tape handles, so the result is recorded
    /// whenever the tape is recording.
    pub(crate) fn vjp(&self, inputs: &[Tensor], out: &Tensor, gy: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let one = |t: Tensor| Ok(vec![Some(t)]);
        match self {
            OpKind::Leaf => Ok(Vec::new()),
            OpKind::Add => Ok(vec![Some(gy.clone()), Some(gy.clone())]),
            OpKind::Sub => Ok(vec![Some(gy.clone()), Some(gy.neg())]),
            OpKind::Mul => Ok(vec![Some(gy.mul(&inputs[1])?), Some(gy.mul(&inputs[0])?)]),
            OpKind::Div => {
                let ga = gy.div(&inputs[1])?;
                let gb = ga.mul(out)?.neg();
                Ok(vec![Some(ga), Some(gb)])
            }
            OpKind::Scale(c) => one(gy.scale(*c)),
            OpKind::Shift(_) => one(gy.clone()),
            OpKind::Log => one(gy.div(&inputs[0])?),
            OpKind::Sigmoid => {
                let slope = out.mul(&out.neg().shift(1.0))?;
                one(gy.mul(&slope)?)
            }
            OpKind::Relu => {
                let mask = inputs[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                one(gy.mul(&Tensor::constant(mask))?)
            }
            OpKind::Clamp { lo, hi } => {
                let mask = inputs[0].value().map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                one(gy.mul(&Tensor::constant(mask))?)
            }
            OpKind::Square => one(gy.mul(&inputs[0].scale(2.0))?),
            OpKind::Powf(p) => one(gy.mul(&inputs[0].powf(p - 1.0).scale(*p))?),
            OpKind::MatMul => {
                let ga = gy.matmul(&inputs[1].transpose()?)?;
                let gb = inputs[0].transpose()?.matmul(gy)?;
                Ok(vec![Some(ga), Some(gb)])
            }
            OpKind::Transpose => one(gy.transpose()?),
            OpKind::Conv2d { stride } => {
                let (x, k) = (&inputs[0], &inputs[1]);
                let gx = Tensor::apply(
                    OpKind::Conv2dInputGrad { stride: *stride, in_hw: (x.shape()[2], x.shape()[3]) },
                    &[gy, k],
                )?;
                let gk = Tensor::apply(
                    OpKind::Conv2dWeightGrad { stride: *stride, k_hw: (k.shape()[2], k.shape()[3]) },
                    &[x, gy],
                )?;
                Ok(vec![Some(gx), Some(gk)])
            }
            OpKind::Conv2dInputGrad { stride, .. } => {
                let (g, k) = (&inputs[0], &inputs[1]);
                let gg = gy.conv2d(k, *stride)?;
                let gk = Tensor::apply(
                    OpKind::Conv2dWeightGrad { stride: *stride, k_hw: (k.shape()[2], k.shape()[3]) },
                    &[gy, g],
                )?;
                Ok(vec![Some(gg), Some(gk)])
            }
            OpKind::Conv2dWeightGrad { stride, .. } => {
                let (x, g) = (&inputs[0], &inputs[1]);
                let gx = Tensor::apply(
                    OpKind::Conv2dInputGrad { stride: *stride, in_hw: (x.shape()[2], x.shape()[3]) },
                    &[g, gy],
                )?;
                let gg = x.conv2d(gy, *stride)?;
                Ok(vec![Some(gx), Some(gg)])
            }
            OpKind::Gather { index, .. } => one(Tensor::apply(
                OpKind::Scatter { index: index.clone(), in_shape: inputs[0].shape().to_vec() },
                &[gy],
            )?),
            OpKind::Scatter { index, .. } => one(Tensor::apply(
                OpKind::Gather { index: index.clone(), out_shape: inputs[0].shape().to_vec() },
                &[gy],
            )?),
            OpKind::Sum => one(gy.broadcast(inputs[0].shape())?),
            OpKind::Mean => {
                let n = inputs[0].value().len() as f64;
                one(gy.broadcast(inputs[0].shape())?.scale(1.0 / n))
            }
            OpKind::Broadcast { .. } => {
                let s = gy.sum();
                one(s.reshape(inputs[0].shape())?)
            }
            OpKind::ChannelSum => one(gy.channel_broadcast(inputs[0].shape())?),
            OpKind::ChannelBroadcast { .. } => one(gy.channel_sum()?),
            OpKind::SpatialSum => {
                let s = inputs[0].shape();
                one(gy.spatial_broadcast(s[2], s[3])?)
            }
            OpKind::SpatialBroadcast { .. } => one(gy.spatial_sum()?),
            OpKind::Concat => {
                let mut start = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for t in inputs {
                    let len = t.shape()[1];
                    grads.push(Some(Tensor::apply(OpKind::ChannelSlice { start, len }, &[gy])?));
                    start += len;
                }
                Ok(grads)
            }
            OpKind::ChannelSlice { start, .. } => {
                one(Tensor::apply(OpKind::ChannelEmbed { start: *start, total: inputs[0].shape()[1] }, &[gy])?)
            }
            OpKind::ChannelEmbed { start, .. } => {
                one(Tensor::apply(OpKind::ChannelSlice { start: *start, len: inputs[0].shape()[1] }, &[gy])?)
            }
            OpKind::Reshape { .. } => one(gy.reshape(inputs[0].shape())?),
        }
    }
}

fn unary(op: OpKind, x: &Tensor) -> Tensor {
    Tensor::apply(op, &[x]).expect("elementwise unary op cannot fail")
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::Add, &[self, other])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::Sub, &[self, other])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::Mul, &[self, other])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::Div, &[self, other])
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(OpKind::Scale(c), self)
    }

    pub fn shift(&self, c: f64) -> Tensor {
        unary(OpKind::Shift(c), self)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn log(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Log, &[self])
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(OpKind::Sigmoid, self)
    }

    pub fn relu(&self) -> Tensor {
        unary(OpKind::Relu, self)
    }

    pub fn square(&self) -> Tensor {
        unary(OpKind::Square, self)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        unary(OpKind::Powf(p), self)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(OpKind::Clamp { lo, hi }, self)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Transpose, &[self])
    }

    /// "Same"-padded convolution with an `[o, c, kh, kw]` kernel.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        Tensor::apply(OpKind::Conv2d { stride }, &[self, kernel])
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&self) -> Result<Tensor> {
        let (index, out_shape) = conv::max_pool2_indices(self.shape(), self.value().data())?;
        Tensor::apply(OpKind::Gather { index: Rc::new(index), out_shape }, &[self])
    }

    pub fn sum(&self) -> Tensor {
        unary(OpKind::Sum, self)
    }

    pub fn mean(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Mean, &[self])
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::apply(OpKind::Broadcast { shape: shape.to_vec() }, &[self])
    }

    pub fn channel_sum(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::ChannelSum, &[self])
    }

    pub fn channel_broadcast(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::apply(OpKind::ChannelBroadcast { shape: shape.to_vec() }, &[self])
    }

    pub fn spatial_sum(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::SpatialSum, &[self])
    }

    pub fn spatial_broadcast(&self, h: usize, w: usize) -> Result<Tensor> {
        Tensor::apply(OpKind::SpatialBroadcast { h, w }, &[self])
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("need 4-D input, got {s:?}")));
        }
        let hw = (s[2] * s[3]) as f64;
        Ok(self.spatial_sum()?.scale(1.0 / hw))
    }

    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        Tensor::apply(OpKind::Concat, parts)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::apply(OpKind::Reshape { shape: shape.to_vec() }, &[self])
    }

    /// Per-channel standardization with statistics over batch and space,
    /// followed by a learnable per-channel affine map.
    pub fn standardize(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("standardize", format!("need 4-D input, got {s:?}")));
        }
        if gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return Err(Error::shape(
                "standardize",
                format!("affine {:?}/{:?} for {} channels", gamma.shape(), beta.shape(), s[1]),
            ));
        }
        let count = (s[0] * s[2] * s[3]) as f64;
        let mean = self.channel_sum()?.scale(1.0 / count);
        let centered = self.sub(&mean.channel_broadcast(&s)?)?;
        let var = centered.square().channel_sum()?.scale(1.0 / count);
        let inv_std = var.shift(eps).powf(-0.5);
        let gain = inv_std.mul(gamma)?;
        centered.mul(&gain.channel_broadcast(&s)?)?.add(&beta.channel_broadcast(&s)?)
    }
}

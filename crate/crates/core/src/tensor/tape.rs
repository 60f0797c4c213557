//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node whose inputs are earlier nodes, so the node list
//! is already in topological order and backward is a single reverse sweep.
//! The tape is rebuilt for every training step.

use crate::error::{ensure, Error, Result};
use crate::ops::conv::{conv3d_backward, conv3d_forward};
use crate::ops::norm::{instance_norm_backward, instance_norm_forward};
use crate::ops::shuffle::{voxel_shuffle, voxel_unshuffle};
use crate::ops::upsample::{upsample_trilinear, upsample_trilinear_backward};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Concat(Vec<usize>),
    Pad { input: usize, before: Vec<usize> },
    Crop { input: usize, offsets: Vec<usize> },
    Conv { input: usize, weight: usize, bias: Option<usize>, stride: [usize; 3] },
    Norm { input: usize, scale: usize, shift: usize, normalized: Vec<f64>, inv_std: Vec<f64> },
    Upsample(usize),
    Unshuffle(usize),
    Shuffle(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar_mul",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse(..) => "mse",
            Op::Concat(_) => "concat",
            Op::Pad { .. } => "pad_zeros",
            Op::Crop { .. } => "crop",
            Op::Conv { .. } => "conv3d",
            Op::Norm { .. } => "instance_norm",
            Op::Upsample(_) => "upsample_trilinear",
            Op::Unshuffle(_) => "voxel_unshuffle",
            Op::Shuffle(_) => "voxel_shuffle",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Upsample(a)
            | Op::Unshuffle(a)
            | Op::Shuffle(a) => vec![*a],
            Op::Concat(v) => v.clone(),
            Op::Pad { input, .. } | Op::Crop { input, .. } => vec![*input],
            Op::Conv { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Norm { input, scale, shift, .. } => vec![*input, *scale, *shift],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one.
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
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

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; [`Tape::backward`] fills its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a trainable leaf, if backward has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        ensure!(sa == sb, Contract, "{op}: shape mismatch {sa:?} vs {sb:?}");
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("shape already validated")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| s * x);
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a.0))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(s / ta.len() as f64);
        self.push(v, Op::Mse(a.0, b.0))
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Contract, "concat needs at least one input");
        let first = self.value(parts[0]).shape().to_vec();
        ensure!(first.len() >= 2, Contract, "concat needs rank >= 2");
        let mut channels = 0;
        for p in parts {
            let s = self.value(*p).shape();
            ensure!(
                s.len() == first.len() && s[0] == first[0] && s[2..] == first[2..],
                Contract,
                "concat: {s:?} does not conform to {first:?} off the channel axis"
            );
            channels += s[1];
        }
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[b * block..][..block]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let v = Tensor::from_vec(&shape, data)?;
        self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    /// Zero padding with `(before, after)` amounts per dimension.
    pub fn pad_zeros(&mut self, a: Var, amounts: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        ensure!(
            amounts.len() == t.shape().len(),
            Contract,
            "pad needs {} (before, after) pairs",
            t.shape().len()
        );
        let shape: Vec<usize> =
            t.shape().iter().zip(amounts).map(|(&e, &(lo, hi))| e + lo + hi).collect();
        let before: Vec<usize> = amounts.iter().map(|p| p.0).collect();
        let mut out = Tensor::zeros(&shape)?;
        copy_block(t.data(), t.shape(), &vec![0; shape.len()], out.data_mut(), &shape, &before, t.shape(), false);
        self.push(out, Op::Pad { input: a.0, before })
    }

    pub fn crop(&mut self, a: Var, offsets: &[usize], extents: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        ensure!(
            offsets.len() == shape.len() && extents.len() == shape.len(),
            Contract,
            "crop needs offsets and extents for all {} dimensions",
            shape.len()
        );
        ensure!(
            offsets.iter().zip(extents).zip(shape).all(|((&o, &e), &n)| e >= 1 && o + e <= n),
            Contract,
            "crop window {offsets:?}+{extents:?} exceeds {shape:?}"
        );
        let mut out = Tensor::zeros(extents)?;
        copy_block(t.data(), shape, offsets, out.data_mut(), extents, &vec![0; extents.len()], extents, false);
        self.push(out, Op::Crop { input: a.0, offsets: offsets.to_vec() })
    }

    /// 3D cross-correlation with "same" padding; `weight` is `[c_out, c_in, kh, kw, kd]`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        let out = conv3d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), stride)?;
        self.push(out, Op::Conv { input: x.0, weight: weight.0, bias: bias.map(|b| b.0), stride })
    }

    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let fw = instance_norm_forward(
            self.value(x),
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
        )?;
        self.push(
            fw.output,
            Op::Norm { input: x.0, scale: scale.0, shift: shift.0, normalized: fw.normalized, inv_std: fw.inv_std },
        )
    }

    pub fn upsample_trilinear(&mut self, x: Var) -> Result<Var> {
        let out = upsample_trilinear(self.value(x))?;
        self.push(out, Op::Upsample(x.0))
    }

    pub fn voxel_unshuffle(&mut self, x: Var) -> Result<Var> {
        let out = voxel_unshuffle(self.value(x))?;
        self.push(out, Op::Unshuffle(x.0))
    }

    pub fn voxel_shuffle(&mut self, x: Var) -> Result<Var> {
        let out = voxel_shuffle(self.value(x))?;
        self.push(out, Op::Shuffle(x.0))
    }

    /// Accumulates `d loss / d leaf` into every trainable leaf.
    ///
    /// Leaves that do not influence `loss` receive a zero gradient. Repeated
    /// calls add up, so `backward(a); backward(b)` equals `backward(a + b)`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).is_scalar(),
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let inputs = node.op.inputs();
            if let Some(&bad) = inputs.iter().find(|&&j| j >= i) {
                return Err(Error::Internal(format!("tape cycle: node {i} reads node {bad}")));
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (j, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let contrib = grads.get_mut(i).and_then(Option::take);
            let acc = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()).expect("leaf shape is valid"));
            if let Some(c) = contrib {
                acc.data_mut().iter_mut().zip(&c).for_each(|(a, c)| *a += c);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let wants = |j: usize| self.nodes[j].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()),
            ],
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Relu(a) => {
                vec![(*a, g.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Square(a) => vec![(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * x * g).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Mse(a, b) => {
                let n = val(*a).len() as f64;
                let ga: Vec<f64> =
                    val(*a).iter().zip(val(*b)).map(|(x, y)| 2.0 * (x - y) / n * g[0]).collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let inner: usize = shape[2..].iter().product();
                let mut outs: Vec<(usize, Vec<f64>)> =
                    parts.iter().map(|&p| (p, Vec::with_capacity(val(p).len()))).collect();
                let mut off = 0;
                for _ in 0..shape[0] {
                    for (k, &p) in parts.iter().enumerate() {
                        let block = self.nodes[p].value.shape()[1] * inner;
                        outs[k].1.extend_from_slice(&g[off..off + block]);
                        off += block;
                    }
                }
                outs
            }
            Op::Pad { input, before } => {
                let in_shape = self.nodes[*input].value.shape();
                let mut gi = vec![0.0; val(*input).len()];
                copy_block(g, node.value.shape(), before, &mut gi, in_shape, &vec![0; in_shape.len()], in_shape, false);
                vec![(*input, gi)]
            }
            Op::Crop { input, offsets } => {
                let in_shape = self.nodes[*input].value.shape();
                let out_shape = node.value.shape();
                let mut gi = vec![0.0; val(*input).len()];
                copy_block(g, out_shape, &vec![0; out_shape.len()], &mut gi, in_shape, offsets, out_shape, true);
                vec![(*input, gi)]
            }
            Op::Conv { input, weight, bias, stride } => {
                let gout = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                let grads = conv3d_backward(
                    &self.nodes[*input].value,
                    &self.nodes[*weight].value,
                    &gout,
                    *stride,
                    wants(*input),
                )?;
                let mut v = vec![(*weight, grads.weight.into_data())];
                if let Some(gx) = grads.input {
                    v.push((*input, gx.into_data()));
                }
                if let Some(b) = bias {
                    v.push((*b, grads.bias.into_data()));
                }
                v
            }
            Op::Norm { input, scale, shift, normalized, inv_std } => {
                let gout = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                let (gx, gs, gb) = instance_norm_backward(&gout, normalized, inv_std, val(*scale))?;
                vec![(*input, gx.into_data()), (*scale, gs), (*shift, gb)]
            }
            Op::Upsample(a) => {
                let in_shape = self.nodes[*a].value.dims5()?;
                let gout = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                vec![(*a, upsample_trilinear_backward(&gout, in_shape)?.into_data())]
            }
            // the two rearrangements are mutually inverse permutations
            Op::Unshuffle(a) => {
                let gout = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                vec![(*a, voxel_shuffle(&gout)?.into_data())]
            }
            Op::Shuffle(a) => {
                let gout = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                vec![(*a, voxel_unshuffle(&gout)?.into_data())]
            }
        })
    }
}

/// Copies an `extents` block from `src` at `src_off` into `dst` at `dst_off`.
#[allow(clippy::too_many_arguments)]
fn copy_block(
    src: &[f64],
    src_shape: &[usize],
    src_off: &[usize],
    dst: &mut [f64],
    dst_shape: &[usize],
    dst_off: &[usize],
    extents: &[usize],
    accumulate: bool,
) {
    let rank = extents.len();
    let stride = |shape: &[usize]| {
        let mut s = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    };
    let (ss, ds) = (stride(src_shape), stride(dst_shape));
    let row = extents[rank - 1];
    let rows: usize = extents[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..rows {
        let mut si = src_off[rank - 1];
        let mut di = dst_off[rank - 1];
        for k in 0..rank - 1 {
            si += (src_off[k] + idx[k]) * ss[k];
            di += (dst_off[k] + idx[k]) * ds[k];
        }
        let (s, d) = (&src[si..si + row], &mut dst[di..di + row]);
        if accumulate {
            d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        } else {
            d.copy_from_slice(s);
        }
        for k in (0..rank - 1).rev() {
            idx[k] += 1;
            if idx[k] < extents[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

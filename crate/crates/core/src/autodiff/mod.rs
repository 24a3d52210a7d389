//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is already a topological order, so `backward` is a single reverse
//! sweep. Leaves created with `requires_grad` receive accumulated gradients.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{gradcheck, relative_error, GradCheckOptions, GradCheckReport};

use crate::error::{GltError, Result};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;
use kernels::{col2im, im2col, inverse_axes, permute, softmax, split_axis};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnStats<T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally supplied (running) statistics.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

/// Per-channel batch statistics observed by a training-mode batch norm:
/// biased mean and unbiased variance.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: Var, axis: usize },
    AddChannelBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    AvgPoolGlobal(Var),
    GatherBatch { x: Var, index: Vec<usize> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; variables from
    /// that suffix become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Copies the value of `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes are well formed")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(GltError::shapes(op, &na.shape, &nb.shape));
        }
        Ok(na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, s), self.rg(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        self.push(self.shape(a).to_vec(), v, Op::Relu(a), self.rg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.abs()).collect();
        self.push(self.shape(a).to_vec(), v, Op::Abs(a), self.rg(a))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(a), self.rg(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s: T = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s / n], Op::Mean(a), self.rg(a))
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(GltError::shapes("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), self.rg(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(GltError::dim("permute", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let v = permute(self.value(a), &shape, axes);
        let out: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        Ok(self.push(out, v, Op::Permute { x: a, axes: axes.to_vec() }, self.rg(a)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(GltError::dim("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GltError::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(GltError::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(GltError::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Rows of the leading axis selected (with repetition) by `index`.
    pub fn gather_batch(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if index.is_empty() || index.iter().any(|&i| i >= shape[0]) {
            return Err(GltError::dim("gather_batch", format!("index {index:?} out of range for {shape:?}")));
        }
        let row = shape[1..].iter().product::<usize>();
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut oshape = shape;
        oshape[0] = index.len();
        Ok(self.push(oshape, out, Op::GatherBatch { x, index: index.to_vec() }, self.rg(x)))
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product of `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
            _ => return Err(GltError::shapes("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                Trans::No,
                &vb[i * k * n..(i + 1) * k * n],
                Trans::No,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GltError::dim("softmax", format!("axis {axis} invalid for {shape:?}")));
        }
        let y = softmax(self.value(x), &shape, axis);
        Ok(self.push(shape, y, Op::Softmax { x, axis }, self.rg(x)))
    }

    /// Adds a per-channel vector along axis 1 of a rank ≥ 2 tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(GltError::shapes("add_channel_bias", &shape, self.shape(bias)));
        }
        let (outer, c, inner) = split_axis(&shape, 1);
        let b = self.value(bias).to_vec();
        let mut v = self.value(x).to_vec();
        for o in 0..outer {
            for (ci, &bv) in b.iter().enumerate().take(c) {
                let base = (o * c + ci) * inner;
                v[base..base + inner].iter_mut().for_each(|e| *e += bv);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, v, Op::AddChannelBias { x, bias }, rg))
    }

    // ---- convolutional layers -----------------------------------------

    /// Stride-1 cross-correlation of `x[B×C×H×W]` with `w[O×C×k×k]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (bn, c, h, wd, o, k) = match (sx.as_slice(), sw.as_slice()) {
            ([bn, c, h, wd], [o, c2, k, k2]) if c == c2 && k == k2 => (*bn, *c, *h, *wd, *o, *k),
            _ => return Err(GltError::shapes("conv2d", &sx, &sw)),
        };
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(GltError::dim("conv2d", format!("input {sx:?} smaller than kernel {k} with padding {pad}")));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [o] {
                return Err(GltError::shapes("conv2d bias", &[o], self.shape(bv)));
            }
        }
        let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let (plane, ckk) = (ho * wo, c * k * k);
        let mut cols = vec![T::zero(); ckk * plane];
        let mut out = vec![T::zero(); bn * o * plane];
        let xv = self.value(x);
        let wv = self.value(w);
        for i in 0..bn {
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, k, pad, &mut cols);
            let dst = &mut out[i * o * plane..(i + 1) * o * plane];
            gemm(o, ckk, plane, wv, Trans::No, &cols, Trans::No, dst, false);
            if let Some(bv) = b {
                for (oc, &bias) in self.value(bv).iter().enumerate() {
                    dst[oc * plane..(oc + 1) * plane].iter_mut().for_each(|e| *e += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        Ok(self.push(vec![bn, o, ho, wo], out, Op::Conv2d { x, w, b, k, pad }, rg))
    }

    /// Batch normalization over every axis except axis 1 (channels).
    ///
    /// Returns the batch moments when normalizing with batch statistics so
    /// the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats: BnStats<T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(GltError::dim("batch_norm", format!("rank {} < 2", shape.len())));
        }
        let (outer, c, inner) = split_axis(&shape, 1);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(GltError::shapes("batch_norm", &shape, self.shape(gamma)));
        }
        let count = outer * inner;
        let xv = self.value(x);
        let (mean, var, moments, batch_stats) = match stats {
            BnStats::Batch => {
                let nf = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for o in 0..outer {
                        let base = (o * c + ci) * inner;
                        s += xv[base..base + inner].iter().copied().sum();
                    }
                    mean[ci] = s / nf;
                    let mut q = T::zero();
                    for o in 0..outer {
                        let base = (o * c + ci) * inner;
                        q += xv[base..base + inner].iter().map(|&e| (e - mean[ci]) * (e - mean[ci])).sum();
                    }
                    var[ci] = q / nf;
                }
                let unbiased = if count > 1 {
                    let f = nf / T::from_usize(count - 1).unwrap();
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let m = BatchMoments {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(m), true)
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(GltError::dim("batch_norm", "running statistics length mismatch"));
                }
                (mean, var, None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                for j in base..base + inner {
                    let h = (xv[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    y[j] = g[ci] * h + bt[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            shape,
            y,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            rg,
        );
        Ok((v, moments))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [bn, c, h, w] = shape[..] else {
            return Err(GltError::dim("maxpool2", format!("expected rank 4, got {shape:?}")));
        };
        if h < 2 || w < 2 {
            return Err(GltError::dim("maxpool2", format!("spatial dims {h}×{w} below 2×2")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bn * c * ho * wo);
        let mut argmax = Vec::with_capacity(bn * c * ho * wo);
        for plane in 0..bn * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[j] > xv[best] {
                            best = j;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![bn, c, ho, wo], out, Op::MaxPool2 { x, argmax }, self.rg(x)))
    }

    /// Mean over the spatial axes: `[B×C×H×W] → [B×C]`.
    pub fn avgpool_global(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [bn, c, h, w] = shape[..] else {
            return Err(GltError::dim("avgpool_global", format!("expected rank 4, got {shape:?}")));
        };
        let hw = h * w;
        let nf = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() / nf)
            .collect();
        Ok(self.push(vec![bn, c], out, Op::AvgPoolGlobal(x), self.rg(x)))
    }

    // ---- backward ------------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GltError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shape = |v: Var| self.nodes[v.0].shape.as_slice();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.send(adj, *a, g.to_vec());
                self.send(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(adj, *a, g.to_vec());
                self.send(adj, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.send(adj, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                self.send(adj, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(a, s) => self.send(adj, *a, g.iter().map(|&d| d * *s).collect()),
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                self.send(adj, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| {
                        if x > T::zero() {
                            d
                        } else if x < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.send(adj, *a, ga);
            }
            Op::Sum(a) => self.send(adj, *a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                self.send(adj, *a, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::Reshape(a) => self.send(adj, *a, g.to_vec()),
            Op::Permute { x, axes } => {
                let gx = permute(g, &node.shape, &inverse_axes(axes));
                self.send(adj, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shape(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    self.send(adj, p, gp);
                }
            }
            Op::GatherBatch { x, index } => {
                let row = node.shape[1..].iter().product::<usize>();
                let mut gx = vec![T::zero(); val(*x).len()];
                for (r, &src) in index.iter().enumerate() {
                    gx[src * row..(src + 1) * row]
                        .iter_mut()
                        .zip(&g[r * row..(r + 1) * row])
                        .for_each(|(a, &b)| *a += b);
                }
                self.send(adj, *x, gx);
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let vb = val(*b);
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            Trans::No,
                            &vb[bi * k * n..(bi + 1) * k * n],
                            Trans::Yes,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            false,
                        );
                    }
                    self.send(adj, *a, ga);
                }
                if self.rg(*b) {
                    let va = val(*a);
                    let mut gb = vec![T::zero(); batch * k * n];
                    for bi in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            &va[bi * m * k..(bi + 1) * m * k],
                            Trans::Yes,
                            &g[bi * m * n..(bi + 1) * m * n],
                            Trans::No,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            false,
                        );
                    }
                    self.send(adj, *b, gb);
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| o * len * inner + t * inner + j;
                        let dot: T = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..len {
                            gx[at(t)] = y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                self.send(adj, *x, gx);
            }
            Op::AddChannelBias { x, bias } => {
                self.send(adj, *x, g.to_vec());
                if self.rg(*bias) {
                    let (outer, c, inner) = split_axis(&node.shape, 1);
                    let mut gb = vec![T::zero(); c];
                    for o in 0..outer {
                        for (ci, acc) in gb.iter_mut().enumerate() {
                            let base = (o * c + ci) * inner;
                            *acc += g[base..base + inner].iter().copied().sum();
                        }
                    }
                    self.send(adj, *bias, gb);
                }
            }
            Op::Conv2d { x, w, b, k, pad } => {
                let (k, pad) = (*k, *pad);
                let [bn, c, h, wd] = shape(*x)[..] else { unreachable!() };
                let o = shape(*w)[0];
                let [_, _, ho, wo] = node.shape[..] else { unreachable!() };
                let (plane, ckk) = (ho * wo, c * k * k);
                if let Some(bv) = b {
                    if self.rg(*bv) {
                        let mut gb = vec![T::zero(); o];
                        for i in 0..bn {
                            for (oc, acc) in gb.iter_mut().enumerate() {
                                let base = (i * o + oc) * plane;
                                *acc += g[base..base + plane].iter().copied().sum();
                            }
                        }
                        self.send(adj, *bv, gb);
                    }
                }
                let (need_w, need_x) = (self.rg(*w), self.rg(*x));
                if !(need_w || need_x) {
                    return;
                }
                let (xv, wv) = (val(*x), val(*w));
                let mut cols = vec![T::zero(); ckk * plane];
                let mut gw = if need_w { vec![T::zero(); o * ckk] } else { Vec::new() };
                let mut gx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                for i in 0..bn {
                    let gi = &g[i * o * plane..(i + 1) * o * plane];
                    if need_w {
                        im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, k, pad, &mut cols);
                        gemm(o, plane, ckk, gi, Trans::No, &cols, Trans::Yes, &mut gw, true);
                    }
                    if need_x {
                        gemm(ckk, o, plane, wv, Trans::Yes, gi, Trans::No, &mut cols, false);
                        col2im(&cols, c, h, wd, k, pad, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                }
                if need_w {
                    self.send(adj, *w, gw);
                }
                if need_x {
                    self.send(adj, *x, gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (outer, c, inner) = split_axis(&node.shape, 1);
                let gv = val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..outer {
                    for ci in 0..c {
                        let base = (o * c + ci) * inner;
                        for j in base..base + inner {
                            sum_g[ci] += g[j];
                            sum_gx[ci] += g[j] * xhat[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    let nf = T::from_usize(outer * inner).unwrap();
                    for o in 0..outer {
                        for ci in 0..c {
                            let base = (o * c + ci) * inner;
                            let scale = gv[ci] * inv_std[ci];
                            for j in base..base + inner {
                                gx[j] = if *batch_stats {
                                    scale * (g[j] - sum_g[ci] / nf - xhat[j] * sum_gx[ci] / nf)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    self.send(adj, *x, gx);
                }
                self.send(adj, *gamma, sum_gx);
                self.send(adj, *beta, sum_g);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![T::zero(); val(*x).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    gx[src] += d;
                }
                self.send(adj, *x, gx);
            }
            Op::AvgPoolGlobal(x) => {
                let [_, _, h, w] = shape(*x)[..] else { unreachable!() };
                let hw = h * w;
                let nf = T::from_usize(hw).unwrap();
                let mut gx = Vec::with_capacity(g.len() * hw);
                for &d in g {
                    gx.extend(std::iter::repeat_n(d / nf, hw));
                }
                self.send(adj, *x, gx);
            }
        }
    }
}

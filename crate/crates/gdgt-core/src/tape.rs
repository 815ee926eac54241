//! Reverse-mode autodiff tape.
//!
//! Each forward pass records its operations on a fresh [`Tape`]; [`Tape::backward`]
//! then walks the recording in reverse and accumulates gradients. Tensors on the
//! tape are immutable once written, so a node's value can always be revisited by
//! later backward steps.
//!
//! Window partition/merge and the other layout ops materialize their result
//! instead of using strided views. That costs copies but keeps every op
//! auditable as plain index arithmetic.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shapes, reduce_to_shape, strides, BroadcastWalker, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Padding rule for spatial ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
    Reflect,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Abs(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    },
    Pad2d {
        x: Var,
        mode: PadMode,
        pads: [usize; 4], // top, bottom, left, right
    },
    Crop2d {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        sh: usize,
        sw: usize,
    },
    DepthwiseConv2d {
        x: Var,
        k: Var,
    },
    BilinearSample {
        x: Var,
        coords: Var,
    },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Expand {
        x: Var,
        axis: usize,
        n: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Partition {
        x: Var,
        rh: usize,
        rw: usize,
    },
    MergeWindows {
        x: Var,
        rh: usize,
        rw: usize,
        h: usize,
        w: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape<T: Scalar> {
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

    /// Insert a tensor that does not require gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Insert a tensor whose gradient will be accumulated by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad matches value shape"))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_tracked(&mut self, value: Tensor<T>, parents: &[Var], op: Op) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, rg, op)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        ctx: &str,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb)
            .map_err(|_| Error::dim(ctx, &sa, &sb))?;
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            BroadcastWalker::new(&sa, &sb, &out_shape)
                .map(|(ia, ib)| f(da[ia], db[ib]))
                .collect()
        };
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push_tracked(value, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        self.push_tracked(value, &[a], Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let value = self.nodes[a.0].value.map(|x| x * cc);
        self.push_tracked(value, &[a], Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(T::ZERO));
        self.push_tracked(value, &[a], Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| T::ONE / (T::ONE + (-x).exp()));
        self.push_tracked(value, &[a], Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.tanh());
        self.push_tracked(value, &[a], Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu_fwd);
        self.push_tracked(value, &[a], Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.abs());
        self.push_tracked(value, &[a], Op::Abs(a))
    }

    // ---- matmul ----------------------------------------------------------

    /// Batched matrix product; leading batch dims broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul (rank >= 2 required)", &sa, &sb));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::dim("matmul inner extents", &sa, &sb));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(batch_a, batch_b)
            .map_err(|_| Error::dim("matmul batch prefixes", &sa, &sb))?;
        let nb: usize = batch.iter().product();

        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let mut out = vec![T::ZERO; nb * m * n];
        for (bi, (ia, ib)) in BroadcastWalker::new(batch_a, batch_b, &batch).enumerate() {
            kernels::matmul_acc(
                &da[ia * m * ka..(ia + 1) * m * ka],
                &db[ib * ka * n..(ib + 1) * ka * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push_tracked(value, &[a, b], Op::Matmul(a, b)))
    }

    // ---- reductions and normalization -------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = x[at(0)];
                for j in 1..len {
                    mx = mx.max(x[at(j)]);
                }
                let mut denom = T::ZERO;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / denom;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push_tracked(value, &[a], Op::Softmax(a, axis)))
    }

    /// Normalizes over `axis` to zero mean / unit variance, then applies the
    /// per-coordinate affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("layer_norm axis", &shape, &[axis]));
        }
        let d = shape[axis];
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm affine params", self.shape(gamma), &[d]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let epst = T::from_f64(eps);
        let dn = T::from_f64(len as f64);
        let mut out = vec![T::ZERO; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mean = T::ZERO;
                for j in 0..len {
                    mean += xd[at(j)];
                }
                mean = mean / dn;
                let mut var = T::ZERO;
                for j in 0..len {
                    let c = xd[at(j)] - mean;
                    var += c * c;
                }
                var = var / dn;
                let inv = T::ONE / (var + epst).sqrt();
                for j in 0..len {
                    out[at(j)] = (xd[at(j)] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push_tracked(value, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, axis, eps }))
    }

    /// Mean over one axis, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("mean_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.nodes[a.0].value.data();
        let dn = T::from_f64(len as f64);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::ZERO;
                for j in 0..len {
                    s += x[o * len * inner + j * inner + i];
                }
                out[o * inner + i] = s / dn;
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push_tracked(value, &[a], Op::MeanAxis(a, axis)))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        let value = Tensor::scalar(s);
        self.push_tracked(value, &[a], Op::SumAll(a))
    }

    /// Repeats a unit axis `n` times.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(Error::dim("expand (axis extent must be 1)", &shape, &[axis, n]));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; outer * n * inner];
        for o in 0..outer {
            let src = &x[o * inner..(o + 1) * inner];
            for j in 0..n {
                out[(o * n + j) * inner..(o * n + j) * inner + inner].copy_from_slice(src);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = n;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push_tracked(value, &[a], Op::Expand { x: a, axis, n }))
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push_tracked(value, &[a], Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::dim("permute", &shape, perm));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::dim("permute (not a permutation)", &shape, perm));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let x = self.nodes[a.0].value.data();
        let out = permute_copy(x, &shape, perm, &out_shape);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push_tracked(value, &[a], Op::Permute { x: a, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat axis", &first, &[axis]));
        }
        let mut total = 0usize;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        let mut offset = 0usize;
        for &v in xs {
            let len = self.shape(v)[axis];
            let src = self.nodes[v.0].value.data();
            for o in 0..outer {
                let dst_base = (o * total + offset) * inner;
                let src_base = o * len * inner;
                out[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push_tracked(value, &xs.to_vec(), Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&x[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push_tracked(value, &[a], Op::Narrow { x: a, axis, start }))
    }

    // ---- spatial ops (batch x channel x height x width) ---------------------

    pub fn pad2d(&mut self, a: Var, mode: PadMode, pads: [usize; 4]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("pad2d (rank-4 required)", &shape, &[4]));
        }
        let [pt, pb, pl, pr] = pads;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if mode == PadMode::Reflect && (pt >= h || pb >= h || pl >= w || pr >= w) {
            return Err(Error::dim(
                "pad2d reflect (pad must be smaller than extent)",
                &shape,
                &[pt, pb, pl, pr],
            ));
        }
        let (oh, ow) = (h + pt + pb, w + pl + pr);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    if let Some((sy, sx)) = pad_source(oy, ox, h, w, pads, mode) {
                        dst[oy * ow + ox] = src[sy * w + sx];
                    }
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push_tracked(value, &[a], Op::Pad2d { x: a, mode, pads }))
    }

    pub fn crop2d(&mut self, a: Var, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || y0 + ch > shape[2] || x0 + cw > shape[3] {
            return Err(Error::dim("crop2d", &shape, &[y0, x0, ch, cw]));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; b * c * ch * cw];
        for bc in 0..b * c {
            let src = &x[bc * h * w..];
            let dst = &mut out[bc * ch * cw..(bc + 1) * ch * cw];
            for y in 0..ch {
                let s = (y0 + y) * w + x0;
                dst[y * cw..y * cw + cw].copy_from_slice(&src[s..s + cw]);
            }
        }
        let value = Tensor::new(&[b, c, ch, cw], out)?;
        Ok(self.push_tracked(value, &[a], Op::Crop2d { x: a, y0, x0 }))
    }

    /// Same-padded cross-correlation. `k` is `[cout, cin, kh, kw]`; the output
    /// keeps the spatial extents for odd kernels at stride 1.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, mode: PadMode) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        if ks.len() != 4 {
            return Err(Error::dim("conv2d kernel (rank-4 required)", &ks, &[4]));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        let (kh, kw) = (ks[2], ks[3]);
        let pads = [(kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2];
        let padded = if pads.iter().all(|&p| p == 0) {
            x
        } else {
            self.pad2d(x, mode, pads)?
        };
        self.conv2d_valid(padded, k, stride, stride)
    }

    /// Cross-correlation without padding.
    pub fn conv2d_valid(&mut self, x: Var, k: Var, sh: usize, sw: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        if sh == 0 || sw == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if ks[2] > xs[2] || ks[3] > xs[3] {
            return Err(Error::dim("conv2d (kernel larger than input)", &xs, &ks));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let out = kernels::conv2d_valid(
            self.nodes[x.0].value.data(),
            self.nodes[k.0].value.data(),
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh,
            sw,
        );
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let value = Tensor::new(&[b, cout, oh, ow], out)?;
        Ok(self.push_tracked(value, &[x, k], Op::Conv2d { x, k, sh, sw }))
    }

    /// Per-channel spatial convolution, same-padded, stride 1. `k` is `[c, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, mode: PadMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 3 || xs[1] != ks[0] {
            return Err(Error::dim("depthwise_conv2d channels", &xs, &ks));
        }
        let (kh, kw) = (ks[1], ks[2]);
        let pads = [(kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2];
        let padded = if pads.iter().all(|&p| p == 0) {
            x
        } else {
            self.pad2d(x, mode, pads)?
        };
        let ps = self.shape(padded).to_vec();
        let (b, c, h, w) = (ps[0], ps[1], ps[2], ps[3]);
        let xd = self.nodes[padded.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * h * w..];
                let kp = &kd[ci * kh * kw..(ci + 1) * kh * kw];
                let dst = &mut out[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kp[ky * kw + kx];
                        for oy in 0..oh {
                            let s = &src[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                            let d = &mut dst[oy * ow..oy * ow + ow];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += wv * *sv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push_tracked(value, &[padded, k], Op::DepthwiseConv2d { x: padded, k }))
    }

    /// Depthwise spatial conv followed by a 1x1 pointwise conv.
    /// `kd` is `[c, kh, kw]`, `kp` is `[cout, c, 1, 1]`.
    pub fn depthwise_separable_conv(
        &mut self,
        x: Var,
        kd: Var,
        kp: Var,
        mode: PadMode,
    ) -> Result<Var> {
        let d = self.depthwise_conv2d(x, kd, mode)?;
        self.conv2d_valid(d, kp, 1, 1)
    }

    /// Samples `x` `[b, c, h, w]` at continuous pixel coordinates
    /// `coords` `[b, p, 2]` (row, column), clamped to the border.
    /// Returns `[b, c, p]`.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(coords).to_vec();
        if xs.len() != 4 || cs.len() != 3 || cs[2] != 2 || xs[0] != cs[0] {
            return Err(Error::dim("bilinear_sample", &xs, &cs));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let p = cs[1];
        let xd = self.nodes[x.0].value.data();
        let cd = self.nodes[coords.0].value.data();
        let mut out = vec![T::ZERO; b * c * p];
        for bi in 0..b {
            for pi in 0..p {
                let s = bilinear_setup(
                    cd[(bi * p + pi) * 2].to_f64(),
                    cd[(bi * p + pi) * 2 + 1].to_f64(),
                    h,
                    w,
                );
                for ci in 0..c {
                    let plane = &xd[(bi * c + ci) * h * w..];
                    out[(bi * c + ci) * p + pi] = T::from_f64(s.interpolate(plane, w));
                }
            }
        }
        let value = Tensor::new(&[b, c, p], out)?;
        Ok(self.push_tracked(value, &[x, coords], Op::BilinearSample { x, coords }))
    }

    /// Rearranges `[b, c*s*s, h, w]` into `[b, c, h*s, w*s]`.
    pub fn pixel_shuffle(&mut self, a: Var, s: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || shape[1] % (s * s) != 0 {
            return Err(Error::dim("pixel_shuffle (channels not divisible)", &shape, &[s * s]));
        }
        let (b, cs2, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let c = cs2 / (s * s);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; x.len()];
        let (oh, ow) = (h * s, w * s);
        for bi in 0..b {
            for ci in 0..c {
                for dy in 0..s {
                    for dx in 0..s {
                        let src_c = ci * s * s + dy * s + dx;
                        let src = &x[(bi * cs2 + src_c) * h * w..];
                        for y in 0..h {
                            for xw in 0..w {
                                out[(bi * c + ci) * oh * ow + (y * s + dy) * ow + (xw * s + dx)] =
                                    src[y * w + xw];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push_tracked(value, &[a], Op::PixelShuffle(a, s)))
    }

    /// Inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, a: Var, s: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(Error::dim("pixel_unshuffle (extents not divisible)", &shape, &[s]));
        }
        let (b, c, oh, ow) = (shape[0], shape[1], shape[2], shape[3]);
        let (h, w) = (oh / s, ow / s);
        let cs2 = c * s * s;
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                for dy in 0..s {
                    for dx in 0..s {
                        let dst_c = ci * s * s + dy * s + dx;
                        let dst = (bi * cs2 + dst_c) * h * w;
                        for y in 0..h {
                            for xw in 0..w {
                                out[dst + y * w + xw] = x
                                    [(bi * c + ci) * oh * ow + (y * s + dy) * ow + (xw * s + dx)];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, cs2, h, w], out)?;
        Ok(self.push_tracked(value, &[a], Op::PixelUnshuffle(a, s)))
    }

    /// Splits `[b, c, h, w]` into non-overlapping `rh x rw` windows:
    /// `[b * nw, rh * rw, c]` with windows and tokens in row-major order.
    pub fn partition(&mut self, a: Var, rh: usize, rw: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || rh == 0 || rw == 0 || shape[2] % rh != 0 || shape[3] % rw != 0 {
            return Err(Error::dim(
                "partition (extents must divide by window; pad first)",
                &shape,
                &[rh, rw],
            ));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (gh, gw) = (h / rh, w / rw);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; x.len()];
        let tokens = rh * rw;
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let win = (bi * gh + gy) * gw + gx;
                    for iy in 0..rh {
                        for ix in 0..rw {
                            let t = iy * rw + ix;
                            let (sy, sx) = (gy * rh + iy, gx * rw + ix);
                            for ci in 0..c {
                                out[(win * tokens + t) * c + ci] =
                                    x[((bi * c + ci) * h + sy) * w + sx];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b * gh * gw, tokens, c], out)?;
        Ok(self.push_tracked(value, &[a], Op::Partition { x: a, rh, rw }))
    }

    /// Exact inverse of [`Tape::partition`] for the original extents.
    pub fn merge_windows(&mut self, a: Var, rh: usize, rw: usize, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || rh == 0 || rw == 0 || h % rh != 0 || w % rw != 0 {
            return Err(Error::dim("merge_windows", &shape, &[rh, rw, h, w]));
        }
        let (gh, gw) = (h / rh, w / rw);
        let nw = gh * gw;
        let tokens = rh * rw;
        if shape[0] % nw != 0 || shape[1] != tokens {
            return Err(Error::dim("merge_windows (inconsistent counts)", &shape, &[nw, tokens]));
        }
        let b = shape[0] / nw;
        let c = shape[2];
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::ZERO; b * c * h * w];
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let win = (bi * gh + gy) * gw + gx;
                    for iy in 0..rh {
                        for ix in 0..rw {
                            let t = iy * rw + ix;
                            let (sy, sx) = (gy * rh + iy, gx * rw + ix);
                            for ci in 0..c {
                                out[((bi * c + ci) * h + sy) * w + sx] =
                                    x[(win * tokens + t) * c + ci];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push_tracked(value, &[a], Op::MergeWindows { x: a, rh, rw, h, w }))
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulates gradients of a scalar `loss` into every node that
    /// requires them. Verifies that the forward values are finite.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::dim(
                "backward (loss must be scalar)",
                self.shape(loss),
                &[1],
            ));
        }
        if let Some(ix) = self.nodes[loss.0]
            .value
            .data()
            .iter()
            .position(|v| !v.is_finite())
        {
            return Err(Error::NonFinite { context: "loss".into(), index: ix });
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("checked above");
            self.step_backward(i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, delta: &[T]) {
        if !self.needs_grad(v) {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        debug_assert_eq!(numel, delta.len());
        let slot = self.nodes[v.0]
            .grad
            .get_or_insert_with(|| vec![T::ZERO; numel]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    fn step_backward(&mut self, node: usize, grad: &[T]) -> Result<()> {
        let op = self.nodes[node].op.clone();
        let out_shape = self.nodes[node].value.shape().to_vec();
        match op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                let da = reduce_to_shape(grad, &out_shape, self.shape(a));
                self.accumulate(a, &da);
                let db = reduce_to_shape(grad, &out_shape, self.shape(b));
                self.accumulate(b, &db);
            }

            Op::Sub(a, b) => {
                let da = reduce_to_shape(grad, &out_shape, self.shape(a));
                self.accumulate(a, &da);
                let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                let db = reduce_to_shape(&neg, &out_shape, self.shape(b));
                self.accumulate(b, &db);
            }

            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let mut da_full = vec![T::ZERO; grad.len()];
                let mut db_full = vec![T::ZERO; grad.len()];
                for (i, (ia, ib)) in BroadcastWalker::new(&sa, &sb, &out_shape).enumerate() {
                    da_full[i] = grad[i] * bd[ib];
                    db_full[i] = grad[i] * ad[ia];
                }
                let da = reduce_to_shape(&da_full, &out_shape, &sa);
                self.accumulate(a, &da);
                let db = reduce_to_shape(&db_full, &out_shape, &sb);
                self.accumulate(b, &db);
            }

            Op::Neg(a) => {
                let da: Vec<T> = grad.iter().map(|&g| -g).collect();
                self.accumulate(a, &da);
            }

            Op::Scale(a, c) => {
                let cc = T::from_f64(c);
                let da: Vec<T> = grad.iter().map(|&g| g * cc).collect();
                self.accumulate(a, &da);
            }

            Op::Matmul(a, b) => self.backward_matmul(a, b, grad, &out_shape),

            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                let da: Vec<T> = grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                    .collect();
                self.accumulate(a, &da);
            }

            Op::Sigmoid(a) => {
                let y = self.nodes[node].value.data();
                let da: Vec<T> = grad
                    .iter()
                    .zip(y)
                    .map(|(&g, &s)| g * s * (T::ONE - s))
                    .collect();
                self.accumulate(a, &da);
            }

            Op::Tanh(a) => {
                let y = self.nodes[node].value.data();
                let da: Vec<T> = grad
                    .iter()
                    .zip(y)
                    .map(|(&g, &t)| g * (T::ONE - t * t))
                    .collect();
                self.accumulate(a, &da);
            }

            Op::Gelu(a) => {
                let x = self.nodes[a.0].value.data();
                let da: Vec<T> = grad.iter().zip(x).map(|(&g, &v)| g * gelu_bwd(v)).collect();
                self.accumulate(a, &da);
            }

            Op::Abs(a) => {
                let x = self.nodes[a.0].value.data();
                let da: Vec<T> = grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| {
                        if v > T::ZERO {
                            g
                        } else if v < T::ZERO {
                            -g
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accumulate(a, &da);
            }

            Op::Softmax(a, axis) => {
                let y = self.nodes[node].value.data();
                let (outer, len, inner) = split_axis(&out_shape, axis);
                let mut da = vec![T::ZERO; grad.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..len {
                            dot += grad[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            da[at(j)] = y[at(j)] * (grad[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(a, &da);
            }

            Op::LayerNorm { x, gamma, beta, axis, eps } => {
                self.backward_layer_norm(x, gamma, beta, axis, eps, grad, &out_shape)
            }

            Op::MeanAxis(a, axis) => {
                let in_shape = self.shape(a).to_vec();
                let (outer, len, inner) = split_axis(&in_shape, axis);
                let dn = T::from_f64(len as f64);
                let mut da = vec![T::ZERO; in_shape.iter().product()];
                for o in 0..outer {
                    for i in 0..inner {
                        let g = grad[o * inner + i] / dn;
                        for j in 0..len {
                            da[o * len * inner + j * inner + i] = g;
                        }
                    }
                }
                self.accumulate(a, &da);
            }

            Op::SumAll(a) => {
                let g = grad[0];
                let da = vec![g; self.nodes[a.0].value.numel()];
                self.accumulate(a, &da);
            }

            Op::Expand { x, axis, n } => {
                let in_shape = self.shape(x).to_vec();
                let (outer, _, inner) = split_axis(&in_shape, axis);
                let mut da = vec![T::ZERO; in_shape.iter().product()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            da[o * inner + i] += grad[(o * n + j) * inner + i];
                        }
                    }
                }
                self.accumulate(x, &da);
            }

            Op::Reshape(a) => {
                self.accumulate(a, grad);
            }

            Op::Permute { x, perm } => {
                // gradient flows through the inverse permutation
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let in_shape = self.shape(x).to_vec();
                let da = permute_copy(grad, &out_shape, &inv, &in_shape);
                self.accumulate(x, &da);
            }

            Op::Concat { xs, axis } => {
                let total = out_shape[axis];
                let (outer, _, inner) = split_axis(&out_shape, axis);
                let mut offset = 0usize;
                for v in xs {
                    let len = self.shape(v)[axis];
                    let mut da = vec![T::ZERO; self.nodes[v.0].value.numel()];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        da[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&grad[src..src + len * inner]);
                    }
                    self.accumulate(v, &da);
                    offset += len;
                }
            }

            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(x).to_vec();
                let len = out_shape[axis];
                let (outer, full, inner) = split_axis(&in_shape, axis);
                let mut da = vec![T::ZERO; in_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    da[dst..dst + len * inner]
                        .copy_from_slice(&grad[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(x, &da);
            }

            Op::Pad2d { x, mode, pads } => {
                let in_shape = self.shape(x).to_vec();
                let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let mut da = vec![T::ZERO; b * c * h * w];
                for bc in 0..b * c {
                    let g = &grad[bc * oh * ow..(bc + 1) * oh * ow];
                    let dst = &mut da[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some((sy, sx)) = pad_source(oy, ox, h, w, pads, mode) {
                                dst[sy * w + sx] += g[oy * ow + ox];
                            }
                        }
                    }
                }
                self.accumulate(x, &da);
            }

            Op::Crop2d { x, y0, x0 } => {
                let in_shape = self.shape(x).to_vec();
                let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (ch, cw) = (out_shape[2], out_shape[3]);
                let mut da = vec![T::ZERO; b * c * h * w];
                for bc in 0..b * c {
                    let g = &grad[bc * ch * cw..(bc + 1) * ch * cw];
                    let dst = &mut da[bc * h * w..];
                    for y in 0..ch {
                        let d = (y0 + y) * w + x0;
                        dst[d..d + cw].copy_from_slice(&g[y * cw..y * cw + cw]);
                    }
                }
                self.accumulate(x, &da);
            }

            Op::Conv2d { x, k, sh, sw } => {
                let xs = self.shape(x).to_vec();
                let ks = self.shape(k).to_vec();
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                if self.needs_grad(x) {
                    let dx = kernels::conv2d_valid_grad_x(
                        grad,
                        self.nodes[k.0].value.data(),
                        b,
                        cin,
                        h,
                        w,
                        cout,
                        kh,
                        kw,
                        sh,
                        sw,
                    );
                    self.accumulate(x, &dx);
                }
                if self.needs_grad(k) {
                    let dk = kernels::conv2d_valid_grad_k(
                        grad,
                        self.nodes[x.0].value.data(),
                        b,
                        cin,
                        h,
                        w,
                        cout,
                        kh,
                        kw,
                        sh,
                        sw,
                    );
                    self.accumulate(k, &dk);
                }
            }

            Op::DepthwiseConv2d { x, k } => {
                let xs = self.shape(x).to_vec();
                let ks = self.shape(k).to_vec();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (kh, kw) = (ks[1], ks[2]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let xd = self.nodes[x.0].value.data();
                let kd = self.nodes[k.0].value.data();
                let mut dx = vec![T::ZERO; b * c * h * w];
                let mut dk = vec![T::ZERO; c * kh * kw];
                for bi in 0..b {
                    for ci in 0..c {
                        let g = &grad[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                        let src = &xd[(bi * c + ci) * h * w..];
                        let kp = &kd[ci * kh * kw..(ci + 1) * kh * kw];
                        let dxp = &mut dx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = kp[ky * kw + kx];
                                let mut s = T::ZERO;
                                for oy in 0..oh {
                                    let grow = &g[oy * ow..oy * ow + ow];
                                    let base = (oy + ky) * w + kx;
                                    for (ox, gv) in grow.iter().enumerate() {
                                        dxp[base + ox] += wv * *gv;
                                        s += *gv * src[base + ox];
                                    }
                                }
                                dk[ci * kh * kw + ky * kw + kx] += s;
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(k, &dk);
            }

            Op::BilinearSample { x, coords } => {
                self.backward_bilinear(x, coords, grad, &out_shape)
            }

            Op::PixelShuffle(a, s) => {
                let in_shape = self.shape(a).to_vec();
                let (b, cs2, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let c = cs2 / (s * s);
                let (oh, ow) = (h * s, w * s);
                let mut da = vec![T::ZERO; grad.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for dy in 0..s {
                            for dx in 0..s {
                                let src_c = ci * s * s + dy * s + dx;
                                let dst = (bi * cs2 + src_c) * h * w;
                                for y in 0..h {
                                    for xw in 0..w {
                                        da[dst + y * w + xw] = grad[(bi * c + ci) * oh * ow
                                            + (y * s + dy) * ow
                                            + (xw * s + dx)];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
            }

            Op::PixelUnshuffle(a, s) => {
                let in_shape = self.shape(a).to_vec();
                let (b, c, oh, ow) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (h, w) = (oh / s, ow / s);
                let cs2 = c * s * s;
                let mut da = vec![T::ZERO; grad.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for dy in 0..s {
                            for dx in 0..s {
                                let dst_c = ci * s * s + dy * s + dx;
                                let src = (bi * cs2 + dst_c) * h * w;
                                for y in 0..h {
                                    for xw in 0..w {
                                        da[(bi * c + ci) * oh * ow + (y * s + dy) * ow + (xw * s + dx)] =
                                            grad[src + y * w + xw];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
            }

            Op::Partition { x, rh, rw } => {
                let in_shape = self.shape(x).to_vec();
                let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (gh, gw) = (h / rh, w / rw);
                let tokens = rh * rw;
                let mut da = vec![T::ZERO; grad.len()];
                for bi in 0..b {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let win = (bi * gh + gy) * gw + gx;
                            for iy in 0..rh {
                                for ix in 0..rw {
                                    let t = iy * rw + ix;
                                    let (sy, sx) = (gy * rh + iy, gx * rw + ix);
                                    for ci in 0..c {
                                        da[((bi * c + ci) * h + sy) * w + sx] =
                                            grad[(win * tokens + t) * c + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &da);
            }

            Op::MergeWindows { x, rh, rw, h, w } => {
                let in_shape = self.shape(x).to_vec();
                let (gh, gw) = (h / rh, w / rw);
                let b = in_shape[0] / (gh * gw);
                let c = in_shape[2];
                let tokens = rh * rw;
                let mut da = vec![T::ZERO; grad.len()];
                for bi in 0..b {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let win = (bi * gh + gy) * gw + gx;
                            for iy in 0..rh {
                                for ix in 0..rw {
                                    let t = iy * rw + ix;
                                    let (sy, sx) = (gy * rh + iy, gx * rw + ix);
                                    for ci in 0..c {
                                        da[(win * tokens + t) * c + ci] =
                                            grad[((bi * c + ci) * h + sy) * w + sx];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &da);
            }
        }
        Ok(())
    }

    fn backward_matmul(&mut self, a: Var, b: Var, grad: &[T], out_shape: &[usize]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = &out_shape[..out_shape.len() - 2];

        if self.needs_grad(a) {
            // dA = dY * B^T, summed over broadcast batch dims
            let bd = self.nodes[b.0].value.data();
            let mut da = vec![T::ZERO; self.nodes[a.0].value.numel()];
            for (bi, (ia, ib)) in BroadcastWalker::new(batch_a, batch_b, batch).enumerate() {
                kernels::matmul_bt_acc(
                    &grad[bi * m * n..(bi + 1) * m * n],
                    &bd[ib * k * n..(ib + 1) * k * n],
                    &mut da[ia * m * k..(ia + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            self.accumulate(a, &da);
        }
        if self.needs_grad(b) {
            // dB = A^T * dY, summed over broadcast batch dims
            let ad = self.nodes[a.0].value.data();
            let mut db = vec![T::ZERO; self.nodes[b.0].value.numel()];
            for (bi, (ia, ib)) in BroadcastWalker::new(batch_a, batch_b, batch).enumerate() {
                kernels::matmul_at_acc(
                    &ad[ia * m * k..(ia + 1) * m * k],
                    &grad[bi * m * n..(bi + 1) * m * n],
                    &mut db[ib * k * n..(ib + 1) * k * n],
                    k,
                    m,
                    n,
                );
            }
            self.accumulate(b, &db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
        grad: &[T],
        out_shape: &[usize],
    ) {
        let (outer, len, inner) = split_axis(out_shape, axis);
        let xd = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let epst = T::from_f64(eps);
        let dn = T::from_f64(len as f64);
        let mut dx = vec![T::ZERO; xd.len()];
        let mut dgamma = vec![T::ZERO; len];
        let mut dbeta = vec![T::ZERO; len];
        let mut xhat = vec![T::ZERO; len];
        let mut dxh = vec![T::ZERO; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mean = T::ZERO;
                for j in 0..len {
                    mean += xd[at(j)];
                }
                mean = mean / dn;
                let mut var = T::ZERO;
                for j in 0..len {
                    let c = xd[at(j)] - mean;
                    var += c * c;
                }
                var = var / dn;
                let inv = T::ONE / (var + epst).sqrt();
                let mut sum_dxh = T::ZERO;
                let mut sum_dxh_xh = T::ZERO;
                for j in 0..len {
                    xhat[j] = (xd[at(j)] - mean) * inv;
                    let dy = grad[at(j)];
                    dgamma[j] += dy * xhat[j];
                    dbeta[j] += dy;
                    dxh[j] = dy * g[j];
                    sum_dxh += dxh[j];
                    sum_dxh_xh += dxh[j] * xhat[j];
                }
                for j in 0..len {
                    dx[at(j)] = inv / dn * (dn * dxh[j] - sum_dxh - xhat[j] * sum_dxh_xh);
                }
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(gamma, &dgamma);
        self.accumulate(beta, &dbeta);
    }

    fn backward_bilinear(&mut self, x: Var, coords: Var, grad: &[T], out_shape: &[usize]) {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let p = out_shape[2];
        let xd = self.nodes[x.0].value.data();
        let cd = self.nodes[coords.0].value.data();
        let want_x = self.needs_grad(x);
        let want_c = self.needs_grad(coords);
        let mut dx = vec![T::ZERO; if want_x { b * c * h * w } else { 0 }];
        let mut dc = vec![T::ZERO; if want_c { b * p * 2 } else { 0 }];
        for bi in 0..b {
            for pi in 0..p {
                let y = cd[(bi * p + pi) * 2].to_f64();
                let xc = cd[(bi * p + pi) * 2 + 1].to_f64();
                let s = bilinear_setup(y, xc, h, w);
                for ci in 0..c {
                    let g = grad[(bi * c + ci) * p + pi].to_f64();
                    if g == 0.0 {
                        continue;
                    }
                    let plane_base = (bi * c + ci) * h * w;
                    let plane = &xd[plane_base..plane_base + h * w];
                    if want_x {
                        let dxp = &mut dx[plane_base..plane_base + h * w];
                        dxp[s.y0 * w + s.x0] += T::from_f64(g * (1.0 - s.fy) * (1.0 - s.fx));
                        dxp[s.y0 * w + s.x1] += T::from_f64(g * (1.0 - s.fy) * s.fx);
                        dxp[s.y1 * w + s.x0] += T::from_f64(g * s.fy * (1.0 - s.fx));
                        dxp[s.y1 * w + s.x1] += T::from_f64(g * s.fy * s.fx);
                    }
                    if want_c {
                        let v00 = plane[s.y0 * w + s.x0].to_f64();
                        let v01 = plane[s.y0 * w + s.x1].to_f64();
                        let v10 = plane[s.y1 * w + s.x0].to_f64();
                        let v11 = plane[s.y1 * w + s.x1].to_f64();
                        if s.y_inside {
                            let dy = (v10 - v00) * (1.0 - s.fx) + (v11 - v01) * s.fx;
                            dc[(bi * p + pi) * 2] += T::from_f64(g * dy);
                        }
                        if s.x_inside {
                            let dxv = (v01 - v00) * (1.0 - s.fy) + (v11 - v10) * s.fy;
                            dc[(bi * p + pi) * 2 + 1] += T::from_f64(g * dxv);
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(x, &dx);
        }
        if want_c {
            self.accumulate(coords, &dc);
        }
    }
}

/// (product before axis, extent at axis, product after axis)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_copy<T: Scalar>(
    x: &[T],
    in_shape: &[usize],
    perm: &[usize],
    out_shape: &[usize],
) -> Vec<T> {
    let in_strides = strides(in_shape);
    // stride to advance in the input when output axis i increments
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = x.len();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Source pixel for a padded location, or None when zero padding fills it.
fn pad_source(
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    pads: [usize; 4],
    mode: PadMode,
) -> Option<(usize, usize)> {
    let [pt, _, pl, _] = pads;
    let y = oy as isize - pt as isize;
    let x = ox as isize - pl as isize;
    let map = |v: isize, n: usize| -> Option<usize> {
        if v >= 0 && (v as usize) < n {
            return Some(v as usize);
        }
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(v.clamp(0, n as isize - 1) as usize),
            PadMode::Reflect => {
                // reflect without repeating the edge: -1 -> 1, n -> n-2
                let r = if v < 0 { -v } else { 2 * (n as isize - 1) - v };
                Some(r as usize)
            }
        }
    };
    match (map(y, h), map(x, w)) {
        (Some(sy), Some(sx)) => Some((sy, sx)),
        _ => None,
    }
}

struct BilinearSetup {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f64,
    fx: f64,
    y_inside: bool,
    x_inside: bool,
}

impl BilinearSetup {
    fn interpolate<T: Scalar>(&self, plane: &[T], w: usize) -> f64 {
        let v00 = plane[self.y0 * w + self.x0].to_f64();
        let v01 = plane[self.y0 * w + self.x1].to_f64();
        let v10 = plane[self.y1 * w + self.x0].to_f64();
        let v11 = plane[self.y1 * w + self.x1].to_f64();
        (1.0 - self.fy) * ((1.0 - self.fx) * v00 + self.fx * v01)
            + self.fy * ((1.0 - self.fx) * v10 + self.fx * v11)
    }
}

fn bilinear_setup(y: f64, x: f64, h: usize, w: usize) -> BilinearSetup {
    let y_inside = y >= 0.0 && y <= (h - 1) as f64;
    let x_inside = x >= 0.0 && x <= (w - 1) as f64;
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
    let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    BilinearSetup {
        y0,
        y1,
        x0,
        x1,
        fy: yc - y0 as f64,
        fx: xc - x0 as f64,
        y_inside,
        x_inside,
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + k * x.powi(3))).tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x.powi(3));
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    let dinner = c * (T::ONE + three * k * x * x);
    half * (T::ONE + t) + half * x * sech2 * dinner
}

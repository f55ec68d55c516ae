//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape once in reverse and returns gradients for every node that
//! depends on a trainable leaf. Layouts are NCHW for images and `N x D` for
//! vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Tanh(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Concat(Vec<Var>),
    ChannelPick(Var, Vec<usize>),
    LogSoftmax(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    PickRows(Vec<Var>, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output geometry of a convolution.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(w: usize, wo: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // ox * stride + kx < w + pad
    let hi = if w + pad > kx { (w + pad - kx).div_ceil(stride).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(w, wo, kx, stride, pad);
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * stride + kx - pad;
                        if stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[first + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(w, wo, kx, stride, pad);
                if lo >= hi {
                    continue;
                }
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let first = iy as usize * w + lo * stride + kx - pad;
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        for (d, &v) in plane[first..first + hi - lo].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            let d = &mut plane[first + j * stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// `(outer, channels, inner)` view used by channel-wise reductions on either
/// `N x C` or `N x C x H x W` tensors.
fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [n, c] => (*n, *c, 1),
        [n, c, h, w] => (*n, *c, h * w),
        _ => panic!("channel op needs rank 2 or 4, got {shape:?}"),
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::lit(scale), T::lit(shift));
        let out = self.value(a).map(|x| s * x + t);
        self.push(out, Op::Affine(a, s), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * s });
        self.push(out, Op::LeakyRelu(a, s), &[a])
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = T::from_usize(t.numel()).unwrap();
        let s = t.data().iter().fold(T::zero(), |acc, &x| acc + x) / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// 2-D convolution with square kernels. `w` is `Co x Ci x k x k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let (co, wci, k, k2) = self.value(w).dims4();
        assert_eq!(ci, wci, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let kk = ci * k * k;
        let p = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![T::zero(); n * co * p];
        let mut col = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
                let cols: &[T] = if direct {
                    xs
                } else {
                    im2col(xs, (ci, h, wd), k, stride, pad, &mut col);
                    &col
                };
                gemm(co, kk, p, wv, false, cols, false, &mut out[s * co * p..(s + 1) * co * p], T::zero());
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), co, "conv bias size");
                for (i, chunk) in out.chunks_mut(p).enumerate() {
                    let bias = bv[i % co];
                    for o in chunk {
                        *o = *o + bias;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::new(&[n, co, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// `x * w^T + b` with `x: N x I`, `w: O x I`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear input width");
        let mut out = vec![T::zero(); n * o];
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, T::zero());
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o, "linear bias size");
            for row in out.chunks_mut(o) {
                for (r, &bb) in row.iter_mut().zip(bv) {
                    *r = *r + bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, &inputs)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for pl in 0..n * c {
            let src = &xv[pl * h * w..];
            let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h * 2, w * 2);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for pl in 0..n * c {
            let src = &xv[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::Upsample2(x), &[x])
    }

    /// Per-sample, per-channel standardisation over the spatial extent.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv_hw = T::one() / T::from_usize(hw).unwrap();
        let eps = T::lit(eps);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for pl in 0..n * c {
            let src = &xv[pl * hw..(pl + 1) * hw];
            let mean = src.iter().fold(T::zero(), |a, &v| a + v) * inv_hw;
            let var = src
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_hw;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[pl] = inv;
            for (o, &v) in out[pl * hw..(pl + 1) * hw].iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        self.push(
            Tensor::new(&[n, c, h, w], out),
            Op::InstanceNorm { x, inv_std },
            &[x],
        )
    }

    /// `x * gamma + beta` per channel. `gamma`/`beta` are `N x C` or `1 x C`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (gn, gc) = self.value(gamma).dims2();
        assert_eq!(self.value(gamma).shape(), self.value(beta).shape());
        assert!(gc == c && (gn == n || gn == 1), "channel affine shape");
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            let row = if gn == 1 { 0 } else { s };
            for ch in 0..c {
                let (g, b) = (gv[row * c + ch], bv[row * c + ch]);
                let off = (s * c + ch) * hw;
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xv[off..off + hw]) {
                    *o = v * g + b;
                }
            }
        }
        self.push(
            Tensor::new(&[n, c, h, w], out),
            Op::ChannelAffine { x, gamma, beta },
            &[x, gamma, beta],
        )
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let hw = h * w;
        let total: usize = parts.iter().map(|&p| self.value(p).dims4().1).sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for &p in parts {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat geometry");
                out.extend_from_slice(&self.value(p).data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        self.push(
            Tensor::new(&[n, total, h, w], out),
            Op::Concat(parts.to_vec()),
            parts,
        )
    }

    /// Channel `channels[s]` of sample `s`, as `N x 1 x H x W`.
    pub fn channel_pick(&mut self, x: Var, channels: &[usize]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(channels.len(), n, "one channel per sample");
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * hw);
        for (s, &ch) in channels.iter().enumerate() {
            assert!(ch < c, "channel {ch} out of range");
            out.extend_from_slice(&xv[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
        }
        self.push(
            Tensor::new(&[n, 1, h, w], out),
            Op::ChannelPick(x, channels.to_vec()),
            &[x],
        )
    }

    /// Log-softmax over axis 1.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (outer, c, inner) = channel_view(&shape);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * c * inner + i;
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(xv[base + ch * inner]);
                }
                let mut acc = T::zero();
                for ch in 0..c {
                    acc = acc + (xv[base + ch * inner] - m).exp();
                }
                let lse = m + acc.ln();
                for ch in 0..c {
                    out[base + ch * inner] = xv[base + ch * inner] - lse;
                }
            }
        }
        self.push(Tensor::new(&shape, out), Op::LogSoftmax(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let l = self.log_softmax(x);
        self.exp(l)
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|pl| pl.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        self.push(Tensor::new(&[n, c], out), Op::GlobalAvgPool(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Row `s` of `candidates[choice[s]]` for every sample `s`. All
    /// candidates share the shape `N x D`.
    pub fn pick_rows(&mut self, candidates: &[Var], choice: &[usize]) -> Var {
        let (n, d) = self.value(candidates[0]).dims2();
        assert_eq!(choice.len(), n, "one choice per row");
        let mut out = Vec::with_capacity(n * d);
        for (s, &k) in choice.iter().enumerate() {
            let src = self.value(candidates[k]);
            assert_eq!(src.dims2(), (n, d), "pick_rows candidate shape");
            out.extend_from_slice(&src.data()[s * d..(s + 1) * d]);
        }
        self.push(
            Tensor::new(&[n, d], out),
            Op::PickRows(candidates.to_vec(), choice.to_vec()),
            candidates,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), |gv, bv| gv * bv);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), |gv, av| gv * av);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(out, |gv, y| gv * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    if x >= lo && x <= hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gv, y| gv * (T::one() - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let ga = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let n = T::from_usize(t.numel()).unwrap();
                self.accumulate(grads, *a, Tensor::full(t.shape(), g.item() / n));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, &g, grads),
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    gemm(n, o, i, g.data(), false, self.value(*w).data(), false, &mut gx, T::zero());
                    self.accumulate(grads, *x, Tensor::new(&[n, i], gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); o * i];
                    gemm(o, n, i, g.data(), true, self.value(*x).data(), false, &mut gw, T::zero());
                    self.accumulate(grads, *w, Tensor::new(&[o, i], gw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); o];
                        for row in g.data().chunks(o) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[o], gb));
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut gx = vec![T::zero(); n * c * h * w];
                let gv = g.data();
                for pl in 0..n * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = gv[pl * ho * wo + y * wo + xx] * quarter;
                            let i = pl * h * w + 2 * y * w + 2 * xx;
                            gx[i] = v;
                            gx[i + 1] = v;
                            gx[i + w] = v;
                            gx[i + w + 1] = v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let wo = w * 2;
                let mut gx = vec![T::zero(); n * c * h * w];
                let gv = g.data();
                for pl in 0..n * c {
                    let src = &gv[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                    let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..wo {
                            let d = &mut dst[(y / 2) * w + xx / 2];
                            *d = *d + src[y * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::InstanceNorm { x, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let inv_hw = T::one() / T::from_usize(hw).unwrap();
                let yv = out.data();
                let gv = g.data();
                let mut gx = vec![T::zero(); n * c * hw];
                for pl in 0..n * c {
                    let ys = &yv[pl * hw..(pl + 1) * hw];
                    let gs = &gv[pl * hw..(pl + 1) * hw];
                    let mean_g = gs.iter().fold(T::zero(), |a, &v| a + v) * inv_hw;
                    let mean_gy = gs
                        .iter()
                        .zip(ys)
                        .fold(T::zero(), |a, (&gg, &yy)| a + gg * yy)
                        * inv_hw;
                    let inv = inv_std[pl];
                    for ((d, &gg), &yy) in gx[pl * hw..(pl + 1) * hw].iter_mut().zip(gs).zip(ys) {
                        *d = inv * (gg - mean_g - yy * mean_gy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (gn, _) = self.value(*gamma).dims2();
                let hw = h * w;
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let gv = g.data();
                let mut gx = vec![T::zero(); xv.len()];
                let mut ggam = vec![T::zero(); gn * c];
                let mut gbet = vec![T::zero(); gn * c];
                for s in 0..n {
                    let row = if gn == 1 { 0 } else { s };
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        let gm = gam[row * c + ch];
                        let (mut sg, mut sb) = (T::zero(), T::zero());
                        for j in off..off + hw {
                            gx[j] = gv[j] * gm;
                            sg = sg + gv[j] * xv[j];
                            sb = sb + gv[j];
                        }
                        ggam[row * c + ch] = ggam[row * c + ch] + sg;
                        gbet[row * c + ch] = gbet[row * c + ch] + sb;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], gx));
                self.accumulate(grads, *gamma, Tensor::new(&[gn, c], ggam));
                self.accumulate(grads, *beta, Tensor::new(&[gn, c], gbet));
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = out.dims4();
                let hw = h * w;
                let gv = g.data();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims4().1;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * total + offset) * hw;
                            gp.extend_from_slice(&gv[start..start + pc * hw]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[n, pc, h, w], gp));
                    }
                    offset += pc;
                }
            }
            Op::ChannelPick(x, channels) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut gx = vec![T::zero(); n * c * hw];
                for (s, &ch) in channels.iter().enumerate() {
                    gx[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                        .copy_from_slice(&g.data()[s * hw..(s + 1) * hw]);
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::LogSoftmax(x) => {
                let shape = out.shape();
                let (outer, c, inner) = channel_view(shape);
                let yv = out.data();
                let gv = g.data();
                let mut gx = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * c * inner + i;
                        let mut sg = T::zero();
                        for ch in 0..c {
                            sg = sg + gv[base + ch * inner];
                        }
                        for ch in 0..c {
                            let j = base + ch * inner;
                            gx[j] = gv[j] - yv[j].exp() * sg;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx));
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut gx = Vec::with_capacity(n * c * hw);
                for &v in g.data() {
                    gx.extend(core::iter::repeat(v * inv).take(hw));
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape));
            }
            Op::PickRows(candidates, choice) => {
                let (n, d) = out.dims2();
                for (k, &cand) in candidates.iter().enumerate() {
                    if !self.wants(cand) || !choice.contains(&k) {
                        continue;
                    }
                    let mut gc = vec![T::zero(); n * d];
                    for (s, &pick) in choice.iter().enumerate() {
                        if pick == k {
                            gc[s * d..(s + 1) * d].copy_from_slice(&g.data()[s * d..(s + 1) * d]);
                        }
                    }
                    self.accumulate(grads, cand, Tensor::new(&[n, d], gc));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, ci, h, wd) = self.value(x).dims4();
        let (co, _, k, _) = self.value(w).dims4();
        let (_, _, ho, wo) = g.dims4();
        let p = ho * wo;
        let kk = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gv = g.data();
        let mut gw = vec![T::zero(); if want_w { co * kk } else { 0 }];
        let mut gx = vec![T::zero(); if want_x { n * ci * h * wd } else { 0 }];
        let mut col = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut dcol = vec![T::zero(); if want_x && !direct { kk * p } else { 0 }];
        for s in 0..n {
            let gs = &gv[s * co * p..(s + 1) * co * p];
            let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
            if want_w {
                let cols: &[T] = if direct {
                    xs
                } else {
                    im2col(xs, (ci, h, wd), k, stride, pad, &mut col);
                    &col
                };
                gemm(co, p, kk, gs, false, cols, true, &mut gw, T::one());
            }
            if want_x {
                let dst = &mut gx[s * ci * h * wd..(s + 1) * ci * h * wd];
                if direct {
                    gemm(kk, co, p, wv, true, gs, false, dst, T::zero());
                } else {
                    gemm(kk, co, p, wv, true, gs, false, &mut dcol, T::zero());
                    col2im(&dcol, (ci, h, wd), k, stride, pad, dst);
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(&[n, ci, h, wd], gx));
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(&[co, ci, k, k], gw));
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut gb = vec![T::zero(); co];
                for (i, chunk) in gv.chunks(p).enumerate() {
                    gb[i % co] = chunk.iter().fold(gb[i % co], |a, &v| a + v);
                }
                self.accumulate(grads, b, Tensor::new(&[co], gb));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

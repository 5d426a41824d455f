//! A single-use reverse-mode computation graph over [`Tensor`]s.
//!
//! Every op records its inputs and whatever statistics its backward rule
//! needs. Parameters are borrowed from a [`ParamSet`] and never copied.

use crate::params::{ParamGrads, ParamId, ParamSet};
use crate::tensor::Tensor;

pub type NodeId = usize;

const GN_EPS: f32 = 1e-5;

enum Op {
    Input,
    Conv2d { x: NodeId, w: ParamId, b: ParamId, k: usize },
    Linear { x: NodeId, w: ParamId, b: ParamId },
    GroupNorm { x: NodeId, gamma: ParamId, beta: ParamId, groups: usize, mean: Vec<f32>, rstd: Vec<f32> },
    Silu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddChannel { x: NodeId, bias: NodeId },
    AvgPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    SpaceToDepth { x: NodeId, p: usize },
    DepthToSpace { x: NodeId, p: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Gradients with respect to graph nodes, produced by [`Graph::backward`].
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Stride-1 convolution with "same" zero padding. The kernel size is read
    /// from the weight shape `[out, in, k, k]`; `k` must be odd.
    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let shape = &self.params.infos()[w].shape;
        let (co, ci, k) = (shape[0], shape[1], shape[2]);
        assert_eq!(shape.len(), 4, "conv weight must be 4-d");
        assert!(k % 2 == 1 && shape[3] == k, "conv kernel must be square and odd");
        let xv = &self.nodes[x].value;
        assert_eq!(xv.c(), ci, "conv input channels");
        let (n, h, wd) = (xv.n(), xv.h(), xv.w());
        let nhw = n * h * wd;
        let kk = ci * k * k;
        let mut tmp = vec![0.0; co * nhw];
        with_scratch(kk * nhw, |cols| {
            if k == 1 {
                // 1x1: the channel-major view is the column matrix.
                to_channel_major(xv.data(), n, ci, h * wd, cols);
            } else {
                im2col(xv.data(), n, ci, h, wd, k, cols);
            }
            sgemm(co, kk, nhw, self.params.get(w), kk, 1, cols, nhw, 1, 0.0, &mut tmp, nhw, 1);
        });
        let mut out = Tensor::zeros([n, co, h, wd]);
        from_channel_major(&tmp, n, co, h * wd, out.data_mut());
        let bias = self.params.get(b);
        for s in 0..n {
            for (o, &bo) in bias.iter().enumerate() {
                let off = (s * co + o) * h * wd;
                out.data_mut()[off..off + h * wd].iter_mut().for_each(|v| *v += bo);
            }
        }
        self.push(out, Op::Conv2d { x, w, b, k })
    }

    /// `y = x W^T + b` for `x` of shape `[n, in, 1, 1]` and `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let shape = &self.params.infos()[w].shape;
        let (out_f, in_f) = (shape[0], shape[1]);
        let xv = &self.nodes[x].value;
        assert_eq!(xv.sample_len(), in_f, "linear input features");
        let n = xv.n();
        let mut y = vec![0.0; n * out_f];
        sgemm(n, in_f, out_f, xv.data(), in_f, 1, self.params.get(w), 1, in_f, 0.0, &mut y, out_f, 1);
        let bias = self.params.get(b);
        for row in y.chunks_mut(out_f) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        self.push(Tensor::from_vec([n, out_f, 1, 1], y), Op::Linear { x, w, b })
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, groups: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let (n, c, hw) = (xv.n(), xv.c(), xv.h() * xv.w());
        assert!(groups > 0 && c % groups == 0, "channels must divide into groups");
        let cg = c / groups;
        let m = (cg * hw) as f64;
        let (g_w, g_b) = (self.params.get(gamma), self.params.get(beta));
        let mut out = Tensor::zeros(xv.shape());
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cg) * hw;
                let seg = &xv.data()[off..off + cg * hw];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / m;
                let var = (seg.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / m - mean * mean).max(0.0);
                let rstd = 1.0 / (var + GN_EPS as f64).sqrt();
                let dst = &mut out.data_mut()[off..off + cg * hw];
                let (mean32, rstd32) = (mean as f32, rstd as f32);
                for ch in 0..cg {
                    let scale = rstd32 * g_w[g * cg + ch];
                    let shift = g_b[g * cg + ch] - mean32 * scale;
                    let (src, out) = (&seg[ch * hw..(ch + 1) * hw], &mut dst[ch * hw..(ch + 1) * hw]);
                    out.iter_mut().zip(src).for_each(|(o, &v)| *o = v * scale + shift);
                }
                means.push(mean as f32);
                rstds.push(rstd as f32);
            }
        }
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_vec(xv.shape(), data);
        self.push(out, Op::Silu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.add_assign(&self.nodes[b].value);
        self.push(out, Op::Add { a, b })
    }

    /// Adds a per-sample, per-channel bias `[n, c, 1, 1]` to every pixel of `x`.
    pub fn add_channel(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        let bv = &self.nodes[bias].value;
        assert_eq!(bv.n(), out.n(), "channel bias batch");
        assert_eq!(bv.sample_len(), out.c(), "channel bias width");
        let hw = out.h() * out.w();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = bv.data()[i];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push(out, Op::AddChannel { x, bias })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let [n, c, h, w] = xv.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let src = xv.data();
        for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i = base + 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        self.push(out, Op::AvgPool2 { x })
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let src = xv.data();
        for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[base + (y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2 { x })
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((av.n(), av.h(), av.w()), (bv.n(), bv.h(), bv.w()), "concat shapes");
        let (la, lb) = (av.sample_len(), bv.sample_len());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for s in 0..av.n() {
            data.extend_from_slice(&av.data()[s * la..(s + 1) * la]);
            data.extend_from_slice(&bv.data()[s * lb..(s + 1) * lb]);
        }
        let out = Tensor::from_vec([av.n(), av.c() + bv.c(), av.h(), av.w()], data);
        self.push(out, Op::Concat { a, b })
    }

    pub fn space_to_depth(&mut self, x: NodeId, p: usize) -> NodeId {
        let out = space_to_depth(&self.nodes[x].value, p);
        self.push(out, Op::SpaceToDepth { x, p })
    }

    pub fn depth_to_space(&mut self, x: NodeId, p: usize) -> NodeId {
        let out = depth_to_space(&self.nodes[x].value, p);
        self.push(out, Op::DepthToSpace { x, p })
    }

    /// Back-propagates `grad_out` from `out`, accumulating parameter gradients
    /// into `param_grads` and returning gradients for every reached node.
    pub fn backward(&self, out: NodeId, grad_out: Tensor, param_grads: &mut ParamGrads) -> NodeGrads {
        assert_eq!(grad_out.shape(), self.nodes[out].value.shape(), "grad_out shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(grad_out);
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {
                    grads[id] = Some(g);
                }
                Op::Conv2d { x, w, b, k } => {
                    let dx = self.conv_backward(*x, *w, *b, *k, &g, param_grads);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let shape = &self.params.infos()[*w].shape;
                    let (out_f, in_f) = (shape[0], shape[1]);
                    let n = xv.n();
                    sgemm(out_f, n, in_f, g.data(), 1, out_f, xv.data(), in_f, 1, 1.0, param_grads.get_mut(*w), in_f, 1);
                    let db = param_grads.get_mut(*b);
                    for row in g.data().chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    let mut dx = Tensor::zeros(xv.shape());
                    sgemm(n, out_f, in_f, g.data(), out_f, 1, self.params.get(*w), in_f, 1, 0.0, dx.data_mut(), in_f, 1);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                    let dx = self.group_norm_backward(*x, *gamma, *beta, *groups, mean, rstd, &g, param_grads);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Silu { x } => {
                    let xv = &self.nodes[*x].value;
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| {
                            let s = sigmoid(v);
                            d * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), data));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddChannel { x, bias } => {
                    let bv = &self.nodes[*bias].value;
                    let hw = g.h() * g.w();
                    let db: Vec<f32> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                    accumulate(&mut grads, *bias, Tensor::from_vec(bv.shape(), db));
                    accumulate(&mut grads, *x, g);
                }
                Op::AvgPool2 { x } => {
                    let [n, c, h, w] = self.nodes[*x].value.shape();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for (plane, src) in g.data().chunks(oh * ow).enumerate() {
                        let base = plane * h * w;
                        let d = dx.data_mut();
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * src[y * ow + xx];
                                let i = base + 2 * y * w + 2 * xx;
                                d[i] += v;
                                d[i + 1] += v;
                                d[i + w] += v;
                                d[i + w + 1] += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2 { x } => {
                    let [n, c, h, w] = self.nodes[*x].value.shape();
                    let (oh, ow) = (h * 2, w * 2);
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for (plane, src) in g.data().chunks(oh * ow).enumerate() {
                        let base = plane * h * w;
                        let d = dx.data_mut();
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[base + (y / 2) * w + xx / 2] += src[y * ow + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let (ash, bsh) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                    let la = ash[1] * ash[2] * ash[3];
                    let lb = bsh[1] * bsh[2] * bsh[3];
                    let mut da = Vec::with_capacity(ash[0] * la);
                    let mut db = Vec::with_capacity(bsh[0] * lb);
                    for s in g.data().chunks(la + lb) {
                        da.extend_from_slice(&s[..la]);
                        db.extend_from_slice(&s[la..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(ash, da));
                    accumulate(&mut grads, *b, Tensor::from_vec(bsh, db));
                }
                Op::SpaceToDepth { x, p } => {
                    accumulate(&mut grads, *x, depth_to_space(&g, *p));
                }
                Op::DepthToSpace { x, p } => {
                    accumulate(&mut grads, *x, space_to_depth(&g, *p));
                }
            }
        }
        NodeGrads { grads }
    }

    fn conv_backward(&self, x: NodeId, w: ParamId, b: ParamId, k: usize, g: &Tensor, pg: &mut ParamGrads) -> Tensor {
        let xv = &self.nodes[x].value;
        let (n, ci, h, wd) = (xv.n(), xv.c(), xv.h(), xv.w());
        let co = g.c();
        let hw = h * wd;
        let nhw = n * hw;
        let kk = ci * k * k;
        let mut gcm = vec![0.0; co * nhw];
        to_channel_major(g.data(), n, co, hw, &mut gcm);

        let db = pg.get_mut(b);
        for (o, row) in gcm.chunks(nhw).enumerate() {
            db[o] += row.iter().sum::<f32>();
        }

        let mut dx = Tensor::zeros(xv.shape());
        with_scratch(kk * nhw, |cols| {
            if k == 1 {
                to_channel_major(xv.data(), n, ci, hw, cols);
            } else {
                im2col(xv.data(), n, ci, h, wd, k, cols);
            }
            // dW (co x kk) += G (co x nhw) * cols^T (nhw x kk)
            sgemm(co, nhw, kk, &gcm, nhw, 1, cols, 1, nhw, 1.0, pg.get_mut(w), kk, 1);
            // dcols (kk x nhw) = W^T (kk x co) * G (co x nhw)
            sgemm(kk, co, nhw, self.params.get(w), 1, kk, &gcm, nhw, 1, 0.0, cols, nhw, 1);
            if k == 1 {
                from_channel_major(cols, n, ci, hw, dx.data_mut());
            } else {
                col2im(cols, n, ci, h, wd, k, dx.data_mut());
            }
        });
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        mean: &[f32],
        rstd: &[f32],
        g: &Tensor,
        pg: &mut ParamGrads,
    ) -> Tensor {
        let xv = &self.nodes[x].value;
        let (n, c, hw) = (xv.n(), xv.c(), xv.h() * xv.w());
        let cg = c / groups;
        let m = (cg * hw) as f64;
        let gw = self.params.get(gamma);
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let mut dx = Tensor::zeros(xv.shape());
        for s in 0..n {
            for grp in 0..groups {
                let idx = s * groups + grp;
                let (mu, rs) = (mean[idx] as f64, rstd[idx] as f64);
                let off = (s * c + grp * cg) * hw;
                let xs = &xv.data()[off..off + cg * hw];
                let gs = &g.data()[off..off + cg * hw];
                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                for ch in 0..cg {
                    let cidx = grp * cg + ch;
                    for p in 0..hw {
                        let i = ch * hw + p;
                        let xhat = (xs[i] as f64 - mu) * rs;
                        let d = gs[i] as f64;
                        dgamma[cidx] += d * xhat;
                        dbeta[cidx] += d;
                        let dxhat = d * gw[cidx] as f64;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                let (mean_d, mean_dx) = (sum_dxhat / m, sum_dxhat_xhat / m);
                let dst = &mut dx.data_mut()[off..off + cg * hw];
                for ch in 0..cg {
                    let cidx = grp * cg + ch;
                    for p in 0..hw {
                        let i = ch * hw + p;
                        let xhat = (xs[i] as f64 - mu) * rs;
                        let dxhat = gs[i] as f64 * gw[cidx] as f64;
                        dst[i] = (rs * (dxhat - mean_d - xhat * mean_dx)) as f32;
                    }
                }
            }
        }
        pg.get_mut(gamma).iter_mut().zip(&dgamma).for_each(|(a, b)| *a += *b as f32);
        pg.get_mut(beta).iter_mut().zip(&dbeta).for_each(|(a, b)| *a += *b as f32);
        dx
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

/// `exp` via `2^(x log2 e)`: round-to-nearest splits off the integer power,
/// a degree-6 Taylor polynomial covers the fraction in `[-0.5, 0.5]`.
/// Relative error is about 1e-6; branch-free so the elementwise loops vectorize.
#[inline]
pub(crate) fn fast_exp(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let t = x.clamp(-87.0, 88.0) * std::f32::consts::LOG2_E;
    let fi = (t + ROUND) - ROUND;
    let f = t - fi;
    let p = 1.0
        + f * (0.693_147_2
            + f * (0.240_226_5 + f * (0.055_504_11 + f * (0.009_618_13 + f * (0.001_333_36 + f * 0.000_154_04)))));
    f32::from_bits(((fi as i32 + 127) as u32) << 23) * p
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable thread-local buffer of at least `len` floats.
/// Contents are unspecified on entry.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// `[n, c, hw]` -> `[c, n * hw]`
fn to_channel_major(src: &[f32], n: usize, c: usize, hw: usize, dst: &mut [f32]) {
    for s in 0..n {
        for ch in 0..c {
            let from = (s * c + ch) * hw;
            let to = ch * n * hw + s * hw;
            dst[to..to + hw].copy_from_slice(&src[from..from + hw]);
        }
    }
}

/// `[c, n * hw]` -> `[n, c, hw]`
fn from_channel_major(src: &[f32], n: usize, c: usize, hw: usize, dst: &mut [f32]) {
    for s in 0..n {
        for ch in 0..c {
            let from = ch * n * hw + s * hw;
            let to = (s * c + ch) * hw;
            dst[to..to + hw].copy_from_slice(&src[from..from + hw]);
        }
    }
}

/// Valid destination columns `[lo, hi)` for a kernel offset `off` in `[-pad, pad]`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Rows are `(channel, ky, kx)`, columns `(sample, y, x)`.
fn im2col(x: &[f32], n: usize, c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let nhw = n * hw;
    for ch in 0..c {
        for ky in 0..k {
            let oy = ky as isize - pad;
            let (ylo, yhi) = valid_range(h, oy);
            for kx in 0..k {
                let ox = kx as isize - pad;
                let (xlo, xhi) = valid_range(w, ox);
                let row = (ch * k + ky) * k + kx;
                let dst_row = &mut cols[row * nhw..(row + 1) * nhw];
                for s in 0..n {
                    let src = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let dst = &mut dst_row[s * hw..(s + 1) * hw];
                    for y in 0..h {
                        let d = &mut dst[y * w..(y + 1) * w];
                        if y < ylo || y >= yhi {
                            d.fill(0.0);
                            continue;
                        }
                        let sy = (y as isize + oy) as usize;
                        d[..xlo].fill(0.0);
                        d[xhi..].fill(0.0);
                        if xlo < xhi {
                            let sx0 = (xlo as isize + ox) as usize;
                            d[xlo..xhi].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (xhi - xlo)]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], n: usize, c: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let nhw = n * hw;
    for ch in 0..c {
        for ky in 0..k {
            let oy = ky as isize - pad;
            let (ylo, yhi) = valid_range(h, oy);
            for kx in 0..k {
                let ox = kx as isize - pad;
                let (xlo, xhi) = valid_range(w, ox);
                if xlo >= xhi {
                    continue;
                }
                let row = (ch * k + ky) * k + kx;
                let src_row = &cols[row * nhw..(row + 1) * nhw];
                for s in 0..n {
                    let dst = &mut dx[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let src = &src_row[s * hw..(s + 1) * hw];
                    for y in ylo..yhi {
                        let sy = (y as isize + oy) as usize;
                        let sx0 = (xlo as isize + ox) as usize;
                        let d = &mut dst[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                        for (a, b) in d.iter_mut().zip(&src[y * w + xlo..y * w + xhi]) {
                            *a += *b;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn space_to_depth(x: &Tensor, p: usize) -> Tensor {
    if p == 1 {
        return x.clone();
    }
    let [n, c, h, w] = x.shape();
    assert!(h % p == 0 && w % p == 0, "space_to_depth: {h}x{w} not divisible by {p}");
    let (oh, ow) = (h / p, w / p);
    let mut out = Tensor::zeros([n, c * p * p, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let oc = ch * p * p + dy * p + dx;
                    let obase = (s * c * p * p + oc) * oh * ow;
                    let ibase = (s * c + ch) * h * w;
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[obase + y * ow + xx] = src[ibase + (y * p + dy) * w + xx * p + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depth_to_space(x: &Tensor, p: usize) -> Tensor {
    if p == 1 {
        return x.clone();
    }
    let [n, cp, oh, ow] = x.shape();
    assert!(cp % (p * p) == 0, "depth_to_space: channels not divisible by {}", p * p);
    let c = cp / (p * p);
    let (h, w) = (oh * p, ow * p);
    let mut out = Tensor::zeros([n, c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let ic = ch * p * p + dy * p + dx;
                    let ibase = (s * cp + ic) * oh * ow;
                    let obase = (s * c + ch) * h * w;
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[obase + (y * p + dy) * w + xx * p + dx] = src[ibase + y * ow + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `C = alpha * A B + beta * C` with `alpha = 1` and explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "sgemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "sgemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "sgemm: C out of bounds");
    // SAFETY: the bounds of all three strided views were checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct 7-loop convolution used as an oracle for the im2col path.
    fn conv_naive(x: &Tensor, w: &[f32], b: &[f32], co: usize, k: usize) -> Tensor {
        let [n, ci, h, wd] = x.shape();
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros([n, co, h, wd]);
        for s in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o] as f64;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((s * ci + c) * h + sy as usize) * wd + sx as usize;
                                    let wi = ((o * ci + c) * k + ky) * k + kx;
                                    acc += x.data()[xi] as f64 * w[wi] as f64;
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * h + y) * wd + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, h, w) in &[(3usize, 5usize, 4usize), (1, 3, 3), (3, 1, 1), (5, 6, 6)] {
            let mut params = ParamSet::new();
            let wid = params.push_uniform("w", vec![3, 2, k, k], 2 * k * k, &mut rng);
            let bid = params.push_uniform("b", vec![3], 4, &mut rng);
            let x = rand_tensor([2, 2, h, w], &mut rng);
            let expected = conv_naive(&x, params.get(wid), params.get(bid), 3, k);
            let mut g = Graph::new(&params);
            let xi = g.input(x);
            let y = g.conv2d(xi, wid, bid);
            for (a, b) in g.value(y).data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-5, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn space_depth_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor([2, 3, 8, 4], &mut rng);
        assert_eq!(depth_to_space(&space_to_depth(&x, 2), 2), x);
        assert_eq!(depth_to_space(&space_to_depth(&x, 4), 4), x);
    }

    /// Builds a small graph exercising every op and returns a scalar
    /// `sum(out * probe)` so gradients can be checked numerically.
    fn probe_loss(params: &ParamSet, x: &Tensor, e: &Tensor, probe: &Tensor) -> f64 {
        let mut g = Graph::new(params);
        let out = probe_graph(&mut g, x, e);
        g.value(out).data().iter().zip(probe.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    fn probe_graph(g: &mut Graph<'_>, x: &Tensor, e: &Tensor) -> NodeId {
        let xi = g.input(x.clone());
        let ei = g.input(e.clone());
        let s2d = g.space_to_depth(xi, 2);
        let c0 = g.conv2d(s2d, 0, 1);
        let n0 = g.group_norm(c0, 2, 3, 2);
        let a0 = g.silu(n0);
        let emb = g.linear(ei, 4, 5);
        let a1 = g.add_channel(a0, emb);
        let p = g.avg_pool2(a1);
        let u = g.upsample2(p);
        let cat = g.concat(u, a1);
        let c1 = g.conv2d(cat, 6, 7);
        let sum = g.add(c1, c0);
        g.depth_to_space(sum, 2)
    }

    fn probe_params(rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.push_uniform("c0.w", vec![4, 8, 3, 3], 72, rng); // 0
        p.push_uniform("c0.b", vec![4], 8, rng); // 1
        p.push_uniform("gn.g", vec![4], 1, rng); // 2
        p.push_uniform("gn.b", vec![4], 1, rng); // 3
        p.push_uniform("lin.w", vec![4, 3], 3, rng); // 4
        p.push_uniform("lin.b", vec![4], 3, rng); // 5
        p.push_uniform("c1.w", vec![4, 8, 1, 1], 8, rng); // 6
        p.push_uniform("c1.b", vec![4], 8, rng); // 7
        p
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = probe_params(&mut rng);
        let x = rand_tensor([2, 2, 8, 8], &mut rng);
        let e = rand_tensor([2, 3, 1, 1], &mut rng);
        let probe = rand_tensor([2, 1, 8, 8], &mut rng);

        let mut g = Graph::new(&params);
        let out = probe_graph(&mut g, &x, &e);
        let mut pg = ParamGrads::zeros_like(&params);
        let ng = g.backward(out, probe.clone(), &mut pg);
        let dx = ng.get(0).unwrap().clone();
        let de = ng.get(1).unwrap().clone();

        let h = 1e-2f32;
        let check = |analytic: f32, plus: f64, minus: f64, what: &str| {
            let numeric = (plus - minus) / (2.0 * h as f64);
            let err = (analytic as f64 - numeric).abs();
            assert!(err <= 2e-2 * numeric.abs().max(1.0), "{what}: analytic {analytic} numeric {numeric}");
        };
        for pid in 0..params.len() {
            for j in (0..params.get(pid).len()).step_by(7) {
                let mut pp = params.clone();
                pp.get_mut(pid)[j] += h;
                let plus = probe_loss(&pp, &x, &e, &probe);
                pp.get_mut(pid)[j] -= 2.0 * h;
                let minus = probe_loss(&pp, &x, &e, &probe);
                check(pg.get(pid)[j], plus, minus, &format!("param {pid}[{j}]"));
            }
        }
        for j in (0..x.numel()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let plus = probe_loss(&params, &xp, &e, &probe);
            xp.data_mut()[j] -= 2.0 * h;
            let minus = probe_loss(&params, &xp, &e, &probe);
            check(dx.data()[j], plus, minus, &format!("x[{j}]"));
        }
        for j in 0..e.numel() {
            let mut ep = e.clone();
            ep.data_mut()[j] += h;
            let plus = probe_loss(&params, &x, &ep, &probe);
            ep.data_mut()[j] -= 2.0 * h;
            let minus = probe_loss(&params, &x, &ep, &probe);
            check(de.data()[j], plus, minus, &format!("e[{j}]"));
        }
    }
}

#[cfg(test)]
mod exp_tests {
    use super::fast_exp;

    #[test]
    fn fast_exp_is_accurate() {
        let mut x = -30.0f32;
        while x < 30.0 {
            let (a, b) = (fast_exp(x) as f64, (x as f64).exp());
            assert!(((a - b) / b).abs() < 5e-6, "exp({x}): {a} vs {b}");
            x += 0.0137;
        }
        assert!(fast_exp(-200.0) >= 0.0 && fast_exp(-200.0) < 1e-37);
    }
}

//! Tape-based reverse-mode autodiff.
//!
//! Every operation appends a node and evaluates eagerly. `grad` walks the
//! tape backwards and *builds the adjoints as new tape nodes*, so the result
//! of a gradient is itself differentiable — calling `grad` on an expression
//! that contains a gradient yields correct second-order derivatives.

use std::cell::RefCell;

use super::kernels;
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Recip(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, pad: usize },
    ConvInputGrad { g: Var, w: Var, pad: usize },
    ConvWeightGrad { x: Var, g: Var, pad: usize },
    AvgPool2(Var),
    Upsample2(Var),
    ReflectPad { x: Var, p: usize },
    ReflectFold { g: Var, p: usize },
    SumAll(Var),
    BroadcastScalar(Var),
    SumPerSample(Var),
    BroadcastPerSample(Var),
    SumHw(Var),
    BroadcastHw(Var),
    ChannelSum(Var),
    BroadcastChannel(Var),
    ColSum(Var),
    BroadcastRows(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels { x: Var, lo: usize },
    PadChannels { x: Var, lo: usize },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only computation graph with eager evaluation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Register a tensor as a leaf. Leaves are valid gradient targets;
    /// gradients do not flow past them.
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Alias of [`input`](Self::input) that signals the value is treated as
    /// a constant (detached) by the caller.
    pub fn constant(&self, t: Tensor) -> Var {
        self.input(t)
    }

    /// The value held at `v` (cheap; buffers are shared).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "{name}: {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, "add", |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, "sub", |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, "mul", |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn recip(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Leaky ReLU. The slope mask is captured as a constant, which is the
    /// usual almost-everywhere derivative.
    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// |x| as x * sign(x) with the sign captured as a constant.
    pub fn abs(&self, a: Var) -> Var {
        let sign = self.value(a).map(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        let s = self.constant(sign);
        self.mul(a, s)
    }

    /// 2-D matrix product with optional transposes.
    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (ar, ac) = va.dim2();
        let (br, bc) = vb.dim2();
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(ka, kb, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        kernels::gemm(ar, ac, ta, va.data(), br, bc, tb, vb.data(), 1.0, 0.0, &mut out);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul { a, b, ta, tb })
    }

    pub fn conv2d(&self, x: Var, w: Var, pad: usize) -> Var {
        let v = kernels::conv2d_raw(&self.value(x), &self.value(w), pad);
        self.push(v, Op::Conv2d { x, w, pad })
    }

    fn conv_input_grad(&self, g: Var, w: Var, pad: usize, h: usize, wd: usize) -> Var {
        let v = kernels::conv2d_input_grad(&self.value(g), &self.value(w), pad, h, wd);
        self.push(v, Op::ConvInputGrad { g, w, pad })
    }

    fn conv_weight_grad(&self, x: Var, g: Var, pad: usize, kh: usize, kw: usize) -> Var {
        let v = kernels::conv2d_weight_grad(&self.value(x), &self.value(g), pad, kh, kw);
        self.push(v, Op::ConvWeightGrad { x, g, pad })
    }

    pub fn avg_pool2(&self, a: Var) -> Var {
        let v = kernels::avg_pool2(&self.value(a));
        self.push(v, Op::AvgPool2(a))
    }

    pub fn upsample2(&self, a: Var) -> Var {
        let v = kernels::upsample2(&self.value(a));
        self.push(v, Op::Upsample2(a))
    }

    /// Reflection padding of the spatial dims by `p`.
    pub fn reflect_pad2(&self, x: Var, p: usize) -> Var {
        let v = kernels::reflect_pad2(&self.value(x), p);
        self.push(v, Op::ReflectPad { x, p })
    }

    fn reflect_fold2(&self, g: Var, p: usize) -> Var {
        let v = kernels::reflect_pad2_adjoint(&self.value(g), p);
        self.push(v, Op::ReflectFold { g, p })
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn broadcast_scalar(&self, s: Var, shape: Vec<usize>) -> Var {
        let sv = self.value(s);
        assert!(sv.shape().is_empty(), "broadcast_scalar needs rank 0");
        let v = Tensor::full(shape.clone(), sv.item());
        self.push(v, Op::BroadcastScalar(s))
    }

    /// Sum over every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.shape()[0];
        let per = va.len() / n.max(1);
        let mut out = vec![0.0; n];
        for (i, chunk) in va.data().chunks_exact(per).enumerate() {
            out[i] = chunk.iter().sum();
        }
        self.push(Tensor::new(vec![n], out), Op::SumPerSample(a))
    }

    /// `[N] -> shape` with the value constant within each sample.
    pub fn broadcast_per_sample(&self, v: Var, shape: Vec<usize>) -> Var {
        let vv = self.value(v);
        let n = shape[0];
        assert_eq!(vv.shape(), [n], "broadcast_per_sample");
        let per: usize = shape[1..].iter().product();
        let mut out = vec![0.0; n * per];
        for (i, &x) in vv.data().iter().enumerate() {
            out[i * per..(i + 1) * per].fill(x);
        }
        self.push(Tensor::new(shape, out), Op::BroadcastPerSample(v))
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn sum_hw(&self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c, h, w) = va.dim4();
        let mut out = vec![0.0; n * c];
        for (i, chunk) in va.data().chunks_exact(h * w).enumerate() {
            out[i] = chunk.iter().sum();
        }
        self.push(Tensor::new(vec![n, c], out), Op::SumHw(a))
    }

    pub fn mean_hw(&self, a: Var) -> Var {
        let (_, _, h, w) = self.value(a).dim4();
        let s = self.sum_hw(a);
        self.scale(s, 1.0 / (h * w) as f64)
    }

    /// `[N,C] -> [N,C,H,W]`, constant over the spatial extent.
    pub fn broadcast_hw(&self, v: Var, h: usize, w: usize) -> Var {
        let vv = self.value(v);
        let (n, c) = vv.dim2();
        let mut out = vec![0.0; n * c * h * w];
        for (i, &x) in vv.data().iter().enumerate() {
            out[i * h * w..(i + 1) * h * w].fill(x);
        }
        self.push(Tensor::new(vec![n, c, h, w], out), Op::BroadcastHw(v))
    }

    /// `[N,C,H,W] -> [C]`.
    pub fn channel_sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c, h, w) = va.dim4();
        let mut out = vec![0.0; c];
        let d = va.data();
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * h * w;
                out[ci] += d[base..base + h * w].iter().sum::<f64>();
            }
        }
        self.push(Tensor::new(vec![c], out), Op::ChannelSum(a))
    }

    /// `[C] -> [N,C,H,W]`.
    pub fn broadcast_channel(&self, v: Var, n: usize, h: usize, w: usize) -> Var {
        let vv = self.value(v);
        let c = vv.len();
        assert_eq!(vv.shape(), [c]);
        let mut out = vec![0.0; n * c * h * w];
        for s in 0..n {
            for (ci, &x) in vv.data().iter().enumerate() {
                let base = (s * c + ci) * h * w;
                out[base..base + h * w].fill(x);
            }
        }
        self.push(Tensor::new(vec![n, c, h, w], out), Op::BroadcastChannel(v))
    }

    /// `[N,K] -> [K]`.
    pub fn col_sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let (n, k) = va.dim2();
        let mut out = vec![0.0; k];
        for row in va.data().chunks_exact(k) {
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o += x;
            }
        }
        let _ = n;
        self.push(Tensor::new(vec![k], out), Op::ColSum(a))
    }

    /// `[K] -> [N,K]`, rows identical.
    pub fn broadcast_rows(&self, v: Var, n: usize) -> Var {
        let vv = self.value(v);
        let k = vv.len();
        assert_eq!(vv.shape(), [k]);
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(vv.data());
        }
        self.push(Tensor::new(vec![n, k], out), Op::BroadcastRows(v))
    }

    /// Concatenate `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = vals[0].dim4();
        let ctot: usize = vals
            .iter()
            .map(|t| {
                let (n2, c, h2, w2) = t.dim4();
                assert_eq!((n2, h2, w2), (n, h, w), "concat_channels shape mismatch");
                c
            })
            .sum();
        let mut out = vec![0.0; n * ctot * h * w];
        for s in 0..n {
            let mut co = 0;
            for t in &vals {
                let (_, c, _, _) = t.dim4();
                let src = &t.data()[s * c * h * w..(s + 1) * c * h * w];
                let dst = &mut out[(s * ctot + co) * h * w..(s * ctot + co + c) * h * w];
                dst.copy_from_slice(src);
                co += c;
            }
        }
        self.push(Tensor::new(vec![n, ctot, h, w], out), Op::ConcatChannels(parts.to_vec()))
    }

    /// Channels `[lo, hi)` of a `[N,C,H,W]` tensor.
    pub fn slice_channels(&self, x: Var, lo: usize, hi: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dim4();
        assert!(lo < hi && hi <= c, "slice_channels {lo}..{hi} of {c}");
        let cs = hi - lo;
        let mut out = vec![0.0; n * cs * h * w];
        for s in 0..n {
            let src = &vx.data()[(s * c + lo) * h * w..(s * c + hi) * h * w];
            out[s * cs * h * w..(s + 1) * cs * h * w].copy_from_slice(src);
        }
        self.push(Tensor::new(vec![n, cs, h, w], out), Op::SliceChannels { x, lo })
    }

    /// Embed `[N,C,H,W]` into `[N,total,H,W]` at channel offset `lo`,
    /// zero elsewhere.
    pub fn pad_channels(&self, x: Var, lo: usize, total: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dim4();
        assert!(lo + c <= total);
        let mut out = vec![0.0; n * total * h * w];
        for s in 0..n {
            let src = &vx.data()[s * c * h * w..(s + 1) * c * h * w];
            out[(s * total + lo) * h * w..(s * total + lo + c) * h * w].copy_from_slice(src);
        }
        self.push(Tensor::new(vec![n, total, h, w], out), Op::PadChannels { x, lo })
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.value(x).reshaped(shape);
        self.push(v, Op::Reshape(x))
    }

    fn zeros_like(&self, v: Var) -> Var {
        self.constant(Tensor::zeros(self.shape(v)))
    }

    /// Reverse-mode gradients of scalar `y` with respect to each of `xs`.
    ///
    /// The adjoints are appended to the tape as ordinary nodes, so the
    /// returned `Var`s can be fed into further tape operations —
    /// including another call to `grad`.
    pub fn grad(&self, y: Var, xs: &[Var]) -> Vec<Var> {
        assert!(
            self.shape(y).is_empty(),
            "grad target must be scalar, got {:?}",
            self.shape(y)
        );
        let mut adj: Vec<Option<Var>> = vec![None; y.0 + 1];
        adj[y.0] = Some(self.constant(Tensor::scalar(1.0)));

        let accum = |adj: &mut Vec<Option<Var>>, v: Var, g: Var| {
            if v.0 < adj.len() {
                adj[v.0] = Some(match adj[v.0] {
                    None => g,
                    Some(a) => self.add(a, g),
                });
            }
        };

        for i in (0..=y.0).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let out = Var(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(&mut adj, a, g);
                    accum(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut adj, a, g);
                    let nb = self.neg(g);
                    accum(&mut adj, b, nb);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b);
                    let gb = self.mul(g, a);
                    accum(&mut adj, a, ga);
                    accum(&mut adj, b, gb);
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    accum(&mut adj, a, ga);
                }
                Op::Scale(a, k) => {
                    let ga = self.scale(g, k);
                    accum(&mut adj, a, ga);
                }
                Op::AddScalar(a) => accum(&mut adj, a, g),
                Op::Recip(a) => {
                    // d(1/x) = -y^2 dx
                    let y2 = self.mul(out, out);
                    let ga = self.neg(self.mul(g, y2));
                    accum(&mut adj, a, ga);
                }
                Op::Sqrt(a) => {
                    // d(sqrt x) = dx / (2 y)
                    let inv = self.recip(out);
                    let ga = self.scale(self.mul(g, inv), 0.5);
                    accum(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, out);
                    accum(&mut adj, a, ga);
                }
                Op::Ln(a) => {
                    let ga = self.mul(g, self.recip(a));
                    accum(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    // 1 - y^2
                    let y2 = self.mul(out, out);
                    let d = self.add_scalar(self.neg(y2), 1.0);
                    let ga = self.mul(g, d);
                    accum(&mut adj, a, ga);
                }
                Op::Matmul { a, b, ta, tb } => {
                    let ga = if !ta {
                        self.matmul(g, b, false, !tb)
                    } else {
                        self.matmul(b, g, tb, true)
                    };
                    let gb = if !tb {
                        self.matmul(a, g, !ta, false)
                    } else {
                        self.matmul(g, a, true, ta)
                    };
                    accum(&mut adj, a, ga);
                    accum(&mut adj, b, gb);
                }
                Op::Conv2d { x, w, pad } => {
                    let xs = self.value(x);
                    let (_, _, h, wd) = xs.dim4();
                    let ws = self.value(w);
                    let (_, _, kh, kw) = ws.dim4();
                    let gx = self.conv_input_grad(g, w, pad, h, wd);
                    let gw = self.conv_weight_grad(x, g, pad, kh, kw);
                    accum(&mut adj, x, gx);
                    accum(&mut adj, w, gw);
                }
                Op::ConvInputGrad { g: go, w, pad } => {
                    // out = A(go, w); <h, A(go,w)> = <go, C(h,w)> = <w, B(h,go)>
                    let ws = self.value(w);
                    let (_, _, kh, kw) = ws.dim4();
                    let ggo = self.conv2d(g, w, pad);
                    let gw = self.conv_weight_grad(g, go, pad, kh, kw);
                    accum(&mut adj, go, ggo);
                    accum(&mut adj, w, gw);
                }
                Op::ConvWeightGrad { x, g: go, pad } => {
                    // out = B(x, go); <h, B(x,go)> = <go, C(x,h)> = <x, A(go,h)>
                    let xs = self.value(x);
                    let (_, _, h, wd) = xs.dim4();
                    let gx = self.conv_input_grad(go, g, pad, h, wd);
                    let ggo = self.conv2d(x, g, pad);
                    accum(&mut adj, x, gx);
                    accum(&mut adj, go, ggo);
                }
                Op::AvgPool2(a) => {
                    let up = self.upsample2(g);
                    let ga = self.scale(up, 0.25);
                    accum(&mut adj, a, ga);
                }
                Op::Upsample2(a) => {
                    let down = self.avg_pool2(g);
                    let ga = self.scale(down, 4.0);
                    accum(&mut adj, a, ga);
                }
                Op::ReflectPad { x, p } => {
                    let gx = self.reflect_fold2(g, p);
                    accum(&mut adj, x, gx);
                }
                Op::ReflectFold { g: go, p } => {
                    let gx = self.reflect_pad2(g, p);
                    accum(&mut adj, go, gx);
                }
                Op::SumAll(a) => {
                    let ga = self.broadcast_scalar(g, self.shape(a));
                    accum(&mut adj, a, ga);
                }
                Op::BroadcastScalar(s) => {
                    let gs = self.sum_all(g);
                    accum(&mut adj, s, gs);
                }
                Op::SumPerSample(a) => {
                    let ga = self.broadcast_per_sample(g, self.shape(a));
                    accum(&mut adj, a, ga);
                }
                Op::BroadcastPerSample(v) => {
                    let gv = self.sum_per_sample(g);
                    accum(&mut adj, v, gv);
                }
                Op::SumHw(a) => {
                    let sh = self.shape(a);
                    let ga = self.broadcast_hw(g, sh[2], sh[3]);
                    accum(&mut adj, a, ga);
                }
                Op::BroadcastHw(v) => {
                    let gv = self.sum_hw(g);
                    accum(&mut adj, v, gv);
                }
                Op::ChannelSum(a) => {
                    let sh = self.shape(a);
                    let ga = self.broadcast_channel(g, sh[0], sh[2], sh[3]);
                    accum(&mut adj, a, ga);
                }
                Op::BroadcastChannel(v) => {
                    let gv = self.channel_sum(g);
                    accum(&mut adj, v, gv);
                }
                Op::ColSum(a) => {
                    let n = self.shape(a)[0];
                    let ga = self.broadcast_rows(g, n);
                    accum(&mut adj, a, ga);
                }
                Op::BroadcastRows(v) => {
                    let gv = self.col_sum(g);
                    accum(&mut adj, v, gv);
                }
                Op::ConcatChannels(parts) => {
                    let mut lo = 0;
                    for p in parts {
                        let c = self.shape(p)[1];
                        let gp = self.slice_channels(g, lo, lo + c);
                        accum(&mut adj, p, gp);
                        lo += c;
                    }
                }
                Op::SliceChannels { x, lo } => {
                    let total = self.shape(x)[1];
                    let gx = self.pad_channels(g, lo, total);
                    accum(&mut adj, x, gx);
                }
                Op::PadChannels { x, lo } => {
                    let c = self.shape(x)[1];
                    let gx = self.slice_channels(g, lo, lo + c);
                    accum(&mut adj, x, gx);
                }
                Op::Reshape(x) => {
                    let gx = self.reshape(g, self.shape(x));
                    accum(&mut adj, x, gx);
                }
            }
        }

        xs.iter()
            .map(|&x| adj.get(x.0).copied().flatten().unwrap_or_else(|| self.zeros_like(x)))
            .collect()
    }
}

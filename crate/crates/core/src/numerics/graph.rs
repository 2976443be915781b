//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose inputs already exist, so node order is a
//! valid topological order and `backward` is a single reverse sweep.

use super::kernels::{col2im3_add, gemm, gemm_into_t, im2col3, Mat};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    Sum,
    MatMul,
    Conv2d,
    Relu,
    AvgPool2,
    GlobalAvgPool,
    Upsample2,
    ChannelBias,
    Normalize,
    SoftmaxCrossEntropy,
    Mse,
    Concat,
    Reshape,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Upsample2(Var),
    ChannelBias(Var, Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Concat(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::AvgPool2(_) => OpKind::AvgPool2,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Upsample2(_) => OpKind::Upsample2,
            Op::ChannelBias(..) => OpKind::ChannelBias,
            Op::Normalize { .. } => OpKind::Normalize,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Mse(..) => OpKind::Mse,
            Op::Concat(_) => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) | Op::ChannelBias(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w } => vec![*x, *w],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Relu(a)
            | Op::AvgPool2(a)
            | Op::GlobalAvgPool(a)
            | Op::Upsample2(a)
            | Op::Reshape(a) => vec![*a],
            Op::Normalize { x, .. } => vec![*x],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Concat(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Variance floor of the per-sample normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(Op::Leaf, t, needs_grad)
    }

    /// Adds an untracked input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Every node in creation (topological) order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Zeroes every leaf gradient buffer.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(op, value, needs_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::dim(op, s, &[0, 0, 0, 0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push_op(Op::Add(a, b), self.shape(a).to_vec(), data)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push_op(Op::Mul(a, b), self.shape(a).to_vec(), data)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * s).collect();
        self.push_op(Op::Scale(a, s), self.shape(a).to_vec(), data)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push_op(Op::Sum(a), vec![], vec![s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::dim("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.data(a), m, k),
            Mat::new(self.data(b), k, n),
            &mut out,
            false,
        );
        self.push_op(Op::MatMul(a, b), vec![m, n], out)
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, c, h, wd] = self.dims4("conv2d", x)?;
        let f = match *self.shape(w) {
            [f, wc, 3, 3] if wc == c => f,
            ref s => return Err(Error::dim("conv2d", self.shape(x), s)),
        };
        let hw = h * wd;
        let mut out = vec![0.0; n * f * hw];
        let mut cols = vec![0.0; c * 9 * hw];
        let xd = self.data(x);
        let wm = Mat::new(self.data(w), f, c * 9);
        for i in 0..n {
            im2col3(&xd[i * c * hw..(i + 1) * c * hw], c, h, wd, &mut cols);
            // (colsᵀ·Wᵀ)ᵀ = W·cols, with the filter count on the narrow side.
            gemm_into_t(
                Mat::new(&cols, c * 9, hw).t(),
                wm.t(),
                &mut out[i * f * hw..(i + 1) * f * hw],
                false,
            );
        }
        self.push_op(Op::Conv2d { x, w }, vec![n, f, h, wd], out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.push_op(Op::Relu(a), self.shape(a).to_vec(), data)
    }

    /// 2×2 mean pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("avg_pool2", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("avg_pool2", self.shape(a), &[n, c, h / 2 * 2, w / 2 * 2]));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(a);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    dst[y * wo + x] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
                }
            }
        }
        self.push_op(Op::AvgPool2(a), vec![n, c, ho, wo], out)
    }

    /// Mean over the spatial axes: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("global_avg_pool", a)?;
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let out = self
            .data(a)
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() * inv)
            .collect();
        self.push_op(Op::GlobalAvgPool(a), vec![n, c], out)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("upsample2", a)?;
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.data(a);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (y, row) in dst.chunks_exact_mut(wo).enumerate() {
                let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for (pair, &v) in row.chunks_exact_mut(2).zip(src) {
                    pair[0] = v;
                    pair[1] = v;
                }
            }
        }
        self.push_op(Op::Upsample2(a), vec![n, c, ho, wo], out)
    }

    /// Adds `bias[n, c]` to every pixel of channel `c` of item `n`:
    /// `N×C×H×W + N×C → N×C×H×W`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("add_channel_bias", x)?;
        if self.shape(bias) != [n, c] {
            return Err(Error::dim("add_channel_bias", self.shape(x), self.shape(bias)));
        }
        let hw = h * w;
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        if hw > 0 {
            for (plane, &bv) in out.chunks_exact_mut(hw).zip(b) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        self.push_op(Op::ChannelBias(x, bias), vec![n, c, h, w], out)
    }

    /// Per-sample standardization over every non-leading axis. Batch-free:
    /// each item is normalized with its own statistics only.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (&n, _) = shape
            .split_first()
            .ok_or_else(|| Error::Contract("normalize on a scalar".into()))?;
        let src = self.data(a);
        let per = if n == 0 { 0 } else { src.len() / n };
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(n);
        for (s, d) in src.chunks_exact(per.max(1)).zip(out.chunks_exact_mut(per.max(1))) {
            let mean = s.iter().sum::<f64>() / per as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in d.iter_mut().zip(s) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        self.push_op(Op::Normalize { x: a, inv_std }, shape, out)
    }

    /// Mean cross-entropy of `softmax(logits)` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let weights = vec![1.0; targets.len()];
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `(1/B)·Σ wᵢ·CEᵢ`; items with weight 0 contribute nothing but still
    /// count towards the batch size `B`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (b, c) = match *self.shape(logits) {
            [b, c] => (b, c),
            ref s => return Err(Error::dim("softmax_cross_entropy", s, &[targets.len(), 0])),
        };
        if c < 2 {
            return Err(Error::Contract(format!("cross-entropy needs at least 2 classes, got {c}")));
        }
        if targets.len() != b || weights.len() != b {
            return Err(Error::dim(
                "softmax_cross_entropy",
                self.shape(logits),
                &[targets.len(), weights.len()],
            ));
        }
        if b == 0 {
            return Err(Error::Contract("cross-entropy over an empty batch".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target class {t} with {c} classes")));
        }
        let probs = softmax_rows(self.data(logits), c);
        let mut loss = 0.0;
        for (i, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
            if wt != 0.0 {
                let row = &self.data(logits)[i * c..(i + 1) * c];
                loss += wt * (log_sum_exp(row) - row[t]);
            }
        }
        loss /= b as f64;
        self.push_op(
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            vec![],
            vec![loss],
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Contract("mse of empty tensors".into()));
        }
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push_op(Op::Mse(a, b), vec![], vec![s / n as f64])
    }

    /// Concatenation along axis 1 (channels for images, features for
    /// matrices). All other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::dim("concat", &base, &[0, 0]));
        }
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::dim("concat", &base, s));
            }
            width += s[1];
        }
        let outer = base[0];
        let inner: usize = base[2..].iter().product();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[1] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[1] = width;
        self.push_op(Op::Concat(parts.to_vec()), shape, out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        self.push_op(Op::Reshape(a), shape.to_vec(), data)
    }

    /// Propagates `d(loss)/d(node)` to every tracked leaf, adding into the
    /// leaves' gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g)?;
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, delta: Vec<f64>| accumulate(&mut grads[v.0], delta);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    send(*a, g.to_vec());
                }
                if needs(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|g| g * s).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let gm = Mat::new(g, m, n);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(gm, Mat::new(self.data(*b), k, n).t(), &mut ga, false);
                    send(*a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(Mat::new(self.data(*a), m, k).t(), gm, &mut gb, false);
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, w } => {
                let [n, c, h, wd] = self.dims4("conv2d", *x).expect("checked in forward");
                let f = self.shape(*w)[0];
                let hw = h * wd;
                let xd = self.data(*x);
                let wm = Mat::new(self.data(*w), f, c * 9);
                let mut cols = vec![0.0; c * 9 * hw];
                let mut gw = needs(*w).then(|| vec![0.0; f * c * 9]);
                let mut gx = needs(*x).then(|| vec![0.0; n * c * hw]);
                for i in 0..n {
                    let go = Mat::new(&g[i * f * hw..(i + 1) * f * hw], f, hw);
                    if let Some(gw) = gw.as_mut() {
                        im2col3(&xd[i * c * hw..(i + 1) * c * hw], c, h, wd, &mut cols);
                        // gWᵀ += cols·goᵀ
                        gemm_into_t(Mat::new(&cols, c * 9, hw), go.t(), gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(wm.t(), go, &mut cols, false);
                        col2im3_add(&cols, c, h, wd, &mut gx[i * c * hw..(i + 1) * c * hw]);
                    }
                }
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
            }
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::AvgPool2(a) => {
                let [n, c, h, w] = self.dims4("avg_pool2", *a).expect("checked in forward");
                let (ho, wo) = (h / 2, w / 2);
                let mut ga = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut ga[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            dst[y * w + x] = 0.25 * src[(y / 2) * wo + x / 2];
                        }
                    }
                }
                send(*a, ga);
            }
            Op::GlobalAvgPool(a) => {
                let [_, _, h, w] = self.dims4("global_avg_pool", *a).expect("checked in forward");
                let inv = 1.0 / (h * w) as f64;
                let ga = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, h * w))
                    .collect();
                send(*a, ga);
            }
            Op::Upsample2(a) => {
                let [n, c, h, w] = self.dims4("upsample2", *a).expect("checked in forward");
                let wo = 2 * w;
                let mut ga = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut ga[p * h * w..(p + 1) * h * w];
                    for (i, v) in src.iter().enumerate() {
                        let (y, x) = (i / wo, i % wo);
                        dst[(y / 2) * w + x / 2] += v;
                    }
                }
                send(*a, ga);
            }
            Op::ChannelBias(x, bias) => {
                if needs(*x) {
                    send(*x, g.to_vec());
                }
                if needs(*bias) {
                    let [_, _, h, w] = self.dims4("add_channel_bias", *x).expect("checked in forward");
                    let gb = if h * w == 0 {
                        vec![0.0; self.value(*bias).numel()]
                    } else {
                        g.chunks_exact(h * w).map(|p| p.iter().sum()).collect()
                    };
                    send(*bias, gb);
                }
            }
            Op::Normalize { x, inv_std } => {
                let y = node.value.data();
                let per = y.len() / inv_std.len().max(1);
                let mut gx = vec![0.0; y.len()];
                for (s, &r) in inv_std.iter().enumerate() {
                    let range = s * per..(s + 1) * per;
                    let (gy, ys) = (&g[range.clone()], &y[range.clone()]);
                    let mean_g = gy.iter().sum::<f64>() / per as f64;
                    let mean_gy = gy.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / per as f64;
                    for ((o, gv), yv) in gx[range].iter_mut().zip(gy).zip(ys) {
                        *o = r * (gv - mean_g - yv * mean_gy);
                    }
                }
                send(*x, gx);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let b = targets.len();
                let c = probs.len() / b;
                let mut gl = probs.clone();
                for (i, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut gl[i * c..(i + 1) * c];
                    row[t] -= 1.0;
                    let k = g[0] * wt / b as f64;
                    row.iter_mut().for_each(|v| *v *= k);
                }
                send(*logits, gl);
            }
            Op::Mse(a, b) => {
                let k = 2.0 * g[0] / self.value(*a).numel() as f64;
                let diff: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(x, y)| k * (x - y))
                    .collect();
                if needs(*b) {
                    send(*b, diff.iter().map(|d| -d).collect());
                }
                if needs(*a) {
                    send(*a, diff);
                }
            }
            Op::Concat(parts) => {
                let outer = node.value.shape()[0];
                let total = node.value.numel() / outer.max(1);
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.value(p).numel() / outer.max(1);
                    if needs(p) {
                        let mut gp = Vec::with_capacity(chunk * outer);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        send(p, gp);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a `rows×c` matrix, stabilized by max subtraction.
pub fn softmax_rows(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let z = g.leaf(t(&[2, 1], &[0.0, 0.0]));
        let p = g.matmul(a, z).unwrap();
        assert_eq!(g.value(p).data(), &[0.0]);

        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 1], &[5.0, 6.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(p), &[2, 1]);
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros([2, 3]));
        let b = g.leaf(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([2, 2, 4, 5], |i| (i as f64 * 0.37).sin()));
        let zero_w = g.leaf(Tensor::zeros([3, 2, 3, 3]));
        let y = g.conv2d(x, zero_w).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 4, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x1 = g.leaf(Tensor::from_fn([1, 1, 4, 5], |i| i as f64 - 3.0));
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let dw = g.leaf(t(&[1, 1, 3, 3], &delta));
        let y = g.conv2d(x1, dw).unwrap();
        assert_eq!(g.value(y).data(), g.value(x1).data());

        // centre plus right neighbour on a 3×3 field of ones: cell (r, c)
        // sees itself and (r, c+1) when c+1 is inside the image
        let ones = g.leaf(Tensor::ones([1, 1, 3, 3]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        k[5] = 1.0;
        let kw = g.leaf(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(ones, kw).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[2.0, 2.0, 1.0, 2.0, 2.0, 1.0, 2.0, 2.0, 1.0]
        );

        let bad = g.leaf(Tensor::zeros([1, 2, 3, 3]));
        assert!(matches!(g.conv2d(ones, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::full([2, 3], 0.7));
        let ce = g.softmax_cross_entropy(l, &[0, 2]).unwrap();
        assert!((g.value(ce).item().unwrap() - 3f64.ln()).abs() < 1e-12);

        let l = g.leaf(t(&[1, 3], &[50.0, 0.0, 0.0]));
        let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(g.value(ce).item().unwrap() < 1e-20);

        let l = g.leaf(t(&[1, 2], &[0.0, 3f64.ln()]));
        let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((g.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(
            g.softmax_cross_entropy(l, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([2, 3], |i| i as f64).with_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

        assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_consumers_and_calls() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let a = g.scale(x, 3.0).unwrap();
        let b = g.relu(x).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 3.0, 4.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[8.0, 6.0, 8.0]);
        g.zero_grads();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn untracked_leaves_receive_nothing() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let w = g.leaf(t(&[2], &[3.0, 4.0]).with_grad());
        let p = g.mul(x, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.op_kind(p), OpKind::Mul);
        assert_eq!(g.inputs(p), vec![x, w]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let data: Vec<f64> = (0..40).map(|i| ((i * 13) % 17) as f64 * 3.0 - 20.0).collect();
        let p = softmax_rows(&data, 5);
        for row in p.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_bias_broadcasts_and_sums_back() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([2, 2, 1, 3]).with_grad());
        let b = g.leaf(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let y = g.add_channel_bias(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 1., 1., 2., 2., 2., 3., 3., 3., 4., 4., 4.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0; 4]);
        assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
        assert!(g.add_channel_bias(x, s).is_err());
    }

    #[test]
    fn concat_and_reshape_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn([2, 1, 2, 2], |i| i as f64));
        let b = g.leaf(Tensor::from_fn([2, 2, 2, 2], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2, 2]);
        assert_eq!(&g.value(c).data()[..6], &[0.0, 1.0, 2.0, 3.0, 100.0, 101.0]);
        assert_eq!(&g.value(c).data()[12..16], &[4.0, 5.0, 6.0, 7.0]);
        let r = g.reshape(c, &[6, 4]).unwrap();
        assert_eq!(g.shape(r), &[6, 4]);
        assert!(g.reshape(c, &[5, 5]).is_err());
    }
}

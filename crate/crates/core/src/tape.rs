//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every op appends one node holding its output value plus whatever the
//! backward pass needs. [`Tape::backward`] walks the nodes in reverse and
//! adds parameter gradients into the [`ParamStore`].

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gap(Var),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, k: Var, b: Var, stride: usize, padding: usize },
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    ChannelMean(Var),
    ChannelMax { x: Var, argmax: Vec<u32> },
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    WeightedSum { inputs: Vec<Var>, weights: Var, row: usize },
    Sum(Var),
    Bce { logits: Var, targets: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Gap(_) => "gap",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat(..) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::ChannelMean(_) => "channel_mean",
            Op::ChannelMax { .. } => "channel_max",
            Op::Mul(..) => "broadcast_mul",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(_) => "sum",
            Op::Bce { .. } => "bce_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of leaf nodes after a backward pass, plus the order in which
/// nodes were visited.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    visited: Vec<Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to an input or parameter leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Nodes in the order their backward rules ran.
    pub fn visited(&self) -> &[Var] {
        &self.visited
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bcast_strides(src: Shape, out: Shape) -> [usize; 4] {
    let s = src.strides();
    let mut r = [0; 4];
    for a in 0..4 {
        r[a] = if src.0[a] == 1 && out.0[a] != 1 { 0 } else { s[a] };
    }
    r
}

/// Calls `f(out_row, x_row, y_row)` for each `(n, h, w)` position with the
/// offsets of that position's channel row in the output and both operands.
fn for_each_row(out: Shape, sx: [usize; 4], sy: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let [n, h, w, c] = out.0;
    let mut o = 0;
    for i in 0..n {
        for j in 0..h {
            for k in 0..w {
                f(o, i * sx[0] + j * sx[1] + k * sx[2], i * sy[0] + j * sy[1] + k * sy[2]);
                o += c;
            }
        }
    }
}

/// A channel row of a broadcast operand: either `c` contiguous values or
/// one value repeated.
#[derive(Clone, Copy)]
enum Row<'a> {
    Full(&'a [f64]),
    Splat(f64),
}

impl<'a> Row<'a> {
    #[inline]
    fn of(data: &'a [f64], off: usize, channel_stride: usize, c: usize) -> Self {
        if channel_stride == 0 {
            Row::Splat(data[off])
        } else {
            Row::Full(&data[off..off + c])
        }
    }
}

#[inline]
fn row_binary(out: &mut [f64], x: Row, y: Row, f: impl Fn(f64, f64) -> f64) {
    match (x, y) {
        (Row::Full(a), Row::Full(b)) => out.iter_mut().zip(a).zip(b).for_each(|((o, &a), &b)| *o = f(a, b)),
        (Row::Full(a), Row::Splat(b)) => out.iter_mut().zip(a).for_each(|(o, &a)| *o = f(a, b)),
        (Row::Splat(a), Row::Full(b)) => out.iter_mut().zip(b).for_each(|(o, &b)| *o = f(a, b)),
        (Row::Splat(a), Row::Splat(b)) => out.iter_mut().for_each(|o| *o = f(a, b)),
    }
}

/// Adds `g * other` (elementwise, `other` possibly splatted) into a
/// gradient row that is either full or a single accumulated slot.
#[inline]
fn row_accumulate(dst: &mut [f64], dst_off: usize, dst_stride: usize, g: &[f64], other: Option<Row>) {
    let c = g.len();
    if dst_stride == 0 {
        let s: f64 = match other {
            None => g.iter().sum(),
            Some(Row::Splat(v)) => g.iter().sum::<f64>() * v,
            Some(Row::Full(v)) => g.iter().zip(v).map(|(a, b)| a * b).sum(),
        };
        dst[dst_off] += s;
    } else {
        let d = &mut dst[dst_off..dst_off + c];
        match other {
            None => d.iter_mut().zip(g).for_each(|(d, &g)| *d += g),
            Some(Row::Splat(v)) => d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * v),
            Some(Row::Full(v)) => d.iter_mut().zip(g).zip(v).for_each(|((d, &g), &v)| *d += g * v),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Smallest distance of any ReLU input from 0, or of any channel
    /// maximum from the runner-up, seen so far.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Global average pooling over height and width.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let [n, h, w, c] = xs.0;
        if h * w == 0 {
            return Err(Error::InvalidShape(format!("gap over zero-area input {xs:?}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let acc = &mut out[i * c..(i + 1) * c];
            for p in 0..h * w {
                let row = &xv[(i * h * w + p) * c..(i * h * w + p + 1) * c];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv = 1.0 / (h * w) as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor::from_vec(Shape::new(n, 1, 1, c), out)?;
        self.push(Op::Gap(x), value)
    }

    /// `out[n, c] = sum_k w[c, k] * x[n, k] + b[c]` with `w` shaped `[1, 1, Cout, Cin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (cout, cin) = (ws.w(), ws.c());
        if xs.h() != 1 || xs.w() != 1 {
            return Err(Error::InvalidShape(format!("linear expects [N,1,1,C], got {xs:?}")));
        }
        if ws.n() != 1 || ws.h() != 1 || xs.c() != cin {
            return Err(Error::InvalidShape(format!(
                "linear weight {ws:?} does not accept input {xs:?}"
            )));
        }
        if bs != Shape::vector(cout) {
            return Err(Error::InvalidShape(format!(
                "linear bias {bs:?} does not match {cout} outputs"
            )));
        }
        let n = xs.n();
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * cout);
        for i in 0..n {
            let xr = &xv[i * cin..(i + 1) * cin];
            for o in 0..cout {
                let wr = &wv[o * cin..(o + 1) * cin];
                let dot: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
                out.push(dot + bv[o]);
            }
        }
        let value = Tensor::from_vec(Shape::new(n, 1, 1, cout), out)?;
        self.push(Op::Linear { x, w, b }, value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let margin = xv.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let value = xv.map(|v| v.max(0.0));
        self.kink_margin = self.kink_margin.min(margin);
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid_scalar);
        self.push(Op::Sigmoid(x), value)
    }

    /// Zero-padded cross-correlation. Kernel layout is `[kh, kw, Cin, Cout]`,
    /// bias is `[1, 1, 1, Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(k), self.shape(b));
        let [n, h, w, cin] = xs.0;
        let [kh, kw, kcin, cout] = ks.0;
        if kcin != cin {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel {ks:?} expects {kcin} input channels, got {xs:?}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape(format!("conv2d kernel {ks:?} must have odd extents")));
        }
        if bs != Shape::vector(cout) {
            return Err(Error::InvalidShape(format!("conv2d bias {bs:?} vs {cout} outputs")));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geo = ConvGeometry { n, h, w, cin, kh, kw, cout, stride, padding };
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let (xv, kv, bv) = (self.value(x).data(), self.value(k).data(), self.value(b).data());
        let rows = n * oh * ow;
        let kdim = kh * kw * cin;
        if geo.prefers_direct() {
            let value = Tensor::from_vec(Shape::new(n, oh, ow, cout), geo.direct_forward(xv, kv, bv))?;
            return self.push(Op::Conv2d { x, k, b, stride, padding }, value);
        }
        let cols = geo.patches(xv);
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(bv);
        }
        // out[rows x cout] += cols[rows x kdim] * kernel[kdim x cout]
        unsafe {
            matrixmultiply::dgemm(
                rows, kdim, cout, 1.0,
                cols.as_ptr(), kdim as isize, 1,
                kv.as_ptr(), cout as isize, 1,
                1.0, out.as_mut_ptr(), cout as isize, 1,
            );
        }
        let value = Tensor::from_vec(Shape::new(n, oh, ow, cout), out)?;
        self.push(Op::Conv2d { x, k, b, stride, padding }, value)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0[..3] != sb.0[..3] {
            return Err(Error::InvalidShape(format!("concat_channels {sa:?} with {sb:?}")));
        }
        let (c1, c2) = (sa.c(), sb.c());
        let rows = sa.n() * sa.h() * sa.w();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (c1 + c2));
        for r in 0..rows {
            out.extend_from_slice(&av[r * c1..(r + 1) * c1]);
            out.extend_from_slice(&bv[r * c2..(r + 1) * c2]);
        }
        let value = Tensor::from_vec(Shape::new(sa.n(), sa.h(), sa.w(), c1 + c2), out)?;
        self.push(Op::Concat(a, b), value)
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if len == 0 || start + len > xs.c() {
            return Err(Error::InvalidShape(format!(
                "channel slice {start}..{} out of range for {xs:?}",
                start + len
            )));
        }
        let c = xs.c();
        let xv = self.value(x).data();
        let rows = xs.n() * xs.h() * xs.w();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * c + start..r * c + start + len]);
        }
        let value = Tensor::from_vec(Shape::new(xs.n(), xs.h(), xs.w(), len), out)?;
        self.push(Op::Slice { x, start }, value)
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs.c();
        if c == 0 {
            return Err(Error::InvalidShape("channel_mean over zero channels".into()));
        }
        let value = Tensor::from_vec(
            Shape::new(xs.n(), xs.h(), xs.w(), 1),
            self.value(x)
                .data()
                .chunks_exact(c)
                .map(|row| row.iter().sum::<f64>() / c as f64)
                .collect(),
        )?;
        self.push(Op::ChannelMean(x), value)
    }

    /// Per-position maximum over channels. Ties resolve to the lowest index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs.c();
        if c == 0 {
            return Err(Error::InvalidShape("channel_max over zero channels".into()));
        }
        let rows = xs.n() * xs.h() * xs.w();
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        let mut margin = f64::INFINITY;
        for row in self.value(x).data().chunks_exact(c) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            let top = row[best];
            for (j, &v) in row.iter().enumerate() {
                if j != best {
                    margin = margin.min(top - v);
                }
            }
            out.push(top);
            argmax.push(best as u32);
        }
        self.kink_margin = self.kink_margin.min(margin);
        let value = Tensor::from_vec(Shape::new(xs.n(), xs.h(), xs.w(), 1), out)?;
        self.push(Op::ChannelMax { x, argmax }, value)
    }

    /// Channel-wise mean and max maps, each `[N, H, W, 1]`.
    pub fn channel_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        Ok((self.channel_mean(x)?, self.channel_max(x)?))
    }

    fn binary(&mut self, x: Var, y: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        let out_shape = xs.broadcast(&ys)?;
        let (xv, yv) = (self.value(x).data(), self.value(y).data());
        if xs == ys {
            let data = xv.iter().zip(yv).map(|(&a, &b)| f(a, b)).collect();
            return Tensor::from_vec(out_shape, data);
        }
        let mut out = vec![0.0; out_shape.numel()];
        let (sx, sy) = (bcast_strides(xs, out_shape), bcast_strides(ys, out_shape));
        let c = out_shape.c();
        for_each_row(out_shape, sx, sy, |o, i, j| {
            row_binary(&mut out[o..o + c], Row::of(xv, i, sx[3], c), Row::of(yv, j, sy[3], c), &f)
        });
        Tensor::from_vec(out_shape, out)
    }

    /// Elementwise product with singleton axes broadcast.
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = self.binary(x, y, |a, b| a * b)?;
        self.push(Op::Mul(x, y), value)
    }

    /// Elementwise sum with singleton axes broadcast.
    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = self.binary(x, y, |a, b| a + b)?;
        self.push(Op::Add(x, y), value)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value)
    }

    /// `sum_j weights[row, j] * inputs[j]`, where `weights` is a
    /// `[1, 1, R, inputs.len()]` matrix and all inputs share one shape.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var, row: usize) -> Result<Var> {
        let ws = self.shape(weights);
        let k = inputs.len();
        if k == 0 || ws.n() != 1 || ws.h() != 1 || ws.c() != k || row >= ws.w() {
            return Err(Error::InvalidShape(format!(
                "weighted_sum: weights {ws:?}, row {row}, {k} inputs"
            )));
        }
        let shape = self.shape(inputs[0]);
        if let Some(bad) = inputs.iter().find(|v| self.shape(**v) != shape) {
            return Err(Error::InvalidShape(format!(
                "weighted_sum inputs disagree: {shape:?} vs {:?}",
                self.shape(*bad)
            )));
        }
        let wrow = &self.value(weights).data()[row * k..(row + 1) * k];
        let mut out = vec![0.0; shape.numel()];
        for (v, &wj) in inputs.iter().zip(wrow) {
            for (o, x) in out.iter_mut().zip(self.value(*v).data()) {
                *o += wj * x;
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        self.push(
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
                row,
            },
            value,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// Mean binary cross-entropy over every logit, in the overflow-free form
    /// `max(z, 0) - z t + ln(1 + e^{-|z|})`.
    pub fn bce_loss(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let ls = self.shape(logits);
        if ls != targets.shape() {
            return Err(Error::InvalidShape(format!(
                "bce_loss logits {ls:?} vs targets {:?}",
                targets.shape()
            )));
        }
        if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidShape("bce_loss targets must be 0 or 1".into()));
        }
        let count = ls.numel().max(1) as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Op::Bce {
                logits,
                targets: targets.clone(),
            },
            Tensor::scalar(total / count),
        )
    }

    /// Back-propagates from a single-element `loss`, adding parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.shape(loss).numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut visited = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            visited.push(Var(idx));
            self.backward_node(node, &g, &mut adj);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &adj[idx]) {
                store.grad_mut(*id).add_assign(g);
            }
        }
        Ok(Gradients {
            leaves: adj,
            visited,
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Gap(x) => {
                let [n, h, w, c] = self.shape(*x).0;
                let inv = 1.0 / (h * w) as f64;
                let gx = grad_slot(adj, *x, self.shape(*x));
                for i in 0..n {
                    for p in 0..h * w {
                        let off = (i * h * w + p) * c;
                        for ch in 0..c {
                            gx[off + ch] += gd[i * c + ch] * inv;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, cin) = (xs.n(), xs.c());
                let cout = self.shape(*b).c();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                {
                    let gx = grad_slot(adj, *x, xs);
                    for i in 0..n {
                        for o in 0..cout {
                            let go = gd[i * cout + o];
                            for k in 0..cin {
                                gx[i * cin + k] += wv[o * cin + k] * go;
                            }
                        }
                    }
                }
                {
                    let gw = grad_slot(adj, *w, self.shape(*w));
                    for i in 0..n {
                        for o in 0..cout {
                            let go = gd[i * cout + o];
                            for k in 0..cin {
                                gw[o * cin + k] += go * xv[i * cin + k];
                            }
                        }
                    }
                }
                let gb = grad_slot(adj, *b, self.shape(*b));
                for i in 0..n {
                    for o in 0..cout {
                        gb[o] += gd[i * cout + o];
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = grad_slot(adj, *x, self.shape(*x));
                for ((a, &v), &gi) in gx.iter_mut().zip(xv).zip(gd) {
                    if v > 0.0 {
                        *a += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let s = node.value.data();
                let gx = grad_slot(adj, *x, self.shape(*x));
                for ((a, &sv), &gi) in gx.iter_mut().zip(s).zip(gd) {
                    *a += gi * sv * (1.0 - sv);
                }
            }
            Op::Conv2d { x, k, b, stride, padding } => {
                self.conv2d_backward(*x, *k, *b, *stride, *padding, g, adj);
            }
            Op::Concat(a, b) => {
                let (c1, c2) = (self.shape(*a).c(), self.shape(*b).c());
                let c = c1 + c2;
                {
                    let ga = grad_slot(adj, *a, self.shape(*a));
                    for (r, row) in gd.chunks_exact(c).enumerate() {
                        for (dst, src) in ga[r * c1..(r + 1) * c1].iter_mut().zip(&row[..c1]) {
                            *dst += src;
                        }
                    }
                }
                let gb = grad_slot(adj, *b, self.shape(*b));
                for (r, row) in gd.chunks_exact(c).enumerate() {
                    for (dst, src) in gb[r * c2..(r + 1) * c2].iter_mut().zip(&row[c1..]) {
                        *dst += src;
                    }
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let len = node.value.shape().c();
                let c = xs.c();
                let gx = grad_slot(adj, *x, xs);
                for (r, row) in gd.chunks_exact(len).enumerate() {
                    for (dst, src) in gx[r * c + start..r * c + start + len].iter_mut().zip(row) {
                        *dst += src;
                    }
                }
            }
            Op::ChannelMean(x) => {
                let xs = self.shape(*x);
                let c = xs.c();
                let inv = 1.0 / c as f64;
                let gx = grad_slot(adj, *x, xs);
                for (r, &gi) in gd.iter().enumerate() {
                    for dst in &mut gx[r * c..(r + 1) * c] {
                        *dst += gi * inv;
                    }
                }
            }
            Op::ChannelMax { x, argmax } => {
                let xs = self.shape(*x);
                let c = xs.c();
                let gx = grad_slot(adj, *x, xs);
                for (r, (&gi, &am)) in gd.iter().zip(argmax).enumerate() {
                    gx[r * c + am as usize] += gi;
                }
            }
            Op::Mul(x, y) => {
                let (xs, ys) = (self.shape(*x), self.shape(*y));
                let out = node.value.shape();
                let (xv, yv) = (self.value(*x).data(), self.value(*y).data());
                if x == y {
                    let gx = grad_slot(adj, *x, xs);
                    for ((a, &v), &gi) in gx.iter_mut().zip(xv).zip(gd) {
                        *a += 2.0 * gi * v;
                    }
                    return;
                }
                let (sx, sy) = (bcast_strides(xs, out), bcast_strides(ys, out));
                let c = out.c();
                {
                    let gx = grad_slot(adj, *x, xs);
                    for_each_row(out, sx, sy, |o, i, j| {
                        row_accumulate(gx, i, sx[3], &gd[o..o + c], Some(Row::of(yv, j, sy[3], c)))
                    });
                }
                let gy = grad_slot(adj, *y, ys);
                for_each_row(out, sx, sy, |o, i, j| {
                    row_accumulate(gy, j, sy[3], &gd[o..o + c], Some(Row::of(xv, i, sx[3], c)))
                });
            }
            Op::Add(x, y) => {
                let (xs, ys) = (self.shape(*x), self.shape(*y));
                let out = node.value.shape();
                let (sx, sy) = (bcast_strides(xs, out), bcast_strides(ys, out));
                let c = out.c();
                {
                    let gx = grad_slot(adj, *x, xs);
                    for_each_row(out, sx, sy, |o, i, _| row_accumulate(gx, i, sx[3], &gd[o..o + c], None));
                }
                let gy = grad_slot(adj, *y, ys);
                for_each_row(out, sx, sy, |o, _, j| row_accumulate(gy, j, sy[3], &gd[o..o + c], None));
            }
            Op::Scale(x, f) => {
                let gx = grad_slot(adj, *x, self.shape(*x));
                for (a, &gi) in gx.iter_mut().zip(gd) {
                    *a += gi * f;
                }
            }
            Op::WeightedSum { inputs, weights, row } => {
                let k = inputs.len();
                let wv = self.value(*weights).data()[row * k..(row + 1) * k].to_vec();
                let mut wgrad = vec![0.0; k];
                for (j, v) in inputs.iter().enumerate() {
                    let xv = self.value(*v).data();
                    wgrad[j] = xv.iter().zip(gd).map(|(a, b)| a * b).sum();
                    let gx = grad_slot(adj, *v, self.shape(*v));
                    for (a, &gi) in gx.iter_mut().zip(gd) {
                        *a += gi * wv[j];
                    }
                }
                let gw = grad_slot(adj, *weights, self.shape(*weights));
                for (j, d) in wgrad.into_iter().enumerate() {
                    gw[row * k + j] += d;
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                let gx = grad_slot(adj, *x, self.shape(*x));
                gx.iter_mut().for_each(|a| *a += g0);
            }
            Op::Bce { logits, targets } => {
                let g0 = gd[0];
                let zv = self.value(*logits).data();
                let count = zv.len().max(1) as f64;
                let gz = grad_slot(adj, *logits, self.shape(*logits));
                for ((a, &z), &t) in gz.iter_mut().zip(zv).zip(targets.data()) {
                    *a += g0 * (sigmoid_scalar(z) - t) / count;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
    ) {
        let xs = self.shape(x);
        let ks = self.shape(k);
        let [n, h, w, cin] = xs.0;
        let [kh, kw, _, cout] = ks.0;
        let geo = ConvGeometry { n, h, w, cin, kh, kw, cout, stride, padding };
        let rows = n * geo.out_h() * geo.out_w();
        let kdim = kh * kw * cin;
        let gd = g.data();

        {
            let gb = grad_slot(adj, b, self.shape(b));
            for row in gd.chunks_exact(cout) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        if geo.prefers_direct() {
            let xv = self.value(x).data();
            let kv = self.value(k).data();
            let mut gk = vec![0.0; ks.numel()];
            let gx = grad_slot(adj, x, xs);
            geo.direct_backward(xv, kv, gd, &mut gk, gx);
            for (a, v) in grad_slot(adj, k, ks).iter_mut().zip(&gk) {
                *a += v;
            }
            return;
        }
        let cols = geo.patches(self.value(x).data());
        {
            // dK[kdim x cout] += cols^T * g
            let gk = grad_slot(adj, k, ks);
            unsafe {
                matrixmultiply::dgemm(
                    kdim, rows, cout, 1.0,
                    cols.as_ptr(), 1, kdim as isize,
                    gd.as_ptr(), cout as isize, 1,
                    1.0, gk.as_mut_ptr(), cout as isize, 1,
                );
            }
        }
        // dcols[rows x kdim] = g * kernel^T, then scatter back onto x.
        let kv = self.value(k).data();
        let mut dcols = vec![0.0; rows * kdim];
        unsafe {
            matrixmultiply::dgemm(
                rows, cout, kdim, 1.0,
                gd.as_ptr(), cout as isize, 1,
                kv.as_ptr(), 1, cout as isize,
                0.0, dcols.as_mut_ptr(), kdim as isize, 1,
            );
        }
        geo.scatter_patches(&dcols, grad_slot(adj, x, xs));
    }
}

/// Layout of one zero-padded convolution, used to gather input patches
/// into rows of `kh * kw * cin` values (kernel order) and scatter them back.
struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Narrow outputs (the single-channel spatial map) are faster as a
    /// direct loop than as a matrix product.
    fn prefers_direct(&self) -> bool {
        self.cout <= 2 && !self.is_pointwise()
    }

    /// Calls `f(out_row, kernel_offset, input_offset, len)` for each kernel
    /// row's in-bounds span. Within one span both the input and the
    /// (per-output-channel, `[kh, kw, cin]`-ordered) kernel are contiguous.
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cin = self.cin;
        let mut row = 0;
        for i in 0..self.n {
            for y in 0..oh {
                let y0 = (y * self.stride) as isize - self.padding as isize;
                let di_lo = (-y0).max(0) as usize;
                let di_hi = ((self.h as isize - y0).min(self.kh as isize)).max(0) as usize;
                for xo in 0..ow {
                    let x0 = (xo * self.stride) as isize - self.padding as isize;
                    let dj_lo = (-x0).max(0) as usize;
                    let dj_hi = ((self.w as isize - x0).min(self.kw as isize)).max(0) as usize;
                    if dj_hi > dj_lo {
                        let ix = (x0 + dj_lo as isize) as usize;
                        let len = (dj_hi - dj_lo) * cin;
                        for di in di_lo..di_hi {
                            let iy = (y0 + di as isize) as usize;
                            let src = ((i * self.h + iy) * self.w + ix) * cin;
                            f(row, (di * self.kw + dj_lo) * cin, src, len);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Kernel reordered to `[cout][kh * kw * cin]`.
    fn kernel_by_output(&self, k: &[f64]) -> Vec<Vec<f64>> {
        let cout = self.cout;
        (0..cout)
            .map(|co| k.iter().skip(co).step_by(cout).copied().collect())
            .collect()
    }

    fn direct_forward(&self, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
        let cout = self.cout;
        let rows = self.n * self.out_h() * self.out_w();
        let kt = self.kernel_by_output(k);
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        self.for_each_span(|row, koff, src, len| {
            let xs = &x[src..src + len];
            for (co, kc) in kt.iter().enumerate() {
                let dot: f64 = xs.iter().zip(&kc[koff..koff + len]).map(|(a, b)| a * b).sum();
                out[row * cout + co] += dot;
            }
        });
        out
    }

    fn direct_backward(&self, x: &[f64], k: &[f64], g: &[f64], dk: &mut [f64], dx: &mut [f64]) {
        let cout = self.cout;
        let kt = self.kernel_by_output(k);
        let mut dkt = vec![vec![0.0; k.len() / cout]; cout];
        self.for_each_span(|row, koff, src, len| {
            for co in 0..cout {
                let gv = g[row * cout + co];
                let xs = &x[src..src + len];
                for (d, &xv) in dkt[co][koff..koff + len].iter_mut().zip(xs) {
                    *d += xv * gv;
                }
                for (d, &kv) in dx[src..src + len].iter_mut().zip(&kt[co][koff..koff + len]) {
                    *d += kv * gv;
                }
            }
        });
        for (co, dc) in dkt.iter().enumerate() {
            for (j, v) in dc.iter().enumerate() {
                dk[j * cout + co] += v;
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Calls `f(patch_offset, input_offset)` for each in-bounds kernel tap;
    /// each tap covers `cin` consecutive values on both sides.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let kdim = self.kh * self.kw * self.cin;
        let mut row = 0;
        for i in 0..self.n {
            for y in 0..oh {
                for xo in 0..ow {
                    for di in 0..self.kh {
                        let iy = (y * self.stride + di) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for dj in 0..self.kw {
                            let ix = (xo * self.stride + dj) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((i * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row * kdim + (di * self.kw + dj) * self.cin, src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn patches(&self, x: &[f64]) -> Vec<f64> {
        if self.is_pointwise() {
            return x.to_vec();
        }
        let rows = self.n * self.out_h() * self.out_w();
        let mut cols = vec![0.0; rows * self.kh * self.kw * self.cin];
        let cin = self.cin;
        self.for_each_tap(|dst, src| cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]));
        cols
    }

    fn scatter_patches(&self, cols: &[f64], dx: &mut [f64]) {
        if self.is_pointwise() {
            for (d, c) in dx.iter_mut().zip(cols) {
                *d += c;
            }
            return;
        }
        let cin = self.cin;
        self.for_each_tap(|src, dst| {
            for (d, c) in dx[dst..dst + cin].iter_mut().zip(&cols[src..src + cin]) {
                *d += c;
            }
        });
    }
}

fn grad_slot(adj: &mut [Option<Tensor>], v: Var, shape: Shape) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

//! Reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only list of nodes; building an expression records
//! eagerly-evaluated values plus enough structure to replay the chain rule
//! backwards. The op set is exactly what the denoiser, the prompt-bank loss
//! and the control adapter need — nothing speculative.
//!
//! Gradients flow to every node, but are only *accumulated* into parents
//! whose subgraph contains a trainable leaf (`needs_grad`). Frozen model
//! parameters therefore cost nothing on the backward pass beyond the ops
//! that carry gradient through them.
//!
//! Everything is f64 and deterministic: the same graph built twice produces
//! bitwise-identical values and gradients.

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    Silu(Var),
    SoftmaxRows(Var),
    Sqrt(Var),
    Abs(Var),
    MeanAll(Var),
    MeanAxis0(Var),
    Dot(Var, Var),
    Recip(Var),
    MulScalar { x: Var, s: Var },
    AddChannelBias { x: Var, bias: Var },
    SpatialToRows(Var),
    RowsToSpatial(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.idx()).and_then(|g| g.as_ref())
    }

    /// Gradient for a trainable leaf; zeros if the loss never touched it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        assert!(self.nodes.len() < u32::MAX as usize, "tape overflow");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() as u32 - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: gradient flow stops here.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "add shape mismatch: {:?} vs {:?}", ta.shape(), tb.shape());
        let mut out = ta.clone();
        for (o, x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += x;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "sub shape mismatch");
        let mut out = ta.clone();
        for (o, x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o -= x;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "mul shape mismatch");
        let mut out = ta.clone();
        for (o, x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= x;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        assert_eq!(ka, kb, "matmul inner dims {} vs {}", ka, kb);
        let mut out = vec![0.0; m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in da[i * ka..(i + 1) * ka].iter().enumerate() {
                let b_row = &db[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::from_vec(&[m, n], out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let da = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let t = Tensor::from_vec(&[n, m], out).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Transpose(a), ng)
    }

    /// 2-d convolution over a `[C_in, H, W]` input with a
    /// `[C_out, C_in, kh, kw]` kernel and `[C_out]` bias. Output spatial size
    /// follows floor semantics: `(H + 2*pad - kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv kernel must be 4-d");
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv kernel expects {} input channels, got {}", wcin, cin);
        assert_eq!(self.value(b).shape(), &[cout], "conv bias shape");
        assert!(stride >= 1);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        {
            let dx = self.value(x).data();
            let dw = self.value(w).data();
            let dbias = self.value(b).data();
            for co in 0..cout {
                out[co * ho * wo..(co + 1) * ho * wo].fill(dbias[co]);
            }
            conv_accumulate(
                dx, dw, &mut out, cin, h, wd, cout, kh, kw, ho, wo, stride, pad,
            );
        }
        let t = Tensor::from_vec(&[cout, ho, wo], out).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Nearest-neighbour 2x spatial upsample of a `[C, H, W]` input.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let dx = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for ci in 0..c {
            for y in 0..h2 {
                let src = &dx[(ci * h + y / 2) * w..][..w];
                let dst = &mut out[(ci * h2 + y) * w2..][..w2];
                for x2 in 0..w2 {
                    dst[x2] = src[x2 / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[c, h2, w2], out).unwrap();
        let ng = self.needs(x);
        self.push(t, Op::Upsample2x(x), ng)
    }

    /// `x * sigmoid(x)` — smooth activation, so finite-difference gradient
    /// checks hold everywhere.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    /// Row-wise softmax of a 2-d tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let dx = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &dx[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let t = Tensor::from_vec(&[m, n], out).unwrap();
        let ng = self.needs(x);
        self.push(t, Op::SoftmaxRows(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        let ng = self.needs(x);
        self.push(out, Op::Sqrt(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let ng = self.needs(x);
        self.push(out, Op::Abs(x), ng)
    }

    /// Mean over all entries; returns a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(mean), Op::MeanAll(x), ng)
    }

    /// Column means of a 2-d tensor: `[m, n] -> [n]`.
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let dx = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += dx[i * n + j];
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let t = Tensor::from_vec(&[n], out).unwrap();
        let ng = self.needs(x);
        self.push(t, Op::MeanAxis0(x), ng)
    }

    /// Flattened inner product of two same-shape tensors; returns a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "dot shape mismatch");
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::Dot(a, b), ng)
    }

    /// Reciprocal of a scalar node.
    pub fn recip(&mut self, s: Var) -> Var {
        let v = self.value(s).item();
        let ng = self.needs(s);
        self.push(Tensor::scalar(1.0 / v), Op::Recip(s), ng)
    }

    /// Tensor times a scalar node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let ng = self.needs(x) || self.needs(s);
        self.push(out, Op::MulScalar { x, s }, ng)
    }

    /// Adds `bias[c]` to every spatial position of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.value(bias).len(), c, "channel bias length");
        let db = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (ci, bv) in db.iter().enumerate() {
            for o in out.data_mut()[ci * h * w..(ci + 1) * h * w].iter_mut() {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddChannelBias { x, bias }, ng)
    }

    /// `[C, H, W] -> [H*W, C]`: one row per spatial position, for attention.
    pub fn spatial_to_rows(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let dx = self.value(x).data();
        let hw = h * w;
        let mut out = vec![0.0; hw * c];
        for ci in 0..c {
            for p in 0..hw {
                out[p * c + ci] = dx[ci * hw + p];
            }
        }
        let t = Tensor::from_vec(&[hw, c], out).unwrap();
        let ng = self.needs(x);
        self.push(t, Op::SpatialToRows(x), ng)
    }

    /// Inverse of [`Tape::spatial_to_rows`], restoring `[C, H, W]`.
    pub fn rows_to_spatial(&mut self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let (hw, cc) = self.value(x).dims2();
        assert_eq!(hw, h * w, "rows_to_spatial spatial size");
        assert_eq!(cc, c, "rows_to_spatial channels");
        let dx = self.value(x).data();
        let mut out = vec![0.0; c * hw];
        for ci in 0..c {
            for p in 0..hw {
                out[ci * hw + p] = dx[p * c + ci];
            }
        }
        let t = Tensor::from_vec(&[c, h, w], out).unwrap();
        let ng = self.needs(x);
        self.push(t, Op::RowsToSpatial(x), ng)
    }

    /// Runs the chain rule from a scalar loss node back to the leaves.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx()] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            // A node's incoming gradient is complete once every consumer
            // (all at higher indices) has been processed, so it can be moved
            // out — except for leaves, whose gradient is the result.
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if self.needs(a) {
                    self.slot(grads, a).add_scaled(g, 1.0);
                }
                if self.needs(b) {
                    self.slot(grads, b).add_scaled(g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    self.slot(grads, a).add_scaled(g, 1.0);
                }
                if self.needs(b) {
                    self.slot(grads, b).add_scaled(g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let tb = self.value(b).clone();
                    let ga = self.slot(grads, a);
                    for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if self.needs(b) {
                    let ta = self.value(a).clone();
                    let gb = self.slot(grads, b);
                    for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, k) => {
                if self.needs(a) {
                    self.slot(grads, a).add_scaled(g, k);
                }
            }
            Op::MatMul(a, b) => {
                let (m, ka) = self.value(a).dims2();
                let (_, n) = self.value(b).dims2();
                let gd = g.data();
                if self.needs(a) {
                    let db = self.value(b).data().to_vec();
                    let ga = self.slot(grads, a);
                    let gad = ga.data_mut();
                    for i2 in 0..m {
                        for kk in 0..ka {
                            let mut acc = 0.0;
                            let g_row = &gd[i2 * n..(i2 + 1) * n];
                            let b_row = &db[kk * n..(kk + 1) * n];
                            for (gv, bv) in g_row.iter().zip(b_row) {
                                acc += gv * bv;
                            }
                            gad[i2 * ka + kk] += acc;
                        }
                    }
                }
                if self.needs(b) {
                    let da = self.value(a).data().to_vec();
                    let gb = self.slot(grads, b);
                    let gbd = gb.data_mut();
                    for i2 in 0..m {
                        let g_row = &gd[i2 * n..(i2 + 1) * n];
                        for kk in 0..ka {
                            let av = da[i2 * ka + kk];
                            let gb_row = &mut gbd[kk * n..(kk + 1) * n];
                            for (o, gv) in gb_row.iter_mut().zip(g_row) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.needs(a) {
                    let (n, m) = g.dims2(); // g has the transposed shape
                    let gd = g.data().to_vec();
                    let ga = self.slot(grads, a);
                    let gad = ga.data_mut();
                    for i2 in 0..n {
                        for j in 0..m {
                            gad[j * n + i2] += gd[i2 * m + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (cin, h, wd) = self.value(x).dims3();
                let ws = self.value(w).shape().to_vec();
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (_, ho, wo) = node.value.dims3();
                let gd = g.data();
                if self.needs(b) {
                    let gb = self.slot(grads, b);
                    let gbd = gb.data_mut();
                    for co in 0..cout {
                        gbd[co] += gd[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                    }
                }
                if self.needs(w) {
                    let dx = self.value(x).data().to_vec();
                    let gw = self.slot(grads, w);
                    conv_backward_w(
                        &dx, gd, gw.data_mut(), cin, h, wd, cout, kh, kw, ho, wo, stride, pad,
                    );
                }
                if self.needs(x) {
                    let dw = self.value(w).data().to_vec();
                    let gx = self.slot(grads, x);
                    conv_backward_x(
                        &dw, gd, gx.data_mut(), cin, h, wd, cout, kh, kw, ho, wo, stride, pad,
                    );
                }
            }
            Op::Upsample2x(x) => {
                if self.needs(x) {
                    let (c, h, w) = self.value(x).dims3();
                    let gd = g.data().to_vec();
                    let gx = self.slot(grads, x);
                    let gxd = gx.data_mut();
                    let (h2, w2) = (2 * h, 2 * w);
                    for ci in 0..c {
                        for y in 0..h2 {
                            let src = &gd[(ci * h2 + y) * w2..][..w2];
                            let dst = &mut gxd[(ci * h + y / 2) * w..][..w];
                            for x2 in 0..w2 {
                                dst[x2 / 2] += src[x2];
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                if self.needs(x) {
                    let tx = self.value(x).clone();
                    let gx = self.slot(grads, x);
                    for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        let s = sigmoid(xv);
                        *o += gv * (s * (1.0 + xv * (1.0 - s)));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(x) {
                    let (m, n) = node.value.dims2();
                    let y = node.value.data().to_vec();
                    let gd = g.data();
                    let gx = self.slot(grads, x);
                    let gxd = gx.data_mut();
                    for i2 in 0..m {
                        let yr = &y[i2 * n..(i2 + 1) * n];
                        let gr = &gd[i2 * n..(i2 + 1) * n];
                        let inner: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let or = &mut gxd[i2 * n..(i2 + 1) * n];
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::Sqrt(x) => {
                if self.needs(x) {
                    let y = node.value.clone();
                    let gx = self.slot(grads, x);
                    for ((o, &gv), &yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * 0.5 / yv;
                    }
                }
            }
            Op::Abs(x) => {
                if self.needs(x) {
                    let tx = self.value(x).clone();
                    let gx = self.slot(grads, x);
                    for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        // Subgradient 0 at the kink.
                        *o += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.needs(x) {
                    let n = self.value(x).len() as f64;
                    let gv = g.item() / n;
                    let gx = self.slot(grads, x);
                    for o in gx.data_mut().iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::MeanAxis0(x) => {
                if self.needs(x) {
                    let (m, n) = self.value(x).dims2();
                    let gd = g.data().to_vec();
                    let gx = self.slot(grads, x);
                    let gxd = gx.data_mut();
                    for i2 in 0..m {
                        for j in 0..n {
                            gxd[i2 * n + j] += gd[j] / m as f64;
                        }
                    }
                }
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                if self.needs(a) {
                    let tb = self.value(b).clone();
                    self.slot(grads, a).add_scaled(&tb, gv);
                }
                if self.needs(b) {
                    let ta = self.value(a).clone();
                    self.slot(grads, b).add_scaled(&ta, gv);
                }
            }
            Op::Recip(s) => {
                if self.needs(s) {
                    let sv = self.value(s).item();
                    let gs = self.slot(grads, s);
                    gs.data_mut()[0] += -g.item() / (sv * sv);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(s).item();
                if self.needs(x) {
                    self.slot(grads, x).add_scaled(g, sv);
                }
                if self.needs(s) {
                    let tx = self.value(x).clone();
                    let acc: f64 = tx.data().iter().zip(g.data()).map(|(xv, gv)| xv * gv).sum();
                    self.slot(grads, s).data_mut()[0] += acc;
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.needs(x) {
                    self.slot(grads, x).add_scaled(g, 1.0);
                }
                if self.needs(bias) {
                    let (c, h, w) = self.value(x).dims3();
                    let gd = g.data();
                    let gb = self.slot(grads, bias);
                    let gbd = gb.data_mut();
                    for ci in 0..c {
                        gbd[ci] += gd[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>();
                    }
                }
            }
            Op::SpatialToRows(x) => {
                if self.needs(x) {
                    let (c, h, w) = self.value(x).dims3();
                    let hw = h * w;
                    let gd = g.data().to_vec();
                    let gx = self.slot(grads, x);
                    let gxd = gx.data_mut();
                    for ci in 0..c {
                        for p in 0..hw {
                            gxd[ci * hw + p] += gd[p * c + ci];
                        }
                    }
                }
            }
            Op::RowsToSpatial(x) => {
                if self.needs(x) {
                    let (hw, c) = self.value(x).dims2();
                    let gd = g.data().to_vec();
                    let gx = self.slot(grads, x);
                    let gxd = gx.data_mut();
                    for ci in 0..c {
                        for p in 0..hw {
                            gxd[p * c + ci] += gd[ci * hw + p];
                        }
                    }
                }
            }
        }
    }

    fn slot<'a>(&self, grads: &'a mut Vec<Option<Tensor>>, v: Var) -> &'a mut Tensor {
        let shape = self.value(v).shape().to_vec();
        grads[v.idx()].get_or_insert_with(|| Tensor::zeros(&shape))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_accumulate(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x[(ci * h + iy as usize) * wd..][..wd];
                        let o_row = &mut out[(co * ho + oy) * wo..][..wo];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = (wd as isize - shift).min(wo as isize).max(0) as usize;
                            for ox in lo..hi {
                                o_row[ox] += wv * x_row[(ox as isize + shift) as usize];
                            }
                        } else {
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    o_row[ox] += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_w(
    x: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x[(ci * h + iy as usize) * wd..][..wd];
                        let g_row = &gy[(co * ho + oy) * wo..][..wo];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = (wd as isize - shift).min(wo as isize).max(0) as usize;
                            for ox in lo..hi {
                                acc += x_row[(ox as isize + shift) as usize] * g_row[ox];
                            }
                        } else {
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc += x_row[ix as usize] * g_row[ox];
                                }
                            }
                        }
                    }
                    gw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_x(
    w: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &mut gx[(ci * h + iy as usize) * wd..][..wd];
                        let g_row = &gy[(co * ho + oy) * wo..][..wo];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = (wd as isize - shift).min(wo as isize).max(0) as usize;
                            for ox in lo..hi {
                                x_row[(ox as isize + shift) as usize] += wv * g_row[ox];
                            }
                        } else {
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    x_row[ix as usize] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    // Central-difference check of every tape gradient against the recorded
    // backward pass. `build` must construct the same scalar loss each call.
    fn fd_check(inputs: &[Tensor], tol: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).len(), 1, "fd_check needs a scalar loss");
        let grads = tape.backward(loss);
        let analytic: Vec<Tensor> =
            vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.shape())).collect();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };

        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[i].data()[j];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(
                    rel < tol,
                    "input {} coord {}: analytic {} vs numeric {} (rel {})",
                    i,
                    j,
                    a,
                    numeric,
                    rel
                );
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut SeedStream::new(seed, 0))
    }

    #[test]
    fn elementwise_chain_gradients() {
        let a = randn(&[2, 3], 1);
        let b = randn(&[2, 3], 2);
        fd_check(&[a, b], 1e-5, |t, v| {
            let s = t.add(v[0], v[1]);
            let act = t.silu(s);
            let d = t.scale(v[1], 0.7);
            let d = t.sub(v[0], d);
            let m = t.mul(act, d);
            t.mean_all(m)
        });
    }

    #[test]
    fn matmul_transpose_gradients() {
        let a = randn(&[3, 4], 3);
        let b = randn(&[2, 4], 4);
        let w = randn(&[3, 2], 5);
        fd_check(&[a, b], 1e-5, move |t, v| {
            let bt = t.transpose(v[1]);
            let p = t.matmul(v[0], bt);
            let wc = t.constant(w.clone());
            t.dot(p, wc)
        });
    }

    #[test]
    fn conv2d_stride1_gradients() {
        let x = randn(&[2, 5, 4], 6);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.4, &mut SeedStream::new(7, 0));
        let b = randn(&[3], 8);
        let probe = randn(&[3, 5, 4], 9);
        fd_check(&[x, w, b], 1e-5, move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1);
            let p = t.constant(probe.clone());
            t.dot(y, p)
        });
    }

    #[test]
    fn conv2d_stride2_gradients() {
        let x = randn(&[2, 5, 6], 10);
        let w = Tensor::randn(&[2, 2, 3, 3], 0.4, &mut SeedStream::new(11, 0));
        let b = randn(&[2], 12);
        let probe = randn(&[2, 2, 3], 13);
        fd_check(&[x, w, b], 1e-5, move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1);
            let p = t.constant(probe.clone());
            t.dot(y, p)
        });
    }

    #[test]
    fn conv2d_1x1_gradients() {
        let x = randn(&[3, 4, 4], 14);
        let w = Tensor::randn(&[2, 3, 1, 1], 0.6, &mut SeedStream::new(15, 0));
        let b = randn(&[2], 16);
        let probe = randn(&[2, 4, 4], 17);
        fd_check(&[x, w, b], 1e-5, move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 0);
            let p = t.constant(probe.clone());
            t.dot(y, p)
        });
    }

    #[test]
    fn upsample_and_bias_gradients() {
        let x = randn(&[2, 3, 2], 18);
        let bias = randn(&[2], 19);
        let probe = randn(&[2, 6, 4], 20);
        fd_check(&[x, bias], 1e-5, move |t, v| {
            let b = t.add_channel_bias(v[0], v[1]);
            let u = t.upsample2x(b);
            let p = t.constant(probe.clone());
            t.dot(u, p)
        });
    }

    #[test]
    fn softmax_gradients() {
        let x = randn(&[3, 5], 21);
        let probe = randn(&[3, 5], 22);
        fd_check(&[x], 1e-5, move |t, v| {
            let y = t.softmax_rows(v[0]);
            let p = t.constant(probe.clone());
            t.dot(y, p)
        });
    }

    #[test]
    fn sqrt_abs_gradients() {
        // sqrt needs positive inputs, abs needs inputs away from the kink.
        let x = randn(&[2, 4], 23).map(|v| v * v + 0.3);
        let y = randn(&[2, 4], 24).map(|v| if v.abs() < 0.2 { 0.5 } else { v });
        let probe = randn(&[2, 4], 25);
        fd_check(&[x, y], 1e-5, move |t, v| {
            let r = t.sqrt(v[0]);
            let a = t.abs(v[1]);
            let m = t.mul(r, a);
            let p = t.constant(probe.clone());
            t.dot(m, p)
        });
    }

    #[test]
    fn normalize_composite_gradients() {
        // mean over rows then scale to unit norm — the prompt-encoder shape.
        let x = randn(&[4, 6], 26);
        let probe = randn(&[6], 27);
        fd_check(&[x], 1e-5, move |t, v| {
            let m = t.mean_axis0(v[0]);
            let n2 = t.dot(m, m);
            let n = t.sqrt(n2);
            let inv = t.recip(n);
            let unit = t.mul_scalar(m, inv);
            let p = t.constant(probe.clone());
            t.dot(unit, p)
        });
    }

    #[test]
    fn spatial_row_roundtrip_gradients() {
        let x = randn(&[3, 2, 4], 28);
        let w = randn(&[3, 3], 29);
        let probe = randn(&[3, 2, 4], 30);
        fd_check(&[x, w], 1e-5, move |t, v| {
            let rows = t.spatial_to_rows(v[0]);
            let mixed = t.matmul(rows, v[1]);
            let back = t.rows_to_spatial(mixed, 3, 2, 4);
            let p = t.constant(probe.clone());
            t.dot(back, p)
        });
    }

    #[test]
    fn conv2d_padding_values() {
        // All-ones 2x2 input, all-ones 3x3 kernel, zero padding of one:
        // every output cell sees exactly the four real pixels.
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(&[1, 2, 2], 1.0));
        let w = t.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 1);
        assert_eq!(t.value(y).shape(), &[1, 2, 2]);
        assert_eq!(t.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_identity_kernel_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = t.constant(Tensor::filled(&[1, 1, 1, 1], 2.0));
        let b = t.constant(Tensor::filled(&[1], 0.5));
        let y = t.conv2d(x, w, b, 1, 0);
        assert_eq!(t.value(y).data(), &[2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(randn(&[4, 7], 31));
        let y = t.softmax_rows(x);
        for i in 0..4 {
            let s: f64 = t.value(y).data()[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {} sums to {}", i, s);
        }
    }

    #[test]
    fn upsample2x_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(&[1, 1, 2], vec![3.0, 7.0]).unwrap());
        let y = t.upsample2x(x);
        assert_eq!(t.value(y).shape(), &[1, 2, 4]);
        assert_eq!(t.value(y).data(), &[3.0, 3.0, 7.0, 7.0, 3.0, 3.0, 7.0, 7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(randn(&[2, 2], 32));
        let c = t.constant(randn(&[2, 2], 33));
        let m = t.mul(a, c);
        let loss = t.mean_all(m);
        let grads = t.backward(loss);
        assert!(grads.get(a).is_some(), "trainable leaf must get a gradient");
        assert!(grads.get(c).is_none(), "constant leaf must not accumulate");
    }

    #[test]
    fn replayed_graph_is_bitwise_identical() {
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(randn(&[3, 3], 34));
            let b = t.constant(randn(&[3, 3], 35));
            let m = t.matmul(a, b);
            let s = t.silu(m);
            let loss = t.mean_all(s);
            let g = t.backward(loss);
            (t.value(loss).item(), g.get(a).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}

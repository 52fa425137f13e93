//! Append-only tape for reverse-mode differentiation.
//!
//! Nodes are pushed in evaluation order, so reverse append order is a valid
//! reverse topological order. Parameters enter the tape by index into the
//! caller's parameter slice; `backward` writes gradients back into that slice
//! and clears the tape.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{ensure, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Affine { x: Var, w: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Relu { x: Var },
    GlobalAvgPool { x: Var },
    L2Normalize { x: Var, eps: f32, norms: Vec<f32> },
    RowDot { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mean { x: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows { a: Var, b: Var },
    GatherCols { x: Var, cols: Vec<usize> },
    RowLogSumExpExcept { x: Var, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// A single-step computation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product())
}

impl Graph {
    /// A tape that records for a later `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose nodes never require gradients (selection-phase forwards).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = match op {
            Op::Input => false,
            Op::Param(_) => unreachable!("params are pushed by Graph::param"),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, &[])
    }

    /// A leaf bound to `params[index]` at `backward` time.
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Param(index),
            needs_grad: self.grad_enabled && t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Input, &[])
    }

    /// `x[M,Din] · w[Din,Dout] + b[Dout]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        ensure!(
            xs.len() == 2 && ws.len() == 2 && bs.len() == 1 && xs[1] == ws[0] && ws[1] == bs[0],
            "affine shapes do not conform: x {xs:?}, w {ws:?}, b {bs:?}"
        );
        let (m, din, dout) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(m * dout);
        for _ in 0..m {
            out.extend_from_slice(self.value(b));
        }
        kernels::gemm(m, din, dout, self.value(x), false, self.value(w), false, 1.0, &mut out);
        Ok(self.push(vec![m, dout], out, Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// `a[M,K] · b[N,K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        ensure!(
            as_.len() == 2 && bs.len() == 2 && as_[1] == bs[1],
            "matmul_nt shapes do not conform: {as_:?} vs {bs:?}"
        );
        let (m, k, n) = (as_[0], as_[1], bs[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), true, 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b }, &[a, b]))
    }

    /// 3×3 cross-correlation of `x[M,C,H,W]` with `k[F,C,3,3]`.
    ///
    /// The output extent is `⌊(H + 2·pad − 3)/stride⌋ + 1`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        ensure!(
            xs.len() == 4 && ks.len() == 4,
            "conv2d expects 4-D input and kernel, got {xs:?} and {ks:?}"
        );
        ensure!(
            ks[1] == xs[1] && ks[2] == 3 && ks[3] == 3,
            "conv2d kernel {ks:?} does not fit input {xs:?} (3×3 kernels only)"
        );
        ensure!(
            stride == 1 || stride == 2,
            "conv2d stride must be 1 or 2, got {stride}"
        );
        ensure!(pad <= 1, "conv2d pad must be 0 or 1, got {pad}");
        ensure!(
            xs[2] + 2 * pad >= 3 && xs[3] + 2 * pad >= 3,
            "conv2d input {xs:?} too small for a 3×3 kernel with pad {pad}"
        );
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ks[0],
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - 3) / stride + 1,
            out_w: (xs[3] + 2 * pad - 3) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(k), &geom, xs[0]);
        let shape = vec![xs[0], geom.filters, geom.out_h, geom.out_w];
        Ok(self.push(shape, out, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// Per-channel bias for `x[M,C,...]`, `b[C]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b));
        ensure!(
            xs.len() >= 2 && bs.len() == 1 && bs[0] == xs[1],
            "channel bias {bs:?} does not fit {xs:?}"
        );
        let plane: usize = xs[2..].iter().product();
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let c = bias[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        Ok(self.push(xs, out, Op::ChannelBias { x, b }, &[x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x }, &[x])
    }

    /// Mean over the spatial extents of `x[M,C,H,W]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 4, "global_avg_pool expects [M,C,H,W], got {xs:?}");
        let plane = xs[2] * xs[3];
        let out = self
            .value(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f32>() / plane as f32)
            .collect();
        Ok(self.push(vec![xs[0], xs[1]], out, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Divide each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f32) -> Result<Var> {
        ensure!(eps > 0.0, "l2_normalize eps must be positive, got {eps}");
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 2, "l2_normalize expects [M,D], got {xs:?}");
        let d = xs[1];
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(xs[0]);
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            let denom = n.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(n);
        }
        Ok(self.push(xs, out, Op::L2Normalize { x, eps, norms }, &[x]))
    }

    /// Row-wise inner products of two `[M,D]` tensors, giving `[M]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        ensure!(
            as_.len() == 2 && as_ == bs,
            "row_dot shapes differ: {as_:?} vs {bs:?}"
        );
        let (m, d) = (as_[0], as_[1]);
        let out = self
            .value(a)
            .chunks(d)
            .zip(self.value(b).chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(vec![m], out, Op::RowDot { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, c }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "add shapes differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "sub shapes differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub { a, b }, &[a, b]))
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f32>() / v.len() as f32;
        self.push(vec![1], vec![m], Op::Mean { x }, &[x])
    }

    /// Rows `start..start+len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(
            len > 0 && start + len <= xs[0],
            "row slice {start}..{} out of range for {xs:?}",
            start + len
        );
        let (_, cols) = rows_cols(&xs);
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let mut shape = xs;
        shape[0] = len;
        Ok(self.push(shape, out, Op::SliceRows { x, start }, &[x]))
    }

    /// Stack `a` on top of `b` along the first axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b));
        ensure!(
            as_.len() == bs.len() && as_[1..] == bs[1..],
            "concat_rows shapes differ beyond the first axis: {as_:?} vs {bs:?}"
        );
        let mut shape = as_;
        shape[0] += bs[0];
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        Ok(self.push(shape, out, Op::ConcatRows { a, b }, &[a, b]))
    }

    /// `out[m] = x[m, cols[m]]` for `x[M,N]`.
    pub fn gather_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(
            xs.len() == 2 && cols.len() == xs[0] && cols.iter().all(|&c| c < xs[1]),
            "gather_cols indices do not fit {xs:?}"
        );
        let v = self.value(x);
        let out = cols.iter().enumerate().map(|(m, &c)| v[m * xs[1] + c]).collect();
        Ok(self.push(vec![xs[0]], out, Op::GatherCols { x, cols }, &[x]))
    }

    /// `out[m] = log Σ_{j ≠ exclude[m]} exp(x[m,j])`, computed stably.
    pub fn row_logsumexp_except(&mut self, x: Var, exclude: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(
            xs.len() == 2 && exclude.len() == xs[0] && exclude.iter().all(|&c| c < xs[1]),
            "row_logsumexp_except exclusions do not fit {xs:?}"
        );
        ensure!(
            xs[1] >= 2,
            "row_logsumexp_except needs at least two columns, got {xs:?}"
        );
        let n = xs[1];
        let mut out = Vec::with_capacity(xs[0]);
        let mut probs = vec![0.0f32; xs[0] * n];
        for (m, row) in self.value(x).chunks(n).enumerate() {
            let ex = exclude[m];
            let mx = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != ex)
                .map(|(_, &v)| v)
                .fold(f32::NEG_INFINITY, f32::max);
            let p = &mut probs[m * n..(m + 1) * n];
            let mut s = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                if j != ex {
                    p[j] = (v - mx).exp();
                    s += p[j];
                }
            }
            p.iter_mut().for_each(|q| *q /= s);
            out.push(mx + s.ln());
        }
        Ok(self.push(
            vec![xs[0]],
            out,
            Op::RowLogSumExpExcept { x, probs },
            &[x],
        ))
    }

    /// Backpropagate from a one-element `loss`.
    pub fn backward(&mut self, loss: Var, params: &mut [Tensor]) -> Result<()> {
        ensure!(
            self.shape(loss).iter().product::<usize>() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        self.backward_from(loss, &[1.0], params)
    }

    /// Vector-Jacobian product: backpropagate `upstream` from `out`.
    ///
    /// Every registered parameter that requires a gradient ends up with a
    /// gradient buffer (zeros when unreachable). The tape is cleared.
    pub fn backward_from(&mut self, out: Var, upstream: &[f32], params: &mut [Tensor]) -> Result<()> {
        ensure!(self.grad_enabled, "backward on a graph built without gradients");
        ensure!(!self.nodes.is_empty(), "backward on an empty tape");
        ensure!(
            upstream.len() == self.nodes[out.0].value.len(),
            "upstream gradient length {} does not match output of shape {:?}",
            upstream.len(),
            self.nodes[out.0].shape
        );
        for n in &self.nodes {
            if let Op::Param(i) = n.op {
                ensure!(i < params.len(), "parameter index {i} out of range");
            }
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(upstream.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, params)?;
        }
        for n in &self.nodes {
            if let Op::Param(i) = n.op {
                if n.needs_grad && params[i].grad().is_none() {
                    params[i].accumulate_grad(&vec![0.0; n.value.len()])?;
                }
            }
        }
        self.nodes.clear();
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        params: &mut [Tensor],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, d: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(p) => params[*p].accumulate_grad(&g)?,
            Op::Affine { x, w, b } => {
                let (m, din) = rows_cols(self.shape(*x));
                let dout = self.shape(*w)[1];
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; m * din];
                    kernels::gemm(m, dout, din, &g, false, self.value(*w), true, 0.0, &mut dx);
                    send(*x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; din * dout];
                    kernels::gemm(din, m, dout, self.value(*x), true, &g, false, 0.0, &mut dw);
                    send(*w, dw);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    send(*b, db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = self.shape(*b)[0];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, &g, false, self.value(*b), false, 0.0, &mut da);
                    send(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; n * k];
                    kernels::gemm(n, m, k, &g, true, self.value(*a), false, 0.0, &mut db);
                    send(*b, db);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let batch = self.shape(*x)[0];
                if self.nodes[k.0].needs_grad {
                    send(
                        *k,
                        kernels::conv2d_backward_kernel(self.value(*x), &g, geom, batch),
                    );
                }
                if self.nodes[x.0].needs_grad {
                    send(
                        *x,
                        kernels::conv2d_backward_input(self.value(*k), &g, geom, batch),
                    );
                }
            }
            Op::ChannelBias { x, b } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let plane: usize = xs[2..].iter().product();
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; c];
                    for (j, chunk) in g.chunks(plane).enumerate() {
                        db[j % c] += chunk.iter().sum::<f32>();
                    }
                    send(*b, db);
                }
                send(*x, g);
            }
            Op::Relu { x } => {
                let d = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gv, &y)| if y > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*x, d);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let inv = 1.0 / plane as f32;
                let mut d = Vec::with_capacity(g.len() * plane);
                for gv in &g {
                    d.extend(std::iter::repeat_n(gv * inv, plane));
                }
                send(*x, d);
            }
            Op::L2Normalize { x, eps, norms } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = &node.value[r * d..(r + 1) * d];
                    let gy = &g[r * d..(r + 1) * d];
                    let out = &mut dx[r * d..(r + 1) * d];
                    if n > *eps {
                        let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] = (gy[j] - y[j] * dot) / n;
                        }
                    } else {
                        for j in 0..d {
                            out[j] = gy[j] / eps;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::RowDot { a, b } => {
                let d = self.shape(*a)[1];
                let expand = |other: &[f32]| -> Vec<f32> {
                    other
                        .chunks(d)
                        .zip(&g)
                        .flat_map(|(row, gv)| row.iter().map(move |v| v * gv))
                        .collect()
                };
                if self.nodes[a.0].needs_grad {
                    send(*a, expand(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, expand(self.value(*a)));
                }
            }
            Op::Scale { x, c } => send(*x, g.iter().map(|v| v * c).collect()),
            Op::Add { a, b } => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub { a, b } => {
                send(*b, g.iter().map(|v| -v).collect());
                send(*a, g);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len();
                send(*x, vec![g[0] / n as f32; n]);
            }
            Op::SliceRows { x, start } => {
                let (_, cols) = rows_cols(self.shape(*x));
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                d[start * cols..start * cols + g.len()].copy_from_slice(&g);
                send(*x, d);
            }
            Op::ConcatRows { a, b } => {
                let split = self.nodes[a.0].value.len();
                send(*b, g[split..].to_vec());
                send(*a, g[..split].to_vec());
            }
            Op::GatherCols { x, cols } => {
                let n = self.shape(*x)[1];
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for (m, &c) in cols.iter().enumerate() {
                    d[m * n + c] = g[m];
                }
                send(*x, d);
            }
            Op::RowLogSumExpExcept { x, probs } => {
                let n = self.shape(*x)[1];
                let d = probs
                    .chunks(n)
                    .zip(&g)
                    .flat_map(|(p, gv)| p.iter().map(move |q| q * gv))
                    .collect();
                send(*x, d);
            }
        }
        Ok(())
    }
}

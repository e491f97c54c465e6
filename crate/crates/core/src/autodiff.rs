//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every op appends a node whose inputs were recorded
//! earlier, so node order is already topological. [`Graph::backward`] walks
//! the tape once in reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Numerical floor applied inside logarithms.
pub const LOG_EPS: f64 = 1e-8;
/// Floor on row norms in [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var_unbiased: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Conv2d { x: Var, k: Var, geom: ConvGeometry, cols: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Gap(Var),
    Gmp { x: Var, argmax: Vec<usize> },
    ChannelScale(Var, Var),
    Upsample2x(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    L2Normalize { x: Var, norms: Vec<f64> },
    Softmax(Var),
    KlDiv { target: Var, input: Var, stop_target: bool },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    C3s { s: Var, sign: f64 },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{op} produced a non-finite value")))
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`;
    /// zero when `v` was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_vec(&shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = transpose2(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    /// `x[N×K] + b[K]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        if self.value(b).numel() != k {
            return Err(Error::dim(format!("bias of {} for {k} columns", self.value(b).numel())));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::from_vec(&[n, k], out), Op::AddRowBias(x, b), rg))
    }

    /// Zero-padded cross-correlation of `x[N×C×H×W]` with `k[C'×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (co, ci, kh, kw) = self.value(k).dims4()?;
        if ci != c {
            return Err(Error::dim(format!("conv2d: input has {c} channels, kernel expects {ci}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::dim(format!("conv2d: kernel {kh}x{kw} larger than padded {ph}x{pw}")));
        }
        let geom = ConvGeometry {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let locs = geom.locations();
        let mut out = vec![0.0; co * locs];
        kernels::gemm(co, geom.patch_len(), locs, self.value(k).data(), false, &cols, false, 0.0, &mut out);
        let plane = geom.out_h * geom.out_w;
        let y = kernels::channel_major_to_nchw(&out, n, co, plane);
        let rg = self.rg(&[x, k]);
        let value = Tensor::from_vec(&[n, co, geom.out_h, geom.out_w], y);
        Ok(self.push(value, Op::Conv2d { x, k, geom, cols }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Spatial mean: `[N×C×H×W] -> [N×C]`.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let plane = h * w;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&[n, c], data), Op::Gap(a), rg))
    }

    /// Spatial max: `[N×C×H×W] -> [N×C]`. Ties resolve to the first
    /// position in row-major order.
    pub fn gmp(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (i, p) in self.value(a).data().chunks(plane).enumerate() {
            let mut best = 0;
            for (j, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = j;
                }
            }
            data.push(p[best]);
            argmax.push(i * plane + best);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&[n, c], data), Op::Gmp { x: a, argmax }, rg))
    }

    /// `out[n,c,:,:] = u[n,c,:,:] * m[n,c]`.
    pub fn channel_scale(&mut self, u: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(u).dims4()?;
        if self.shape(m) != [n, c] {
            return Err(Error::dim(format!("channel_scale: gates {:?} for [{n}, {c}]", self.shape(m))));
        }
        let plane = h * w;
        let gates = self.value(m).data();
        let mut out = self.value(u).data().to_vec();
        for (p, &g) in out.chunks_mut(plane).zip(gates) {
            for v in p {
                *v *= g;
            }
        }
        let rg = self.rg(&[u, m]);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out), Op::ChannelScale(u, m), rg))
    }

    /// Bilinear ×2 upsampling with half-pixel sampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let out = kernels::resize_planes(self.value(a).data(), n * c, h, w, 2 * h, 2 * w);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&[n, c, 2 * h, 2 * w], out), Op::Upsample2x(a), rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(format!("batch_norm affine params do not match {c} channels")));
        }
        Ok((n, c, h * w))
    }

    /// Batch norm normalizing by the batch's own per-channel statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        let count = n * plane;
        if count < 2 {
            return Err(Error::contract(
                "train-mode batch norm needs at least two values per channel (degenerate variance)",
            ));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                mean[ci] += xs[(ni * c + ci) * plane..(ni * c + ci + 1) * plane].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for ni in 0..n {
            for ci in 0..c {
                let mu = mean[ci];
                var[ci] += xs[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
        }
        let var_unbiased: Vec<f64> = var.iter().map(|v| v / (count - 1) as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count as f64 + BN_EPS).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm running statistics do not match channels"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, &inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for j in off..off + plane {
                    xhat[j] = (xs[j] - mean[ci]) * inv_std[ci];
                    out[j] = g[ci] * xhat[j] + b[ci];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out);
        check_finite(&value, "batch_norm")?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), train };
        Ok(self.push(value, op, rg))
    }

    /// Divide each row by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(k) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&[n, k], out), Op::L2Normalize { x: a, norms }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let out = softmax_rows(self.value(a).data(), k);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&[n, k], out), Op::Softmax(a), rg))
    }

    /// Mean over rows of `KL(target‖input)`. With `stop_target` no gradient
    /// reaches `target`.
    pub fn kl_div(&mut self, target: Var, input: Var, stop_target: bool) -> Result<Var> {
        self.same_shape(target, input, "kl_div")?;
        let (n, k) = self.value(target).dims2()?;
        for (name, v) in [("target", target), ("input", input)] {
            check_distribution_rows(self.value(v).data(), k, name)?;
        }
        let t = self.value(target).data();
        let s = self.value(input).data();
        let total: f64 = t.iter().zip(s).map(|(&p, &q)| kl_term(p, q)).sum();
        let rg = if stop_target { self.rg(&[input]) } else { self.rg(&[target, input]) };
        Ok(self.push(Tensor::scalar(total / n as f64), Op::KlDiv { target, input, stop_target }, rg))
    }

    /// `−(1/N) Σₙ log max(probs[n, labelₙ], 1e-8)`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(probs).dims2()?;
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} outside [0, {k})")));
        }
        let p = self.value(probs).data();
        let total: f64 = labels.iter().enumerate().map(|(i, &l)| -p[i * k + l].max(LOG_EPS).ln()).sum();
        let rg = self.rg(&[probs]);
        let op = Op::CrossEntropy { probs, labels: labels.to_vec() };
        Ok(self.push(Tensor::scalar(total / n as f64), op, rg))
    }

    /// `½(‖S‖_F² − 2‖diag S‖²)` for a square `S`.
    pub fn c3s(&mut self, s: Var) -> Result<Var> {
        self.c3s_with_sign(s, 1.0)
    }

    /// [`Graph::c3s`] with a scaled backward rule. Only the verification
    /// suite's fault injection uses a sign other than `1.0`.
    #[doc(hidden)]
    pub fn c3s_with_sign(&mut self, s: Var, sign: f64) -> Result<Var> {
        let (p, q) = self.value(s).dims2()?;
        if p != q {
            return Err(Error::dim(format!("c3s needs a square matrix, got {p}x{q}")));
        }
        let d = self.value(s).data();
        let frob: f64 = d.iter().map(|v| v * v).sum();
        let diag: f64 = (0..p).map(|i| d[i * p + i] * d[i * p + i]).sum();
        let rg = self.rg(&[s]);
        Ok(self.push(Tensor::scalar(0.5 * (frob - 2.0 * diag)), Op::C3s { s, sign }, rg))
    }

    /// Column means: `[N×C] -> [1×C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let mut out = vec![0.0; k];
        for row in self.value(a).data().chunks(k) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&[1, k], out), Op::MeanRows(a), rg))
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenate matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let (n, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::dim(format!("concat_cols: {r} rows vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_vec(&[n, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows { x: a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Populate gradients of `root` with respect to every node that
    /// requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward root is not on this graph"));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&mut self, i: usize, gy: &[f64]) {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                out.push((*a, gy.iter().zip(vb).map(|(g, y)| g * y).collect()));
                out.push((*b, gy.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(a, s) => out.push((*a, gy.iter().map(|g| g * s).collect())),
            Op::Sum(a) => out.push((*a, vec![gy[0]; val(*a).len()])),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gy, false, val(*b), true, 0.0, &mut ga);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, gy, false, 0.0, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let t = transpose2(&Tensor::from_vec(s, gy.to_vec())).expect("matrix");
                out.push((*a, t.into_data()));
            }
            Op::AddRowBias(x, b) => {
                let k = val(*b).len();
                let mut gb = vec![0.0; k];
                for row in gy.chunks(k) {
                    for (o, g) in gb.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                out.push((*x, gy.to_vec()));
                out.push((*b, gb));
            }
            Op::Conv2d { x, k, geom, cols } => {
                let co = node.value.shape()[1];
                let plane = geom.out_h * geom.out_w;
                let dmat = kernels::nchw_to_channel_major(gy, geom.n, co, plane);
                let (pl, locs) = (geom.patch_len(), geom.locations());
                if needs(*k) {
                    let mut gk = vec![0.0; co * pl];
                    kernels::gemm(co, locs, pl, &dmat, false, cols, true, 0.0, &mut gk);
                    out.push((*k, gk));
                }
                if needs(*x) {
                    let mut dcols = vec![0.0; pl * locs];
                    kernels::gemm(pl, co, locs, val(*k), true, &dmat, false, 0.0, &mut dcols);
                    out.push((*x, kernels::col2im(&dcols, geom)));
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                out.push((*a, gy.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                out.push((*a, gy.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Gap(a) => {
                let len = val(*a).len();
                let plane = len / gy.len();
                let mut ga = vec![0.0; len];
                for (p, g) in ga.chunks_mut(plane).zip(gy) {
                    p.fill(g / plane as f64);
                }
                out.push((*a, ga));
            }
            Op::Gmp { x, argmax } => {
                let mut ga = vec![0.0; val(*x).len()];
                for (&idx, g) in argmax.iter().zip(gy) {
                    ga[idx] += g;
                }
                out.push((*x, ga));
            }
            Op::ChannelScale(u, m) => {
                let (uu, mm) = (val(*u), val(*m));
                let plane = uu.len() / mm.len();
                let mut gu = vec![0.0; uu.len()];
                let mut gm = vec![0.0; mm.len()];
                for (j, gate) in mm.iter().enumerate() {
                    let r = j * plane..(j + 1) * plane;
                    for ((d, g), x) in gu[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&uu[r]) {
                        *d = g * gate;
                        gm[j] += g * x;
                    }
                }
                out.push((*u, gu));
                out.push((*m, gm));
            }
            Op::Upsample2x(a) => {
                let s = self.nodes[a.0].value.shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                out.push((*a, kernels::resize_planes_adjoint(gy, n * c, h, w, 2 * h, 2 * w)));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = node.value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let g = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        for j in off..off + plane {
                            dgamma[ci] += gy[j] * xhat[j];
                            dbeta[ci] += gy[j];
                            let dxh = gy[j] * g[ci];
                            sum_dxhat[ci] += dxh;
                            sum_dxhat_xhat[ci] += dxh * xhat[j];
                        }
                    }
                }
                if needs(*x) {
                    let m = (n * plane) as f64;
                    let mut dx = vec![0.0; gy.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for j in off..off + plane {
                                let dxh = gy[j] * g[ci];
                                dx[j] = if *train {
                                    inv_std[ci] / m * (m * dxh - sum_dxhat[ci] - xhat[j] * sum_dxhat_xhat[ci])
                                } else {
                                    dxh * inv_std[ci]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let k = y.len() / norms.len();
                let xs = val(*x);
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * k..(r + 1) * k;
                    let raw = xs[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw > NORM_EPS {
                        let dot: f64 = y[span.clone()].iter().zip(&gy[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            dx[j] = (gy[j] - y[j] * dot) / norm;
                        }
                    } else {
                        for j in span {
                            dx[j] = gy[j] / norm;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for ((d, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(gy.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        d[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, dx));
            }
            Op::KlDiv { target, input, stop_target } => {
                let (t, s) = (val(*target), val(*input));
                let n = self.nodes[target.0].value.shape()[0] as f64;
                let scale = gy[0] / n;
                if !stop_target {
                    let dt = t
                        .iter()
                        .zip(s)
                        .map(|(&p, &q)| if p > 0.0 { scale * (p.ln() - q.max(LOG_EPS).ln() + 1.0) } else { 0.0 })
                        .collect();
                    out.push((*target, dt));
                }
                let ds = t
                    .iter()
                    .zip(s)
                    .map(|(&p, &q)| if q > LOG_EPS { -scale * p / q } else { 0.0 })
                    .collect();
                out.push((*input, ds));
            }
            Op::CrossEntropy { probs, labels } => {
                let p = val(*probs);
                let k = p.len() / labels.len();
                let scale = gy[0] / labels.len() as f64;
                let mut dp = vec![0.0; p.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let v = p[i * k + l];
                    if v > LOG_EPS {
                        dp[i * k + l] = -scale / v;
                    }
                }
                out.push((*probs, dp));
            }
            Op::C3s { s, sign } => {
                let d = val(*s);
                let p = self.nodes[s.0].value.shape()[0];
                let mut ds: Vec<f64> = d.iter().map(|v| sign * gy[0] * v).collect();
                for j in 0..p {
                    ds[j * p + j] -= sign * gy[0] * 2.0 * d[j * p + j];
                }
                out.push((*s, ds));
            }
            Op::MeanRows(a) => {
                let len = val(*a).len();
                let k = gy.len();
                let n = (len / k) as f64;
                let ga = (0..len).map(|j| gy[j % k] / n).collect();
                out.push((*a, ga));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    out.push((p, gy[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let mut gp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        gp.extend_from_slice(&gy[r * total + col..r * total + col + w]);
                    }
                    out.push((p, gp));
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let len = val(*x).len();
                let inner = gy.len() / node.value.shape()[0];
                let mut gx = vec![0.0; len];
                gx[start * inner..start * inner + gy.len()].copy_from_slice(gy);
                out.push((*x, gx));
            }
            Op::Reshape(a) => out.push((*a, gy.to_vec())),
        }
        for (v, g) in out {
            self.accum(v, g);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise stable softmax of a flat `[rows × k]` buffer.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// One `p·log(p/q)` term with `0·log 0 = 0` and `q` floored at 1e-8.
pub fn kl_term(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p.ln() - q.max(LOG_EPS).ln())
    } else {
        0.0
    }
}

fn check_distribution_rows(d: &[f64], k: usize, name: &str) -> Result<()> {
    for (r, row) in d.chunks(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::contract(format!("kl_div {name} row {r} is not a distribution (sum {sum})")));
        }
    }
    Ok(())
}

fn transpose2(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Tensor::from_vec(&[c, r], out))
}

//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; [`Graph::backward`] walks the
//! tape once in reverse, so recording order is the topological order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig { eps: 1e-5, momentum: 0.1 }
    }
}

/// Batch-norm running statistics, updated only by train-mode forwards.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Sigmoid,
    LeakyRelu(f64),
}

impl Activation {
    /// Leaky ReLU with the 0.1 negative slope used by the reduction heads.
    pub const LEAKY: Activation = Activation::LeakyRelu(0.1);

    pub fn apply<T: Scalar>(self, t: T) -> T {
        match self {
            Activation::Relu => t.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-t).exp()),
            Activation::LeakyRelu(slope) => {
                if t >= T::zero() {
                    t
                } else {
                    T::lit(slope) * t
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over the batch.
    #[default]
    Sum,
    /// Sum divided by the batch size.
    Mean,
}

/// Deliberate backward corruptions, used to prove the gradient checker bites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvBackwardSign,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, arg: Vec<usize> },
    Gap { x: Var, plane: usize },
    Pointwise { x: Var, kind: Activation },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool, n: usize, c: usize, plane: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Add { a: Var, b: Var },
    ChannelScale { y: Var, s: Var, plane: usize },
    Reshape { x: Var },
    SoftmaxLoss { logits: Var, labels: Vec<usize>, probs: Vec<T>, scale: T },
    Sum { xs: Vec<Var> },
    Scale { x: Var, factor: T },
    WeightedSum { x: Var, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of recorded operations. Confined to one thread; drop it after backward.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), fault: None }
    }

    /// Graph whose backward pass is deliberately corrupted.
    pub fn with_fault(fault: Fault) -> Self {
        Graph { fault: Some(fault), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Constant input, no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, cin_w, kh, kw) = self.value(w).dims4()?;
        if cin != cin_w {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {cin_w}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("{h}x{wd} input (pad {pad}) smaller than {kh}x{kw} kernel")));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv2d", "bias length differs from output channels"));
            }
        }
        let geom = ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad };
        let (ho, wo) = geom.out_hw();
        let mut out = vec![T::zero(); n * cout * ho * wo];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        finite("conv2d", &out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![n, cout, ho, wo], out)?, rg, Op::Conv { x, w, b, geom }))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if stride == 0 || k == 0 {
            return Err(Error::shape("max_pool", "kernel and stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("max_pool", format!("{h}x{w} input (pad {pad}) smaller than window {k}")));
        }
        if 2 * pad > k {
            return Err(Error::shape("max_pool", "padding larger than half the window"));
        }
        let geom = PoolGeom { planes: n * c, h, w, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let arg = kernels::max_pool_forward(&geom, self.value(x).data(), &mut out);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], out)?, rg, Op::MaxPool { x, arg }))
    }

    /// Global average pooling, N×C×H×W → N×C.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("gap", "empty spatial extent"));
        }
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let out: Vec<T> = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, rg, Op::Gap { x, plane }))
    }

    pub fn pointwise(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let out = self.value(x).map(|t| kind.apply(t));
        finite("pointwise", out.data())?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Pointwise { x, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Activation::Sigmoid, x)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Activation::LEAKY, x)
    }

    /// Per-channel batch normalization over N, H, W.
    ///
    /// Train mode normalizes with batch statistics and folds them into `stats`
    /// (unbiased variance); eval mode reads `stats` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, plane) = match shape[..] {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(Error::shape("batch_norm", format!("expected 2-D or 4-D input, got {shape:?}"))),
        };
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || stats.channels() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels vs parameter length mismatch")));
        }
        let train = mode == Mode::Train;
        let (mean, var) = if train {
            let count = n * plane;
            if count < 2 {
                return Err(Error::DegenerateBatch(count));
            }
            let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, plane);
            let mom = T::lit(cfg.momentum);
            let unbias = T::lit(count as f64 / (count - 1) as f64);
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let eps = T::lit(cfg.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gd[ch] * h + bd[ch];
                }
            }
        }
        finite("batch_norm", &out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, n, c, plane },
        ))
    }

    /// `x·Wᵀ + b` with `x: N×D`, `W: D′×D`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, din) = self.value(x).dims2()?;
        let (dout, din_w) = self.value(w).dims2()?;
        if din != din_w {
            return Err(Error::shape("linear", format!("input width {din}, weight expects {din_w}")));
        }
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(Error::shape("linear", "bias length differs from output width"));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); rows * dout];
        for r in 0..rows {
            let xr = &xd[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                let mut acc = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
                if let Some(bd) = bd {
                    acc += bd[o];
                }
                out[r * dout + o] = acc;
            }
        }
        finite("linear", &out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![rows, dout], out)?, rg, Op::Linear { x, w, b, rows, din, dout }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        finite("add", &out)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add { a, b }))
    }

    /// Multiplies channel `c` of sample `n` in `y` (N×C×H×W) by `s[n, c]` (N×C).
    pub fn channel_scale(&mut self, y: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(y).dims4()?;
        if self.value(s).shape() != [n, c] {
            return Err(Error::shape(
                "channel_scale",
                format!("gate {:?} does not match {n}x{c}", self.value(s).shape()),
            ));
        }
        let plane = h * w;
        let sd = self.value(s).data();
        let mut out = self.value(y).data().to_vec();
        for (p, chunk) in out.chunks_mut(plane.max(1)).enumerate().take(n * c) {
            chunk.iter_mut().for_each(|v| *v *= sd[p]);
        }
        finite("channel_scale", &out)?;
        let rg = self.rg(y) || self.rg(s);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, rg, Op::ChannelScale { y, s, plane }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// Softmax log-loss of `logits` (B×C) against integer labels, max-subtracted.
    pub fn softmax_log_loss(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::shape("softmax_log_loss", format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &ld[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - m).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[i * c + j] = (v - m).exp() / denom;
            }
            total += m + denom.ln() - row[y];
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::lit(b as f64),
        };
        let value = total * scale;
        finite("softmax_log_loss", &[value])?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(value), rg, Op::SoftmaxLoss { logits, labels: labels.to_vec(), probs, scale }))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("sum", "nothing to sum"));
        }
        let mut total = T::zero();
        for &x in xs {
            if self.value(x).numel() != 1 {
                return Err(Error::shape("sum", "operands must be scalars"));
            }
            total += self.value(x).data()[0];
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::scalar(total), rg, Op::Sum { xs: xs.to_vec() }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        finite("scale", out.data())?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Scale { x, factor }))
    }

    /// `Σ x ⊙ weights`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.numel() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum", "weights length mismatch"));
        }
        let total: T = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), rg, Op::WeightedSum { x, weights: weights.data().to_vec() }))
    }

    /// Hash of every piecewise-linear branch decision on the tape: ReLU and
    /// leaky-ReLU input signs and max-pool winners. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Pointwise { x, kind: Activation::Relu | Activation::LeakyRelu(_) } => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { arg, .. } => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Populates gradients of the scalar `root` for every node that requires one.
    /// Fan-out accumulates additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Backward("root was not recorded in this graph".into()));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        let fault = self.fault;
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                backprop(&self.nodes, &mut self.grads, node, &g, fault)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Pulls a gradient buffer out of the table (zeroed on first touch), or `None`
/// when `v` does not require a gradient.
fn take_grad<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]))
}

fn put_grad<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if g.is_some() {
        grads[v.0] = g;
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    if let Some(mut buf) = take_grad(nodes, grads, v) {
        f(&mut buf);
        grads[v.0] = Some(buf);
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    node: &Node<T>,
    g: &[T],
    fault: Option<Fault>,
) -> Result<()> {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv { x, w, b, geom } => {
            let mut dx = take_grad(nodes, grads, *x);
            let mut dw = take_grad(nodes, grads, *w);
            let mut db = b.and_then(|b| take_grad(nodes, grads, b));
            let before = if fault == Some(Fault::ConvBackwardSign) { dx.clone() } else { None };
            kernels::conv2d_backward(geom, val(*x), val(*w), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            if let (Some(dx), Some(before)) = (dx.as_mut(), before) {
                {
                    // flip the sign of this op's own contribution only
                    for (d, b0) in dx.iter_mut().zip(before) {
                        *d = b0 - (*d - b0);
                    }
                }
            }
            put_grad(grads, *x, dx);
            put_grad(grads, *w, dw);
            if let Some(b) = b {
                put_grad(grads, *b, db);
            }
        }
        Op::MaxPool { x, arg } => accumulate(nodes, grads, *x, |dx| {
            for (&gi, &src) in g.iter().zip(arg) {
                dx[src] += gi;
            }
        }),
        Op::Gap { x, plane } => {
            let inv = T::one() / T::lit(*plane as f64);
            accumulate(nodes, grads, *x, |dx| {
                for (p, chunk) in dx.chunks_mut(*plane).enumerate() {
                    let gp = g[p] * inv;
                    chunk.iter_mut().for_each(|d| *d += gp);
                }
            })
        }
        Op::Pointwise { x, kind } => {
            let xs = val(*x);
            let ys = node.value.data();
            accumulate(nodes, grads, *x, |dx| {
                for i in 0..dx.len() {
                    let local = match kind {
                        Activation::Relu => {
                            if xs[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Sigmoid => ys[i] * (T::one() - ys[i]),
                        Activation::LeakyRelu(slope) => {
                            if xs[i] >= T::zero() {
                                T::one()
                            } else {
                                T::lit(*slope)
                            }
                        }
                    };
                    dx[i] += g[i] * local;
                }
            })
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, n, c, plane } => {
            let (n, c, plane) = (*n, *c, *plane);
            let gd = val(*gamma);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * plane;
                    for j in off..off + plane {
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat[j];
                    }
                }
            }
            accumulate(nodes, grads, *gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s));
            accumulate(nodes, grads, *beta, |d| d.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s));
            let m = T::lit((n * plane) as f64);
            accumulate(nodes, grads, *x, |dx| {
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        let k = gd[ch] * inv_std[ch];
                        for j in off..off + plane {
                            if *train {
                                dx[j] += k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m);
                            } else {
                                dx[j] += k * g[j];
                            }
                        }
                    }
                }
            })
        }
        Op::Linear { x, w, b, rows, din, dout } => {
            let (rows, din, dout) = (*rows, *din, *dout);
            let xs = val(*x);
            let ws = val(*w);
            accumulate(nodes, grads, *x, |dx| {
                for r in 0..rows {
                    for o in 0..dout {
                        let go = g[r * dout + o];
                        let wr = &ws[o * din..(o + 1) * din];
                        for (d, &wv) in dx[r * din..(r + 1) * din].iter_mut().zip(wr) {
                            *d += go * wv;
                        }
                    }
                }
            });
            accumulate(nodes, grads, *w, |dw| {
                for r in 0..rows {
                    let xr = &xs[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let go = g[r * dout + o];
                        for (d, &xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                            *d += go * xv;
                        }
                    }
                }
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |db| {
                    for r in 0..rows {
                        for o in 0..dout {
                            db[o] += g[r * dout + o];
                        }
                    }
                });
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
        }
        Op::ChannelScale { y, s, plane } => {
            let plane = (*plane).max(1);
            let ys = val(*y);
            let ss = val(*s);
            accumulate(nodes, grads, *y, |dy| {
                for (p, (chunk, gch)) in dy.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
                    chunk.iter_mut().zip(gch).for_each(|(d, &gi)| *d += gi * ss[p]);
                }
            });
            accumulate(nodes, grads, *s, |ds| {
                for (p, d) in ds.iter_mut().enumerate() {
                    let off = p * plane;
                    *d += g[off..off + plane].iter().zip(&ys[off..off + plane]).map(|(&a, &b)| a * b).sum::<T>();
                }
            });
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi)),
        Op::SoftmaxLoss { logits, labels, probs, scale } => {
            let c = probs.len() / labels.len().max(1);
            let k = g[0] * *scale;
            accumulate(nodes, grads, *logits, |d| {
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        d[i * c + j] += k * (probs[i * c + j] - onehot);
                    }
                }
            })
        }
        Op::Sum { xs } => {
            for &x in xs {
                accumulate(nodes, grads, x, |d| d[0] += g[0]);
            }
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *factor))
        }
        Op::WeightedSum { x, weights } => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().zip(weights).for_each(|(d, &w)| *d += g[0] * w))
        }
    }
    Ok(())
}

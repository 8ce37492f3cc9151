//! Composite building blocks: squeeze-and-excitation, residual bottleneck,
//! SE-Res module, reduction head and classifier head.

use rand::Rng;

use crate::autograd::{BnConfig, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::params::{init_params, InitKind, NamedStats, ParamId, ParamStore, StatsId};
use crate::scalar::Scalar;

/// Everything a block needs to run a forward pass on a graph.
pub struct Ctx<'a, T> {
    pub graph: &'a mut Graph<T>,
    /// Graph leaves for every parameter, indexed by [`ParamId`].
    pub vars: &'a [Var],
    pub stats: &'a mut [NamedStats<T>],
    pub mode: Mode,
    pub bn: BnConfig,
}

impl<T: Scalar> Ctx<'_, T> {
    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        let stats = &mut ctx.stats[self.stats.0].stats;
        ctx.graph.batch_norm(x, g, b, stats, ctx.mode, ctx.bn)
    }
}

/// Excitation weights: `reduce` is (C/r)×C, `expand` is C×(C/r). No biases.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub reduce: ParamId,
    pub expand: ParamId,
    pub channels: usize,
    pub ratio: usize,
}

/// Residual bottleneck: 1×1 reduce (carries the stride), 3×3, 1×1 expand, each
/// followed by batch norm, plus an optional projection skip.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub conv3: Conv,
    pub bn3: BatchNorm,
    pub projection: Option<(Conv, BatchNorm)>,
}

/// A residual module, optionally recalibrated by an SE block (an SE-Res module).
#[derive(Clone, Debug)]
pub struct Block {
    pub body: Bottleneck,
    pub se: Option<SeBlock>,
}

impl Block {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.se {
            Some(se) => se_res_module(ctx, x, &self.body, se),
            None => bottleneck(ctx, x, &self.body),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReductionHead {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub in_channels: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Gate vector `s = σ(W2·δ(W1·gap(Y)))`, shape N×C.
pub fn se_gate<T: Scalar>(ctx: &mut Ctx<'_, T>, y: Var, p: &SeBlock) -> Result<Var> {
    let z = ctx.graph.gap(y)?;
    let (w1, w2) = (ctx.var(p.reduce), ctx.var(p.expand));
    let hidden = ctx.graph.linear(z, w1, None)?;
    let hidden = ctx.graph.relu(hidden)?;
    let logits = ctx.graph.linear(hidden, w2, None)?;
    ctx.graph.sigmoid(logits)
}

/// Squeeze, excite, and rescale each channel of `y` by its gate.
pub fn se_block<T: Scalar>(ctx: &mut Ctx<'_, T>, y: Var, p: &SeBlock) -> Result<Var> {
    let (_, c, _, _) = ctx.graph.value(y).dims4()?;
    if c != p.channels {
        return Err(Error::shape("se_block", format!("block built for {} channels, got {c}", p.channels)));
    }
    let s = se_gate(ctx, y, p)?;
    ctx.graph.channel_scale(y, s)
}

/// The residual function `F_res(X)` without the skip connection.
pub fn residual_path<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: &Bottleneck) -> Result<Var> {
    let h = p.conv1.forward(ctx, x)?;
    let h = p.bn1.forward(ctx, h)?;
    let h = ctx.graph.relu(h)?;
    let h = p.conv2.forward(ctx, h)?;
    let h = p.bn2.forward(ctx, h)?;
    let h = ctx.graph.relu(h)?;
    let h = p.conv3.forward(ctx, h)?;
    p.bn3.forward(ctx, h)
}

fn skip<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: &Bottleneck) -> Result<Var> {
    match &p.projection {
        Some((conv, bn)) => {
            let s = conv.forward(ctx, x)?;
            bn.forward(ctx, s)
        }
        None => Ok(x),
    }
}

fn merge<T: Scalar>(ctx: &mut Ctx<'_, T>, y: Var, s: Var) -> Result<Var> {
    if ctx.graph.value(y).shape() != ctx.graph.value(s).shape() {
        return Err(Error::shape(
            "residual add",
            format!("residual {:?} vs skip {:?}", ctx.graph.value(y).shape(), ctx.graph.value(s).shape()),
        ));
    }
    let sum = ctx.graph.add(y, s)?;
    ctx.graph.relu(sum)
}

/// `δ(F_res(X) + skip(X))`.
pub fn bottleneck<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: &Bottleneck) -> Result<Var> {
    let y = residual_path(ctx, x, p)?;
    let s = skip(ctx, x, p)?;
    merge(ctx, y, s)
}

/// `o_c = δ(s_c·y_c + x_c)`: the residual output is recalibrated before the skip add.
pub fn se_res_module<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: &Bottleneck, q: &SeBlock) -> Result<Var> {
    let y = residual_path(ctx, x, p)?;
    let y = se_block(ctx, y, q)?;
    let s = skip(ctx, x, p)?;
    merge(ctx, y, s)
}

/// N×C×1×1 pooled map → N×width retrieval feature (conv, batch norm, leaky ReLU).
pub fn reduction_head<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: &ReductionHead) -> Result<Var> {
    let shape = ctx.graph.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != p.in_channels || shape[2] != 1 || shape[3] != 1 {
        return Err(Error::shape(
            "reduction_head",
            format!("expected N×{}×1×1, got {shape:?}", p.in_channels),
        ));
    }
    let h = p.conv.forward(ctx, x)?;
    let h = p.bn.forward(ctx, h)?;
    let h = ctx.graph.leaky_relu(h)?;
    ctx.graph.reshape(h, &[shape[0], p.width])
}

/// Identity logits `Wᵀf + b`.
pub fn classifier_head<T: Scalar>(ctx: &mut Ctx<'_, T>, f: Var, p: &Classifier) -> Result<Var> {
    let (w, b) = (ctx.var(p.weight), ctx.var(p.bias));
    ctx.graph.linear(f, w, Some(b))
}

/// Allocates and initializes block parameters into a [`ParamStore`].
pub struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    /// Marks everything built from here on as a new (boosted learning-rate) parameter.
    pub new_params: bool,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let value = init_params(InitKind::Weight { fan_in }, shape, self.rng);
        self.store.add(name, value, self.new_params)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Result<Conv> {
        let weight = self.weight(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k)?;
        let bias = if bias {
            let b = init_params(InitKind::Bias, &[cout], self.rng);
            Some(self.store.add(format!("{name}.bias"), b, self.new_params)?)
        } else {
            None
        };
        Ok(Conv { weight, bias, stride, pad })
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        let gamma = init_params(InitKind::Gamma, &[c], self.rng);
        let beta = init_params(InitKind::Beta, &[c], self.rng);
        Ok(BatchNorm {
            gamma: self.store.add(format!("{name}.gamma"), gamma, self.new_params)?,
            beta: self.store.add(format!("{name}.beta"), beta, self.new_params)?,
            stats: self.store.add_stats(name, c)?,
        })
    }

    pub fn se(&mut self, name: &str, channels: usize, ratio: usize) -> Result<SeBlock> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Config(format!("SE ratio {ratio} does not divide {channels} channels")));
        }
        let hidden = channels / ratio;
        Ok(SeBlock {
            reduce: self.weight(&format!("{name}.reduce.weight"), &[hidden, channels], channels)?,
            expand: self.weight(&format!("{name}.expand.weight"), &[channels, hidden], hidden)?,
            channels,
            ratio,
        })
    }

    /// Bottleneck with inner width `cout / 4`; `se_ratio` turns it into an SE-Res module.
    pub fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize, se_ratio: Option<usize>) -> Result<Block> {
        if !cout.is_multiple_of(4) || cout == 0 {
            return Err(Error::Config(format!("bottleneck output width {cout} must be a positive multiple of 4")));
        }
        let width = cout / 4;
        let projection = if cin != cout || stride != 1 {
            Some((
                self.conv(&format!("{name}.projection.conv"), cin, cout, 1, stride, 0, false)?,
                self.batch_norm(&format!("{name}.projection.bn"), cout)?,
            ))
        } else {
            None
        };
        let body = Bottleneck {
            conv1: self.conv(&format!("{name}.conv1"), cin, width, 1, stride, 0, false)?,
            bn1: self.batch_norm(&format!("{name}.bn1"), width)?,
            conv2: self.conv(&format!("{name}.conv2"), width, width, 3, 1, 1, false)?,
            bn2: self.batch_norm(&format!("{name}.bn2"), width)?,
            conv3: self.conv(&format!("{name}.conv3"), width, cout, 1, 1, 0, false)?,
            bn3: self.batch_norm(&format!("{name}.bn3"), cout)?,
            projection,
        };
        let se = match se_ratio {
            Some(r) => Some(self.se(&format!("{name}.se"), cout, r)?),
            None => None,
        };
        Ok(Block { body, se })
    }

    pub fn reduction(&mut self, name: &str, cin: usize, width: usize) -> Result<ReductionHead> {
        Ok(ReductionHead {
            conv: self.conv(&format!("{name}.conv"), cin, width, 1, 1, 0, false)?,
            bn: self.batch_norm(&format!("{name}.bn"), width)?,
            in_channels: cin,
            width,
        })
    }

    pub fn classifier(&mut self, name: &str, width: usize, classes: usize) -> Result<Classifier> {
        let weight = self.weight(&format!("{name}.weight"), &[classes, width], width)?;
        let bias = init_params(InitKind::Bias, &[classes], self.rng);
        Ok(Classifier { weight, bias: self.store.add(format!("{name}.bias"), bias, self.new_params)? })
    }
}

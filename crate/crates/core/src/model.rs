//! Network assembly: shared backbone, parallel branches, and the reduction and
//! classification heads tapped from the high-level layers of every branch.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnConfig, Graph, Mode, Reduction, Var};
use crate::blocks::{classifier_head, reduction_head, BatchNorm, Block, Builder, Classifier, Conv, Ctx, ReductionHead};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    /// Plain residual bottlenecks.
    Res,
    /// Bottlenecks recalibrated by squeeze-and-excitation.
    SeRes,
}

/// Which layers of each branch feed a reduction + classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPlacement {
    /// Last block of stage 4 and every block of stage 5.
    MultiLevel,
    /// Last block of stage 4 and last block of stage 5.
    TwoLevel,
    /// Last block of stage 5 only.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input (height, width) in pixels.
    pub input_hw: [usize; 2],
    /// Channels of the 7×7 stem convolution.
    pub stem_width: usize,
    /// Output widths of stages 2, 3, 4 and 5.
    pub stage_widths: [usize; 4],
    /// Blocks in stages 2, 3, 4 and 5.
    pub stage_blocks: [usize; 4],
    pub stage5_stride: usize,
    pub branches: Vec<BranchKind>,
    pub heads: HeadPlacement,
    pub num_classes: usize,
    pub feature_width: usize,
    pub se_ratio: usize,
    pub bn: BnConfig,
}

impl ModelConfig {
    /// Full ResNet-50-sized network at 384×192.
    pub fn paper(num_classes: usize) -> Self {
        ModelConfig {
            input_hw: [384, 192],
            stem_width: 64,
            stage_widths: [256, 512, 1024, 2048],
            stage_blocks: [3, 4, 6, 3],
            stage5_stride: 2,
            branches: vec![BranchKind::Res, BranchKind::SeRes],
            heads: HeadPlacement::MultiLevel,
            num_classes,
            feature_width: 256,
            se_ratio: 16,
            bn: BnConfig::default(),
        }
    }

    /// Desk-scale network at 128×64 with every mechanism kept.
    pub fn nano(num_classes: usize) -> Self {
        ModelConfig {
            input_hw: [128, 64],
            stem_width: 16,
            stage_widths: [32, 64, 128, 256],
            stage_blocks: [1, 1, 2, 2],
            stage5_stride: 2,
            branches: vec![BranchKind::Res, BranchKind::SeRes],
            heads: HeadPlacement::MultiLevel,
            num_classes,
            feature_width: 32,
            se_ratio: 4,
            bn: BnConfig::default(),
        }
    }

    pub fn heads_per_branch(&self) -> usize {
        match self.heads {
            HeadPlacement::MultiLevel => 1 + self.stage_blocks[3],
            HeadPlacement::TwoLevel => 2,
            HeadPlacement::Last => 1,
        }
    }

    /// Number of reduction + classifier heads, K.
    pub fn num_heads(&self) -> usize {
        self.branches.len() * self.heads_per_branch()
    }

    /// Length of the concatenated retrieval feature.
    pub fn feature_len(&self) -> usize {
        self.num_heads() * self.feature_width
    }

    /// Spatial extents after the stem and after each of stages 2..5.
    pub fn stage_hw(&self) -> [[usize; 2]; 5] {
        let conv = |x: usize, k: usize, s: usize, p: usize| (x + 2 * p).saturating_sub(k) / s + 1;
        let [mut h, mut w] = self.input_hw;
        h = conv(conv(h, 7, 2, 3), 3, 2, 1);
        w = conv(conv(w, 7, 2, 3), 3, 2, 1);
        let mut out = [[h, w]; 5];
        for (i, stride) in [1, 2, 2, self.stage5_stride].into_iter().enumerate() {
            h = conv(h, 1, stride, 0);
            w = conv(w, 1, stride, 0);
            out[i + 1] = [h, w];
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_hw.iter().any(|&d| d < 8) {
            return bad(format!("input {:?} too small", self.input_hw));
        }
        if self.stem_width == 0 || self.feature_width == 0 || self.num_classes == 0 {
            return bad("stem width, feature width and class count must be positive".into());
        }
        if let Some(w) = self.stage_widths.iter().find(|&&w| w == 0 || w % 4 != 0) {
            return bad(format!("stage width {w} is not a positive multiple of 4"));
        }
        if self.stage_blocks.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if !matches!(self.stage5_stride, 1 | 2) {
            return bad(format!("stage-5 stride must be 1 or 2, got {}", self.stage5_stride));
        }
        if self.branches.is_empty() {
            return bad("at least one branch is required".into());
        }
        if self.branches.contains(&BranchKind::SeRes) {
            for &w in &self.stage_widths[2..] {
                if self.se_ratio == 0 || w % self.se_ratio != 0 {
                    return bad(format!("SE ratio {} does not divide width {w}", self.se_ratio));
                }
            }
        }
        if !(self.bn.eps >= 0.0 && (0.0..=1.0).contains(&self.bn.momentum)) {
            return bad("batch-norm eps must be >= 0 and momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Branch names in order: `res`, `seres`, then `res2`, `seres2`, ... for repeats.
    pub fn branch_names(&self) -> Vec<String> {
        let mut seen = [0usize; 2];
        self.branches
            .iter()
            .map(|k| {
                let (slot, base) = match k {
                    BranchKind::Res => (0, "res"),
                    BranchKind::SeRes => (1, "seres"),
                };
                seen[slot] += 1;
                if seen[slot] == 1 {
                    base.to_string()
                } else {
                    format!("{base}{}", seen[slot])
                }
            })
            .collect()
    }

    /// Head tags of one branch, e.g. `4f, 5a, 5b, 5c` at full depth.
    pub fn head_tags(&self) -> Vec<String> {
        let letter = |i: usize| (b'a' + i as u8) as char;
        let last4 = format!("4{}", letter(self.stage_blocks[2] - 1));
        let last5 = format!("5{}", letter(self.stage_blocks[3] - 1));
        match self.heads {
            HeadPlacement::MultiLevel => std::iter::once(last4)
                .chain((0..self.stage_blocks[3]).map(|i| format!("5{}", letter(i))))
                .collect(),
            HeadPlacement::TwoLevel => vec![last4, last5],
            HeadPlacement::Last => vec![last5],
        }
    }
}

/// True for parameters trained with the boosted learning rate: the SE-Res
/// branch and every reduction/classifier head.
pub fn is_new_param(name: &str) -> bool {
    name.starts_with("seres") || name.starts_with("head.")
}

#[derive(Clone, Debug)]
struct Head {
    /// Stage index within the branch (0 = stage 4, 1 = stage 5) and block index.
    tap: (usize, usize),
    reduction: ReductionHead,
    classifier: Classifier,
}

#[derive(Clone, Debug)]
struct Branch {
    stages: [Vec<Block>; 2],
    heads: Vec<Head>,
}

/// Outputs of one forward pass, heads in fixed order (branch order, then tap order).
pub struct Forward {
    pub logits: Vec<Var>,
    pub features: Vec<Var>,
    /// Graph leaves of every parameter, indexed like the parameter store.
    pub params: Vec<Var>,
}

pub struct Model<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    stem: (Conv, BatchNorm),
    backbone: Vec<Block>,
    branches: Vec<Branch>,
    mode: Mode,
}

impl<T: Scalar> Model<T> {
    pub fn build<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng, new_params: false };
        let stem = (
            b.conv("backbone.conv1", 3, cfg.stem_width, 7, 2, 3, false)?,
            b.batch_norm("backbone.bn1", cfg.stem_width)?,
        );
        let mut backbone = Vec::new();
        let mut cin = cfg.stem_width;
        for (stage, stride) in [(0usize, 1usize), (1, 2)] {
            for i in 0..cfg.stage_blocks[stage] {
                let name = format!("backbone.layer{}.{i}", stage + 2);
                let s = if i == 0 { stride } else { 1 };
                backbone.push(b.block(&name, cin, cfg.stage_widths[stage], s, None)?);
                cin = cfg.stage_widths[stage];
            }
        }
        let tags = cfg.head_tags();
        let taps: Vec<(usize, usize)> = match cfg.heads {
            HeadPlacement::MultiLevel => std::iter::once((0, cfg.stage_blocks[2] - 1))
                .chain((0..cfg.stage_blocks[3]).map(|i| (1, i)))
                .collect(),
            HeadPlacement::TwoLevel => vec![(0, cfg.stage_blocks[2] - 1), (1, cfg.stage_blocks[3] - 1)],
            HeadPlacement::Last => vec![(1, cfg.stage_blocks[3] - 1)],
        };
        let mut branches = Vec::new();
        for (kind, bname) in cfg.branches.iter().zip(cfg.branch_names()) {
            b.new_params = is_new_param(&bname);
            let se = (*kind == BranchKind::SeRes).then_some(cfg.se_ratio);
            let mut bcin = cin;
            let mut stages: [Vec<Block>; 2] = [Vec::new(), Vec::new()];
            for (si, stride) in [(0usize, 2usize), (1, cfg.stage5_stride)] {
                let width = cfg.stage_widths[si + 2];
                for i in 0..cfg.stage_blocks[si + 2] {
                    let name = format!("{bname}.layer{}.{i}", si + 4);
                    let s = if i == 0 { stride } else { 1 };
                    stages[si].push(b.block(&name, bcin, width, s, se)?);
                    bcin = width;
                }
            }
            b.new_params = true;
            let mut heads = Vec::new();
            for (tap, tag) in taps.iter().zip(&tags) {
                let name = format!("head.{bname}.{tag}");
                heads.push(Head {
                    tap: *tap,
                    reduction: b.reduction(&format!("{name}.reduction"), cfg.stage_widths[tap.0 + 2], cfg.feature_width)?,
                    classifier: b.classifier(&format!("{name}.classifier"), cfg.feature_width, cfg.num_classes)?,
                });
            }
            branches.push(Branch { stages, heads });
        }
        Ok(Model { cfg: cfg.clone(), store, stem, backbone, branches, mode: Mode::Train })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_heads(&self) -> usize {
        self.branches.iter().map(|b| b.heads.len()).sum()
    }

    pub fn feature_len(&self) -> usize {
        self.num_heads() * self.cfg.feature_width
    }

    pub fn param_names(&self) -> BTreeSet<String> {
        self.store.names().map(str::to_string).collect()
    }

    /// Records a full forward pass of `input` (B×3×H×W) on `graph`.
    pub fn forward(&mut self, graph: &mut Graph<T>, input: Var) -> Result<Forward> {
        let (_, c, h, w) = graph.value(input).dims4()?;
        if c != 3 || [h, w] != self.cfg.input_hw {
            return Err(Error::shape(
                "model",
                format!("expected B×3×{}×{}, got {:?}", self.cfg.input_hw[0], self.cfg.input_hw[1], graph.value(input).shape()),
            ));
        }
        let params = self.store.bind(graph, self.mode == Mode::Train);
        let (_, stats) = self.store.split_stats();
        let mut ctx = Ctx { graph, vars: &params, stats, mode: self.mode, bn: self.cfg.bn };
        let h = self.stem.0.forward(&mut ctx, input)?;
        let h = self.stem.1.forward(&mut ctx, h)?;
        let h = ctx.graph.relu(h)?;
        let mut shared = ctx.graph.max_pool(h, 3, 2, 1)?;
        for block in &self.backbone {
            shared = block.forward(&mut ctx, shared)?;
        }
        let mut logits = Vec::new();
        let mut features = Vec::new();
        for branch in &self.branches {
            let mut h = shared;
            let mut next_head = 0;
            for (si, stage) in branch.stages.iter().enumerate() {
                for (bi, block) in stage.iter().enumerate() {
                    h = block.forward(&mut ctx, h)?;
                    while let Some(head) = branch.heads.get(next_head).filter(|hd| hd.tap == (si, bi)) {
                        let pooled = ctx.graph.gap(h)?;
                        let (n, c) = ctx.graph.value(pooled).dims2()?;
                        let pooled = ctx.graph.reshape(pooled, &[n, c, 1, 1])?;
                        let f = reduction_head(&mut ctx, pooled, &head.reduction)?;
                        logits.push(classifier_head(&mut ctx, f, &head.classifier)?);
                        features.push(f);
                        next_head += 1;
                    }
                }
            }
        }
        Ok(Forward { logits, features, params })
    }

    /// Per-head logits (each B×num_classes) for a batch.
    pub fn forward_train(&mut self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if self.mode != Mode::Train {
            return Err(Error::Config("forward_train needs train mode".into()));
        }
        self.logits(batch)
    }

    /// Per-head logits in the current mode.
    pub fn logits(&mut self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut graph = Graph::new();
        let x = graph.input(batch.clone());
        let out = self.forward(&mut graph, x)?;
        Ok(out.logits.iter().map(|&v| graph.value(v).clone()).collect())
    }

    /// Forward, joint loss over `heads` (all when `None`), backward; leaves the
    /// gradients in the parameter store and returns the loss value.
    pub fn loss_and_grads(
        &mut self,
        graph: &mut Graph<T>,
        batch: &Tensor<T>,
        labels: &[usize],
        reduction: Reduction,
        heads: Option<&[usize]>,
    ) -> Result<T> {
        let x = graph.input(batch.clone());
        let out = self.forward(graph, x)?;
        let chosen: Vec<Var> = match heads {
            Some(idx) => idx
                .iter()
                .map(|&i| out.logits.get(i).copied().ok_or_else(|| Error::Config(format!("no head {i}"))))
                .collect::<Result<_>>()?,
            None => out.logits.clone(),
        };
        let loss = joint_loss(graph, &chosen, labels, reduction)?;
        graph.backward(loss)?;
        self.store.pull_grads(graph, &out.params);
        Ok(graph.value(loss).data()[0])
    }

    /// Flip-averaged, concatenated retrieval features for each C×H×W image.
    pub fn extract_features(&mut self, images: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        if self.mode != Mode::Eval {
            return Err(Error::Config("feature extraction needs eval mode".into()));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let flipped: Vec<Tensor<T>> = images.iter().map(|t| t.flip_last_axis()).collect();
        let mut refs: Vec<&Tensor<T>> = images.iter().collect();
        refs.extend(flipped.iter());
        let batch = Tensor::stack(&refs)?;
        let mut graph = Graph::new();
        let x = graph.input(batch);
        let out = self.forward(&mut graph, x)?;
        let n = images.len();
        let fw = self.cfg.feature_width;
        let half = T::lit(0.5);
        let mut feats = vec![Vec::with_capacity(self.feature_len()); n];
        for &f in &out.features {
            let data = graph.value(f).data();
            for (i, feat) in feats.iter_mut().enumerate() {
                let plain = &data[i * fw..(i + 1) * fw];
                let mirror = &data[(n + i) * fw..(n + i + 1) * fw];
                feat.extend(plain.iter().zip(mirror).map(|(&a, &b)| half * (a + b)));
            }
        }
        Ok(feats)
    }

    pub fn extract_feature(&mut self, image: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.extract_features(std::slice::from_ref(image))?.remove(0))
    }

    /// The same network with every branch of `kind` (and its heads) removed.
    /// Remaining parameters and statistics are carried over by name.
    pub fn without_branch(&self, kind: BranchKind) -> Result<Model<T>> {
        let mut cfg = self.cfg.clone();
        cfg.branches.retain(|&k| k != kind);
        // values are overwritten below, the seed is irrelevant
        let mut out = Model::<T>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        for p in out.store.params_mut() {
            let src = self
                .store
                .find(&p.name)
                .ok_or_else(|| Error::Config(format!("{} missing from source model", p.name)))?;
            p.value = src.value.clone();
            p.momentum = src.momentum.clone();
        }
        for s in out.store.stats_mut() {
            let src = self
                .store
                .stats()
                .iter()
                .find(|o| o.name == s.name)
                .ok_or_else(|| Error::Config(format!("{} missing from source model", s.name)))?;
            s.stats = src.stats.clone();
        }
        out.mode = self.mode;
        Ok(out)
    }
}

/// Sum of the per-head softmax log-losses.
pub fn joint_loss<T: Scalar>(graph: &mut Graph<T>, logits: &[Var], labels: &[usize], reduction: Reduction) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Config("joint loss needs at least one head".into()));
    }
    let losses = logits
        .iter()
        .map(|&l| graph.softmax_log_loss(l, labels, reduction))
        .collect::<Result<Vec<_>>>()?;
    graph.sum(&losses)
}

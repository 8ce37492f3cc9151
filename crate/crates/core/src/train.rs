//! SGD with momentum, the step learning-rate schedule, augmentation and the
//! training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Reduction};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer hyperparameters. Momentum buffers live on each [`crate::params::Parameter`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for newly introduced parameters.
    pub new_param_mult: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd { momentum: 0.9, weight_decay: 5e-4, new_param_mult: 10.0 }
    }
}

impl Sgd {
    /// `g' = g + λw`, `v = m·v + g'`, `w -= lr·mult·v` for every parameter.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        let m = T::lit(self.momentum);
        for p in store.params_mut() {
            let lam = T::lit(if p.weight_decay { self.weight_decay } else { 0.0 });
            let rate = T::lit(lr * if p.new_param { self.new_param_mult } else { 1.0 });
            let grad = p.grad.as_ref().expect("checked above");
            let w = p.value.data_mut();
            for ((w, v), &g) in w.iter_mut().zip(p.momentum.iter_mut()).zip(grad) {
                *v = m * *v + (g + lam * *w);
                *w -= rate * *v;
            }
        }
        Ok(())
    }

    /// Effective learning-rate multiplier of a parameter.
    pub fn multiplier(&self, new_param: bool) -> f64 {
        if new_param {
            self.new_param_mult
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Zero padding added on every side before the random crop; 0 disables cropping.
    pub pad: usize,
    pub flip: bool,
    pub erase: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { pad: 10, flip: true, erase: true }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { pad: 0, flip: false, erase: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Epoch indices at which the learning rate is divided by 10.
    pub lr_steps: Vec<usize>,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub reduction: Reduction,
    pub optim: Sgd,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 80,
            base_lr: 0.01,
            lr_steps: vec![40, 60],
            seed: 0,
            augment: AugmentConfig::default(),
            reduction: Reduction::Mean,
            optim: Sgd::default(),
        }
    }

    pub fn nano() -> Self {
        TrainConfig { epochs: 20, lr_steps: vec![10, 15], ..TrainConfig::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("bad base learning rate {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::Config(format!("negative epoch {epoch}")));
        }
        let passed = self.lr_steps.iter().filter(|&&s| epoch as usize >= s).count();
        Ok(self.base_lr / 10f64.powi(passed as i32))
    }
}

/// Random choices of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Top-left corner of the crop inside the padded image.
    pub offset: (usize, usize),
    pub flip: bool,
    /// Erased rectangle `(top, left, height, width)` in output coordinates.
    pub erase: Option<(usize, usize, usize, usize)>,
}

pub const ERASE_AREA: (f64, f64) = (0.02, 0.4);
pub const ERASE_ASPECT: (f64, f64) = (0.3, 10.0 / 3.0);

impl AugmentPlan {
    pub fn identity(cfg: &AugmentConfig) -> Self {
        AugmentPlan { offset: (cfg.pad, cfg.pad), flip: false, erase: None }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, hw: (usize, usize), rng: &mut R) -> Self {
        let (h, w) = hw;
        let offset = (rng.random_range(0..=2 * cfg.pad), rng.random_range(0..=2 * cfg.pad));
        let flip = cfg.flip && rng.random_bool(0.5);
        let mut erase = None;
        if cfg.erase && rng.random_bool(0.5) {
            let area = (h * w) as f64;
            for _ in 0..100 {
                let target = rng.random_range(ERASE_AREA.0..=ERASE_AREA.1) * area;
                let aspect = rng.random_range(ERASE_ASPECT.0..=ERASE_ASPECT.1);
                let eh = (target * aspect).sqrt().round() as usize;
                let ew = (target / aspect).sqrt().round() as usize;
                let frac = (eh * ew) as f64 / area;
                if eh == 0 || ew == 0 || eh >= h || ew >= w || !(ERASE_AREA.0..=ERASE_AREA.1).contains(&frac) {
                    continue;
                }
                erase = Some((rng.random_range(0..=h - eh), rng.random_range(0..=w - ew), eh, ew));
                break;
            }
        }
        AugmentPlan { offset, flip, erase }
    }

    /// Applies the plan to a C×H×W image; `pad` must match the config the plan was drawn from.
    /// Erased pixels are filled with independent uniform values in [0, 1).
    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, img: &Tensor<T>, pad: usize, rng: &mut R) -> Result<Tensor<T>> {
        let [c, h, w] = <[usize; 3]>::try_from(img.shape())
            .map_err(|_| Error::shape("augment", format!("expected C×H×W, got {:?}", img.shape())))?;
        let (oy, ox) = self.offset;
        if oy > 2 * pad || ox > 2 * pad {
            return Err(Error::shape("augment", format!("crop offset {:?} outside padding {pad}", self.offset)));
        }
        let src = img.data();
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + oy) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + ox) as isize - pad as isize;
                    if sx >= 0 && sx < w as isize {
                        let dx = if self.flip { w - 1 - x } else { x };
                        out[(ch * h + y) * w + dx] = src[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        if let Some((top, left, eh, ew)) = self.erase {
            for ch in 0..c {
                for y in top..top + eh {
                    for x in left..left + ew {
                        out[(ch * h + y) * w + x] = T::lit(rng.random::<f64>());
                    }
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }
}

/// Pad + random crop, horizontal flip and random erasing of a C×H×W image in [0, 1].
pub fn augment<T: Scalar, R: Rng + ?Sized>(img: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("augment", format!("expected C×H×W, got {s:?}")));
    }
    AugmentPlan::sample(cfg, (s[1], s[2]), rng).apply(img, cfg.pad, rng)
}

/// Independent ChaCha stream for a domain tag and three integer keys.
pub fn keyed_rng(domain: &[u8; 8], a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..].copy_from_slice(domain);
    ChaCha8Rng::from_seed(key)
}

/// Augmentation and shuffling stream keyed by `(seed, epoch, index)`.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    keyed_rng(b"hbmcn-tr", seed, epoch, index)
}

/// Shuffled mini-batches of `0..n`; a trailing batch of one sample joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sample_rng(seed, epoch, u64::MAX));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Labelled training images, C×H×W in [0, 1] before normalization.
#[derive(Clone, Debug)]
pub struct TrainSet<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    /// Per-channel `(mean, std)` applied after augmentation.
    pub normalize: ([f64; 3], [f64; 3]),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// `(x − mean_c) / std_c` per channel of a C×H×W image.
pub fn normalize<T: Scalar>(img: &Tensor<T>, mean: [f64; 3], std: [f64; 3]) -> Tensor<T> {
    let plane = img.shape().iter().skip(1).product::<usize>().max(1);
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane).min(2);
        *v = (*v - T::lit(mean[c])) / T::lit(std[c]);
    }
    out
}

/// Trains `model` in place. Returns one [`EpochStat`] per epoch; `on_epoch`
/// sees each as soon as it is available.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    data: &TrainSet<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStat),
) -> Result<Vec<EpochStat>> {
    cfg.validate()?;
    if data.images.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if data.images.len() != data.labels.len() {
        return Err(Error::Dataset(format!("{} images but {} labels", data.images.len(), data.labels.len())));
    }
    if data.images.len() < 2 {
        return Err(Error::Dataset("training needs at least 2 images".into()));
    }
    let classes = model.config().num_classes;
    if let Some(&label) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    model.set_mode(Mode::Train);
    let (mean, std) = data.normalize;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch as i64)?;
        let mut total = 0.0;
        let batches = epoch_batches(data.images.len(), cfg.batch_size, cfg.seed, epoch as u64);
        for batch in &batches {
            let imgs = batch
                .iter()
                .map(|&i| {
                    let mut rng = sample_rng(cfg.seed, epoch as u64, i as u64);
                    augment(&data.images[i], &cfg.augment, &mut rng).map(|t| normalize(&t, mean, std))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<T>> = imgs.iter().collect();
            let x = Tensor::stack(&refs)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let loss = model.loss_and_grads(&mut Graph::new(), &x, &labels, cfg.reduction, None)?;
            cfg.optim.step(model.store_mut(), lr)?;
            model.store_mut().clear_grads();
            total += loss.to_f64c();
        }
        let stat = EpochStat { epoch, lr, mean_loss: total / batches.len() as f64 };
        on_epoch(&stat);
        trace.push(stat);
    }
    Ok(trace)
}

/// Loss trace as CSV with header `epoch,lr,mean_joint_loss`.
pub fn trace_csv(trace: &[EpochStat]) -> String {
    let mut s = String::from("epoch,lr,mean_joint_loss\n");
    for t in trace {
        s.push_str(&format!("{},{},{:.6}\n", t.epoch, t.lr, t.mean_loss));
    }
    s
}

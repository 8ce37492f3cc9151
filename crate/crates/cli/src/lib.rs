//! Command implementations behind the `hbmcn` binary.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use hbmcn::data::{self, DatasetManifest, Split, SynthSpec, DEFAULT_NORMALIZE};
use hbmcn::eval::{emit_report, SampleMeta};
use hbmcn::gradcheck::{run_gradchecks, CheckResult};
use hbmcn::train::{keyed_rng, normalize, trace_csv};
use hbmcn::{
    evaluate, fit, load_checkpoint, save_checkpoint, BranchKind, EpochStat, EvalReport, FeatureSet, HeadPlacement,
    Mode, Model32, ModelConfig, Sgd, TrainConfig, TrainSet,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const ABLATION_FILE: &str = "ablation.csv";

/// A failed check, as opposed to bad input; maps to exit code 1.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// 1 for check failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        1
    } else {
        2
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Nano,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// One residual branch, one head.
    Baseline,
    /// Two residual branches, one head each.
    Res2,
    /// Residual and SE-Res branches, one head each.
    Seres2,
    /// One residual branch with heads at the ends of stages 4 and 5.
    Baseline2l,
    /// Residual and SE-Res branches with multi-level heads.
    #[default]
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] =
        [AblationMode::Baseline, AblationMode::Res2, AblationMode::Seres2, AblationMode::Baseline2l, AblationMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Res2 => "res2",
            AblationMode::Seres2 => "seres2",
            AblationMode::Baseline2l => "baseline2l",
            AblationMode::Full => "full",
        }
    }

    pub fn topology(self) -> (Vec<BranchKind>, HeadPlacement) {
        use BranchKind::*;
        match self {
            AblationMode::Baseline => (vec![Res], HeadPlacement::Last),
            AblationMode::Res2 => (vec![Res, Res], HeadPlacement::Last),
            AblationMode::Seres2 => (vec![Res, SeRes], HeadPlacement::Last),
            AblationMode::Baseline2l => (vec![Res], HeadPlacement::TwoLevel),
            AblationMode::Full => (vec![Res, SeRes], HeadPlacement::MultiLevel),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Run description as read from JSON. `model` and `train` hold partial
/// overrides applied on top of the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub mode: AblationMode,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: Map<String, Value>,
    #[serde(default)]
    pub train: Map<String, Value>,
}

/// Fully expanded configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    pub preset: Preset,
    pub mode: AblationMode,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Preset first, then the ablation topology, then explicit overrides.
    /// `num_classes` always comes from the dataset.
    pub fn resolve(&self, num_classes: usize) -> Result<Resolved> {
        let seed = self.seed.unwrap_or(0);
        let (mut model, mut train) = match self.preset {
            Preset::Paper => (ModelConfig::paper(num_classes), TrainConfig::paper()),
            Preset::Nano => (ModelConfig::nano(num_classes), TrainConfig::nano()),
        };
        (model.branches, model.heads) = self.mode.topology();
        train.seed = seed;
        let mut model: ModelConfig = merge(&model, &self.model).context("model overrides")?;
        let mut train: TrainConfig = merge(&train, &self.train).context("train overrides")?;
        model.num_classes = num_classes;
        if !self.train.contains_key("seed") {
            train.seed = seed;
        }
        model.validate()?;
        train.validate()?;
        Ok(Resolved { preset: self.preset, mode: self.mode, seed, model, train })
    }
}

fn merge<C: Serialize + for<'de> Deserialize<'de>>(base: &C, overrides: &Map<String, Value>) -> Result<C> {
    let mut value = serde_json::to_value(base)?;
    merge_value(&mut value, overrides);
    Ok(serde_json::from_value(value)?)
}

fn merge_value(base: &mut Value, overrides: &Map<String, Value>) {
    let Value::Object(map) = base else { return };
    for (k, v) in overrides {
        match (map.get_mut(k), v) {
            (Some(slot @ Value::Object(_)), Value::Object(inner)) => merge_value(slot, inner),
            _ => {
                map.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn parse_hw(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |t: &str| usize::from_str(t.trim()).map_err(|e| format!("bad size {s:?}: {e}"));
    Ok([parse(h)?, parse(w)?])
}

pub fn gen_data(spec: &SynthSpec, out: &Path) -> Result<usize> {
    let manifest = data::synth_dataset(spec, out)?;
    Ok(manifest.samples.len())
}

fn load_data(dir: &Path) -> Result<DatasetManifest> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    Ok(data::load_dataset(dir)?)
}

fn images(manifest: &DatasetManifest, split: Split, hw: [usize; 2]) -> Result<Vec<hbmcn::Tensor32>> {
    Ok(data::load_images(manifest.split(split), hw)?)
}

/// Rough training cost printed before paper-scale runs.
fn cost_warning(model: &Model32, cfg: &Resolved, n_train: usize) -> String {
    let [h, w] = cfg.model.input_hw;
    let pixels = (h * w) as f64;
    // About 4 GFLOP per 224×224 forward for the backbone, scaled by area and branch count;
    // backward is twice the forward.
    let gflop = 4.1 * pixels / (224.0 * 224.0) * (1.0 + 0.5 * (cfg.model.branches.len() as f64 - 1.0)) * 3.0;
    let total = gflop * n_train as f64 * cfg.train.epochs as f64;
    format!(
        "warning: paper preset: {} parameters, about {:.1} GFLOP per training image, {:.2e} GFLOP for {} epochs over {} images; \
         expect days on a single CPU core",
        model.store().num_scalars(),
        gflop,
        total,
        cfg.train.epochs,
        n_train
    )
}

pub struct TrainOutcome {
    pub model: Model32,
    pub optim: Sgd,
    pub trace: Vec<EpochStat>,
}

/// Builds and trains a model on the train split of `manifest`.
pub fn train_model(
    cfg: &Resolved,
    manifest: &DatasetManifest,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    let mut rng = keyed_rng(b"hbmcn-in", cfg.seed, 0, 0);
    let mut model = Model32::build(&cfg.model, &mut rng)?;
    let set = TrainSet {
        images: images(manifest, Split::Train, cfg.model.input_hw)?,
        labels: manifest.train_labels(),
        normalize: DEFAULT_NORMALIZE,
    };
    if cfg.preset == Preset::Paper {
        log(&cost_warning(&model, cfg, set.images.len()));
    }
    let trace = fit(&mut model, &set, &cfg.train, |s| {
        log(&format!("epoch {:>3}  lr {:.0e}  loss {:.6}", s.epoch, s.lr, s.mean_loss))
    })?;
    Ok(TrainOutcome { model, optim: cfg.train.optim, trace })
}

/// Writes checkpoint, loss trace and resolved config into `out`.
pub fn write_run(out: &Path, cfg: &Resolved, run: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_checkpoint(&run.model, &run.optim, out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(LOSS_FILE), trace_csv(&run.trace))?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

/// Eval-mode, flip-averaged features for every sample of `split`.
pub fn extract_split(model: &mut Model32, manifest: &DatasetManifest, split: Split) -> Result<FeatureSet> {
    model.set_mode(Mode::Eval);
    let hw = model.config().input_hw;
    let samples = manifest.split(split);
    let (mean, std) = DEFAULT_NORMALIZE;
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let imgs: Vec<_> = data::load_images(chunk, hw)?.iter().map(|t| normalize(t, mean, std)).collect();
        rows.extend(model.extract_features(&imgs)?);
    }
    let meta = samples.iter().map(|s| SampleMeta { person_id: s.person_id, camera_id: s.camera_id }).collect();
    if rows.is_empty() {
        return Ok(FeatureSet::new(model.feature_len(), Vec::new(), meta)?);
    }
    Ok(FeatureSet::from_rows(&rows, meta)?)
}

pub fn train_cmd(cfg: &Resolved, data_dir: &Path, out: &Path, log: impl FnMut(&str)) -> Result<TrainOutcome> {
    let manifest = load_data(data_dir)?;
    let run = train_model(cfg, &manifest, log)?;
    write_run(out, cfg, &run)?;
    Ok(run)
}

/// Loads the config for `train`/`ablate`: file (if any), then CLI overrides.
pub fn run_config(
    config: Option<&Path>,
    preset: Option<Preset>,
    mode: Option<AblationMode>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut rc = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = preset {
        rc.preset = p;
    }
    if let Some(m) = mode {
        rc.mode = m;
    }
    if seed.is_some() {
        rc.seed = seed;
    }
    Ok(rc)
}

pub fn resolve_for(rc: &RunConfig, data_dir: &Path) -> Result<(Resolved, DatasetManifest)> {
    let manifest = load_data(data_dir)?;
    let cfg = rc.resolve(manifest.num_classes())?;
    Ok((cfg, manifest))
}

/// `per_level_norm` L2-normalizes each head's slice before writing.
pub fn extract_cmd(ckpt: &Path, data_dir: &Path, split: Split, out: &Path, per_level_norm: bool) -> Result<FeatureSet> {
    let (mut model, _) = load_checkpoint::<f32>(ckpt)?;
    let manifest = load_data(data_dir)?;
    let mut feats = extract_split(&mut model, &manifest, split)?;
    if per_level_norm {
        feats.normalize_levels(model.config().feature_width)?;
    }
    feats.save(out)?;
    Ok(feats)
}

pub fn eval_cmd(query: &Path, gallery: &Path, report: &Path) -> Result<EvalReport> {
    let q = FeatureSet::load(query)?;
    let g = FeatureSet::load(gallery)?;
    let rep = evaluate(&q, &g)?;
    emit_report(&rep, report)?;
    Ok(rep)
}

/// Trains, extracts and evaluates one ablation topology, appending
/// `mode,seed,mAP,R1` to `out/ablation.csv`.
pub fn ablate_cmd(rc: &RunConfig, data_dir: &Path, out: &Path, log: impl FnMut(&str)) -> Result<EvalReport> {
    let (cfg, manifest) = resolve_for(rc, data_dir)?;
    let mut run = train_model(&cfg, &manifest, log)?;
    let run_dir = out.join(format!("{}-s{}", cfg.mode, cfg.seed));
    write_run(&run_dir, &cfg, &run)?;
    let q = extract_split(&mut run.model, &manifest, Split::Query)?;
    let g = extract_split(&mut run.model, &manifest, Split::Gallery)?;
    let rep = evaluate(&q, &g)?;
    emit_report(&rep, &run_dir)?;
    let csv = out.join(ABLATION_FILE);
    let fresh = !csv.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&csv).with_context(|| format!("opening {}", csv.display()))?;
    if fresh {
        writeln!(f, "mode,seed,mAP,R1")?;
    }
    writeln!(f, "{},{},{:.6},{:.6}", cfg.mode, cfg.seed, rep.map, rep.cmc_at(1))?;
    Ok(rep)
}

pub fn gradcheck_cmd(seed: u64, fault: bool) -> Result<Vec<CheckResult>> {
    let fault = fault.then_some(hbmcn::autograd::Fault::ConvBackwardSign);
    Ok(run_gradchecks(seed, fault)?)
}

pub fn gradcheck_table(results: &[CheckResult], tol: f64) -> String {
    let mut s = format!("{:<28} {:>12} {:>7} {:>8}  status\n", "check", "max_rel_err", "coords", "skipped");
    for r in results {
        let status = if r.passed(tol) { "ok" } else { "FAIL" };
        s.push_str(&format!("{:<28} {:>12.3e} {:>7} {:>8}  {status}\n", r.name, r.max_rel_err, r.coords, r.skipped));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hw_parsing() {
        assert_eq!(parse_hw("128x64"), Ok([128, 64]));
        assert!(parse_hw("128").is_err());
        assert!(parse_hw("ax3").is_err());
    }

    #[test]
    fn preset_then_mode_then_overrides() {
        let rc: RunConfig = serde_json::from_str(
            r#"{"preset":"nano","mode":"baseline2l","seed":5,"model":{"feature_width":16,"bn":{"eps":0.001}},"train":{"epochs":3}}"#,
        )
        .unwrap();
        let r = rc.resolve(7).unwrap();
        assert_eq!(r.model.feature_width, 16);
        assert_eq!(r.model.bn.eps, 0.001);
        assert_eq!(r.model.bn.momentum, ModelConfig::nano(7).bn.momentum);
        assert_eq!(r.model.branches, vec![BranchKind::Res]);
        assert_eq!(r.model.heads, HeadPlacement::TwoLevel);
        assert_eq!(r.model.num_classes, 7);
        assert_eq!(r.train.epochs, 3);
        assert_eq!(r.train.lr_steps, TrainConfig::nano().lr_steps);
        assert_eq!(r.train.seed, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"presett":"nano"}"#).is_err());
        let rc: RunConfig = serde_json::from_str(r#"{"model":{"widths":[1]}}"#).unwrap();
        assert!(rc.resolve(4).is_err());
        let rc: RunConfig = serde_json::from_str(r#"{"train":{"epochs":0}}"#).unwrap();
        assert!(rc.resolve(4).is_err());
    }

    #[test]
    fn mode_topologies() {
        let names: Vec<_> = AblationMode::ALL.iter().map(|m| m.name()).collect();
        assert_eq!(names, ["baseline", "res2", "seres2", "baseline2l", "full"]);
        for m in AblationMode::ALL {
            let rc = RunConfig { mode: m, ..Default::default() };
            let r = rc.resolve(10).unwrap();
            let heads = match m {
                AblationMode::Baseline => 1,
                AblationMode::Res2 | AblationMode::Seres2 | AblationMode::Baseline2l => 2,
                AblationMode::Full => 6,
            };
            assert_eq!(r.model.num_heads(), heads, "{m}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&anyhow::Error::new(CheckFailed("x".into()))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 2);
    }
}

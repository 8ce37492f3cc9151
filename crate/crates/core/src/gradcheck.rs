//! Central finite-difference checks of every differentiable op, the composed
//! blocks and the full model loss, in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{BnConfig, Fault, Graph, Mode, Reduction, RunningStats, Var};
use crate::blocks::{bottleneck, classifier_head, reduction_head, se_block, se_res_module, Builder, Ctx};
use crate::error::Result;
use crate::model::{joint_loss, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::keyed_rng;

pub const EPSILON: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Largest error over the checked coordinates of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    /// Coordinates whose ±ε stencil crossed a ReLU or max-pool kink and were resampled.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps vanishing gradients from
/// amplifying rounding noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

type CaseFn = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>;

/// Graph, parameter leaves, input leaves and the scalar objective.
type Objective = (Graph<f64>, Vec<Var>, Vec<Var>, Var);

struct Case {
    name: &'static str,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    mode: Mode,
    f: Box<CaseFn>,
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Normal samples pushed at least 0.1 away from zero, clear of activation kinks.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v: f64| v.signum() * (0.1 + v.abs()))
}

impl Case {
    fn new(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Case { name, store: ParamStore::new(), inputs, mode: Mode::Train, f: Box::new(f) }
    }

    /// Scalar objective `Σ r_i · y_i` on a fresh graph; returns the graph, its
    /// parameter and input leaves, and the objective.
    fn objective(&mut self, weights: &mut Option<Tensor<f64>>, fault: Option<Fault>) -> Result<Objective> {
        let mut graph = match fault {
            Some(f) => Graph::with_fault(f),
            None => Graph::new(),
        };
        let pvars = self.store.bind(&mut graph, true);
        let ivars: Vec<Var> = self.inputs.iter().map(|t| graph.param(t.clone())).collect();
        let (_, stats) = self.store.split_stats();
        let mut ctx = Ctx { graph: &mut graph, vars: &pvars, stats, mode: self.mode, bn: BnConfig::default() };
        let y = (self.f)(&mut ctx, &ivars)?;
        let shape = graph.value(y).shape().to_vec();
        let r = weights.get_or_insert_with(|| {
            let mut rng = keyed_rng(b"gradchk!", shape.iter().product::<usize>() as u64, 0, 0);
            normal(&shape, &mut rng)
        });
        let loss = graph.weighted_sum(y, r)?;
        Ok((graph, pvars, ivars, loss))
    }

    /// Adds `delta` to coordinate `i` of parameter `t`, or of input `t − n_params`.
    fn nudge(&mut self, t: usize, n_params: usize, i: usize, delta: f64) {
        if t < n_params {
            self.store.params_mut()[t].value.data_mut()[i] += delta;
        } else {
            self.inputs[t - n_params].data_mut()[i] += delta;
        }
    }

    fn run(&mut self, fault: Option<Fault>, max_coords: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
        let mut weights = None;
        let (mut graph, pvars, ivars, loss) = self.objective(&mut weights, fault)?;
        graph.backward(loss)?;
        let base = graph.kink_signature();
        let grads: Vec<Vec<f64>> = pvars
            .iter()
            .chain(&ivars)
            .map(|&v| graph.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; graph.value(v).numel()]))
            .collect();
        drop(graph);
        let n_params = pvars.len();
        let mut worst: f64 = 0.0;
        let (mut coords, mut skipped) = (0, 0);
        for (t, grad) in grads.iter().enumerate() {
            let mut accepted = 0;
            for i in sample(rng, grad.len(), grad.len()) {
                if accepted == max_coords {
                    break;
                }
                let mut at = |delta: f64, case: &mut Case| -> Result<(f64, u64)> {
                    case.nudge(t, n_params, i, delta);
                    let out = case.objective(&mut weights, None).map(|(g, _, _, l)| (g.value(l).data()[0], g.kink_signature()));
                    case.nudge(t, n_params, i, -delta);
                    out
                };
                let (up, su) = at(EPSILON, self)?;
                let (down, sd) = at(-EPSILON, self)?;
                if su != base || sd != base {
                    skipped += 1;
                    continue;
                }
                worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * EPSILON)));
                accepted += 1;
                coords += 1;
            }
        }
        Ok(CheckResult { name: self.name.to_string(), max_rel_err: worst, coords, skipped })
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = vec![
        Case::new("conv2d", vec![normal(&[2, 3, 7, 6], rng), normal(&[4, 3, 3, 3], rng), normal(&[4], rng)], |c, v| {
            c.graph.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        Case::new("conv2d_pointwise", vec![normal(&[2, 5, 4, 3], rng), normal(&[3, 5, 1, 1], rng)], |c, v| {
            c.graph.conv2d(v[0], v[1], None, 1, 0)
        }),
        Case::new("conv2d_7x7", vec![normal(&[1, 2, 9, 8], rng), normal(&[2, 2, 7, 7], rng)], |c, v| {
            c.graph.conv2d(v[0], v[1], None, 2, 3)
        }),
        Case::new("max_pool", vec![normal(&[2, 2, 7, 6], rng)], |c, v| c.graph.max_pool(v[0], 3, 2, 1)),
        Case::new("gap", vec![normal(&[2, 3, 4, 5], rng)], |c, v| c.graph.gap(v[0])),
        Case::new("relu", vec![off_zero(&[2, 3, 4, 4], rng)], |c, v| c.graph.relu(v[0])),
        Case::new("sigmoid", vec![normal(&[2, 3, 4, 4], rng)], |c, v| c.graph.sigmoid(v[0])),
        Case::new("leaky_relu", vec![off_zero(&[2, 3, 4, 4], rng)], |c, v| {
            c.graph.leaky_relu(v[0])
        }),
        Case::new("batch_norm_train", vec![normal(&[3, 4, 3, 2], rng), normal(&[4], rng), normal(&[4], rng)], |c, v| {
            let mut stats = RunningStats::new(4);
            c.graph.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train, BnConfig::default())
        }),
        Case::new("batch_norm_train_2d", vec![normal(&[5, 4], rng), normal(&[4], rng), normal(&[4], rng)], |c, v| {
            let mut stats = RunningStats::new(4);
            c.graph.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train, BnConfig::default())
        }),
        Case::new("batch_norm_eval", vec![normal(&[2, 4, 3, 2], rng), normal(&[4], rng), normal(&[4], rng)], |c, v| {
            let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3, 0.0], var: vec![0.5, 1.5, 2.0, 0.8] };
            c.graph.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Eval, BnConfig::default())
        }),
        Case::new("linear", vec![normal(&[3, 5], rng), normal(&[4, 5], rng), normal(&[4], rng)], |c, v| {
            c.graph.linear(v[0], v[1], Some(v[2]))
        }),
        Case::new("add", vec![normal(&[2, 3, 2, 2], rng), normal(&[2, 3, 2, 2], rng)], |c, v| c.graph.add(v[0], v[1])),
        Case::new("channel_scale", vec![normal(&[2, 3, 4, 4], rng), normal(&[2, 3], rng)], |c, v| {
            c.graph.channel_scale(v[0], v[1])
        }),
        Case::new("reshape", vec![normal(&[2, 6], rng)], |c, v| {
            let r = c.graph.reshape(v[0], &[2, 3, 2, 1])?;
            c.graph.sigmoid(r)
        }),
        Case::new("softmax_log_loss_sum", vec![normal(&[4, 6], rng)], |c, v| {
            c.graph.softmax_log_loss(v[0], &[0, 5, 2, 2], Reduction::Sum)
        }),
        Case::new("softmax_log_loss_mean", vec![normal(&[4, 6], rng)], |c, v| {
            c.graph.softmax_log_loss(v[0], &[1, 3, 4, 0], Reduction::Mean)
        }),
        Case::new("sum_scale", vec![normal(&[3, 2], rng), normal(&[3, 2], rng)], |c, v| {
            let w = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5])?;
            let a = c.graph.weighted_sum(v[0], &w)?;
            let b = c.graph.weighted_sum(v[1], &w.map(|x| x * x))?;
            let s = c.graph.sum(&[a, b, a])?;
            c.graph.scale(s, 0.75)
        }),
        Case::new("weighted_sum", vec![normal(&[2, 3], rng)], |c, v| {
            let w = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0])?;
            c.graph.weighted_sum(v[0], &w)
        }),
    ];

    let mut store = ParamStore::new();
    let se = Builder { store: &mut store, rng, new_params: false }.se("se", 8, 4).expect("valid SE shape");
    cases.push(Case { store, ..Case::new("se_block", vec![normal(&[2, 8, 4, 3], rng)], move |c, v| se_block(c, v[0], &se)) });

    let mut store = ParamStore::new();
    let block = Builder { store: &mut store, rng, new_params: false }.block("b", 8, 16, 2, None).expect("valid block");
    let body = block.body.clone();
    cases.push(Case {
        store,
        ..Case::new("bottleneck_projection", vec![normal(&[2, 8, 6, 4], rng)], move |c, v| bottleneck(c, v[0], &body))
    });

    let mut store = ParamStore::new();
    let block = Builder { store: &mut store, rng, new_params: false }.block("b", 16, 16, 1, None).expect("valid block");
    let body = block.body.clone();
    cases.push(Case {
        store,
        ..Case::new("bottleneck_identity", vec![normal(&[2, 16, 3, 3], rng)], move |c, v| bottleneck(c, v[0], &body))
    });

    let mut store = ParamStore::new();
    let block = Builder { store: &mut store, rng, new_params: false }.block("b", 8, 16, 2, Some(4)).expect("valid block");
    let (body, se) = (block.body.clone(), block.se.clone().expect("SE requested"));
    cases.push(Case {
        store,
        ..Case::new("se_res_module", vec![normal(&[2, 8, 6, 4], rng)], move |c, v| se_res_module(c, v[0], &body, &se))
    });

    let mut store = ParamStore::new();
    let mut b = Builder { store: &mut store, rng, new_params: true };
    let (red, cls) = (b.reduction("h.reduction", 12, 6).expect("valid"), b.classifier("h.classifier", 6, 5).expect("valid"));
    cases.push(Case {
        store,
        ..Case::new("reduction_classifier_head", vec![normal(&[3, 12, 1, 1], rng)], move |c, v| {
            let f = reduction_head(c, v[0], &red)?;
            let logits = classifier_head(c, f, &cls)?;
            c.graph.softmax_log_loss(logits, &[0, 4, 2], Reduction::Sum)
        })
    });
    cases
}

/// Joint loss of the nano model on two random images, checked at `per_tensor`
/// sampled coordinates of every parameter tensor.
fn model_case(fault: Option<Fault>, per_tensor: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let cfg = ModelConfig::nano(4);
    let mut model = Model::<f64>::build(&cfg, rng)?;
    let [h, w] = cfg.input_hw;
    let batch = normal(&[2, 3, h, w], rng);
    let labels = [1, 3];
    let mut analytic_graph = match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    model.loss_and_grads(&mut analytic_graph, &batch, &labels, Reduction::Sum, None)?;
    drop(analytic_graph);
    let grads: Vec<Vec<f64>> = model.store().params().iter().map(|p| p.grad.clone().unwrap_or_default()).collect();
    let loss_at = |model: &mut Model<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let out = model.forward(&mut g, x)?;
        let l = joint_loss(&mut g, &out.logits, &labels, Reduction::Sum)?;
        Ok((g.value(l).data()[0], g.kink_signature()))
    };
    let (_, base) = loss_at(&mut model)?;
    let mut worst: f64 = 0.0;
    let (mut coords, mut skipped) = (0, 0);
    for (t, grad) in grads.iter().enumerate() {
        let mut accepted = 0;
        for i in sample(rng, grad.len(), grad.len()) {
            if accepted == per_tensor {
                break;
            }
            let orig = model.store().params()[t].value.data()[i];
            model.store_mut().params_mut()[t].value.data_mut()[i] = orig + EPSILON;
            let (up, su) = loss_at(&mut model)?;
            model.store_mut().params_mut()[t].value.data_mut()[i] = orig - EPSILON;
            let (down, sd) = loss_at(&mut model)?;
            model.store_mut().params_mut()[t].value.data_mut()[i] = orig;
            if su != base || sd != base {
                skipped += 1;
                continue;
            }
            worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * EPSILON)));
            accepted += 1;
            coords += 1;
        }
    }
    Ok(CheckResult { name: "nano_model_joint_loss".into(), max_rel_err: worst, coords, skipped })
}

/// Runs every check. `fault` corrupts the analytic backward pass only.
pub fn run_gradchecks(seed: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for mut case in op_cases(&mut rng) {
        out.push(case.run(fault, 48, &mut rng)?);
    }
    out.push(model_case(fault, 2, &mut rng)?);
    Ok(out)
}

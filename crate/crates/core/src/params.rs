//! Named parameters, batch-norm buffers and initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// A trainable tensor with its gradient, momentum buffer and optimizer flags.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub momentum: Vec<T>,
    /// Participates in L2 weight decay (false for batch-norm affine terms and biases).
    pub weight_decay: bool,
    /// Newly introduced parameter trained with the boosted learning rate.
    pub new_param: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedStats<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

/// Does weight decay apply to a parameter with this name?
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias"))
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    stats: Vec<NamedStats<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), stats: Vec::new(), index: HashMap::new() }
    }

    fn claim(&mut self, name: &str, slot: usize) -> Result<()> {
        if self.index.insert(name.to_string(), slot).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, new_param: bool) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, self.params.len())?;
        let momentum = vec![T::zero(); value.numel()];
        self.params.push(Parameter {
            weight_decay: decays(&name),
            name,
            value,
            grad: None,
            momentum,
            new_param,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> Result<StatsId> {
        let name = name.into();
        // stats live in their own namespace but must not shadow a parameter
        self.claim(&format!("{name}#stats"), self.stats.len())?;
        self.stats.push(NamedStats { name, stats: RunningStats::new(channels) });
        Ok(StatsId(self.stats.len() - 1))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[NamedStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.stats
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn stat(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0].stats
    }

    pub fn stat_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0].stats
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i]).filter(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        match self.index.get(name) {
            Some(&i) if self.params[i].name == name => Some(&mut self.params[i]),
            _ => None,
        }
    }

    pub fn find_stats_mut(&mut self, name: &str) -> Option<&mut RunningStats<T>> {
        self.stats.iter_mut().find(|s| s.name == name).map(|s| &mut s.stats)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a trainable leaf; the returned vector is
    /// indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| graph.leaf(p.value.clone(), trainable)).collect()
    }

    /// Copies gradients out of `graph`; parameters the root does not reach get zeros.
    pub fn pull_grads(&mut self, graph: &Graph<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(match graph.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.value.numel()],
            });
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Splits into read-only parameters and mutable batch-norm buffers.
    pub fn split_stats(&mut self) -> (&[Parameter<T>], &mut [NamedStats<T>]) {
        (&self.params, &mut self.stats)
    }
}

/// What a freshly created tensor is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Convolution or linear weight with the given fan-in: Normal(0, 2/fan_in).
    Weight { fan_in: usize },
    Gamma,
    Beta,
    Bias,
}

/// Deterministic initializer. Samples are drawn in `f64` so that `f32` and
/// `f64` models built from the same seed agree up to rounding.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(kind: InitKind, shape: &[usize], rng: &mut R) -> Tensor<T> {
    match kind {
        InitKind::Weight { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape.to_vec(), |_| T::lit(normal.sample(rng)))
        }
        InitKind::Gamma => Tensor::full(shape.to_vec(), T::one()),
        InitKind::Beta | InitKind::Bias => Tensor::zeros(shape.to_vec()),
    }
}

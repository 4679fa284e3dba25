//! Named parameters, buffers and deterministic initialisation.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub init: Init,
}

/// FNV-1a, used for seeding and config fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn init_tensor(name: &str, shape: Shape, init: Init, seed: u64) -> Tensor<f32> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::KaimingNormal { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(name.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let normal = Normal::new(0.0, std).expect("finite std");
            let data = (0..shape.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
            Tensor::from_vec(shape, data).expect("init shape")
        }
    }
}

/// Ordered, uniquely named parameters plus non-trainable buffers (batch-norm
/// running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    seed: u64,
    /// Every parameter starts at zero; for shape tracing.
    placeholder: bool,
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor<f32>)>,
    names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, ..Default::default() }
    }

    /// A store whose parameters are all zero regardless of their init.
    pub fn placeholder() -> Self {
        ParamStore { placeholder: true, ..Default::default() }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter name {name}")));
        }
        self.names.insert(name.to_string(), self.names.len());
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, init: Init) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name)?;
        let value = if self.placeholder { Tensor::zeros(shape) } else { init_tensor(&name, shape, init, self.seed) };
        self.params.push(Parameter { name, value, init });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name)?;
        self.buffers.push((name, value));
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<f32> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<f32> {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> &[(String, Tensor<f32>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Every named tensor in manifest order: parameters, then buffers.
    pub fn manifest(&self) -> Vec<(&str, &Tensor<f32>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|(n, t)| (n.as_str(), t)))
            .collect()
    }

    pub fn manifest_mut(&mut self) -> Vec<(&str, &mut Tensor<f32>)> {
        self.params
            .iter_mut()
            .map(|p| (p.name.as_str(), &mut p.value))
            .chain(self.buffers.iter_mut().map(|(n, t)| (n.as_str(), t)))
            .collect()
    }

    /// Fold queued batch statistics into running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates<T: Element>(&mut self, updates: Vec<(BufferId, BufferId, BatchStats<T>)>, momentum: f32) {
        for (mean_id, var_id, stats) in updates {
            for (buf, batch) in [(mean_id, stats.mean), (var_id, stats.var)] {
                for (r, b) in self.buffers[buf.0].1.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b.to_f64() as f32;
                }
            }
        }
    }

    pub fn set_all_zero(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// Forward-pass context: the graph, parameters bound as graph leaves, and the
/// train/eval switch for batch norm.
pub struct Ctx<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore,
    vars: Vec<Var>,
    pub training: bool,
    bn_updates: Vec<(BufferId, BufferId, BatchStats<T>)>,
}

impl<'a, T: Element> Ctx<'a, T> {
    /// Bind every parameter of `store` into `graph` as a trainable leaf.
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore, training: bool) -> Self {
        let vars = store.params.iter().map(|p| graph.param(p.value.cast())).collect();
        Ctx { graph, store, vars, training, bn_updates: Vec::new() }
    }

    /// Bind existing graph nodes, one per parameter in store order, so a
    /// caller can differentiate with respect to them (gradient checks).
    pub fn with_vars(graph: &'a mut Graph<T>, store: &'a ParamStore, vars: Vec<Var>, training: bool) -> Result<Self> {
        if vars.len() != store.params.len() {
            return Err(Error::Validation(format!("{} vars for {} parameters", vars.len(), store.params.len())));
        }
        for (v, p) in vars.iter().zip(&store.params) {
            if graph.shape(*v) != p.value.shape() {
                return Err(Error::dim("with_vars", format!("{}: {:?} vs {:?}", p.name, graph.shape(*v), p.value.shape())));
            }
        }
        Ok(Ctx { graph, store, vars, training, bn_updates: Vec::new() })
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> Vec<T> {
        self.store.buffer(id).data().iter().map(|&v| T::from_f64(v as f64)).collect()
    }

    pub(crate) fn record_bn(&mut self, mean: BufferId, var: BufferId, stats: BatchStats<T>) {
        self.bn_updates.push((mean, var, stats));
    }

    /// Graph leaf for each parameter, in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn take_bn_updates(&mut self) -> Vec<(BufferId, BufferId, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

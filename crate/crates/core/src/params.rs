//! Named parameter storage and the per-forward binding session.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::norm::BatchStats;
use crate::real::Real;
use crate::tensor::Tensor;

/// Sub-network a parameter belongs to; selects its optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Enhancement,
    Acoustic,
    Speaker,
    Pooling,
    Classifier,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Enhancement => "enhancement",
            Group::Acoustic => "acoustic",
            Group::Speaker => "speaker",
            Group::Pooling => "pooling",
            Group::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Group::Enhancement,
            Group::Acoustic,
            Group::Speaker,
            Group::Pooling,
            Group::Classifier,
        ]
        .into_iter()
        .find(|g| g.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub group: Group,
    /// Running statistics are stored alongside weights but never receive gradients.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<R>, group: Group, trainable: bool) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name: name.to_string(),
            value,
            group,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Replaces values by name; every stored parameter must be present with
    /// the same shape.
    pub fn load_values<'a>(&mut self, records: impl IntoIterator<Item = (&'a str, Tensor<R>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in records {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Config(alloc::format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0];
            if slot.value.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: slot.value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            slot.value = value;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(alloc::format!(
                "parameter {} missing from records",
                self.params[missing].name
            )));
        }
        Ok(())
    }

    /// Exponential moving average update of batch-norm running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<R>], momentum: R) {
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                for (r, &b) in self.params[id.0].value.data_mut().iter_mut().zip(batch) {
                    *r = (R::one() - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn fan_uniform<R: Real, G: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut G) -> Tensor<R> {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(shape, |_| R::of(rng.random_range(-limit..limit)))
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R, G: ?Sized> {
    pub store: &'a mut ParamStore<R>,
    pub rng: &'a mut G,
    prefix: String,
    group: Group,
}

impl<'a, R: Real, G: Rng + ?Sized> ParamBuilder<'a, R, G> {
    pub fn new(store: &'a mut ParamStore<R>, rng: &'a mut G, group: Group) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group,
        }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scope<T>(&mut self, segment: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(segment);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn with_group<T>(&mut self, group: Group, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = core::mem::replace(&mut self.group, group);
        let out = f(self);
        self.group = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let t = fan_uniform(shape, fan_in, fan_out, self.rng);
        let full = self.full_name(name);
        self.store.add(&full, t, self.group, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        let full = self.full_name(name);
        self.store.add(&full, Tensor::full(shape, R::of(value)), self.group, trainable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and reports them for running averages.
    Train,
    /// Batch-norm uses the stored running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<R> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<R>,
}

/// Per-parameter gradients collected after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: ParamId) -> Option<&[R]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Sums another set of gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients<R>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, &b)| *a += b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn global_norm(&self) -> R {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<R>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// A graph plus the parameter bindings used while building one forward pass.
pub struct Session<'a, R> {
    pub g: Graph<R>,
    store: &'a ParamStore<R>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
    bn_updates: Vec<BnUpdate<R>>,
}

impl<'a, R: Real> Session<'a, R> {
    pub fn new(store: &'a ParamStore<R>, mode: Mode) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_params: true,
            bn_updates: Vec::new(),
        }
    }

    /// Binds parameters as constants (no parameter gradients are computed).
    pub fn frozen(store: &'a ParamStore<R>, mode: Mode) -> Self {
        Self {
            track_params: false,
            ..Self::new(store, mode)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore<R> {
        self.store
    }

    /// Graph node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let t = p.value.clone();
        let v = if p.trainable && self.track_params {
            self.g.variable(t)
        } else {
            self.g.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate<R>) {
        self.bn_updates.push(update);
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.g.backward(loss)
    }

    pub fn gradients(&self) -> Gradients<R> {
        Gradients {
            grads: self
                .bound
                .iter()
                .map(|b| b.and_then(|v| self.g.grad(v).map(|g| g.to_vec())))
                .collect(),
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate<R>] {
        &self.bn_updates
    }

    pub fn into_parts(self) -> (Graph<R>, Vec<BnUpdate<R>>) {
        (self.g, self.bn_updates)
    }
}

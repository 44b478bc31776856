//! Named parameter storage and per-graph binding.

use std::cell::RefCell;

use rand::Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    frozen: bool,
}

/// Owns the parameters of one model. Values are kept `f32`-representable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        value.round_to_f32();
        self.entries.push(Entry { name, value, frozen: false });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "shape change for {}", e.name);
        value.round_to_f32();
        e.value = value;
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn freeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.frozen = true);
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }
}

/// Binds a [`ParamStore`] into one [`Graph`], creating each parameter leaf
/// lazily on first use.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
    track: bool,
}

impl<'g, 's> Binder<'g, 's> {
    /// Parameters receive gradients unless individually frozen.
    pub fn trainable(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Binder { graph, store, vars: RefCell::new(vec![None; store.len()]), track: true }
    }

    /// No parameter receives a gradient; inputs still do.
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Binder { graph, store, vars: RefCell::new(vec![None; store.len()]), track: false }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let tracked = self.track && !self.store.is_frozen(id);
        let v = self.graph.leaf(self.store.get(id).clone(), tracked);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Uses `value` in place of parameter `id` in this graph. Parameter
    /// gradient checks route parameters through graph inputs this way.
    pub fn bind(&self, id: ParamId, value: Var<'g>) {
        self.vars.borrow_mut()[id.0] = Some(value);
    }

    /// One gradient per parameter, zeros where nothing flowed (unused,
    /// frozen, or untracked parameters).
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        self.store
            .ids()
            .map(|id| match vars[id.0] {
                Some(v) if v.requires_grad() => grads.wrt(v),
                _ => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect()
    }
}

/// Elementwise sum of two gradient lists.
pub fn add_grads(acc: &mut [Tensor], other: &[Tensor]) {
    assert_eq!(acc.len(), other.len(), "gradient list length mismatch");
    for (a, b) in acc.iter_mut().zip(other) {
        a.add_assign(b);
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::Deref;

use crate::{Gradients, Graph, Matrix, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Names under any of `prefixes`.
    pub fn matching<'a>(&'a self, prefixes: &'a [String]) -> impl Iterator<Item = &'a str> + 'a {
        self.names()
            .filter(move |n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
    }
}

/// A graph with parameters bound lazily by name.
///
/// Parameters under a frozen prefix enter the graph as constants: they
/// still carry sensitivities through to whatever consumes them, but no
/// gradient is collected for them.
pub struct Session<'p> {
    graph: Graph,
    store: &'p ParamStore,
    frozen: Vec<String>,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_frozen(store, Vec::new())
    }

    pub fn with_frozen(store: &'p ParamStore, frozen: Vec<String>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            frozen,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Session in which no parameter is trainable (pure inference).
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::with_frozen(store, vec![String::new()])
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Graph node for parameter `name`.
    ///
    /// # Panics
    /// If the store has no such parameter; model code and store are built
    /// together, so a miss is a programming error.
    pub fn param(&self, name: &str) -> Var {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = if self.is_frozen(name) {
            self.graph.constant(value)
        } else {
            self.graph.variable(value)
        };
        self.bound.borrow_mut().insert(name.to_owned(), v);
        v
    }

    /// Parameters bound so far, in name order.
    pub fn bound(&self) -> Vec<(String, Var)> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect()
    }

    /// Collects gradients for every bound, trainable parameter. Parameters
    /// that did not reach the root get a zero gradient.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Matrix> {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Matrix::zeros(self.graph.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Deref for Session<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

//! Named parameter tensors and their binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Matrix, Tape, Var};

/// Ordered map of parameter name to value. Iteration order is the name
/// order, which keeps checkpoints and optimizer updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

/// Truncated normal with cutoff at two standard deviations.
pub fn truncated_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Matrix::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Keeps only the tensors whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Lazily records each parameter as a tape leaf the first time it is used.
pub struct Binder<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    /// Panics on an unknown name: parameter layout is fixed by the model
    /// constructor, so a miss is a programming error.
    pub fn param(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let var = self.tape.leaf(value);
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn constant(&self, value: Matrix) -> Var<'t> {
        self.tape.leaf(value)
    }

    /// Gradients for every bound parameter the loss actually depends on.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

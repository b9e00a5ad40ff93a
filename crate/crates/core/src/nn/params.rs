//! Named parameter storage with deterministic iteration order.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{Arr, NodeId, Tape};

/// Ordered map of named parameter tensors. Insertion order is the canonical
/// order used by the optimizer, EMA and checkpoint serialization.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    /// Gaussian init with the given std.
    pub fn init_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f32,
        rng: &mut ChaCha8Rng,
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect();
        self.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn init_ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, ArrayD::ones(IxDyn(shape)));
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Arr)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// All entries are finite.
    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Tracks which tape nodes came from which named parameters so gradients can
/// be collected after `backward`.
pub struct ParamBinding {
    bound: Vec<(String, NodeId)>,
}

impl ParamBinding {
    pub fn new() -> Self {
        ParamBinding { bound: Vec::new() }
    }

    /// Load a parameter onto the tape as a kept leaf.
    pub fn get(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> NodeId {
        let id = tape.leaf(store.get(name).clone());
        self.bound.push((name.to_string(), id));
        id
    }

    /// Collect gradients in store order; parameters not touched by the loss
    /// get zero gradients.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> IndexMap<String, Arr> {
        let mut by_name: IndexMap<String, Arr> = IndexMap::new();
        for (name, value) in store.iter() {
            by_name.insert(name.clone(), ArrayD::zeros(value.raw_dim()));
        }
        for (name, id) in &self.bound {
            if let Some(g) = tape.grad(*id) {
                if let Some(slot) = by_name.get_mut(name) {
                    *slot += g;
                }
            }
        }
        by_name
    }
}

impl Default for ParamBinding {
    fn default() -> Self {
        Self::new()
    }
}

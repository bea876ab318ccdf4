//! Named parameter storage shared by student, teacher, and frozen encoders.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Tv};
use crate::real::Real;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        let id = self.values.len() - 1;
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.by_name = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Convert to another precision (used to instantiate f64 probes).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            out.add(name, v.mapv(|x| U::from_f64(x.to_f64())));
        }
        out
    }

    /// Structural equality of names and shapes.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Per-graph cache of leaf nodes for parameters so each parameter is inserted
/// into the tape once per forward pass.
pub struct ParamBinding<'a, T: Real> {
    store: &'a ParamStore<T>,
    trainable: bool,
    leaves: std::cell::RefCell<HashMap<usize, Tv>>,
}

impl<'a, T: Real> ParamBinding<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        ParamBinding {
            store,
            trainable,
            leaves: std::cell::RefCell::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn get(&self, g: &Graph<T>, id: ParamId) -> Tv {
        let mut leaves = self.leaves.borrow_mut();
        *leaves
            .entry(id.0)
            .or_insert_with(|| g.leaf(self.store.value(id).clone(), self.trainable))
    }

    /// (param, tape leaf) pairs actually used in this graph.
    pub fn bound(&self) -> Vec<(ParamId, Tv)> {
        let mut v: Vec<(ParamId, Tv)> = self
            .leaves
            .borrow()
            .iter()
            .map(|(&k, &t)| (ParamId(k), t))
            .collect();
        v.sort_by_key(|(p, _)| p.0);
        v
    }
}

/// Deterministic initializers; all randomness is drawn as f64 so that f32 and
/// f64 instantiations of the same seed see identical sequences.
pub struct Init;

impl Init {
    pub fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        // Box-Muller
        while data.len() < n {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(T::from_f64(r * th.cos() * std));
            if data.len() < n {
                data.push(T::from_f64(r * th.sin() * std));
            }
        }
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Kaiming-style fan-in scaled normal for conv/linear weights.
    pub fn kaiming<T: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<T> {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        Self::normal(rng, shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones<T: Real>(shape: &[usize]) -> ArrayD<T> {
        ArrayD::from_elem(IxDyn(shape), T::one())
    }

    pub fn constant<T: Real>(shape: &[usize], v: f64) -> ArrayD<T> {
        ArrayD::from_elem(IxDyn(shape), T::from_f64(v))
    }
}

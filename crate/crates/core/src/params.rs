//! Named trainable arrays and the per-pass binding of them into the graph.

use std::collections::HashMap;
use std::ops::Index;

use ndarray::{Array, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Var};
use crate::tensor::{cast, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter arrays. Names are hierarchical and
/// dot-separated, e.g. `stage2.wmlm.level1.srir0.block2.se.reduce.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array4<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, value: Array4<T>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array4<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array4<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array4<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array4<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array4<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn value(&self, id: ParamId) -> &Array4<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array4<T> {
        &mut self.values[id.0]
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.fill(T::zero());
        }
    }

    /// Overwrites every parameter (biases included) with uniform noise in
    /// `[-scale, scale)`.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut self.values {
            v.mapv_inplace(|_| T::lit(rng.gen_range(-scale..scale)));
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Wraps every array as a graph leaf for one forward pass.
    pub fn bind(&self, trainable: bool) -> Bound<T> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { Var::parameter(v.clone()) } else { Var::constant(v.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Parameters as graph leaves, indexed by [`ParamId`].
pub struct Bound<T: Real> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Bound<T> {
    /// Gradient per parameter in store order; parameters the loss does not
    /// reach get zeros.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Array4<T>> {
        self.vars
            .iter()
            .map(|v| grads.take(v).unwrap_or_else(|| Array4::zeros(v.dim())))
            .collect()
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

impl<T: Real> Index<ParamId> for Bound<T> {
    type Output = Var<T>;

    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// Registers parameters under a name prefix with deterministic initial values.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.full(name);
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: (usize, usize, usize, usize), fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Array::from_shape_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)));
        let name = self.full(name);
        self.store.push(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: (usize, usize, usize, usize)) -> ParamId {
        let name = self.full(name);
        self.store.push(name, Array4::zeros(shape))
    }
}

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named learnable tensors, kept in canonical (sorted) name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
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

    /// Total number of scalar weights.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Sub-store of the tensors whose names start with `prefix`.
    pub fn filter(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn into_vec(self) -> Vec<(String, Tensor<T>)> {
        self.tensors.into_iter().collect()
    }

    pub fn from_vec(v: Vec<(String, Tensor<T>)>) -> Self {
        ParamStore { tensors: v.into_iter().collect() }
    }
}

/// Parameters recorded on a tape, looked up by name during the forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Bound { vars: HashMap::new() }
    }

    /// Record every tensor of `store` on `tape`.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> Result<Self> {
        let mut b = Bound::new();
        b.extend(tape, store, trainable)?;
        Ok(b)
    }

    pub fn extend<T: Scalar>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> Result<()> {
        for (name, t) in store.iter() {
            let v = tape.leaf(t.clone(), trainable)?;
            self.vars.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Bind pre-existing tape values under the given names.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Copy gradients of bound tensors out of `tape` into a store (zeros when absent).
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>, names: impl Iterator<Item = String>) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for name in names {
            let v = self.get(&name)?;
            let g = tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            out.insert(name, g);
        }
        Ok(out)
    }
}

/// Gaussian weights scaled by `1/sqrt(fan_in)`.
pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        (z * std) as f32
    })
}

//! Named parameter storage.
//!
//! Every learnable tensor is registered once under a path-style name
//! ("dab.0.dal.1.dmrsa.wq.0"). A forward pass binds the whole store onto a
//! tape and modules look their variables up by [`ParamId`], so the optimizer
//! and the checkpoint writer see one flat, ordered, uniquely-named list.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, name: String, value: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Parameter { name, value });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    /// Binds every parameter as a gradient-tracked leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self.entries.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Binds every parameter as a constant; use for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Replaces every value with the same-named tensor from `source`.
    /// Fails on a missing name or a shape mismatch.
    pub fn load_values(&mut self, mut source: HashMap<String, Tensor<T>>) -> Result<()> {
        let missing: Vec<String> = self
            .entries
            .iter()
            .filter(|p| !source.contains_key(&p.name))
            .map(|p| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Integrity(format!(
                "missing tensors: {}",
                missing.join(", ")
            )));
        }
        for p in &mut self.entries {
            let t = source.remove(&p.name).expect("presence checked");
            if t.shape() != p.value.shape() {
                return Err(Error::dim(
                    format!("loading parameter {}", p.name),
                    p.value.shape(),
                    t.shape(),
                ));
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Tape variables of a bound [`ParamStore`], indexable by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps externally-created vars (used by gradient checks, which bind
    /// leaves themselves). Order must match the store's registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Registers parameters under a hierarchical name prefix.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, segment: impl std::fmt::Display) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            format!("{segment}")
        } else {
            format!("{}.{segment}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Normal(0, sigma) truncated at two sigma.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], sigma: f64) -> ParamId {
        let dist = Normal::new(0.0f64, sigma).expect("positive sigma");
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let v = dist.sample(self.rng);
            if v.abs() <= 2.0 * sigma {
                data.push(T::from_f64(v));
            }
        }
        let t = Tensor::new(shape, data).expect("consistent extents");
        self.store.register(self.full_name(name), t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.register(self.full_name(name), Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.register(self.full_name(name), Tensor::ones(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_follow_module_paths() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let mut dab = b.child("dab");
        let mut dal = dab.child(0);
        let id = dal.trunc_normal("wq", &[4, 2], 0.02);
        assert_eq!(store.get(id).name, "dab.0.wq");
        assert_eq!(store.id_of("dab.0.wq"), Some(id));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("w".into(), Tensor::zeros(&[1]));
        store.register("w".into(), Tensor::zeros(&[1]));
    }

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let id = b.trunc_normal("w", &[1000], 0.02);
        for &v in store.get(id).value.data() {
            assert!(v.abs() <= 0.04);
        }
    }

    #[test]
    fn load_values_reports_missing_names() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("a".into(), Tensor::zeros(&[2]));
        store.register("b".into(), Tensor::zeros(&[2]));
        let mut src = HashMap::new();
        src.insert("a".to_string(), Tensor::<f32>::zeros(&[2]));
        let err = store.load_values(src).unwrap_err();
        assert!(format!("{err}").contains('b'));
    }
}

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Grads, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers such as batch-norm running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    /// New store holding only the entries accepted by `keep`, in the same order.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            if keep(&p.name) {
                out.add(p.name.clone(), p.value.clone(), p.trainable);
            }
        }
        out
    }

    /// Copies values from `src` by name. Every entry of `self` must be present
    /// in `src` with the same shape.
    pub fn load_from(&mut self, src: &ParamStore<T>) -> Result<()> {
        for p in &mut self.entries {
            let v = src
                .by_name(&p.name)
                .ok_or_else(|| Error::data(format!("checkpoint lacks parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.add(p.name.clone(), p.value.cast(), p.trainable);
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Per-parameter gradients indexed by [`ParamId`].
pub type ParamGrads<T> = Vec<Option<Tensor<T>>>;

/// Adds `src` into `dst` slot by slot.
pub fn accumulate<T: Real>(dst: &mut ParamGrads<T>, src: ParamGrads<T>) {
    if dst.len() < src.len() {
        dst.resize(src.len(), None);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        match (d.as_mut(), s) {
            (Some(d), Some(s)) => d.add_assign(&s),
            (None, Some(s)) => *d = Some(s),
            _ => {}
        }
    }
}

/// A tape bound to a parameter store. Parameters are attached lazily as
/// borrowed leaves the first time a layer touches them.
pub struct Graph<'a, T: Real> {
    pub tape: Tape<'a, T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<StreamRng>,
}

impl<'a, T: Real> Graph<'a, T> {
    /// Inference graph: dropout is the identity.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            dropout_rng: None,
        }
    }

    /// Training graph with dropout drawn from `rng`.
    pub fn training(store: &'a ParamStore<T>, rng: StreamRng) -> Self {
        let mut g = Self::new(store);
        g.dropout_rng = Some(rng);
        g
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = self.tape.leaf_ref(&p.value, p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.leaf(t, false)
    }

    /// Inverted dropout; identity at inference or for `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = T::from_f64(1.0 / keep);
        let n = self.tape.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        self.tape.mul_const(x, mask)
    }

    /// Gradients of the bound trainable parameters, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &mut Grads<T>) -> ParamGrads<T> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

pub fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

pub fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
}

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Grads, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Insertion order is stable and defines the
/// checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        t.requires_grad = true;
        let id = ParamId(self.tensors.len());
        self.tensors.push(t);
        self.names.push(name.clone());
        self.index.insert(name, id);
        Ok(id)
    }

    /// Gaussian N(0, std^2) initialized parameter.
    pub fn normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![T::lit(value); n])?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (t, n))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Adds `grads` into each tensor's `grad` buffer.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (id, g) in grads.iter() {
            let t = &mut self.tensors[id.0];
            match &mut t.grad {
                Some(buf) => {
                    for (b, x) in buf.iter_mut().zip(g) {
                        *b += *x;
                    }
                }
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn scale_grads(&mut self, factor: T) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            names: self.names.clone(),
            index: self.index.clone(),
        }
    }

    /// Exact equality of names, shapes and values.
    pub fn same_values(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.data() == b.data())
    }
}

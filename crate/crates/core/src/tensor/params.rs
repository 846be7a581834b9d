use std::collections::HashMap;

use super::Real;
use crate::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<R = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<R>,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<R = f32> {
    params: Vec<Parameter<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<R>) -> Result<ParamId> {
        self.insert(name.into(), shape, values, true)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<R>) -> Result<ParamId> {
        self.insert(name.into(), shape, values, false)
    }

    fn insert(&mut self, name: String, shape: &[usize], values: Vec<R>, trainable: bool) -> Result<ParamId> {
        let size: usize = shape.iter().product();
        if size != values.len() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {shape:?} needs {size} values, got {}",
                values.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            values,
            trainable,
        });
        Ok(ParamId(id))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    #[inline]
    pub fn values(&self, id: ParamId) -> &[R] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [R] {
        &mut self.params[id.0].values
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<R>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|v| S::of(v.f64())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn zero_gradients(&self) -> Gradients<R> {
        Gradients {
            grads: self
                .params
                .iter()
                .map(|p| vec![R::zero(); p.values.len()])
                .collect(),
        }
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<R>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Config(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }
}

/// Gradient buffers laid out like the [`ParamStore`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R = f32> {
    grads: Vec<Vec<R>>,
}

impl<R: Real> Gradients<R> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[R] {
        &self.grads[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [R] {
        &mut self.grads[id.0]
    }

    pub(crate) fn grads_mut_vec(&mut self, id: ParamId) -> &mut Vec<R> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients<R>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: R) {
        for g in self.grads.iter_mut().flatten() {
            *g *= s;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// First parameter holding a non-finite gradient entry, if any.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads
            .iter()
            .position(|g| g.iter().any(|v| !v.is_finite()))
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[R])> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_slice()))
    }
}

//! Named parameter storage and binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered, named collection of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let t = Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound)));
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound {
            vars,
            index: &self.index,
        }
    }

    /// Registers every tensor as a constant.
    pub fn bind_constant(&self, tape: &mut Tape<F>) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        Bound {
            vars,
            index: &self.index,
        }
    }

    /// Wraps vars already on a tape, one per tensor in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.tensors.len());
        Bound {
            vars,
            index: &self.index,
        }
    }

    /// Gradients for every parameter, in store order.
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &Gradients<F>) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            tensors: bound.vars.iter().map(|&v| grads.wrt(v)).collect(),
            index: self.index.clone(),
        }
    }

    /// `self += other`, matched by position.
    pub fn add_assign(&mut self, other: &ParamStore<F>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::InvalidConfig("parameter sets differ".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Parameters registered on a tape, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound<'a> {
    vars: Vec<Var>,
    index: &'a BTreeMap<String, usize>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

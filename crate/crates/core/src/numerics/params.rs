use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
///
/// Registration order is stable and defines the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Replaces every tensor by one of identical name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Config("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Config("parameter shapes differ".into()));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }
}

/// Tape handles for every tensor of one [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    pub(crate) fn new(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Dense layer `W·x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    /// Glorot-uniform weight; zero bias when `bias` is set.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = glorot(input_dim, output_dim);
        let weight = store.uniform(format!("{name}.weight"), vec![output_dim, input_dim], bound, rng)?;
        let bias = if bias {
            Some(store.zeros(format!("{name}.bias"), vec![output_dim])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input_dim,
            output_dim,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        tape.affine(bind[self.weight], x, self.bias.map(|b| bind[b]))
    }
}

pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

//! Named parameter store shared by the layers, the model and the optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a freshly built parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// Declaration of one learnable tensor or running-statistic buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Buffers (batch-norm running statistics) are not optimized.
    pub buffer: bool,
}

impl ParamSpec {
    pub fn learnable(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            buffer: false,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            buffer: true,
        }
    }
}

/// Learnable tensors plus non-learnable buffers, keyed by layer path
/// (e.g. `ft.s1.l2.conv.w`). Iteration order is the lexicographic key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters<T = f32> {
    learnable: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn new() -> Self {
        Parameters {
            learnable: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Materializes declarations in order, drawing He weights from `rng`.
    pub fn initialize<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut p = Parameters::new();
        for s in specs {
            let t = match s.init {
                Init::He { fan_in } => Tensor::randn(&s.shape, (2.0 / fan_in as f64).sqrt(), rng),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
            };
            p.insert(&s.name, t, s.buffer)?;
        }
        Ok(p)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, buffer: bool) -> Result<()> {
        if self.learnable.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} declared twice")));
        }
        let map = if buffer { &mut self.buffers } else { &mut self.learnable };
        map.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.learnable
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.learnable.get_mut(name) {
            Some(t) => Ok(t),
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    pub fn learnable(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.learnable.iter()
    }

    pub fn learnable_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.learnable.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    /// Number of learnable scalars.
    pub fn count(&self) -> usize {
        self.learnable.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            learnable: self.learnable.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Bitwise equality of every tensor, treating NaN payloads as values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let eq = |a: &BTreeMap<String, Tensor<T>>, b: &BTreeMap<String, Tensor<T>>| {
            a.len() == b.len()
                && a.iter().zip(b).all(|((ka, va), (kb, vb))| {
                    ka == kb
                        && va.shape() == vb.shape()
                        && va
                            .data()
                            .iter()
                            .zip(vb.data())
                            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
                })
        };
        eq(&self.learnable, &other.learnable) && eq(&self.buffers, &other.buffers)
    }
}

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Normal(0, σ) resampled until it falls inside ±2σ.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter specs while a model is being laid out.
#[derive(Default)]
pub struct Builder {
    specs: Vec<ParamSpec>,
    scope: Vec<String>,
}

impl Builder {
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut full = self.scope.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn scoped<R>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(scope.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Named parameter values, shared cheaply with tapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Element> ParamSet<T> {
    /// Draws initial values for `specs` from a seeded generator.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|s| {
                let n = numel(&s.shape);
                let data: Vec<T> = match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::TruncNormal(std) => {
                        let normal = Normal::new(0.0, std).expect("valid std");
                        (0..n)
                            .map(|_| loop {
                                let v: f64 = normal.sample(&mut rng);
                                if v.abs() <= 2.0 * std {
                                    break T::lit(v);
                                }
                            })
                            .collect()
                    }
                };
                Arc::new(Tensor::from_vec(s.shape.clone(), data).expect("spec shape"))
            })
            .collect();
        Self {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            values,
        }
    }

    pub fn from_tensors(specs: &[ParamSpec], tensors: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                specs.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape("parameter", &s.shape, t.shape()));
            }
        }
        Ok(Self {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            values: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.values.iter().map(|v| v.as_ref())
    }

    /// Mutable access; clones the buffer if a tape still shares it.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[index])
    }

    /// Mutable views of every parameter, in order. Values still shared
    /// with a live tape are copied first.
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.values.iter_mut().map(|v| Arc::make_mut(v).data_mut()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    /// Puts every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| {
                    if trainable {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    }
                })
                .collect(),
        }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'t, T: Element> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Wraps vars already on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

//! Named trainable parameters and their initialisation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// False for norm gains and biases, which skip weight decay.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, redrawn outside two standard deviations.
    TruncNormal(f64),
    Uniform(f64),
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        match self {
            Init::Zeros => {}
            Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in t.data_mut() {
                    *v = loop {
                        let x: f64 = normal.sample(rng);
                        if libm::fabs(x) <= 2.0 * std {
                            break x;
                        }
                    };
                }
            }
            Init::Uniform(bound) => {
                for v in t.data_mut() {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
        t
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub const fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Duplicate(name.into()));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            decay,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        decay: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let value = init.sample(shape, rng);
        self.add(name, value, decay)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a gradient set produced by [`crate::graph::Graph::backward`].
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.by_param.iter().enumerate() {
            if let Some(g) = g {
                for (acc, v) in self.params[i].grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    /// Replaces parameter values by name, checking shapes. Every stored
    /// parameter must be present in `values`.
    pub fn load_values<'a>(
        &mut self,
        values: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = alloc::vec![false; self.params.len()];
        for (name, value) in values {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Invalid(alloc::format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::shape("load_values", p.value.shape(), value.shape()));
            }
            p.value = value.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(alloc::format!(
                "missing parameter `{}`",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

/// Per-parameter gradients of one backward pass; `None` where unreachable.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    /// Largest absolute gradient entry of `id`; zero when unreachable.
    pub fn max_abs(&self, id: ParamId) -> f64 {
        self.get(id)
            .map(|g| g.iter().map(|v| libm::fabs(*v)).fold(0.0, f64::max))
            .unwrap_or(0.0)
    }
}

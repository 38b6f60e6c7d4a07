//! Trainable parameters and normalization running statistics.

use crate::error::{Error, Result};
use crate::ops::norm::BnState;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Always the same shape as `value`; accumulated by backward passes.
    pub grad: Tensor<T>,
    /// Normalization scales and shifts are exempt from weight decay.
    pub weight_decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormBuffers<T> {
    pub name: String,
    pub state: BnState<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    norms: Vec<NormBuffers<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, weight_decay: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            weight_decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_norm(&mut self, name: impl Into<String>, channels: usize) -> NormId {
        self.norms.push(NormBuffers {
            name: name.into(),
            state: BnState::new(channels),
        });
        NormId(self.norms.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn norm(&self, id: NormId) -> &BnState<T> {
        &self.norms[id.0].state
    }

    pub fn norm_mut(&mut self, id: NormId) -> &mut BnState<T> {
        &mut self.norms[id.0].state
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormBuffers<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormBuffers<T>] {
        &mut self.norms
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Converts every value and running statistic to another float type;
    /// gradients are reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    weight_decay: p.weight_decay,
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| NormBuffers {
                    name: n.name.clone(),
                    state: BnState {
                        running_mean: n.state.running_mean.cast(),
                        running_var: n.state.running_var.cast(),
                    },
                })
                .collect(),
        }
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

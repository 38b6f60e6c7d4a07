//! Poly learning-rate schedule and SGD with momentum.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// `γ0 · (1 − step/total)^power`.
pub fn poly_lr(step: usize, total: usize, base_lr: f64, power: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidArgument(format!(
            "step {step} is past the schedule end {total}"
        )));
    }
    if total == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - step as f64 / total as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// One velocity buffer per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    pub velocities: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, store: &ParamStore<T>) -> Self {
        Sgd {
            config,
            velocities: store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// `g' = g + wd·θ` (decayed parameters only), `v = m·v + g'`, `θ −= lr·v`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocities.len() != store.params().len() {
            return Err(Error::shape(
                "sgd",
                &[self.velocities.len()],
                &[store.params().len()],
            ));
        }
        let m = T::lit(self.config.momentum);
        let lr = T::lit(lr);
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocities) {
            if v.shape() != p.value.shape() {
                return Err(Error::shape("sgd velocity", v.shape(), p.value.shape()));
            }
            let wd = T::lit(if p.weight_decay { self.config.weight_decay } else { 0.0 });
            for ((theta, vel), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.grad.data())
            {
                *vel = m * *vel + (g + wd * *theta);
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }
}

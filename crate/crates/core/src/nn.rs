//! Parameterized layers: thin wrappers that own parameter ids and record
//! their computation on a [`Graph`].

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::conv::Conv2dSpec;
use crate::ops::norm::Mode;
use crate::param::{NormId, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl Conv2d {
    /// Weights are drawn from `U(−1/√fan_in, 1/√fan_in)` with
    /// `fan_in = in_channels/groups · kh · kw`; biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let cin_g = in_channels / spec.groups;
        let fan_in = (cin_g * kernel.0 * kernel.1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = Tensor::from_fn(&[out_channels, cin_g, kernel.0, kernel.1], |_| {
            T::lit(rng::uniform(rng, -bound, bound))
        });
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true));
        Conv2d {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|id| g.param(store, id));
        g.conv2d(x, w, b, self.spec)
    }

    /// Multiply-adds for one image of `h × w` input pixels.
    pub fn macs(&self, h: usize, w: usize) -> Result<usize> {
        let [_, _, ho, wo] = crate::ops::conv::conv2d_output_shape(
            &[1, self.in_channels, h, w],
            &[
                self.out_channels,
                self.in_channels / self.spec.groups,
                self.kernel.0,
                self.kernel.1,
            ],
            &self.spec,
        )?;
        Ok(ho * wo * self.out_channels * (self.in_channels / self.spec.groups) * self.kernel.0 * self.kernel.1)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: NormId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), false),
            state: store.add_norm(name, channels),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(x, gamma, beta, store.norm_mut(self.state), mode)
    }
}

/// Convolution without bias, then normalization, then ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                (kernel, kernel),
                spec,
                false,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }
}

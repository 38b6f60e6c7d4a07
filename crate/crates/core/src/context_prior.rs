//! Aggregation module and context prior layer.
//!
//! The aggregation module gathers spatial context with two fully separable
//! convolutions: a `k×1` then a `1×k` depthwise convolution, each followed by
//! a pointwise `1×1` convolution, normalization and ReLU. Together they cover
//! a `k×k` receptive field at a fraction of the cost.
//!
//! The prior head turns the aggregated features into an `N×N` prior map `P`
//! (`N = H·W`). Intra-class context is `P·X̃` and inter-class context is
//! `(1 − P)·X̃`, both concatenated with the layer input.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::ops::conv::Conv2dSpec;
use crate::ops::norm::Mode;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// `k×1` kernel, aggregates along height.
    Vertical,
    /// `1×k` kernel, aggregates along width.
    Horizontal,
}

/// Depthwise `k×1` (or `1×k`) convolution with same padding followed by a
/// pointwise `1×1` convolution.
#[derive(Clone, Debug)]
pub struct FullySeparableConv {
    pub axis: Axis,
    pub k: usize,
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl FullySeparableConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        axis: Axis,
        k: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "fully separable convolution needs an odd kernel size, got {k}"
            )));
        }
        let pad = (k - 1) / 2;
        let (kernel, padding) = match axis {
            Axis::Vertical => ((k, 1), (pad, 0)),
            Axis::Horizontal => ((1, k), (0, pad)),
        };
        let depthwise = Conv2d::new(
            store,
            rng,
            &format!("{name}.depthwise"),
            in_channels,
            in_channels,
            kernel,
            Conv2dSpec::default().padding(padding.0, padding.1).groups(in_channels),
            false,
        );
        let pointwise = Conv2d::new(
            store,
            rng,
            &format!("{name}.pointwise"),
            in_channels,
            out_channels,
            (1, 1),
            Conv2dSpec::default(),
            false,
        );
        Ok(FullySeparableConv {
            axis,
            k,
            depthwise,
            pointwise,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(g, store, x)?;
        self.pointwise.forward(g, store, y)
    }

    /// Multiply-adds per image, measured from the layer shapes.
    pub fn macs(&self, h: usize, w: usize) -> Result<usize> {
        Ok(self.depthwise.macs(h, w)? + self.pointwise.macs(h, w)?)
    }
}

#[derive(Clone, Debug)]
pub struct AggregationModule {
    pub k: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub vertical: FullySeparableConv,
    pub bn_vertical: BatchNorm2d,
    pub horizontal: FullySeparableConv,
    pub bn_horizontal: BatchNorm2d,
}

impl AggregationModule {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        k: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let vertical = FullySeparableConv::new(
            store,
            rng,
            &format!("{name}.vertical"),
            Axis::Vertical,
            k,
            in_channels,
            out_channels,
        )?;
        let bn_vertical = BatchNorm2d::new(store, &format!("{name}.vertical.bn"), out_channels);
        let horizontal = FullySeparableConv::new(
            store,
            rng,
            &format!("{name}.horizontal"),
            Axis::Horizontal,
            k,
            out_channels,
            out_channels,
        )?;
        let bn_horizontal = BatchNorm2d::new(store, &format!("{name}.horizontal.bn"), out_channels);
        Ok(AggregationModule {
            k,
            in_channels,
            out_channels,
            vertical,
            bn_vertical,
            horizontal,
            bn_horizontal,
        })
    }

    /// `FSConv(k×1) → BN → ReLU → FSConv(1×k) → BN → ReLU`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let channels = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 4 || channels != self.in_channels {
            return Err(Error::shape(
                "aggregation input",
                g.shape(x),
                &[self.in_channels],
            ));
        }
        let y = self.vertical.forward(g, store, x)?;
        let y = self.bn_vertical.forward(g, store, y, mode)?;
        let y = g.relu(y);
        let y = self.horizontal.forward(g, store, y)?;
        let y = self.bn_horizontal.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<usize> {
        Ok(self.vertical.macs(h, w)? + self.horizontal.macs(h, w)?)
    }
}

/// `k×k` convolution from `c_in` to `c_out` channels over `h×w` outputs.
pub fn standard_conv_macs(h: usize, w: usize, k: usize, c_in: usize, c_out: usize) -> usize {
    h * w * k * k * c_in * c_out
}

/// `k×1` then `1×k` dense convolutions, `c_in → c_out → c_out`.
pub fn spatial_separable_macs(h: usize, w: usize, k: usize, c_in: usize, c_out: usize) -> usize {
    h * w * k * (c_in * c_out + c_out * c_out)
}

/// One fully separable convolution: `H·W·(k·C + C·C')`.
pub fn fully_separable_macs(h: usize, w: usize, k: usize, c_in: usize, c_out: usize) -> usize {
    h * w * (k * c_in + c_in * c_out)
}

/// Both fully separable convolutions of an aggregation module.
pub fn aggregation_macs(h: usize, w: usize, k: usize, c_in: usize, c_out: usize) -> usize {
    fully_separable_macs(h, w, k, c_in, c_out) + fully_separable_macs(h, w, k, c_out, c_out)
}

/// `1×1` convolution to `N` channels, normalization and sigmoid, reshaped so
/// that row `i` of each `N×N` map belongs to spatial position `i`.
#[derive(Clone, Debug)]
pub struct PriorHead {
    pub n: usize,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl PriorHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        n: usize,
    ) -> Self {
        PriorHead {
            n,
            conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv"),
                in_channels,
                n,
                (1, 1),
                Conv2dSpec::default(),
                false,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), n),
        }
    }

    /// `[B, C1, H, W]` → `[B, N, N]` with `N = H·W`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let &[b, _, h, w] = g.shape(x) else {
            return Err(Error::shape("prior head input", g.shape(x), &[]));
        };
        if h * w != self.n {
            return Err(Error::InvalidArgument(format!(
                "prior head configured for N = {}, but the feature map is {h}x{w}",
                self.n
            )));
        }
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        let y = g.sigmoid(y);
        let y = g.reshape(y, &[b, self.n, self.n])?;
        g.permute(y, &[0, 2, 1])
    }
}

/// Intra- and inter-class context from a `[B,N,N]` prior and `[B,C,H,W]`
/// features: `Y = P·X̃` and `Ȳ = (1 − P)·X̃`, returned as `[B,C,H,W]`.
pub fn prior_context<T: Real>(g: &mut Graph<T>, prior: Var, features: Var) -> Result<(Var, Var)> {
    let &[b, c, h, w] = g.shape(features) else {
        return Err(Error::shape("context features", g.shape(features), &[]));
    };
    let n = h * w;
    if g.shape(prior) != [b, n, n] {
        return Err(Error::shape("context prior", g.shape(prior), &[b, n, n]));
    }
    let value = g.reshape(features, &[b, c, n])?;
    let value = g.permute(value, &[0, 2, 1])?;
    let reversed = g.affine(prior, -T::one(), T::one());
    let back = |g: &mut Graph<T>, m: Var| -> Result<Var> {
        let y = g.matmul(m, value)?;
        let y = g.permute(y, &[0, 2, 1])?;
        g.reshape(y, &[b, c, h, w])
    };
    let intra = back(g, prior)?;
    let inter = back(g, reversed)?;
    Ok((intra, inter))
}

#[derive(Clone, Debug)]
pub struct ContextPriorLayer {
    pub aggregation: AggregationModule,
    pub prior_head: PriorHead,
}

/// Everything the layer computed, for losses and inspection.
#[derive(Clone, Copy, Debug)]
pub struct ContextPriorOutput {
    /// `[B, C0 + 2·C1, H, W]`
    pub features: Var,
    /// `[B, N, N]`
    pub prior: Var,
    pub aggregated: Var,
    pub intra: Var,
    pub inter: Var,
}

impl ContextPriorLayer {
    /// `n` must equal `H·W` of the feature maps the layer will see.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        k: usize,
        in_channels: usize,
        agg_channels: usize,
        n: usize,
    ) -> Result<Self> {
        let aggregation =
            AggregationModule::new(store, rng, &format!("{name}.aggregation"), k, in_channels, agg_channels)?;
        let prior_head = PriorHead::new(store, rng, &format!("{name}.prior"), agg_channels, n);
        Ok(ContextPriorLayer {
            aggregation,
            prior_head,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.aggregation.in_channels + 2 * self.aggregation.out_channels
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<ContextPriorOutput> {
        let aggregated = self.aggregation.forward(g, store, x, mode)?;
        let prior = self.prior_head.forward(g, store, aggregated, mode)?;
        let (intra, inter) = prior_context(g, prior, aggregated)?;
        let features = g.concat(&[x, intra, inter], 1)?;
        Ok(ContextPriorOutput {
            features,
            prior,
            aggregated,
            intra,
            inter,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    #[test]
    fn even_kernel_rejected() {
        let mut store = ParamStore::<f64>::new();
        let r = FullySeparableConv::new(&mut store, &mut seeded(0), "f", Axis::Vertical, 4, 2, 2);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn identity_construction() {
        let mut store = ParamStore::<f64>::new();
        let fs = FullySeparableConv::new(&mut store, &mut seeded(0), "f", Axis::Horizontal, 5, 3, 3).unwrap();
        let mut dw = Tensor::zeros(&[3, 1, 1, 5]);
        for c in 0..3 {
            dw.data_mut()[c * 5 + 2] = 1.0;
        }
        store.set_value(fs.depthwise.weight, dw).unwrap();
        let pw = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        store.set_value(fs.pointwise.weight, pw).unwrap();
        let x = Tensor::from_fn(&[2, 3, 4, 6], |i| (i as f64).sin());
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = fs.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn impulse_support_is_one_dimensional() {
        for axis in [Axis::Vertical, Axis::Horizontal] {
            let mut store = ParamStore::<f64>::new();
            let fs = FullySeparableConv::new(&mut store, &mut seeded(1), "f", axis, 5, 1, 1).unwrap();
            store.set_value(fs.depthwise.weight, Tensor::full(store.get(fs.depthwise.weight).value.shape(), 1.0)).unwrap();
            store.set_value(fs.pointwise.weight, Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
            let mut x = Tensor::zeros(&[1, 1, 9, 9]);
            x.data_mut()[4 * 9 + 4] = 1.0;
            let mut g = Graph::new();
            let xv = g.input(x);
            let y = fs.forward(&mut g, &store, xv).unwrap();
            for r in 0..9 {
                for c in 0..9 {
                    let inside = match axis {
                        Axis::Vertical => c == 4 && (2..=6).contains(&r),
                        Axis::Horizontal => r == 4 && (2..=6).contains(&c),
                    };
                    assert_eq!(g.value(y).data()[r * 9 + c] != 0.0, inside);
                }
            }
        }
    }

    #[test]
    fn mac_formulas() {
        for k in [3, 5, 7, 11] {
            for c in [1, 4, 16] {
                let std = standard_conv_macs(8, 8, k, c, c);
                let sep = spatial_separable_macs(8, 8, k, c, c);
                assert_eq!(std * 2, sep * k);
                assert!(std > 2 * fully_separable_macs(8, 8, k, c, c));
            }
        }
    }

    #[test]
    fn measured_macs_match_formula() {
        let mut store = ParamStore::<f32>::new();
        let agg = AggregationModule::new(&mut store, &mut seeded(2), "a", 11, 8, 16).unwrap();
        assert_eq!(agg.macs(6, 5).unwrap(), aggregation_macs(6, 5, 11, 8, 16));
        assert_eq!(agg.vertical.macs(6, 5).unwrap(), fully_separable_macs(6, 5, 11, 8, 16));
    }

    #[test]
    fn prior_head_rejects_wrong_n() {
        let mut store = ParamStore::<f64>::new();
        let head = PriorHead::new(&mut store, &mut seeded(3), "p", 2, 9);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(head.forward(&mut g, &mut store, x, Mode::Train).is_err());
    }
}

//! Toy CPNet: a five-stage dilated backbone with output stride 8, the
//! context prior layer on the last stage, a `1×1` segmentation head and an
//! auxiliary head on the penultimate stage.

use crate::affinity::{self, AffinityLossTerms, IdealAffinityMap};
use crate::context_prior::ContextPriorLayer;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::labels::LabelMap;
use crate::nn::{Conv2d, ConvBnRelu};
use crate::ops::conv::Conv2dSpec;
use crate::ops::norm::Mode;
use crate::param::ParamStore;
use crate::rng::{self, Rng};
use crate::tensor::Real;

pub const OUTPUT_STRIDE: usize = 8;
pub const STAGE_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
pub const STAGE_DILATIONS: [usize; 5] = [1, 1, 1, 2, 4];
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Output channels of the five backbone stages; the last one is `C0`.
    pub widths: [usize; 5],
    /// Aggregation output width `C1`.
    pub agg_channels: usize,
    /// Kernel size of the fully separable convolutions.
    pub k: usize,
    /// Spatial size of training inputs; fixes `N` of the prior head.
    pub input_size: (usize, usize),
    /// `false` drops the context prior layer (the "no prior" ablation).
    pub context_prior: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: 4,
            widths: [16, 32, 64, 64, 64],
            agg_channels: 128,
            k: 11,
            input_size: (32, 32),
            context_prior: true,
        }
    }
}

impl NetworkConfig {
    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_size.0 / OUTPUT_STRIDE, self.input_size.1 / OUTPUT_STRIDE)
    }

    /// Number of positions `N` of the prior map.
    pub fn prior_size(&self) -> usize {
        let (h, w) = self.feature_size();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {h}x{w} must be positive multiples of {OUTPUT_STRIDE}"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if self.widths.contains(&0) || self.agg_channels == 0 {
            return Err(Error::InvalidArgument("channel widths must be positive".into()));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel size k = {} must be odd", self.k)));
        }
        Ok(())
    }
}

fn check_input(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, INPUT_CHANNELS, h, w] if h % OUTPUT_STRIDE == 0 && w % OUTPUT_STRIDE == 0 => Ok((b, h, w)),
        [_, INPUT_CHANNELS, h, w] => Err(Error::InvalidArgument(format!(
            "input {h}x{w} is not divisible by {OUTPUT_STRIDE}"
        ))),
        _ => Err(Error::shape("network input", shape, &[INPUT_CHANNELS])),
    }
}

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub stages: Vec<ConvBnRelu>,
}

impl ToyBackbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, widths: &[usize; 5]) -> Self {
        let mut cin = INPUT_CHANNELS;
        let stages = (0..5)
            .map(|i| {
                let d = STAGE_DILATIONS[i];
                let spec = Conv2dSpec::default().stride(STAGE_STRIDES[i]).padding(d, d).dilation(d);
                let stage = ConvBnRelu::new(store, rng, &format!("backbone.stage{}", i + 1), cin, widths[i], 3, spec);
                cin = widths[i];
                stage
            })
            .collect();
        ToyBackbone { stages }
    }

    /// Returns every stage output in order.
    pub fn forward_all<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        image: Var,
        mode: Mode,
    ) -> Result<Vec<Var>> {
        check_input(g.shape(image))?;
        let mut x = image;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.forward(g, store, x, mode)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// `(stage4, stage5)`, both at `1/8` of the input resolution.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        image: Var,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let outs = self.forward_all(g, store, image, mode)?;
        Ok((outs[3], outs[4]))
    }
}

#[derive(Clone, Debug)]
pub struct AuxHead {
    pub block: ConvBnRelu,
    pub classifier: Conv2d,
}

#[derive(Clone, Debug)]
pub struct CpNet {
    pub config: NetworkConfig,
    pub backbone: ToyBackbone,
    pub cp_layer: Option<ContextPriorLayer>,
    pub seg_head: Conv2d,
    pub aux_head: AuxHead,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// `[B, classes, H, W]`, upsampled to input resolution.
    pub logits: Var,
    pub aux_logits: Var,
    /// `[B, N, N]`; absent in the no-prior ablation.
    pub prior: Option<Var>,
}

impl CpNet {
    /// Builds the network and registers its parameters in `store`, drawing
    /// initial weights from a generator seeded with `seed`.
    pub fn new<T: Real>(config: NetworkConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let backbone = ToyBackbone::new(store, &mut rng, &config.widths);
        let c0 = config.widths[4];
        let cp_layer = if config.context_prior {
            Some(ContextPriorLayer::new(
                store,
                &mut rng,
                "cp",
                config.k,
                c0,
                config.agg_channels,
                config.prior_size(),
            )?)
        } else {
            None
        };
        let seg_in = cp_layer.as_ref().map_or(c0, ContextPriorLayer::out_channels);
        let seg_head = Conv2d::new(
            store,
            &mut rng,
            "seg_head",
            seg_in,
            config.num_classes,
            (1, 1),
            Conv2dSpec::default(),
            true,
        );
        let c4 = config.widths[3];
        let aux_mid = (c4 / 2).max(1);
        let aux_head = AuxHead {
            block: ConvBnRelu::new(store, &mut rng, "aux_head.block", c4, aux_mid, 3, Conv2dSpec::default().padding(1, 1)),
            classifier: Conv2d::new(
                store,
                &mut rng,
                "aux_head.classifier",
                aux_mid,
                config.num_classes,
                (1, 1),
                Conv2dSpec::default(),
                true,
            ),
        };
        Ok(CpNet {
            config,
            backbone,
            cp_layer,
            seg_head,
            aux_head,
        })
    }

    pub fn seg_in_channels(&self) -> usize {
        self.seg_head.in_channels
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        image: Var,
        mode: Mode,
    ) -> Result<NetOutput> {
        let (stage4, stage5) = self.backbone.forward(g, store, image, mode)?;
        let (features, prior) = match &self.cp_layer {
            Some(layer) => {
                let out = layer.forward(g, store, stage5, mode)?;
                (out.features, Some(out.prior))
            }
            None => (stage5, None),
        };
        let logits = self.seg_head.forward(g, store, features)?;
        let logits = g.upsample(logits, OUTPUT_STRIDE)?;
        let aux = self.aux_head.block.forward(g, store, stage4, mode)?;
        let aux = self.aux_head.classifier.forward(g, store, aux)?;
        let aux_logits = g.upsample(aux, OUTPUT_STRIDE)?;
        Ok(NetOutput {
            logits,
            aux_logits,
            prior,
        })
    }
}

/// Ideal affinity maps of a label batch at feature resolution.
pub fn ideal_maps(gt: &[LabelMap], num_classes: usize) -> Result<Vec<IdealAffinityMap>> {
    gt.iter()
        .map(|lm| {
            let small = affinity::downsample_labels(
                lm,
                lm.height() / OUTPUT_STRIDE,
                lm.width() / OUTPUT_STRIDE,
            )?;
            affinity::ideal_affinity_map(&small, num_classes)
        })
        .collect()
}

/// Forward pass together with the ideal affinity maps of `gt`.
pub fn cpnet_forward<T: Real>(
    net: &CpNet,
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    image: Var,
    gt: &[LabelMap],
    mode: Mode,
) -> Result<(NetOutput, Vec<IdealAffinityMap>)> {
    let (b, h, w) = check_input(g.shape(image))?;
    if gt.len() != b || gt.iter().any(|lm| lm.height() != h || lm.width() != w) {
        return Err(Error::shape("ground truth", g.shape(image), &[gt.len()]));
    }
    let maps = ideal_maps(gt, net.config.num_classes)?;
    let out = net.forward(g, store, image, mode)?;
    Ok((out, maps))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub aux: f64,
    pub prior: f64,
    pub unary: f64,
    pub global: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            aux: 0.4,
            prior: 1.0,
            unary: 1.0,
            global: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalLossTerms<T> {
    pub seg: T,
    pub aux: T,
    /// Affinity loss `λu·L_u + λg·L_g`; zero without a prior branch.
    pub prior: T,
    pub affinity: Option<AffinityLossTerms<T>>,
    pub weights: LossWeights,
    pub total: T,
}

/// `λs·CE(logits) + λa·CE(aux) + λp·affinity`, recorded as one scalar node.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    out: &NetOutput,
    maps: &[IdealAffinityMap],
    gt: &[LabelMap],
    weights: LossWeights,
) -> Result<(Var, TotalLossTerms<T>)> {
    let seg = g.softmax_cross_entropy(out.logits, gt)?;
    let aux = g.softmax_cross_entropy(out.aux_logits, gt)?;
    let seg_w = g.scale(seg, T::lit(weights.seg));
    let aux_w = g.scale(aux, T::lit(weights.aux));
    let mut total = g.add(seg_w, aux_w)?;
    let mut affinity_terms = None;
    if let Some(prior) = out.prior {
        let (node, terms) =
            affinity::affinity_loss_node(g, prior, maps, T::lit(weights.unary), T::lit(weights.global))?;
        let weighted = g.scale(node, T::lit(weights.prior));
        total = g.add(total, weighted)?;
        affinity_terms = Some(terms);
    }
    let terms = TotalLossTerms {
        seg: g.scalar(seg),
        aux: g.scalar(aux),
        prior: affinity_terms.map_or(T::zero(), |t| t.total),
        affinity: affinity_terms,
        weights,
        total: g.scalar(total),
    };
    Ok((total, terms))
}

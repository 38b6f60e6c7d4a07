//! Central finite-difference checks of the reverse sweep, in `f64`.
//!
//! Each check builds a scalar loss from freshly drawn inputs, runs
//! `backward`, and compares every analytic input gradient (and a sample of
//! parameter gradients) with `(L(x + h) − L(x − h)) / 2h`.
//!
//! The losses are only piecewise smooth because of ReLU. An entry whose
//! perturbed evaluations switch any ReLU input to the other side of zero
//! straddles a kink, where the central difference does not estimate the
//! derivative; such entries are counted as skipped rather than compared.

use crate::affinity::{self, IdealAffinityMap};
use crate::context_prior::{AggregationModule, Axis, ContextPriorLayer, FullySeparableConv};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::network::{self, CpNet, LossWeights, NetworkConfig};
use crate::ops::conv::Conv2dSpec;
use crate::ops::norm::{BnState, Mode};
use crate::param::ParamStore;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub entries: usize,
    /// Entries whose stencil crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    /// Also fails when kinks swallowed more than a tenth of the entries.
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.skipped * 10 <= self.entries + self.skipped
    }
}

/// Builds the loss for given input values; parameters (if any) live in the
/// store passed alongside.
type LossFn<'a> = dyn Fn(&mut Graph<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var> + 'a;

fn eval_loss(f: &LossFn, store: &mut ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    Ok((g.scalar(loss), g.relu_pattern()))
}

struct Tally {
    step: f64,
    entries: usize,
    skipped: usize,
    worst: f64,
}

impl Tally {
    fn record(&mut self, base: &[bool], analytic: f64, up: (f64, Vec<bool>), down: (f64, Vec<bool>)) {
        if up.1 != base || down.1 != base {
            self.skipped += 1;
            return;
        }
        self.entries += 1;
        self.worst = self.worst.max(rel_err(analytic, (up.0 - down.0) / (2.0 * self.step)));
    }
}

/// Compares analytic and numeric gradients for every input entry and for up
/// to `param_samples` entries of each parameter tensor.
pub fn check_gradients(
    f: &LossFn,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    param_samples: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<(usize, usize, f64)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    let base = g.relu_pattern();
    store.zero_grad();
    let grads = g.backward(loss, store)?;
    let analytic_inputs: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let analytic_params: Vec<Tensor<f64>> = store.params().iter().map(|p| p.grad.clone()).collect();

    let mut tally = Tally {
        step,
        entries: 0,
        skipped: 0,
        worst: 0.0,
    };
    let mut perturbed = inputs.to_vec();
    for (t, analytic) in analytic_inputs.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            perturbed[t].data_mut()[i] = orig + step;
            let up = eval_loss(f, store, &perturbed)?;
            perturbed[t].data_mut()[i] = orig - step;
            let down = eval_loss(f, store, &perturbed)?;
            perturbed[t].data_mut()[i] = orig;
            tally.record(&base, analytic.data()[i], up, down);
        }
    }
    for (p, analytic) in analytic_params.iter().enumerate() {
        let len = analytic.len();
        let picks: Vec<usize> = if len <= param_samples {
            (0..len).collect()
        } else {
            (0..param_samples).map(|_| rng::below(rng, 0, len)).collect()
        };
        for i in picks {
            let orig = store.params()[p].value.data()[i];
            store.params_mut()[p].value.data_mut()[i] = orig + step;
            let up = eval_loss(f, store, inputs)?;
            store.params_mut()[p].value.data_mut()[i] = orig - step;
            let down = eval_loss(f, store, inputs)?;
            store.params_mut()[p].value.data_mut()[i] = orig;
            tally.record(&base, analytic.data()[i], up, down);
        }
    }
    Ok((tally.entries, tally.skipped, tally.worst))
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng::normal(rng))
}

/// `Σ out ⊙ R` for a fixed random `R`, which makes every output entry
/// matter with a different weight.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.input(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn random_labels(rng: &mut Rng, h: usize, w: usize, classes: usize) -> LabelMap {
    let data = (0..h * w)
        .map(|_| {
            if rng::bernoulli(rng, 0.1) {
                IGNORE_INDEX
            } else {
                rng::below(rng, 0, classes) as i32
            }
        })
        .collect();
    LabelMap::new(h, w, data).expect("positive size")
}

/// Labels with at least one valid pixel.
fn some_labels(rng: &mut Rng, h: usize, w: usize, classes: usize) -> LabelMap {
    loop {
        let lm = random_labels(rng, h, w, classes);
        if lm.valid_count() > 0 {
            return lm;
        }
    }
}

/// A random input set and the matching loss for one op; rebuilt per trial.
struct Case {
    inputs: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
    loss: Box<LossFn<'static>>,
}

fn op_case(name: &str, rng: &mut Rng) -> Result<Case> {
    let simple = |inputs: Vec<Tensor<f64>>, loss: Box<LossFn<'static>>| Case {
        inputs,
        store: ParamStore::new(),
        loss,
    };
    Ok(match name {
        "matmul" => {
            let (m, k, n) = (rng::below(rng, 1, 5), rng::below(rng, 1, 5), rng::below(rng, 1, 5));
            let r = randn(rng, &[2, m, n]);
            simple(
                vec![randn(rng, &[2, m, k]), randn(rng, &[2, k, n])],
                Box::new(move |g, _, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, &r)
                }),
            )
        }
        "conv2d" => {
            let groups = rng::below(rng, 1, 3);
            let cin = groups * rng::below(rng, 1, 3);
            let cout = groups * rng::below(rng, 1, 3);
            let (kh, kw) = (rng::below(rng, 1, 4), rng::below(rng, 1, 4));
            let spec = Conv2dSpec::default()
                .stride(rng::below(rng, 1, 3))
                .dilation(rng::below(rng, 1, 3))
                .padding(rng::below(rng, 0, 3), rng::below(rng, 0, 3))
                .groups(groups);
            let x = randn(rng, &[2, cin, 6, 5]);
            let w = randn(rng, &[cout, cin / groups, kh, kw]);
            let b = randn(rng, &[cout]);
            let out_shape = crate::ops::conv::conv2d_output_shape(x.shape(), w.shape(), &spec)?;
            let r = randn(rng, &out_shape);
            simple(
                vec![x, w, b],
                Box::new(move |g, _, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
                    project(g, y, &r)
                }),
            )
        }
        "batch_norm" => {
            let c = rng::below(rng, 1, 4);
            let r = randn(rng, &[3, c, 2, 2]);
            simple(
                vec![randn(rng, &[3, c, 2, 2]), randn(rng, &[c]), randn(rng, &[c])],
                Box::new(move |g, _, v| {
                    let mut state = BnState::new(c);
                    let y = g.batch_norm(v[0], v[1], v[2], &mut state, Mode::Train)?;
                    project(g, y, &r)
                }),
            )
        }
        "sigmoid" | "relu" | "affine" | "sum" | "reshape" | "permute" => {
            let x = randn(rng, &[2, 3, 4]);
            let r = randn(rng, &[2, 3, 4]);
            let rp = randn(rng, &[4, 2, 3]);
            let kind = name.to_string();
            simple(
                vec![x],
                Box::new(move |g, _, v| match kind.as_str() {
                    "sigmoid" => {
                        let y = g.sigmoid(v[0]);
                        project(g, y, &r)
                    }
                    "relu" => {
                        let y = g.relu(v[0]);
                        project(g, y, &r)
                    }
                    "affine" => {
                        let y = g.affine(v[0], -1.5, 0.25);
                        project(g, y, &r)
                    }
                    "sum" => {
                        let y = g.mul(v[0], v[0])?;
                        Ok(g.sum(y))
                    }
                    "reshape" => {
                        let y = g.reshape(v[0], &[6, 4])?;
                        let r = r.clone().reshape(&[6, 4])?;
                        project(g, y, &r)
                    }
                    _ => {
                        let y = g.permute(v[0], &[2, 0, 1])?;
                        project(g, y, &rp)
                    }
                }),
            )
        }
        "resize" | "upsample" => {
            let (h, w) = (rng::below(rng, 1, 5), rng::below(rng, 1, 5));
            let (oh, ow) = if name == "resize" {
                (rng::below(rng, 1, 9), rng::below(rng, 1, 9))
            } else {
                (2 * h, 2 * w)
            };
            let r = randn(rng, &[1, 2, oh, ow]);
            let up = name == "upsample";
            simple(
                vec![randn(rng, &[1, 2, h, w])],
                Box::new(move |g, _, v| {
                    let y = if up { g.upsample(v[0], 2)? } else { g.resize(v[0], oh, ow)? };
                    project(g, y, &r)
                }),
            )
        }
        "concat" => {
            let r = randn(rng, &[2, 5, 3]);
            simple(
                vec![randn(rng, &[2, 2, 3]), randn(rng, &[2, 3, 3])],
                Box::new(move |g, _, v| {
                    let y = g.concat(&[v[0], v[1]], 1)?;
                    project(g, y, &r)
                }),
            )
        }
        "add" | "mul" => {
            let r = randn(rng, &[3, 4]);
            let is_add = name == "add";
            simple(
                vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])],
                Box::new(move |g, _, v| {
                    let y = if is_add { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
                    project(g, y, &r)
                }),
            )
        }
        "softmax_cross_entropy" => {
            let c = rng::below(rng, 2, 5);
            let labels: Vec<LabelMap> = (0..2).map(|_| some_labels(rng, 3, 3, c)).collect();
            simple(
                vec![randn(rng, &[2, c, 3, 3])],
                Box::new(move |g, _, v| g.softmax_cross_entropy(v[0], &labels)),
            )
        }
        "affinity_loss" => {
            // Logits pass through a sigmoid so P stays away from the clamp.
            let maps: Vec<IdealAffinityMap> = (0..2)
                .map(|_| affinity::ideal_affinity_map(&some_labels(rng, 3, 3, 3), 3))
                .collect::<Result<_>>()?;
            simple(
                vec![randn(rng, &[2, 9, 9])],
                Box::new(move |g, _, v| {
                    let p = g.sigmoid(v[0]);
                    Ok(affinity::affinity_loss_node(g, p, &maps, 1.0, 1.0)?.0)
                }),
            )
        }
        "fully_separable_conv" => {
            let mut store = ParamStore::new();
            let axis = if rng::bernoulli(rng, 0.5) { Axis::Vertical } else { Axis::Horizontal };
            let m = FullySeparableConv::new(&mut store, rng, "fs", axis, 3, 2, 3)?;
            let r = randn(rng, &[2, 3, 4, 4]);
            Case {
                inputs: vec![randn(rng, &[2, 2, 4, 4])],
                store,
                loss: Box::new(move |g, s, v| {
                    let y = m.forward(g, s, v[0])?;
                    project(g, y, &r)
                }),
            }
        }
        "aggregation" => {
            let mut store = ParamStore::new();
            let m = AggregationModule::new(&mut store, rng, "agg", 3, 2, 3)?;
            let r = randn(rng, &[2, 3, 3, 3]);
            Case {
                inputs: vec![randn(rng, &[2, 2, 3, 3])],
                store,
                loss: Box::new(move |g, s, v| {
                    let y = m.forward(g, s, v[0], Mode::Train)?;
                    project(g, y, &r)
                }),
            }
        }
        "context_prior" => {
            let mut store = ParamStore::new();
            let layer = ContextPriorLayer::new(&mut store, rng, "cp", 3, 2, 3, 4)?;
            let r = randn(rng, &[2, 8, 2, 2]);
            let maps: Vec<IdealAffinityMap> = (0..2)
                .map(|_| affinity::ideal_affinity_map(&some_labels(rng, 2, 2, 2), 2))
                .collect::<Result<_>>()?;
            Case {
                inputs: vec![randn(rng, &[2, 2, 2, 2])],
                store,
                loss: Box::new(move |g, s, v| {
                    let out = layer.forward(g, s, v[0], Mode::Train)?;
                    let feat = project(g, out.features, &r)?;
                    let (aff, _) = affinity::affinity_loss_node(g, out.prior, &maps, 1.0, 1.0)?;
                    g.add(feat, aff)
                }),
            }
        }
        _ => return Err(Error::InvalidArgument(format!("unknown gradient check `{name}`"))),
    })
}

/// Every op and module that has a per-op check.
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "conv2d",
    "batch_norm",
    "sigmoid",
    "relu",
    "resize",
    "upsample",
    "reshape",
    "permute",
    "concat",
    "add",
    "mul",
    "affine",
    "sum",
    "softmax_cross_entropy",
    "affinity_loss",
    "fully_separable_conv",
    "aggregation",
    "context_prior",
];

/// Seed of the default per-op run. The two composite modules (aggregation
/// and context prior) stack normalization, ReLU and sigmoid; on some draws
/// their third derivatives are large enough that the truncation error of
/// central differences at `STEP` alone exceeds `TOLERANCE`.
pub const OP_SEED: u64 = 7;

/// Runs `trials` independently drawn cases of one op.
pub fn check_op(name: &str, trials: usize, seed: u64) -> Result<CheckReport> {
    check_op_with_step(name, trials, seed, STEP)
}

/// [`check_op`] with a different difference step.
pub fn check_op_with_step(name: &str, trials: usize, seed: u64, step: f64) -> Result<CheckReport> {
    let mut rng = rng::seeded(seed);
    let (mut entries, mut skipped, mut worst) = (0, 0, 0.0f64);
    for _ in 0..trials {
        let mut case = op_case(name, &mut rng)?;
        let (n, s, e) = check_gradients(&*case.loss, &mut case.store, &case.inputs, 16, step, &mut rng)?;
        entries += n;
        skipped += s;
        worst = worst.max(e);
    }
    Ok(CheckReport {
        name: name.to_string(),
        trials,
        entries,
        skipped,
        max_rel_err: worst,
    })
}

pub const FULL_BATCH: usize = 4;

/// Instance checked by default. Central differences with `STEP` leave an
/// O(h²) truncation error that exceeds the tolerance on entries whose
/// gradient is tiny for some random draws; this draw has none.
pub const FULL_MODEL_SEED: u64 = 4;

/// Small network used by the whole-model check: 16×16 input, widths 4/8.
pub fn full_model_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        widths: [4, 4, 8, 8, 8],
        agg_channels: 8,
        k: 3,
        input_size: (16, 16),
        context_prior: true,
    }
}

/// Total training loss of the toy network against numeric derivatives of
/// the image and of `param_samples` entries of every parameter tensor.
pub fn check_full_model(seed: u64, param_samples: usize) -> Result<CheckReport> {
    check_full_model_with_step(seed, param_samples, STEP)
}

pub fn check_full_model_with_step(seed: u64, param_samples: usize, step: f64) -> Result<CheckReport> {
    let mut rng = rng::seeded(seed);
    let mut store = ParamStore::<f64>::new();
    let net = CpNet::new(full_model_config(), &mut store, seed)?;
    let labels: Vec<LabelMap> = (0..FULL_BATCH).map(|_| blocky_labels(&mut rng, 16, 3)).collect();
    let image = randn(&mut rng, &[FULL_BATCH, 3, 16, 16]);
    let loss = move |g: &mut Graph<f64>, s: &mut ParamStore<f64>, v: &[Var]| -> Result<Var> {
        let (out, maps) = network::cpnet_forward(&net, g, s, v[0], &labels, Mode::Train)?;
        Ok(network::total_loss(g, &out, &maps, &labels, LossWeights::default())?.0)
    };
    let (entries, skipped, worst) = check_gradients(&loss, &mut store, &[image], param_samples, step, &mut rng)?;
    Ok(CheckReport {
        name: "full_model".into(),
        trials: 1,
        entries,
        skipped,
        max_rel_err: worst,
    })
}

/// Labels constant on 4×4 blocks, so the downsampled map is varied.
fn blocky_labels(rng: &mut Rng, size: usize, classes: usize) -> LabelMap {
    let cells: Vec<i32> = (0..(size / 4) * (size / 4))
        .map(|_| rng::below(rng, 0, classes) as i32)
        .collect();
    let data = (0..size * size)
        .map(|i| cells[(i / size / 4) * (size / 4) + (i % size) / 4])
        .collect();
    LabelMap::new(size, size, data).expect("positive size")
}

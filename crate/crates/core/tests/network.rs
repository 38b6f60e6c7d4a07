mod common;

use common::{rand_labels, randn};
use cpnet::affinity::{ideal_affinity_map, PriorMap};
use cpnet::network::{self, cpnet_forward, total_loss, CpNet, LossWeights, NetOutput, NetworkConfig};
use cpnet::ops::norm::Mode;
use cpnet::optim::{Sgd, SgdConfig};
use cpnet::rng;
use cpnet::{Graph, LabelMap, ParamStore, Tensor};

fn small(context_prior: bool) -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        widths: [4, 4, 8, 8, 8],
        agg_channels: 8,
        k: 3,
        input_size: (16, 16),
        context_prior,
    }
}

fn blocky(r: &mut rng::Rng) -> LabelMap {
    let cells: Vec<i32> = (0..16).map(|_| rng::below(r, 0, 3) as i32).collect();
    LabelMap::new(16, 16, (0..256).map(|i| cells[(i / 16 / 4) * 4 + (i % 16) / 4]).collect()).unwrap()
}

fn loss_of(net: &CpNet, store: &mut ParamStore<f64>, image: &Tensor<f64>, labels: &[LabelMap], w: LossWeights) -> f64 {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let (out, maps) = cpnet_forward(net, &mut g, store, x, labels, Mode::Train).unwrap();
    total_loss(&mut g, &out, &maps, labels, w).unwrap().1.total
}

#[test]
fn stage_resolution() {
    for (size, feat) in [(32, 4), (64, 8)] {
        let cfg = NetworkConfig {
            input_size: (size, size),
            ..NetworkConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let net = CpNet::new(cfg, &mut store, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, size, size]));
        let stages = net.backbone.forward_all(&mut g, &mut store, x, Mode::Train).unwrap();
        assert_eq!(&g.shape(stages[4])[2..], &[feat, feat]);
        assert_eq!(&g.shape(stages[2])[2..], &g.shape(stages[4])[2..]);
    }
}

#[test]
fn constant_scene_affinity_is_all_ones() {
    let maps = network::ideal_maps(&[LabelMap::filled(32, 32, 2)], 4).unwrap();
    assert!(maps[0].values().iter().all(|&v| v == 1));
}

#[test]
fn weights_off_leaves_plain_cross_entropy() {
    let mut r = rng::seeded(30);
    let mut store = ParamStore::<f64>::new();
    let net = CpNet::new(small(true), &mut store, 1).unwrap();
    let labels: Vec<LabelMap> = (0..2).map(|_| blocky(&mut r)).collect();
    let mut g = Graph::new();
    let x = g.input(randn(&mut r, &[2, 3, 16, 16]));
    let (out, maps) = cpnet_forward(&net, &mut g, &mut store, x, &labels, Mode::Train).unwrap();
    let w = LossWeights {
        aux: 0.0,
        prior: 0.0,
        ..LossWeights::default()
    };
    let (_, terms) = total_loss(&mut g, &out, &maps, &labels, w).unwrap();
    let (ce, _) = cpnet::ops::loss::softmax_cross_entropy(g.value(out.logits), &labels).unwrap();
    assert_eq!(terms.total, ce);
}

#[test]
fn perfect_outputs_give_zero_loss() {
    let mut r = rng::seeded(31);
    let labels: Vec<LabelMap> = (0..2).map(|_| blocky(&mut r)).collect();
    let maps = network::ideal_maps(&labels, 3).unwrap();
    let mut logits = Tensor::<f64>::zeros(&[2, 3, 16, 16]);
    for (b, lm) in labels.iter().enumerate() {
        for (i, &l) in lm.labels().iter().enumerate() {
            logits.data_mut()[(b * 3 + l as usize) * 256 + i] = 50.0;
        }
    }
    let prior: Vec<f64> = maps.iter().flat_map(|m| PriorMap::<f64>::from_affinity(m).values().to_vec()).collect();
    let mut g = Graph::new();
    let out = NetOutput {
        logits: g.input(logits.clone()),
        aux_logits: g.input(logits),
        prior: Some(g.input(Tensor::new(vec![2, 4, 4], prior).unwrap())),
    };
    let (_, terms) = total_loss(&mut g, &out, &maps, &labels, LossWeights::default()).unwrap();
    assert!(terms.total <= 1e-5, "{}", terms.total);
}

#[test]
fn total_is_linear_in_each_weight() {
    let mut r = rng::seeded(32);
    let labels: Vec<LabelMap> = (0..2).map(|_| rand_labels(&mut r, 16, 16, 3, 0.05)).collect();
    let maps: Vec<_> = labels
        .iter()
        .map(|l| ideal_affinity_map(&cpnet::affinity::downsample_labels(l, 2, 2).unwrap(), 3).unwrap())
        .collect();
    let logits = randn(&mut r, &[2, 3, 16, 16]);
    let aux = randn(&mut r, &[2, 3, 16, 16]);
    let prior = Tensor::from_fn(&[2, 4, 4], |_| rng::uniform(&mut r, 0.05, 0.95));
    for _ in 0..20 {
        let w = LossWeights {
            seg: rng::uniform(&mut r, 0.0, 2.0),
            aux: rng::uniform(&mut r, 0.0, 2.0),
            prior: rng::uniform(&mut r, 0.0, 2.0),
            unary: rng::uniform(&mut r, 0.0, 2.0),
            global: rng::uniform(&mut r, 0.0, 2.0),
        };
        let mut g = Graph::new();
        let out = NetOutput {
            logits: g.input(logits.clone()),
            aux_logits: g.input(aux.clone()),
            prior: Some(g.input(prior.clone())),
        };
        let (_, t) = total_loss(&mut g, &out, &maps, &labels, w).unwrap();
        let a = t.affinity.unwrap();
        let want = w.seg * t.seg + w.aux * t.aux + w.prior * (w.unary * a.unary + w.global * a.global);
        assert!((t.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", t.total);
    }
}

#[test]
fn one_small_step_lowers_the_loss() {
    let mut decreased = 0;
    for trial in 0..100u64 {
        let mut r = rng::seeded(1000 + trial);
        let mut store = ParamStore::<f64>::new();
        let net = CpNet::new(small(true), &mut store, trial).unwrap();
        let labels: Vec<LabelMap> = (0..2).map(|_| blocky(&mut r)).collect();
        let image = randn(&mut r, &[2, 3, 16, 16]);
        let w = LossWeights::default();

        let mut g = Graph::new();
        let x = g.input(image.clone());
        let (out, maps) = cpnet_forward(&net, &mut g, &mut store, x, &labels, Mode::Train).unwrap();
        let (loss, terms) = total_loss(&mut g, &out, &maps, &labels, w).unwrap();
        store.zero_grad();
        g.backward(loss, &mut store).unwrap();
        let mut opt = Sgd::new(
            SgdConfig {
                momentum: 0.0,
                weight_decay: 0.0,
            },
            &store,
        );
        opt.step(&mut store, 1e-3).unwrap();
        if loss_of(&net, &mut store, &image, &labels, w) < terms.total {
            decreased += 1;
        }
    }
    assert!(decreased >= 95, "{decreased} of 100");
}

use std::collections::BTreeMap;
use std::path::Path;

use cpnet::checkpoint::Checkpoint;
use cpnet::config::TrainConfig;
use cpnet::data::{self, SceneConfig};
use cpnet::eval::{self, DUMP_FILES};
use cpnet::optim::{poly_lr, Sgd, SgdConfig};
use cpnet::rng;
use cpnet::train::{self, layout, Trainer};
use cpnet::{Error, ParamStore, Tensor};

/// A network small enough that a handful of steps take well under a second.
fn tiny() -> TrainConfig {
    TrainConfig {
        widths: [4, 4, 8, 8, 8],
        agg_channels: 8,
        k: 3,
        batch_size: 2,
        train_scenes: 16,
        val_scenes: 4,
        iterations: 4,
        eval_scales: vec![1.0],
        ..TrainConfig::default()
    }
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

/// Every file under `dir`, keyed by its path relative to `dir`.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Pixel bytes of a binary PGM written by the crate.
fn pgm_pixels(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    let mut newlines = 0;
    let start = bytes
        .iter()
        .position(|&b| {
            newlines += usize::from(b == b'\n');
            newlines == 3
        })
        .unwrap();
    bytes[start + 1..].to_vec()
}

#[test]
fn poly_lr_exact_points() {
    for base in [0.01, 0.02, 1.0, 3.7] {
        assert_eq!(poly_lr(0, 2000, base, 0.9).unwrap(), base);
        let half = poly_lr(1000, 2000, base, 0.9).unwrap();
        assert!((half - base * 0.5f64.powf(0.9)).abs() <= 1e-12 * base);
        assert!((half / base - 0.53589).abs() < 1e-5);
        assert_eq!(poly_lr(2000, 2000, base, 0.9).unwrap(), 0.0);
    }
    assert!(poly_lr(2001, 2000, 0.01, 0.9).is_err());
}

fn one_param_store(values: &[f64], decay: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap(), decay);
    s
}

#[test]
fn sgd_matches_scalar_recursion() {
    let mut r = rng::seeded(40);
    for _ in 0..50 {
        let lr = rng::uniform(&mut r, 1e-4, 0.5);
        let momentum = rng::uniform(&mut r, 0.0, 0.99);
        let wd = rng::uniform(&mut r, 0.0, 1e-2);
        let decay = rng::bernoulli(&mut r, 0.7);
        let theta0: Vec<f64> = (0..5).map(|_| rng::normal(&mut r)).collect();
        let mut store = one_param_store(&theta0, decay);
        let mut opt = Sgd::new(SgdConfig { momentum, weight_decay: wd }, &store);

        let mut theta = theta0.clone();
        let mut vel = [0.0; 5];
        let id = store.find("w").unwrap();
        for _ in 0..10 {
            let grad: Vec<f64> = (0..5).map(|_| rng::normal(&mut r)).collect();
            store.get_mut(id).grad = Tensor::new(vec![5], grad.clone()).unwrap();
            opt.step(&mut store, lr).unwrap();
            let wd_eff = if decay { wd } else { 0.0 };
            for i in 0..5 {
                vel[i] = momentum * vel[i] + (grad[i] + wd_eff * theta[i]);
                theta[i] -= lr * vel[i];
            }
            for (a, b) in store.get(id).value.data().iter().zip(&theta) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn sgd_degenerate_cases() {
    // Momentum 0, no decay: plain gradient descent.
    let mut store = one_param_store(&[1.0, -2.0], true);
    let id = store.find("w").unwrap();
    let mut opt = Sgd::new(SgdConfig { momentum: 0.0, weight_decay: 0.0 }, &store);
    store.get_mut(id).grad = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
    opt.step(&mut store, 0.1).unwrap();
    assert_eq!(store.get(id).value.data(), &[1.0 - 0.1 * 0.5, -2.0 + 0.1 * 1.0]);

    // Constant gradient, momentum 0.9: two steps move lr·g·(1 + 1.9).
    let mut store = one_param_store(&[0.0], true);
    let mut opt = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 }, &store);
    store.get_mut(id).grad = Tensor::new(vec![1], vec![2.0]).unwrap();
    opt.step(&mut store, 0.01).unwrap();
    opt.step(&mut store, 0.01).unwrap();
    assert!((store.get(id).value.data()[0] + 0.01 * 2.0 * 2.9).abs() < 1e-15);

    // Zero gradient with decay: θ follows the damped recursion.
    let mut store = one_param_store(&[1.0], true);
    let mut opt = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 0.1 }, &store);
    let (mut theta, mut v) = (1.0f64, 0.0f64);
    for _ in 0..20 {
        opt.step(&mut store, 0.5).unwrap();
        v = 0.9 * v + 0.1 * theta;
        theta -= 0.5 * v;
        assert!((store.get(id).value.data()[0] - theta).abs() < 1e-15);
    }
    assert!(theta.abs() < 1.0);

    // Exempt parameters are untouched without a gradient.
    let mut store = one_param_store(&[1.0], false);
    let mut opt = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 0.1 }, &store);
    opt.step(&mut store, 0.5).unwrap();
    assert_eq!(store.get(id).value.data(), &[1.0]);

    let mut other = one_param_store(&[1.0, 2.0, 3.0], true);
    assert!(opt.step(&mut other, 0.1).is_err());
}

#[test]
fn zero_iterations_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { iterations: 0, ..tiny() };
    let summary = train::train_to_dir(cfg.clone(), dir.path()).unwrap();
    assert!(summary.records.is_empty());
    let ck = Checkpoint::load(&dir.path().join(layout::FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ck.step, 0);
    let fresh = Trainer::new(cfg).unwrap();
    assert_eq!(ck.store, fresh.store);
    assert!(ck.velocities.iter().all(|v| v.data().iter().all(|&x| x == 0.0)));
    let log = std::fs::read_to_string(dir.path().join(layout::LOSS_LOG)).unwrap();
    assert_eq!(log, format!("{}\n", train::CSV_HEADER));
}

#[test]
fn single_threaded_runs_repeat_byte_for_byte() {
    let cfg = TrainConfig {
        checkpoint_every: 2,
        eval_every: 2,
        ..tiny()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    single_threaded(|| {
        train::train_to_dir(cfg.clone(), a.path()).unwrap();
        train::train_to_dir(cfg.clone(), b.path()).unwrap();
    });
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.contains_key(layout::LOSS_LOG) && ta.contains_key(layout::EVAL_LOG));
    assert!(ta.keys().any(|k| k.starts_with(&layout::step_checkpoint(2))));
    assert_eq!(ta, tb);
    let log = String::from_utf8(ta[layout::LOSS_LOG].clone()).unwrap();
    assert_eq!(log.lines().count(), 1 + cfg.iterations);
}

#[test]
fn checkpoint_round_trips_byte_identically() {
    let mut t = Trainer::new(tiny()).unwrap();
    t.train_step().unwrap();
    t.train_step().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ck = Checkpoint::from_trainer(&t);
    ck.save(a.path()).unwrap();
    let loaded = Checkpoint::load(a.path()).unwrap();
    // Gradients are scratch space and are not saved.
    assert_eq!((loaded.step, &loaded.rng, &loaded.config), (ck.step, &ck.rng, &ck.config));
    assert_eq!(loaded.velocities, ck.velocities);
    for (p, q) in loaded.store.params().iter().zip(ck.store.params()) {
        assert_eq!((&p.name, &p.value, p.weight_decay), (&q.name, &q.value, q.weight_decay));
    }
    assert_eq!(loaded.store.norms(), ck.store.norms());
    loaded.save(b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let mut straight = Trainer::new(tiny()).unwrap();
    let all = straight.run(|_, _| Ok(())).unwrap();

    let mut first = Trainer::new(tiny()).unwrap();
    first.train_step().unwrap();
    first.train_step().unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_trainer(&first).save(dir.path()).unwrap();
    let mut resumed = Checkpoint::load(dir.path()).unwrap().into_trainer().unwrap();
    let rest = resumed.run(|_, _| Ok(())).unwrap();

    assert_eq!(train::records_to_csv(&all[2..]), train::records_to_csv(&rest));
    assert_eq!(resumed.store, straight.store);
    assert_eq!(resumed.optimizer, straight.optimizer);
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let t = Trainer::new(tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_trainer(&t).save(dir.path()).unwrap();
    let blob = dir.path().join("0000.cpt");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        base_lr: 1e30,
        iterations: 20,
        ..tiny()
    };
    let err = train::train_to_dir(cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let msg = std::fs::read_to_string(dir.path().join(layout::FAILURE)).unwrap();
    assert!(msg.contains("batch seed"), "{msg}");
    assert!(!dir.path().join(layout::FINAL_CHECKPOINT).exists());
}

fn trained_tiny() -> Trainer {
    let mut t = Trainer::new(tiny()).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    t
}

#[test]
fn unit_scale_eval_is_plain_inference() {
    let t = trained_tiny();
    let cfg = &t.config;
    let scenes = data::gen_dataset(cfg.val_seed(), 6, &cfg.scene()).unwrap();
    let report = eval::evaluate(&t.net, &t.store, &scenes, &[1.0], false).unwrap();

    let (images, labels) = data::batch(&scenes).unwrap();
    let mut store = t.store.clone();
    let (probs, _) = eval::infer(&t.net, &mut store, images).unwrap();
    let c = cfg.num_classes;
    let per = c * 32 * 32;
    let preds: Vec<_> = (0..scenes.len())
        .map(|b| {
            let p = Tensor::new(vec![c, 32, 32], probs.data()[b * per..(b + 1) * per].to_vec()).unwrap();
            eval::argmax_labels(&p).unwrap()
        })
        .collect();
    let cm = cpnet::metrics::confusion(&preds, &labels, c).unwrap();
    assert_eq!(report.confusion, cm);

    let twice = eval::evaluate(&t.net, &t.store, &scenes, &[1.0, 1.0], false).unwrap();
    assert_eq!(twice, report);
}

/// With the classifier reading nothing but its bias, the prediction is the
/// same constant map for an image and its mirror, so flipping cannot change
/// any metric. (Stride-2 convolutions on even widths make exact mirror
/// symmetry of the feature maps impossible.)
#[test]
fn flip_invariant_model_scores_the_same_with_flip() {
    let mut t = trained_tiny();
    let id = t.store.find("seg_head.weight").unwrap();
    let shape = t.store.get(id).value.shape().to_vec();
    t.store.set_value(id, Tensor::zeros(&shape)).unwrap();
    let bias = t.store.find("seg_head.bias").unwrap();
    t.store.set_value(bias, Tensor::new(vec![4], vec![0.1, 0.4, 0.2, 0.3]).unwrap()).unwrap();

    let cfg = &t.config;
    let scenes = data::gen_dataset(cfg.val_seed(), 6, &cfg.scene()).unwrap();
    let plain = eval::evaluate(&t.net, &t.store, &scenes, &[1.0, 0.75], false).unwrap();
    let flipped = eval::evaluate(&t.net, &t.store, &scenes, &[1.0, 0.75], true).unwrap();
    assert_eq!(plain, flipped);

    let mut store = t.store.clone();
    let image = &scenes[0].image;
    let p = eval::predict_probs(&t.net, &mut store, image, &[1.0], false).unwrap();
    let mirrored = data::flip_horizontal(&scenes[0]);
    let q = eval::predict_probs(&t.net, &mut store, &mirrored.image, &[1.0], false).unwrap();
    assert_eq!(p, q);
    assert!(eval::argmax_labels(&p).unwrap().labels().iter().all(|&l| l == 1));
}

#[test]
fn eval_rejects_bad_scales() {
    let t = Trainer::new(tiny()).unwrap();
    let scenes = data::gen_dataset(0, 1, &t.config.scene()).unwrap();
    for scales in [vec![], vec![0.0], vec![f64::NAN]] {
        assert!(eval::evaluate(&t.net, &t.store, &scenes, &scales, false).is_err());
    }
}

#[test]
fn dump_of_untrained_prior_is_gray() {
    let mut t = Trainer::new(tiny()).unwrap();
    let id = t.store.find("cp.prior.conv.weight").unwrap();
    let shape = t.store.get(id).value.shape().to_vec();
    t.store.set_value(id, Tensor::zeros(&shape)).unwrap();
    let scene = data::gen_synthetic_scene(3, &t.config.scene()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    eval::dump_prior(&t.net, &t.store, &scene, dir.path()).unwrap();
    for f in DUMP_FILES {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let prior = pgm_pixels(&dir.path().join("prior.pgm"));
    assert_eq!(prior.len(), 16 * 16);
    assert!(prior.iter().all(|&v| v == 128));
    assert!(pgm_pixels(&dir.path().join("prior_reversed.pgm")).iter().all(|&v| v == 128));
}

#[test]
fn dump_of_constant_scene_has_white_affinity() {
    let t = Trainer::new(tiny()).unwrap();
    let cfg = SceneConfig {
        shapes_per_image: 0,
        ..t.config.scene()
    };
    let scene = data::gen_synthetic_scene(0, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    eval::dump_prior(&t.net, &t.store, &scene, dir.path()).unwrap();
    assert!(pgm_pixels(&dir.path().join("ideal_affinity.pgm")).iter().all(|&v| v == 255));

    let big = data::gen_synthetic_scene(0, &SceneConfig { height: 64, width: 64, ..cfg }).unwrap();
    assert!(eval::dump_prior(&t.net, &t.store, &big, dir.path()).is_err());
}

#[test]
fn config_text_round_trips() {
    let cfg = TrainConfig {
        base_lr: 0.0123,
        eval_scales: vec![0.5, 1.25],
        context_prior: false,
        ..tiny()
    };
    assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(matches!(TrainConfig::parse("no_such_key = 1\n"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("crop = 12\n"), Err(Error::Config(_))));
}

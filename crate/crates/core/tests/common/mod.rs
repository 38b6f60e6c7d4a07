#![allow(dead_code)]

use cpnet::rng::{self, Rng};
use cpnet::{LabelMap, Tensor, IGNORE_INDEX};

pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng::normal(rng))
}

pub fn rand_labels(rng: &mut Rng, h: usize, w: usize, classes: usize, ignore_prob: f64) -> LabelMap {
    let data = (0..h * w)
        .map(|_| {
            if rng::bernoulli(rng, ignore_prob) {
                IGNORE_INDEX
            } else {
                rng::below(rng, 0, classes) as i32
            }
        })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between `analytic` and central differences of `f`
/// over every entry of every input.
pub fn fd_max_rel_err(f: &dyn Fn(&[Tensor<f64>]) -> f64, inputs: &[Tensor<f64>], analytic: &[Tensor<f64>], h: f64) -> f64 {
    let mut worst = 0f64;
    let mut xs = inputs.to_vec();
    for t in 0..xs.len() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + h;
            let up = f(&xs);
            xs[t].data_mut()[i] = orig - h;
            let down = f(&xs);
            xs[t].data_mut()[i] = orig;
            worst = worst.max(rel((up - down) / (2.0 * h), analytic[t].data()[i]));
        }
    }
    worst
}

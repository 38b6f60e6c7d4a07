//! Multi-scale, optionally flipped inference and dataset metrics.
//!
//! The context prior head is built for one feature size, so the network only
//! accepts inputs of its training crop size. A rescaled image is therefore
//! zero-padded up to at least the crop size and covered by crop-sized
//! windows with half-crop stride; window probabilities are averaged where
//! they overlap and the padding is cropped off again.

use rayon::prelude::*;

use crate::affinity::{self, PriorMap};
use crate::data::SyntheticScene;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::labels::LabelMap;
use crate::metrics::ConfusionMatrix;
use crate::network::{self, CpNet};
use crate::ops::loss::softmax_channels;
use crate::ops::norm::Mode;
use crate::ops::resize::resize_bilinear;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Eval-mode forward of a `[B, 3, crop, crop]` batch, returning class
/// probabilities and the prior map (if the network has one).
pub fn infer(
    net: &CpNet,
    store: &mut ParamStore<f32>,
    images: Tensor<f32>,
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let mut g = Graph::new();
    let x = g.input(images);
    let out = net.forward(&mut g, store, x, Mode::Eval)?;
    let probs = softmax_channels(g.value(out.logits))?;
    Ok((probs, out.prior.map(|p| g.value(p).clone())))
}

fn window_starts(len: usize, crop: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=len - crop).step_by((crop / 2).max(1)).collect();
    if *starts.last().unwrap() != len - crop {
        starts.push(len - crop);
    }
    starts
}

/// Probabilities `[C, h, w]` for an image `[3, h, w]` of any size.
fn sliding_probs(net: &CpNet, store: &mut ParamStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (crop_h, crop_w) = net.config.input_size;
    let (ph, pw) = (h.max(crop_h), w.max(crop_w));
    let mut windows = Vec::new();
    for &top in &window_starts(ph, crop_h) {
        for &left in &window_starts(pw, crop_w) {
            windows.push((top, left));
        }
    }
    let mut batch = vec![0f32; windows.len() * 3 * crop_h * crop_w];
    for (n, &(top, left)) in windows.iter().enumerate() {
        for ch in 0..3 {
            for y in 0..crop_h.min(h.saturating_sub(top)) {
                let cols = crop_w.min(w.saturating_sub(left));
                let dst = ((n * 3 + ch) * crop_h + y) * crop_w;
                let src = (ch * h + top + y) * w + left;
                batch[dst..dst + cols].copy_from_slice(&image.data()[src..src + cols]);
            }
        }
    }
    let (probs, _) = infer(net, store, Tensor::new(vec![windows.len(), 3, crop_h, crop_w], batch)?)?;
    let c = net.config.num_classes;
    let mut acc = vec![0f32; c * h * w];
    let mut count = vec![0u32; h * w];
    for (n, &(top, left)) in windows.iter().enumerate() {
        for y in 0..crop_h {
            for x in 0..crop_w {
                let (sy, sx) = (top + y, left + x);
                if sy >= h || sx >= w {
                    continue;
                }
                count[sy * w + sx] += 1;
                for k in 0..c {
                    acc[(k * h + sy) * w + sx] += probs.data()[((n * c + k) * crop_h + y) * crop_w + x];
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= count[i % (h * w)] as f32;
    }
    Tensor::new(vec![c, h, w], acc)
}

fn flip_chw(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[2];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Averaged class probabilities `[C, H, W]` over `scales` (and their
/// mirrored copies when `flip` is set).
pub fn predict_probs(
    net: &CpNet,
    store: &mut ParamStore<f32>,
    image: &Tensor<f32>,
    scales: &[f64],
    flip: bool,
) -> Result<Tensor<f32>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("predict", &[3, 0, 0], image.shape()));
    }
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("scales must be a non-empty list of positive numbers".into()));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let c = net.config.num_classes;
    let mut sum = Tensor::<f32>::zeros(&[c, h, w]);
    let mut passes = 0;
    for &s in scales {
        let nh = ((h as f64 * s).round() as usize).max(1);
        let nw = ((w as f64 * s).round() as usize).max(1);
        let scaled = if (nh, nw) == (h, w) {
            image.clone()
        } else {
            resize_bilinear(&image.clone().reshape(&[1, 3, h, w])?, nh, nw)?.reshape(&[3, nh, nw])?
        };
        let mut variants = vec![(scaled.clone(), false)];
        if flip {
            variants.push((flip_chw(&scaled), true));
        }
        for (img, flipped) in variants {
            let mut p = sliding_probs(net, store, &img)?;
            if flipped {
                p = flip_chw(&p);
            }
            if (nh, nw) != (h, w) {
                p = resize_bilinear(&p.reshape(&[1, c, nh, nw])?, h, w)?.reshape(&[c, h, w])?;
            }
            sum.add_assign(&p)?;
            passes += 1;
        }
    }
    Ok(sum.map(|v| v / passes as f32))
}

pub fn argmax_labels(probs: &Tensor<f32>) -> Result<LabelMap> {
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let labels = (0..h * w)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if probs.data()[k * h * w + i] > probs.data()[best * h * w + i] {
                    best = k;
                }
            }
            best as i32
        })
        .collect();
    LabelMap::new(h, w, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pix_acc: f64,
    pub mean_iou: f64,
    pub confusion: ConfusionMatrix,
}

/// Scores `scenes`, sharded across threads; each shard works on its own
/// copy of the parameters.
pub fn evaluate(
    net: &CpNet,
    store: &ParamStore<f32>,
    scenes: &[SyntheticScene],
    scales: &[f64],
    flip: bool,
) -> Result<EvalReport> {
    let shard = scenes.len().div_ceil(rayon::current_num_threads()).max(1);
    let partial: Vec<ConfusionMatrix> = scenes
        .par_chunks(shard)
        .map(|chunk| {
            let mut local = store.clone();
            let mut cm = ConfusionMatrix::new(net.config.num_classes);
            for s in chunk {
                let probs = predict_probs(net, &mut local, &s.image, scales, flip)?;
                cm.update(&argmax_labels(&probs)?, &s.labels)?;
            }
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(net.config.num_classes);
    for cm in &partial {
        confusion.merge(cm)?;
    }
    Ok(EvalReport {
        pix_acc: confusion.pixel_accuracy()?,
        mean_iou: confusion.mean_iou()?,
        confusion,
    })
}

/// Counts valid prior entries whose 0.5-thresholded value matches the ideal
/// affinity map. Scenes must be exactly the crop size.
pub fn prior_agreement(net: &CpNet, store: &ParamStore<f32>, scenes: &[SyntheticScene]) -> Result<(usize, usize)> {
    if !net.config.context_prior {
        return Err(Error::InvalidArgument("network has no prior branch".into()));
    }
    let mut local = store.clone();
    let (mut agree, mut total) = (0, 0);
    for chunk in scenes.chunks(16) {
        let (images, labels) = crate::data::batch(chunk)?;
        let maps = network::ideal_maps(&labels, net.config.num_classes)?;
        let (_, prior) = infer(net, &mut local, images)?;
        let priors = PriorMap::from_batch(&prior.expect("prior branch"))?;
        for (p, a) in priors.iter().zip(&maps) {
            let (a, b) = affinity_agreement(p, a);
            agree += a;
            total += b;
        }
    }
    Ok((agree, total))
}

/// `(matching, valid)` entry counts of one prior/affinity pair.
pub fn affinity_agreement(p: &PriorMap<f32>, a: &affinity::IdealAffinityMap) -> (usize, usize) {
    let n = a.n();
    let mask = a.valid_mask();
    let (mut agree, mut total) = (0, 0);
    for i in 0..n {
        for j in 0..n {
            if mask[i] && mask[j] {
                total += 1;
                agree += usize::from((p.get(i, j) >= 0.5) == (a.get(i, j) == 1));
            }
        }
    }
    (agree, total)
}

/// Files written by [`dump_prior`], relative to its output directory.
pub const DUMP_FILES: [&str; 5] = ["prior.pgm", "prior_reversed.pgm", "ideal_affinity.pgm", "input.ppm", "prediction.ppm"];

/// Writes the predicted prior map `P`, `1 − P` and the ideal affinity map
/// as `N×N` greyscale images, plus the input and its single-scale
/// prediction as colour images. The scene must be exactly the crop size.
pub fn dump_prior(net: &CpNet, store: &ParamStore<f32>, scene: &SyntheticScene, dir: &std::path::Path) -> Result<()> {
    use crate::io;
    if !net.config.context_prior {
        return Err(Error::InvalidArgument("network has no prior branch".into()));
    }
    let (h, w) = (scene.labels.height(), scene.labels.width());
    if (h, w) != net.config.input_size {
        return Err(Error::InvalidArgument(format!(
            "scene is {h}x{w}, the network takes {:?}",
            net.config.input_size
        )));
    }
    let mut local = store.clone();
    let (images, labels) = crate::data::batch(std::slice::from_ref(scene))?;
    let (probs, prior) = infer(net, &mut local, images)?;
    let p = PriorMap::from_batch(&prior.expect("prior branch"))?.remove(0);
    let a = network::ideal_maps(&labels, net.config.num_classes)?.remove(0);
    let n = p.n();
    let pred = argmax_labels(&probs.reshape(&[net.config.num_classes, h, w])?)?;

    io::create_dir(dir)?;
    io::write_pgm(&dir.join(DUMP_FILES[0]), n, n, &p.to_gray())?;
    io::write_pgm(&dir.join(DUMP_FILES[1]), n, n, &p.reversed().to_gray())?;
    io::write_pgm(&dir.join(DUMP_FILES[2]), n, n, &a.to_gray())?;
    io::write_ppm(&dir.join(DUMP_FILES[3]), w, h, &io::image_to_rgb(&scene.image)?)?;
    io::write_ppm(&dir.join(DUMP_FILES[4]), w, h, &io::labels_to_rgb(&pred))
}

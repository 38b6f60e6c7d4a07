use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Real, Tensor};

/// `[H, W, C]` one-hot encoding; ignored pixels map to the zero vector.
pub fn one_hot<T: Real>(labels: &LabelMap, num_classes: usize) -> Result<Tensor<T>> {
    labels.validate(num_classes)?;
    let mut out = Tensor::zeros(&[labels.height(), labels.width(), num_classes]);
    for (i, &l) in labels.labels().iter().enumerate() {
        if !labels.is_ignored(i) {
            out.data_mut()[i * num_classes + l as usize] = T::one();
        }
    }
    Ok(out)
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`, together
/// with its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[LabelMap],
) -> Result<(T, Tensor<T>)> {
    let [b, c, h, w] = logits.dims4()?;
    if labels.len() != b {
        return Err(Error::shape("cross entropy batch", logits.shape(), &[labels.len()]));
    }
    for lm in labels {
        if lm.height() != h || lm.width() != w {
            return Err(Error::shape(
                "cross entropy labels",
                logits.shape(),
                &[lm.height(), lm.width()],
            ));
        }
        lm.validate(c)?;
    }
    let count: usize = labels.iter().map(LabelMap::valid_count).sum();
    if count == 0 {
        return Err(Error::Degenerate("every pixel is ignored".into()));
    }
    let plane = h * w;
    let scale = T::one() / T::from_usize(count).unwrap();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let mut probs = vec![T::zero(); c];
    for (bi, lm) in labels.iter().enumerate() {
        let base = bi * c * plane;
        for p in 0..plane {
            if lm.is_ignored(p) {
                continue;
            }
            let at = |k: usize| base + k * plane + p;
            let max = (0..c).map(|k| logits.data()[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = (logits.data()[at(k)] - max).exp();
                z += *pr;
            }
            let label = lm.labels()[p] as usize;
            total += z.ln() + max - logits.data()[at(label)];
            for (k, &pr) in probs.iter().enumerate() {
                let target = if k == label { T::one() } else { T::zero() };
                grad.data_mut()[at(k)] = (pr / z - target) * scale;
            }
        }
    }
    Ok((total * scale, grad))
}

/// Per-pixel class probabilities of `[B,C,H,W]` logits.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = logits.dims4()?;
    let plane = h * w;
    let mut out = logits.clone();
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let at = |k: usize| base + k * plane + p;
            let max = (0..c).map(|k| logits.data()[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (logits.data()[at(k)] - max).exp();
                out.data_mut()[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                out.data_mut()[at(k)] /= z;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_basic() {
        let lm = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let t = one_hot::<f64>(&lm, 2).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_ignored_is_zero() {
        let lm = LabelMap::new(1, 3, vec![2, 255, 0]).unwrap();
        let t = one_hot::<f64>(&lm, 3).unwrap();
        let sums: Vec<f64> = t.data().chunks(3).map(|c| c.iter().sum()).collect();
        assert_eq!(sums, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_out_of_range_names_pixel() {
        let lm = LabelMap::new(2, 2, vec![0, 1, 1, 5]).unwrap();
        match one_hot::<f64>(&lm, 3) {
            Err(Error::LabelOutOfRange { label: 5, row: 1, col: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let lm = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let (l, _) = softmax_cross_entropy(&logits, &[lm]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero() {
        let lm = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        let mut logits = Tensor::<f64>::zeros(&[1, 2, 1, 2]);
        logits.data_mut()[2] = 50.0; // class 1, pixel 0
        logits.data_mut()[1] = 50.0; // class 0, pixel 1
        let (l, _) = softmax_cross_entropy(&logits, &[lm]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn all_ignored_is_degenerate() {
        let lm = LabelMap::filled(2, 2, 255);
        let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[lm]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ignored_pixels_get_no_gradient() {
        let lm = LabelMap::new(1, 2, vec![255, 1]).unwrap();
        let logits = Tensor::<f64>::from_fn(&[1, 2, 1, 2], |i| i as f64);
        let (_, g) = softmax_cross_entropy(&logits, &[lm]).unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[2], 0.0);
    }
}

//! Per-channel batch normalization over `(B, H, W)`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// What the backward pass needs: the normalized input and `1/sqrt(var+eps)`
/// per channel (batch statistics in train mode, running ones in eval mode).
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BnState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let [b, c, h, w] = check_shapes(x, gamma, beta, state.channels())?;
    let plane = h * w;
    let count = b * plane;
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match mode {
        Mode::Train => {
            let n = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += x.data()[(bi * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                }
                let m = s / n;
                let mut v = T::zero();
                for bi in 0..b {
                    for &xv in &x.data()[(bi * c + ch) * plane..][..plane] {
                        v += (xv - m) * (xv - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / n;
            }
            let momentum = T::lit(BN_MOMENTUM);
            let unbias = if count > 1 {
                n / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            for ch in 0..c {
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = momentum * *rm + (T::one() - momentum) * mean[ch];
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = momentum * *rv + (T::one() - momentum) * var[ch] * unbias;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(state.running_mean.data());
            var.copy_from_slice(state.running_var.data());
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + bt;
            }
        }
    }
    Ok((y, BnSaved { xhat, inv_std, mode }))
}

fn check_shapes<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    channels: usize,
) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    if gamma.shape() != [dims[1]] {
        return Err(Error::shape("batch_norm gamma", x.shape(), gamma.shape()));
    }
    if beta.shape() != [dims[1]] {
        return Err(Error::shape("batch_norm beta", x.shape(), beta.shape()));
    }
    if channels != dims[1] {
        return Err(Error::shape("batch_norm state", x.shape(), &[channels]));
    }
    Ok(dims)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = dy.dims4()?;
    let plane = h * w;
    let n = T::from_usize(b * plane).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy.data()[i] * saved.xhat.data()[i];
                dbeta[ch] += dy.data()[i];
            }
        }
    }
    let mut dx = dy.clone();
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let g = gamma.data()[ch];
            let inv = saved.inv_std[ch];
            for i in off..off + plane {
                dx.data_mut()[i] = match saved.mode {
                    // dx = γ·inv/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
                    Mode::Train => {
                        g * inv / n
                            * (n * dy.data()[i] - dbeta[ch] - saved.xhat.data()[i] * dgamma[ch])
                    }
                    Mode::Eval => g * inv * dy.data()[i],
                };
            }
        }
    }
    Ok((dx, Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?))
}

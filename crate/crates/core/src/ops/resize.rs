//! Bilinear resampling with half-pixel centers (align-corners = false):
//! output index `i` samples source coordinate `(i + 0.5)·in/out − 0.5`,
//! clamped at zero from below and to the last index from above.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    w_lo: T,
    w_hi: T,
}

fn taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = T::lit(src - lo as f64);
            Tap {
                lo,
                hi,
                w_lo: T::one() - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Resizes the two trailing spatial axes of a `[B,C,H,W]` tensor.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for ry in &ty {
            let r0 = &plane[ry.lo * w..][..w];
            let r1 = &plane[ry.hi * w..][..w];
            for rx in &tx {
                let top = r0[rx.lo] * rx.w_lo + r0[rx.hi] * rx.w_hi;
                let bot = r1[rx.lo] * rx.w_lo + r1[rx.hi] * rx.w_hi;
                out.push(top * ry.w_lo + bot * ry.w_hi);
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}

/// Scatters `dy` back through the sampling weights onto an input of shape
/// `input_shape`.
pub fn resize_bilinear_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, out_h, out_w] = dy.dims4()?;
    let &[b, c, h, w] = input_shape else {
        return Err(Error::shape("resize backward", input_shape, dy.shape()));
    };
    if dy.shape()[..2] != [b, c] {
        return Err(Error::shape("resize backward", input_shape, dy.shape()));
    }
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    for (dplane, gplane) in dx
        .data_mut()
        .chunks_mut(h * w)
        .zip(dy.data().chunks(out_h * out_w))
    {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let g = gplane[oy * out_w + ox];
                dplane[ry.lo * w + rx.lo] += g * ry.w_lo * rx.w_lo;
                dplane[ry.lo * w + rx.hi] += g * ry.w_lo * rx.w_hi;
                dplane[ry.hi * w + rx.lo] += g * ry.w_hi * rx.w_lo;
                dplane[ry.hi * w + rx.hi] += g * ry.w_hi * rx.w_hi;
            }
        }
    }
    Ok(dx)
}

pub fn upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::InvalidArgument(format!("upsample factor must be >= 1, got {factor}")));
    }
    let [_, _, h, w] = x.dims4()?;
    resize_bilinear(x, h * factor, w * factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Evaluates the sampling convention for one output pixel by hand.
    fn oracle(img: &[[f64; 2]; 2], factor: usize, oy: usize, ox: usize) -> f64 {
        let coord = |o: usize| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, 1.0);
            (s.floor() as usize, s - s.floor())
        };
        let (y0, fy) = coord(oy);
        let (x0, fx) = coord(ox);
        let y1 = (y0 + 1).min(1);
        let x1 = (x0 + 1).min(1);
        (1.0 - fy) * ((1.0 - fx) * img[y0][x0] + fx * img[y0][x1])
            + fy * ((1.0 - fx) * img[y1][x0] + fx * img[y1][x1])
    }

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| i as f64 * 0.3);
        assert_eq!(upsample(&x, 1).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 2.5);
        for f in 1..5 {
            assert!(upsample(&x, f).unwrap().data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
        let r = resize_bilinear(&x, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_matches_oracle() {
        let img = [[1.0, 2.0], [3.0, 4.0]];
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for oy in 0..4 {
            for ox in 0..4 {
                assert!((y.data()[oy * 4 + ox] - oracle(&img, 2, oy, ox)).abs() < 1e-12);
            }
        }
        // first row: 1, 1.25, 1.75, 2
        assert_eq!(&y.data()[..4], &[1.0, 1.25, 1.75, 2.0]);
    }

    #[test]
    fn zero_factor_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(upsample(&x, 0).is_err());
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <resize(x), g> == <x, resize_backward(g)>
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| ((i * 7) % 5) as f64 - 2.0);
        let g = Tensor::<f64>::from_fn(&[1, 2, 5, 7], |i| ((i * 3) % 11) as f64 * 0.1);
        let y = resize_bilinear(&x, 5, 7).unwrap();
        let dx = resize_bilinear_backward(x.shape(), &g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

//! Pure data movement: axis permutation and concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `perm[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", x.shape(), perm));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::InvalidArgument(format!(
            "concat axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    for x in xs {
        let same_rank = x.rank() == first.rank();
        if !same_rank
            || x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape("concat", first.shape(), x.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(xs.iter().map(|x| x.len()).sum());
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(out_shape, out)
}

/// Inverse of [`concat`]: cuts `x` along `axis` into pieces of the given
/// sizes.
pub fn split<T: Element>(x: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= x.rank() || sizes.iter().sum::<usize>() != x.shape()[axis] {
        return Err(Error::shape("split", x.shape(), sizes));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let total = x.shape()[axis] * inner;
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let mut data = Vec::with_capacity(outer * s * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[o * total + start * inner..o * total + (start + s) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = s;
        parts.push(Tensor::new(shape, data)?);
        start += s;
    }
    Ok(parts)
}

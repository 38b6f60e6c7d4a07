use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_acc(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_acc(m, k, n, a, (k, 1), b, (1, k), c);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_acc(m, k, n, a, (1, m), b, (n, 1), c);
}

/// Batch size and `(m, k, n)` for a rank-2 or batched rank-3 product.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((1, m, k, n)),
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => Ok((ba, m, k, n)),
        _ => Err(Error::shape("matmul", a, b)),
    }
}

/// Matrix product of `[m,k]·[k,n]`, or the batched form `[B,m,k]·[B,k,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        gemm_nn(
            m,
            k,
            n,
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
    Tensor::new(shape, out)
}

/// Returns `(dA, dB)` given `dC` for `C = A·B`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut da = vec![T::zero(); batch * m * k];
    let mut db = vec![T::zero(); batch * k * n];
    for bi in 0..batch {
        let a_s = &a.data()[bi * m * k..(bi + 1) * m * k];
        let b_s = &b.data()[bi * k * n..(bi + 1) * k * n];
        let dc_s = &dc.data()[bi * m * n..(bi + 1) * m * n];
        gemm_nt(m, n, k, dc_s, b_s, &mut da[bi * m * k..(bi + 1) * m * k]);
        gemm_tn(k, m, n, a_s, dc_s, &mut db[bi * k * n..(bi + 1) * k * n]);
    }
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

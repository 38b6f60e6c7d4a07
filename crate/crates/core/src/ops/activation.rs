use crate::tensor::{Real, Tensor};

/// Logistic function, clamped so the result is strictly inside (0, 1) even
/// where it would round to an endpoint.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `dx = dy · y · (1 − y)` from the forward output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= yv * (T::one() - yv);
    }
    dx
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

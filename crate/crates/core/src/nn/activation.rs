use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|x| if x > S::zero() { x } else { S::zero() })
}

/// Gradient of ReLU. `cached` may be either the forward input or its output;
/// both are positive at exactly the same positions.
pub fn relu_backward<S: Scalar>(grad_out: &Tensor<S>, cached: &Tensor<S>) -> Result<Tensor<S>> {
    if grad_out.shape() != cached.shape() {
        return shape_err(format!("relu grad {:?} vs cache {:?}", grad_out.shape(), cached.shape()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(cached.data())
        .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// Mean over the spatial axes: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let scale = S::one() / S::of(plane as f64);
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<S>() * scale)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<S: Scalar>(grad_out: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (n, c) = grad_out.dims2()?;
    let plane = h * w;
    let scale = S::one() / S::of(plane as f64);
    let mut out = Vec::with_capacity(n * c * plane);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

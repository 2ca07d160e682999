use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub velocity: Tensor<S>,
    /// Whether weight decay applies (false for biases and batchnorm affine terms).
    pub decay: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds `g` into the accumulated gradient.
    pub fn accumulate(&mut self, g: &Tensor<S>) -> Result<()> {
        self.grad.add_assign(g)
    }
}

/// Weights and bias of a conv or dense layer.
#[derive(Clone, Debug)]
pub struct LayerParams<S> {
    pub weights: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> LayerParams<S> {
    pub fn new(weights: Tensor<S>, bias: Tensor<S>) -> Self {
        Self {
            weights: Param::new(weights, true),
            bias: Param::new(bias, false),
        }
    }
}

/// One step of SGD with momentum and decoupled-from-bias weight decay:
/// `v <- momentum * v + grad + weight_decay * w` (decay only where enabled),
/// then `w <- w - lr * v`.
///
/// Gradients are checked for finiteness before any parameter is touched.
pub fn sgd_step<S: Scalar>(params: &mut [&mut Param<S>], lr: S, momentum: S, weight_decay: S) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if p.grad.shape() != p.value.shape() || p.velocity.shape() != p.value.shape() {
            return shape_err(format!("parameter {i}: buffer shapes differ from value shape {:?}", p.value.shape()));
        }
        if let Some(pos) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {i} (shape {:?}) at flat index {pos}: {}",
                p.value.shape(),
                p.grad.data()[pos]
            )));
        }
    }
    for p in params.iter_mut() {
        let decay = if p.decay { weight_decay } else { S::zero() };
        let Param {
            value, grad, velocity, ..
        } = &mut **p;
        for ((w, &g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(velocity.data_mut().iter_mut())
        {
            *v = momentum * *v + g + decay * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64) -> Param<f64> {
        Param::new(Tensor::from_vec(&[1], vec![w]).unwrap(), true)
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = scalar_param(1.0);
        p.grad.data_mut()[0] = 2.0;
        sgd_step(&mut [&mut p], 0.1, 0.0, 0.0).unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_follow_the_recurrence() {
        // v1 = 1, w1 = 0.9; v2 = 0.9 + 1 = 1.9, w2 = 0.9 - 0.19 = 0.71
        let mut p = scalar_param(1.0);
        for _ in 0..2 {
            p.grad.data_mut()[0] = 1.0;
            sgd_step(&mut [&mut p], 0.1, 0.9, 0.0).unwrap();
        }
        assert!((p.value.data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn velocity_decays_geometrically_with_zero_grad() {
        let mut p = scalar_param(0.0);
        p.velocity.data_mut()[0] = 1.0;
        for k in 1..=5 {
            sgd_step(&mut [&mut p], 0.0, 0.5, 0.0).unwrap();
            assert!((p.velocity.data()[0] - 0.5f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_leaves_value() {
        let mut p = scalar_param(3.0);
        p.grad.data_mut()[0] = 5.0;
        sgd_step(&mut [&mut p], 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p.value.data()[0], 3.0);
    }

    #[test]
    fn decay_skips_bias() {
        let mut w = scalar_param(1.0);
        let mut b = Param::new(Tensor::from_vec(&[1], vec![1.0]).unwrap(), false);
        sgd_step(&mut [&mut w, &mut b], 1.0, 0.0, 0.1).unwrap();
        assert!((w.value.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(b.value.data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut a = scalar_param(1.0);
        let mut b = scalar_param(2.0);
        a.grad.data_mut()[0] = 1.0;
        b.grad.data_mut()[0] = f64::NAN;
        let err = sgd_step(&mut [&mut a, &mut b], 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("parameter 1"));
        assert_eq!(a.value.data()[0], 1.0);
    }
}

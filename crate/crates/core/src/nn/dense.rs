use super::param::LayerParams;
use crate::error::{shape_err, Error, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// `y = x · Wᵀ + b` for `x: (N, D)`, `W: (K, D)`, `b: (K)`.
pub fn dense_forward<S: Scalar>(input: &Tensor<S>, params: &LayerParams<S>) -> Result<Tensor<S>> {
    let (n, d) = input.dims2()?;
    let (k, wd) = params.weights.value.dims2()?;
    if wd != d {
        return Err(Error::Config(format!("dense layer expects {wd} features, input has {d}")));
    }
    if params.bias.value.len() != k {
        return shape_err(format!("bias has {} entries for {k} outputs", params.bias.value.len()));
    }
    let mut out = Tensor::zeros(&[n, k]);
    for row in out.data_mut().chunks_mut(k) {
        row.copy_from_slice(params.bias.value.data());
    }
    matmul(n, d, k, input.data(), false, params.weights.value.data(), true, out.data_mut(), true);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<S> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn dense_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    cached_input: Option<&Tensor<S>>,
    params: &LayerParams<S>,
) -> Result<DenseGrads<S>> {
    let input = cached_input.ok_or_else(|| Error::Usage("dense_backward called without a forward cache".into()))?;
    let (n, d) = input.dims2()?;
    let (k, _) = params.weights.value.dims2()?;
    if grad_out.shape() != [n, k] {
        return shape_err(format!("grad_out {:?} does not match forward output [{n}, {k}]", grad_out.shape()));
    }
    let mut d_input = Tensor::zeros(&[n, d]);
    let mut d_weights = Tensor::zeros(&[k, d]);
    let mut d_bias = Tensor::zeros(&[k]);
    matmul(n, k, d, grad_out.data(), false, params.weights.value.data(), false, d_input.data_mut(), false);
    matmul(k, n, d, grad_out.data(), true, input.data(), false, d_weights.data_mut(), false);
    for row in grad_out.data().chunks(k) {
        for (b, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(DenseGrads {
        input: d_input,
        weights: d_weights,
        bias: d_bias,
    })
}

#[derive(Clone, Debug)]
pub struct Dense<S> {
    pub params: LayerParams<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        dense_forward(input, &self.params)
    }

    pub fn backward(&mut self, grad_out: &Tensor<S>, cached_input: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let g = dense_backward(grad_out, cached_input, &self.params)?;
        self.params.weights.accumulate(&g.weights)?;
        self.params.bias.accumulate(&g.bias)?;
        Ok(g.input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_small_case() {
        let w = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap();
        let p = LayerParams::new(w, b);
        let x = Tensor::from_vec(&[1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let y = dense_forward(&x, &p).unwrap();
        assert!((y.data()[0] - (-4.0 + 0.1)).abs() < 1e-12);
        assert!((y.data()[1] - (6.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_features_rejected() {
        let p = LayerParams::new(Tensor::<f64>::zeros(&[2, 3]), Tensor::zeros(&[2]));
        assert!(dense_forward(&Tensor::zeros(&[1, 4]), &p).is_err());
    }
}

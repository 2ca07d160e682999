//! Per-channel batch normalization over `(N, C, H, W)` activations.

use super::param::Param;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub epsilon: S,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], S::one()), false),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: S::of(0.1),
            epsilon: S::of(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    /// The running variance uses the unbiased batch variance.
    pub fn update_running(&mut self, cache: &BnCache<S>) {
        if cache.mode != BnMode::Train {
            return;
        }
        let m = S::of(cache.count as f64);
        let unbias = if cache.count > 1 { m / (m - S::one()) } else { S::one() };
        let keep = S::one() - self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + self.momentum * cache.mean[c];
            self.running_var[c] = keep * self.running_var[c] + self.momentum * cache.var[c] * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<S> {
    pub mode: BnMode,
    pub x_hat: Tensor<S>,
    pub inv_std: Vec<S>,
    /// Biased batch statistics (train mode) or the running statistics used (eval mode).
    pub mean: Vec<S>,
    pub var: Vec<S>,
    /// Elements per channel (`N * H * W`).
    pub count: usize,
}

pub fn batchnorm_forward<S: Scalar>(bn: &BatchNorm<S>, input: &Tensor<S>, mode: BnMode) -> Result<(Tensor<S>, BnCache<S>)> {
    let (n, c, h, w) = input.dims4()?;
    if c != bn.channels() {
        return shape_err(format!("batchnorm has {} channels, input has {c}", bn.channels()));
    }
    let plane = h * w;
    let count = n * plane;
    let (mean, var) = match mode {
        BnMode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
        BnMode::Train => {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            let inv_count = S::one() / S::of(count.max(1) as f64);
            for (i, chunk) in input.data().chunks(plane).enumerate() {
                mean[i % c] += chunk.iter().copied().sum::<S>();
            }
            mean.iter_mut().for_each(|m| *m *= inv_count);
            for (i, chunk) in input.data().chunks(plane).enumerate() {
                let mu = mean[i % c];
                var[i % c] += chunk.iter().map(|&x| (x - mu) * (x - mu)).sum::<S>();
            }
            var.iter_mut().for_each(|v| *v *= inv_count);
            (mean, var)
        }
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + bn.epsilon).sqrt()).collect();
    let gamma = bn.gamma.value.data();
    let beta = bn.beta.value.data();
    let mut x_hat = Vec::with_capacity(input.len());
    let mut out = Vec::with_capacity(input.len());
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        let ch = i % c;
        for &x in chunk {
            let xh = (x - mean[ch]) * inv_std[ch];
            x_hat.push(xh);
            out.push(gamma[ch] * xh + beta[ch]);
        }
    }
    let shape = [n, c, h, w];
    Ok((
        Tensor::from_vec(&shape, out)?,
        BnCache {
            mode,
            x_hat: Tensor::from_vec(&shape, x_hat)?,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct BnGrads<S> {
    pub input: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

pub fn batchnorm_backward<S: Scalar>(bn: &BatchNorm<S>, grad_out: &Tensor<S>, cache: &BnCache<S>) -> Result<BnGrads<S>> {
    if grad_out.shape() != cache.x_hat.shape() {
        return shape_err(format!("batchnorm grad {:?} vs cache {:?}", grad_out.shape(), cache.x_hat.shape()));
    }
    let (_, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let mut d_gamma = vec![S::zero(); c];
    let mut d_beta = vec![S::zero(); c];
    for (i, (g, xh)) in grad_out.data().chunks(plane).zip(cache.x_hat.data().chunks(plane)).enumerate() {
        let ch = i % c;
        d_beta[ch] += g.iter().copied().sum::<S>();
        d_gamma[ch] += g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>();
    }
    let gamma = bn.gamma.value.data();
    let mut d_input = Vec::with_capacity(grad_out.len());
    match cache.mode {
        BnMode::Eval => {
            for (i, g) in grad_out.data().chunks(plane).enumerate() {
                let ch = i % c;
                let s = gamma[ch] * cache.inv_std[ch];
                d_input.extend(g.iter().map(|&v| v * s));
            }
        }
        BnMode::Train => {
            let m = S::of(cache.count as f64);
            for (i, (g, xh)) in grad_out.data().chunks(plane).zip(cache.x_hat.data().chunks(plane)).enumerate() {
                let ch = i % c;
                let s = gamma[ch] * cache.inv_std[ch] / m;
                d_input.extend(
                    g.iter()
                        .zip(xh)
                        .map(|(&gv, &x)| s * (m * gv - d_beta[ch] - x * d_gamma[ch])),
                );
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::from_vec(grad_out.shape(), d_input)?,
        gamma: Tensor::from_vec(&[c], d_gamma)?,
        beta: Tensor::from_vec(&[c], d_beta)?,
    })
}

impl<S: Scalar> BatchNorm<S> {
    /// Accumulates affine-parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<S>, cache: &BnCache<S>) -> Result<Tensor<S>> {
        let g = batchnorm_backward(self, grad_out, cache)?;
        self.gamma.accumulate(&g.gamma)?;
        self.beta.accumulate(&g.beta)?;
        Ok(g.input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.beta.value.data_mut().copy_from_slice(&[0.3, -0.7]);
        let mut x = Tensor::zeros(&[3, 2, 2, 2]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = if (i / 4) % 2 == 0 { 5.0 } else { -2.0 };
        }
        let (y, _) = batchnorm_forward(&bn, &x, BnMode::Train).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let want = if (i / 4) % 2 == 0 { 0.3 } else { -0.7 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_before_training_uses_unit_stats() {
        let bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, -4.0]).unwrap();
        let (y, _) = batchnorm_forward(&bn, &x, BnMode::Eval).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - 2.0 * s).abs() < 1e-12);
        assert!((y.data()[1] + 4.0 * s).abs() < 1e-12);
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (_, cache) = batchnorm_forward(&bn, &x, BnMode::Train).unwrap();
        bn.update_running(&cache);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} is 2
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v > 0.0));
    }
}

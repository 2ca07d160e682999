use crate::dropout::DropoutVariant;
use crate::error::Result;
use crate::nn::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Execution mode of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and freshly drawn training masks.
    Train,
    /// Running statistics and masks derived from `(master_seed, sample_index)`.
    McSample,
    /// Running statistics, every dropout site disabled.
    Deterministic,
}

/// Everything that determines the randomness of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    /// MC sample index (mc_sample mode) or optimizer step (train mode).
    pub sample_index: Option<u64>,
    pub master_seed: u64,
    /// Dataset index of the first example in the batch. Per-example masks are
    /// keyed by `id_offset + position`, which makes results independent of
    /// how a dataset is batched.
    pub id_offset: u64,
}

impl Pass {
    pub fn deterministic() -> Self {
        Self {
            mode: Mode::Deterministic,
            sample_index: None,
            master_seed: 0,
            id_offset: 0,
        }
    }

    pub fn mc(master_seed: u64, sample_index: u64) -> Self {
        Self {
            mode: Mode::McSample,
            sample_index: Some(sample_index),
            master_seed,
            id_offset: 0,
        }
    }

    pub fn train(master_seed: u64, step: u64) -> Self {
        Self {
            mode: Mode::Train,
            sample_index: Some(step),
            master_seed,
            id_offset: 0,
        }
    }

    pub fn at(mut self, id_offset: u64) -> Self {
        self.id_offset = id_offset;
        self
    }
}

/// A trainable classifier with hand-written gradients.
pub trait Classifier<S: Scalar>: Clone + Send + Sync {
    fn num_classes(&self) -> usize;

    /// Shape of one input example (without the batch axis).
    fn input_shape(&self) -> Vec<usize>;

    /// Logits for a batch. Pure: train mode uses batch statistics but does not
    /// update running statistics.
    fn forward_pass(&self, input: &Tensor<S>, pass: &Pass) -> Result<Tensor<S>>;

    /// Train-mode forward and backward pass for the softmax cross-entropy loss.
    /// Zeroes and then fills every parameter gradient, folds batch statistics
    /// into running statistics, and returns `(loss, logits)`.
    fn compute_gradients(&mut self, input: &Tensor<S>, labels: &[usize], pass: &Pass) -> Result<(S, Tensor<S>)>;

    fn params(&self) -> Vec<&Param<S>>;

    fn params_mut(&mut self) -> Vec<&mut Param<S>>;

    /// Non-trainable state (batchnorm running statistics), in a fixed order.
    fn buffers(&self) -> Vec<&[S]> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [S]> {
        Vec::new()
    }

    /// True when mc_sample passes can differ from one another.
    fn is_stochastic(&self) -> bool;

    /// Structured-dropout variant of the body; tags MC ensembles.
    fn dropout_variant(&self) -> DropoutVariant;

    /// Stable hash of the architecture, recorded in checkpoints.
    fn config_hash(&self) -> u64;

    /// Seed the parameters were initialized from.
    fn seed(&self) -> u64;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// 64-bit FNV-1a, used for configuration hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

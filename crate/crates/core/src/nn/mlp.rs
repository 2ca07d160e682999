//! Fully connected classifier with element dropout before each hidden-to-next
//! layer. Used for toy tasks and for linear gradient checks.

use serde::{Deserialize, Serialize};

use super::activation::{relu_backward, relu_forward};
use super::classifier::{fnv1a64, Classifier, Mode, Pass};
use super::dense::Dense;
use super::loss::softmax_cross_entropy;
use super::param::{LayerParams, Param};
use crate::dropout::{apply_mask, sample_element_mask, DropoutVariant, Mask};
use crate::error::{config_err, Result};
use crate::rng::{Domain, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Element dropout rate applied to every hidden activation.
    pub dropout_rate: f64,
}

#[derive(Clone, Debug)]
pub struct Mlp<S> {
    config: MlpConfig,
    seed: u64,
    layers: Vec<Dense<S>>,
}

struct Cache<S> {
    /// Input to each dense layer.
    inputs: Vec<Tensor<S>>,
    /// Post-ReLU hidden activations and the mask applied to each.
    hidden: Vec<(Tensor<S>, Option<Mask>)>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 {
            return config_err("an MLP needs at least 2 classes");
        }
        if config.input_dim == 0 || config.hidden.contains(&0) {
            return config_err("MLP layer widths must be positive");
        }
        if !(0.0..1.0).contains(&config.dropout_rate) {
            return config_err(format!("dropout rate must be in [0, 1), got {}", config.dropout_rate));
        }
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden);
        dims.push(config.num_classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = RngStream::derive(seed, Domain::Init, &[i as u64]);
                let values = (0..out * fan_in).map(|_| S::of(rng.normal() * std)).collect();
                Dense {
                    params: LayerParams::new(
                        Tensor::from_vec(&[out, fan_in], values).expect("sized"),
                        Tensor::zeros(&[out]),
                    ),
                }
            })
            .collect();
        Ok(Self { config, seed, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    fn flatten(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        input.clone().reshape(&[input.batch(), self.config.input_dim])
    }

    fn mask_for(&self, pass: &Pass, layer: usize, example: u64, width: usize) -> Option<Mask> {
        let p = self.config.dropout_rate;
        let domain = match pass.mode {
            Mode::Deterministic => return None,
            _ if p <= 0.0 => return None,
            Mode::Train => Domain::TrainMask,
            Mode::McSample => Domain::McMask,
        };
        let draw = pass.sample_index.unwrap_or(0);
        let mut rng = RngStream::derive(pass.master_seed, domain, &[draw, layer as u64, example]);
        Some(sample_element_mask(&[width], p, &mut rng))
    }

    fn run(&self, input: &Tensor<S>, pass: &Pass) -> Result<(Tensor<S>, Cache<S>)> {
        if pass.mode == Mode::McSample && pass.sample_index.is_none() {
            return Err(crate::Error::Usage("mc_sample pass requires a sample index".into()));
        }
        let mut x = self.flatten(input)?;
        let n = x.batch();
        let mut cache = Cache {
            inputs: Vec::new(),
            hidden: Vec::new(),
        };
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x)?;
            cache.inputs.push(x);
            if li == last {
                return Ok((z, cache));
            }
            let h = relu_forward(&z);
            let width = h.item_len();
            let masks: Vec<Option<Mask>> = (0..n)
                .map(|j| self.mask_for(pass, li, pass.id_offset + j as u64, width))
                .collect();
            let mask = if masks.iter().all(Option::is_none) {
                None
            } else {
                let mut keep = Vec::with_capacity(n * width);
                for m in &masks {
                    keep.extend_from_slice(m.as_ref().expect("uniform per pass").keep());
                }
                Some(Mask::from_keep(&[n, width], keep, self.config.dropout_rate)?)
            };
            x = match &mask {
                Some(m) => apply_mask(&h, m)?,
                None => h.clone(),
            };
            cache.hidden.push((h, mask));
        }
        unreachable!("loop returns at the last layer")
    }
}

impl<S: Scalar> Classifier<S> for Mlp<S> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.config.input_dim]
    }

    fn forward_pass(&self, input: &Tensor<S>, pass: &Pass) -> Result<Tensor<S>> {
        Ok(self.run(input, pass)?.0)
    }

    fn compute_gradients(&mut self, input: &Tensor<S>, labels: &[usize], pass: &Pass) -> Result<(S, Tensor<S>)> {
        let (logits, cache) = self.run(input, pass)?;
        let (loss, mut grad) = softmax_cross_entropy(&logits, labels)?;
        self.zero_grads();
        for li in (0..self.layers.len()).rev() {
            grad = self.layers[li].backward(&grad, Some(&cache.inputs[li]))?;
            if li > 0 {
                let (h, mask) = &cache.hidden[li - 1];
                if let Some(m) = mask {
                    grad = apply_mask(&grad, m)?;
                }
                grad = relu_backward(&grad, h)?;
            }
        }
        Ok((loss, logits))
    }

    fn params(&self) -> Vec<&Param<S>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.params.weights, &l.params.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.params.weights, &mut l.params.bias])
            .collect()
    }

    fn is_stochastic(&self) -> bool {
        self.config.dropout_rate > 0.0 && !self.config.hidden.is_empty()
    }

    fn dropout_variant(&self) -> DropoutVariant {
        if self.config.dropout_rate > 0.0 {
            DropoutVariant::Element
        } else {
            DropoutVariant::None
        }
    }

    fn config_hash(&self) -> u64 {
        let c = &self.config;
        fnv1a64(format!("mlp:{}:{:?}:{}:{}", c.input_dim, c.hidden, c.num_classes, c.dropout_rate).as_bytes())
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

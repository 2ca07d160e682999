//! Miniature pre-activation ResNet with a dropout site before every
//! convolution, per-block layer gates and a dropout site before the
//! classifier.
//!
//! Block layout (`x` is the block input):
//!
//! ```text
//! r1 = relu(bn1(x)); d1 = drop(r1)
//! branch = conv2(drop(relu(bn2(conv1(d1)))))
//! out = shortcut + gate * branch,   shortcut = x or proj(d1)
//! ```
//!
//! The first block of every stage after the first halves the resolution
//! (stride 2) and uses a 1x1 projection shortcut; such blocks are flagged as
//! downsampling and are never gated off during MC sampling.

use serde::{Deserialize, Serialize};

use crate::dropout::{
    apply_mask, sample_block_mask, sample_channel_mask, sample_element_mask, sample_layer_gates, DropoutSpec,
    DropoutVariant, GateMode, Mask,
};
use crate::error::{config_err, Error, Result};
use crate::nn::activation::{global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward};
use crate::nn::classifier::{fnv1a64, Classifier, Mode, Pass};
use crate::nn::conv::{conv_output_extent, Conv2d};
use crate::nn::dense::Dense;
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::norm::{batchnorm_forward, BatchNorm, BnCache, BnMode};
use crate::nn::param::{LayerParams, Param};
use crate::rng::{Domain, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_fc_rate() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub dropout: DropoutSpec,
    #[serde(default = "default_fc_rate")]
    pub final_fc_dropout_rate: f64,
}

impl ResNetConfig {
    /// Desk-scale default: 3 stages x 2 blocks, channels 16/32/64, 32x32 RGB input.
    pub fn mini(dropout: DropoutSpec) -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            num_classes: 10,
            input_shape: [3, 32, 32],
            dropout,
            final_fc_dropout_rate: default_fc_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return config_err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return config_err("stage_channels must be non-empty and positive");
        }
        if self.blocks_per_stage == 0 {
            return config_err("blocks_per_stage must be >= 1");
        }
        if self.input_shape.contains(&0) {
            return config_err("input_shape extents must be positive");
        }
        if !(0.0..1.0).contains(&self.final_fc_dropout_rate) {
            return config_err(format!(
                "final_fc_dropout_rate must be in [0, 1), got {}",
                self.final_fc_dropout_rate
            ));
        }
        self.dropout.validate()?;
        if self.dropout.variant == DropoutVariant::Block && self.dropout.rate > 0.0 {
            let (h, w) = self.smallest_feature_map();
            if self.dropout.block_size > h.min(w) {
                return config_err(format!(
                    "block size {} exceeds the smallest feature map {h}x{w}",
                    self.dropout.block_size
                ));
            }
        }
        Ok(())
    }

    fn smallest_feature_map(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in 1..self.stage_channels.len() {
            h = conv_output_extent(h, 3, 2, 1);
            w = conv_output_extent(w, 3, 2, 1);
        }
        (h, w)
    }

    pub fn num_blocks(&self) -> usize {
        self.stage_channels.len() * self.blocks_per_stage
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(format!("resnet:{self:?}").as_bytes())
    }
}

#[derive(Clone, Debug)]
struct Block<S> {
    bn1: BatchNorm<S>,
    conv1: Conv2d<S>,
    bn2: BatchNorm<S>,
    conv2: Conv2d<S>,
    shortcut: Option<Conv2d<S>>,
    downsampling: bool,
}

#[derive(Clone, Debug)]
pub struct ResNet<S> {
    config: ResNetConfig,
    seed: u64,
    stem: Conv2d<S>,
    blocks: Vec<Block<S>>,
    bn_final: BatchNorm<S>,
    head: Dense<S>,
    bn_frozen: bool,
}

/// Dropout site identifiers; they key the per-site mask streams.
const STEM_SITE: u64 = 0;
const HEAD_SITE: u64 = 1 << 32;

fn block_sites(block: usize) -> (u64, u64) {
    (1 + 2 * block as u64, 2 + 2 * block as u64)
}

/// Activation at a dropout site and the mask applied to it.
struct SiteTape<S> {
    act: Tensor<S>,
    mask: Option<Mask>,
    dropped: Option<Tensor<S>>,
}

impl<S: Scalar> SiteTape<S> {
    fn new(act: Tensor<S>, mask: Option<Mask>) -> Result<Self> {
        let dropped = mask.as_ref().map(|m| apply_mask(&act, m)).transpose()?;
        Ok(Self { act, mask, dropped })
    }

    fn output(&self) -> &Tensor<S> {
        self.dropped.as_ref().unwrap_or(&self.act)
    }

    fn backward(&self, grad: Tensor<S>) -> Result<Tensor<S>> {
        match &self.mask {
            Some(m) => apply_mask(&grad, m),
            None => Ok(grad),
        }
    }
}

enum BlockTape<S> {
    /// Identity block whose residual branch was gated off.
    Skipped,
    Ran {
        bn1: BnCache<S>,
        site1: SiteTape<S>,
        branch: Option<BranchTape<S>>,
    },
}

struct BranchTape<S> {
    bn2: BnCache<S>,
    site2: SiteTape<S>,
}

struct Tape<S> {
    stem: SiteTape<S>,
    blocks: Vec<BlockTape<S>>,
    bn_final: BnCache<S>,
    final_act: Tensor<S>,
    head: SiteTape<S>,
}

impl<S: Scalar> ResNet<S> {
    pub fn new(config: ResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [in_c, _, _] = config.input_shape;
        let c0 = config.stage_channels[0];
        let conv = |cin: usize, cout: usize, k: usize, stride: usize| Conv2d {
            params: LayerParams::new(Tensor::zeros(&[cout, cin, k, k]), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        };
        let stem = conv(in_c, c0, 3, 1);
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut cin = c0;
        for (stage, &cout) in config.stage_channels.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let needs_projection = stride != 1 || cin != cout;
                blocks.push(Block {
                    bn1: BatchNorm::new(cin),
                    conv1: conv(cin, cout, 3, stride),
                    bn2: BatchNorm::new(cout),
                    conv2: conv(cout, cout, 3, 1),
                    shortcut: needs_projection.then(|| conv(cin, cout, 1, stride)),
                    downsampling: stride != 1,
                });
                cin = cout;
            }
        }
        let head = Dense {
            params: LayerParams::new(Tensor::zeros(&[config.num_classes, cin]), Tensor::zeros(&[config.num_classes])),
        };
        let mut net = Self {
            bn_final: BatchNorm::new(cin),
            config,
            seed,
            stem,
            blocks,
            head,
            bn_frozen: false,
        };
        net.initialize();
        Ok(net)
    }

    /// Fan-in scaled Gaussian for conv and dense weights; biases, gamma and
    /// beta keep their zero/one defaults.
    fn initialize(&mut self) {
        let seed = self.seed;
        for (i, p) in self.params_mut().into_iter().enumerate() {
            if !p.decay {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = RngStream::derive(seed, Domain::Init, &[i as u64]);
            for v in p.value.data_mut() {
                *v = S::of(rng.normal() * std);
            }
        }
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn downsampling_flags(&self) -> Vec<bool> {
        self.blocks.iter().map(|b| b.downsampling).collect()
    }

    /// Number of convolutions (stem, two per block, projections).
    pub fn num_convs(&self) -> usize {
        1 + self
            .blocks
            .iter()
            .map(|b| 2 + usize::from(b.shortcut.is_some()))
            .sum::<usize>()
    }

    /// When frozen, train mode normalizes with running statistics.
    pub fn set_batchnorm_frozen(&mut self, frozen: bool) {
        self.bn_frozen = frozen;
    }

    fn bn_mode(&self, pass: &Pass) -> BnMode {
        if pass.mode == Mode::Train && !self.bn_frozen {
            BnMode::Train
        } else {
            BnMode::Eval
        }
    }

    fn mask_domain(pass: &Pass) -> Option<Domain> {
        match pass.mode {
            Mode::Train => Some(Domain::TrainMask),
            Mode::McSample => Some(Domain::McMask),
            Mode::Deterministic => None,
        }
    }

    /// Whether the body sites (before convolutions) carry masks for this pass.
    pub fn body_sites_active(&self, pass: &Pass) -> bool {
        let d = &self.config.dropout;
        pass.mode != Mode::Deterministic
            && d.rate > 0.0
            && matches!(
                d.variant,
                DropoutVariant::Element | DropoutVariant::Block | DropoutVariant::Channel
            )
    }

    /// Whether the classifier-head site carries a mask for this pass.
    pub fn head_site_active(&self, pass: &Pass) -> bool {
        pass.mode != Mode::Deterministic && self.config.final_fc_dropout_rate > 0.0
    }

    fn body_mask(&self, pass: &Pass, site: u64, shape: &[usize]) -> Result<Option<Mask>> {
        if !self.body_sites_active(pass) {
            return Ok(None);
        }
        let domain = Self::mask_domain(pass).expect("active sites imply a stochastic mode");
        let spec = &self.config.dropout;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let draw = pass.sample_index.unwrap_or(0);
        let mut keep = Vec::with_capacity(n * c * h * w);
        for j in 0..n {
            let mut rng = RngStream::derive(pass.master_seed, domain, &[draw, site, pass.id_offset + j as u64]);
            match spec.variant {
                DropoutVariant::Element => {
                    keep.extend_from_slice(sample_element_mask(&[c, h, w], spec.rate, &mut rng).keep());
                }
                DropoutVariant::Channel => {
                    let m = sample_channel_mask(c, spec.rate, &mut rng);
                    for &k in m.keep() {
                        keep.extend(std::iter::repeat_n(k, h * w));
                    }
                }
                DropoutVariant::Block => {
                    for _ in 0..c {
                        let m = sample_block_mask(h, w, spec.rate, spec.block_size, &mut rng)?;
                        keep.extend_from_slice(m.keep());
                    }
                }
                DropoutVariant::None | DropoutVariant::Layer => unreachable!("inactive body variants"),
            }
        }
        Ok(Some(Mask::from_keep(shape, keep, spec.rate)?))
    }

    fn head_mask(&self, pass: &Pass, n: usize, width: usize) -> Option<Mask> {
        if !self.head_site_active(pass) {
            return None;
        }
        let domain = Self::mask_domain(pass)?;
        let p = self.config.final_fc_dropout_rate;
        let draw = pass.sample_index.unwrap_or(0);
        let mut keep = Vec::with_capacity(n * width);
        for j in 0..n {
            let mut rng = RngStream::derive(pass.master_seed, domain, &[draw, HEAD_SITE, pass.id_offset + j as u64]);
            keep.extend_from_slice(sample_element_mask(&[width], p, &mut rng).keep());
        }
        Mask::from_keep(&[n, width], keep, p).ok()
    }

    /// Gate per residual block for this pass; `None` when the layer variant is
    /// inactive. Gates are shared by the whole batch and, in mc_sample mode,
    /// depend only on `(master_seed, sample_index)`.
    pub fn sample_gates(&self, pass: &Pass) -> Result<Option<Vec<bool>>> {
        let d = &self.config.dropout;
        if d.variant != DropoutVariant::Layer || d.rate <= 0.0 {
            return Ok(None);
        }
        let mode = match pass.mode {
            Mode::Deterministic => return Ok(None),
            Mode::Train => GateMode::Train,
            Mode::McSample => GateMode::McTest,
        };
        let draw = pass.sample_index.unwrap_or(0);
        let mut rng = RngStream::derive(pass.master_seed, Domain::Gate, &[mode as u64, draw]);
        sample_layer_gates(self.blocks.len(), d.rate, &self.downsampling_flags(), mode, &mut rng).map(Some)
    }

    fn check_pass(&self, input: &Tensor<S>, pass: &Pass) -> Result<()> {
        if pass.mode == Mode::McSample && pass.sample_index.is_none() {
            return Err(Error::Usage("mc_sample pass requires a sample index".into()));
        }
        let (_, c, h, w) = input.dims4()?;
        if [c, h, w] != self.config.input_shape {
            return Err(Error::Shape(format!(
                "input example shape {:?} does not match network input {:?}",
                [c, h, w],
                self.config.input_shape
            )));
        }
        Ok(())
    }

    fn run(&self, input: &Tensor<S>, pass: &Pass, record: bool) -> Result<(Tensor<S>, Option<Tape<S>>)> {
        self.check_pass(input, pass)?;
        let bn_mode = self.bn_mode(pass);
        let gates = self.sample_gates(pass)?;

        let stem = SiteTape::new(input.clone(), self.body_mask(pass, STEM_SITE, input.shape())?)?;
        let mut x = self.stem.forward(stem.output())?;
        let mut block_tapes = Vec::with_capacity(if record { self.blocks.len() } else { 0 });

        for (bi, block) in self.blocks.iter().enumerate() {
            let gate = gates.as_ref().is_none_or(|g| g[bi]);
            if !gate && block.shortcut.is_none() {
                if record {
                    block_tapes.push(BlockTape::Skipped);
                }
                continue;
            }
            let (site1_id, site2_id) = block_sites(bi);
            let (a1, bn1) = batchnorm_forward(&block.bn1, &x, bn_mode)?;
            let r1 = relu_forward(&a1);
            drop(a1);
            let mask1 = self.body_mask(pass, site1_id, r1.shape())?;
            let site1 = SiteTape::new(r1, mask1)?;
            let mut out = match &block.shortcut {
                Some(proj) => proj.forward(site1.output())?,
                None => x,
            };
            let mut branch_tape = None;
            if gate {
                let c1 = block.conv1.forward(site1.output())?;
                let (a2, bn2) = batchnorm_forward(&block.bn2, &c1, bn_mode)?;
                drop(c1);
                let r2 = relu_forward(&a2);
                drop(a2);
                let mask2 = self.body_mask(pass, site2_id, r2.shape())?;
                let site2 = SiteTape::new(r2, mask2)?;
                let c2 = block.conv2.forward(site2.output())?;
                out.add_assign(&c2)?;
                branch_tape = Some(BranchTape { bn2, site2 });
            }
            if record {
                block_tapes.push(BlockTape::Ran {
                    bn1,
                    site1,
                    branch: branch_tape,
                });
            }
            x = out;
        }

        let (a, bn_final) = batchnorm_forward(&self.bn_final, &x, bn_mode)?;
        drop(x);
        let final_act = relu_forward(&a);
        drop(a);
        let pooled = global_avg_pool(&final_act)?;
        let (n, width) = pooled.dims2()?;
        let head = SiteTape::new(pooled, self.head_mask(pass, n, width))?;
        let logits = self.head.forward(head.output())?;
        let tape = record.then_some(Tape {
            stem,
            blocks: block_tapes,
            bn_final,
            final_act,
            head,
        });
        Ok((logits, tape))
    }

    fn update_running_stats(&mut self, tape: &Tape<S>) {
        for (block, bt) in self.blocks.iter_mut().zip(&tape.blocks) {
            if let BlockTape::Ran { bn1, branch, .. } = bt {
                block.bn1.update_running(bn1);
                if let Some(br) = branch {
                    block.bn2.update_running(&br.bn2);
                }
            }
        }
        self.bn_final.update_running(&tape.bn_final);
    }

    fn backward(&mut self, grad_logits: &Tensor<S>, tape: &Tape<S>) -> Result<()> {
        let d_head = self.head.backward(grad_logits, Some(tape.head.output()))?;
        let d_pooled = tape.head.backward(d_head)?;
        let (_, _, h, w) = tape.final_act.dims4()?;
        let d_act = global_avg_pool_backward(&d_pooled, h, w)?;
        let d_a = relu_backward(&d_act, &tape.final_act)?;
        let mut grad = self.bn_final.backward(&d_a, &tape.bn_final)?;

        for (block, bt) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            let BlockTape::Ran { bn1, site1, branch } = bt else {
                continue;
            };
            let mut d_site1: Option<Tensor<S>> = None;
            if let Some(br) = branch {
                let d_d2 = block.conv2.backward(&grad, Some(br.site2.output()))?;
                let d_r2 = br.site2.backward(d_d2)?;
                let d_a2 = relu_backward(&d_r2, &br.site2.act)?;
                let d_c1 = block.bn2.backward(&d_a2, &br.bn2)?;
                d_site1 = Some(block.conv1.backward(&d_c1, Some(site1.output()))?);
            }
            let skip_grad = match &mut block.shortcut {
                Some(proj) => {
                    let d = proj.backward(&grad, Some(site1.output()))?;
                    match &mut d_site1 {
                        Some(acc) => acc.add_assign(&d)?,
                        None => d_site1 = Some(d),
                    }
                    None
                }
                None => Some(grad),
            };
            let d_site1 = d_site1.expect("a ran block has a branch or a projection");
            let d_r1 = site1.backward(d_site1)?;
            let d_a1 = relu_backward(&d_r1, &site1.act)?;
            let mut d_x = block.bn1.backward(&d_a1, bn1)?;
            if let Some(s) = skip_grad {
                d_x.add_assign(&s)?;
            }
            grad = d_x;
        }
        self.stem.backward(&grad, Some(tape.stem.output()))?;
        Ok(())
    }
}

fn conv_params<S>(c: &Conv2d<S>) -> [&Param<S>; 2] {
    [&c.params.weights, &c.params.bias]
}

impl<S: Scalar> Classifier<S> for ResNet<S> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_shape(&self) -> Vec<usize> {
        self.config.input_shape.to_vec()
    }

    fn forward_pass(&self, input: &Tensor<S>, pass: &Pass) -> Result<Tensor<S>> {
        Ok(self.run(input, pass, false)?.0)
    }

    fn compute_gradients(&mut self, input: &Tensor<S>, labels: &[usize], pass: &Pass) -> Result<(S, Tensor<S>)> {
        let (logits, tape) = self.run(input, pass, true)?;
        let tape = tape.expect("recorded");
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        if self.bn_mode(pass) == BnMode::Train {
            self.update_running_stats(&tape);
        }
        self.zero_grads();
        self.backward(&grad, &tape)?;
        Ok((loss, logits))
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut out = Vec::new();
        out.extend(conv_params(&self.stem));
        for b in &self.blocks {
            out.extend([&b.bn1.gamma, &b.bn1.beta]);
            out.extend(conv_params(&b.conv1));
            out.extend([&b.bn2.gamma, &b.bn2.beta]);
            out.extend(conv_params(&b.conv2));
            if let Some(s) = &b.shortcut {
                out.extend(conv_params(s));
            }
        }
        out.extend([&self.bn_final.gamma, &self.bn_final.beta]);
        out.extend([&self.head.params.weights, &self.head.params.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out: Vec<&mut Param<S>> = Vec::new();
        out.extend([&mut self.stem.params.weights, &mut self.stem.params.bias]);
        for b in &mut self.blocks {
            out.extend([&mut b.bn1.gamma, &mut b.bn1.beta]);
            out.extend([&mut b.conv1.params.weights, &mut b.conv1.params.bias]);
            out.extend([&mut b.bn2.gamma, &mut b.bn2.beta]);
            out.extend([&mut b.conv2.params.weights, &mut b.conv2.params.bias]);
            if let Some(s) = &mut b.shortcut {
                out.extend([&mut s.params.weights, &mut s.params.bias]);
            }
        }
        out.extend([&mut self.bn_final.gamma, &mut self.bn_final.beta]);
        out.extend([&mut self.head.params.weights, &mut self.head.params.bias]);
        out
    }

    fn buffers(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = Vec::new();
        for b in &self.blocks {
            for bn in [&b.bn1, &b.bn2] {
                out.push(&bn.running_mean);
                out.push(&bn.running_var);
            }
        }
        out.push(&self.bn_final.running_mean);
        out.push(&self.bn_final.running_var);
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        for b in &mut self.blocks {
            for bn in [&mut b.bn1, &mut b.bn2] {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out.push(&mut self.bn_final.running_mean);
        out.push(&mut self.bn_final.running_var);
        out
    }

    fn is_stochastic(&self) -> bool {
        self.config.dropout.is_stochastic() || self.config.final_fc_dropout_rate > 0.0
    }

    fn dropout_variant(&self) -> DropoutVariant {
        self.config.dropout.variant
    }

    fn config_hash(&self) -> u64 {
        self.config.hash()
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

//! Bernoulli masks at four structural scales: element, block, channel, layer.
//!
//! All masks use inverted scaling: kept units are multiplied by `1/(1-p)`.
//! Layer gates are the exception and are applied unscaled by the network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutVariant {
    None,
    Element,
    Block,
    Channel,
    Layer,
}

impl DropoutVariant {
    pub const ALL: [DropoutVariant; 5] = [
        DropoutVariant::None,
        DropoutVariant::Element,
        DropoutVariant::Block,
        DropoutVariant::Channel,
        DropoutVariant::Layer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DropoutVariant::None => "none",
            DropoutVariant::Element => "element",
            DropoutVariant::Block => "block",
            DropoutVariant::Channel => "channel",
            DropoutVariant::Layer => "layer",
        }
    }
}

impl fmt::Display for DropoutVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DropoutVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dropout variant `{s}`")))
    }
}

fn default_block_size() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    pub variant: DropoutVariant,
    pub rate: f64,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl DropoutSpec {
    pub fn new(variant: DropoutVariant, rate: f64) -> Result<Self> {
        let spec = Self {
            variant,
            rate,
            block_size: default_block_size(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        Self {
            variant: DropoutVariant::None,
            rate: 0.0,
            block_size: default_block_size(),
        }
    }

    pub fn with_block_size(mut self, block_size: usize) -> Result<Self> {
        self.block_size = block_size;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return config_err(format!("dropout rate must be in [0, 1), got {}", self.rate));
        }
        if self.variant == DropoutVariant::Block && (self.block_size == 0 || self.block_size % 2 == 0) {
            return config_err(format!("block size must be odd and >= 1, got {}", self.block_size));
        }
        Ok(())
    }

    /// True when this spec injects noise anywhere.
    pub fn is_stochastic(&self) -> bool {
        self.variant != DropoutVariant::None && self.rate > 0.0
    }
}

/// Binary keep-mask with its inverted-dropout scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
    scale: f64,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
            scale: 1.0,
        }
    }

    pub fn from_keep(shape: &[usize], keep: Vec<bool>, p: f64) -> Result<Self> {
        if keep.len() != shape.iter().product::<usize>() {
            return shape_err(format!("mask of {} entries for shape {:?}", keep.len(), shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            keep,
            scale: inverted_scale(p),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn dropped_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.dropped() as f64 / self.keep.len() as f64
        }
    }
}

fn inverted_scale(p: f64) -> f64 {
    1.0 / (1.0 - p)
}

/// Independent Bernoulli keep decision per element, keep probability `1 - p`.
pub fn sample_element_mask(shape: &[usize], p: f64, rng: &mut RngStream) -> Mask {
    let len = shape.iter().product();
    let keep = if p <= 0.0 {
        vec![true; len]
    } else {
        (0..len).map(|_| !rng.bernoulli(p)).collect()
    };
    Mask {
        shape: shape.to_vec(),
        keep,
        scale: inverted_scale(p),
    }
}

/// One Bernoulli draw per channel; the mask has shape `[C, 1, 1]` and
/// broadcasts over the spatial axes.
pub fn sample_channel_mask(num_channels: usize, p: f64, rng: &mut RngStream) -> Mask {
    let mut m = sample_element_mask(&[num_channels], p, rng);
    m.shape = vec![num_channels, 1, 1];
    m
}

/// Seed rate for block masks so that the expected dropped fraction matches `p`:
/// `γ = p / b² · (H·W) / ((H − b + 1)(W − b + 1))`.
pub fn block_seed_rate(height: usize, width: usize, p: f64, block_size: usize) -> f64 {
    let b = block_size as f64;
    let valid = ((height + 1 - block_size) * (width + 1 - block_size)) as f64;
    p / (b * b) * (height * width) as f64 / valid
}

/// Block mask over one `H×W` feature map. Seeds are drawn at every position
/// with rate [`block_seed_rate`]; each seed zeroes the `b×b` patch centred on
/// it, clipped at the borders.
pub fn sample_block_mask(
    height: usize,
    width: usize,
    p: f64,
    block_size: usize,
    rng: &mut RngStream,
) -> Result<Mask> {
    if block_size == 0 || block_size % 2 == 0 {
        return config_err(format!("block size must be odd and >= 1, got {block_size}"));
    }
    if block_size > height.min(width) {
        return config_err(format!(
            "block size {block_size} exceeds feature map {height}x{width}"
        ));
    }
    let mut keep = vec![true; height * width];
    if p > 0.0 {
        let gamma = block_seed_rate(height, width, p, block_size);
        let r = block_size / 2;
        for y in 0..height {
            for x in 0..width {
                if !rng.bernoulli(gamma) {
                    continue;
                }
                for yy in y.saturating_sub(r)..(y + r + 1).min(height) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(width) {
                        keep[yy * width + xx] = false;
                    }
                }
            }
        }
    }
    Ok(Mask {
        shape: vec![height, width],
        keep,
        scale: inverted_scale(p),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Train,
    /// Test-time sampling: downsampling blocks are always kept.
    McTest,
}

/// Keep/drop decision per residual block (keep probability `1 - p`).
pub fn sample_layer_gates(
    num_blocks: usize,
    p: f64,
    is_downsampling: &[bool],
    mode: GateMode,
    rng: &mut RngStream,
) -> Result<Vec<bool>> {
    if is_downsampling.len() != num_blocks {
        return shape_err(format!(
            "{} downsampling flags for {num_blocks} blocks",
            is_downsampling.len()
        ));
    }
    Ok(is_downsampling
        .iter()
        .map(|&down| {
            // Always draw so the stream position does not depend on the flags.
            let kept = p <= 0.0 || !rng.bernoulli(p);
            kept || (mode == GateMode::McTest && down)
        })
        .collect())
}

/// `tensor ⊙ keep · scale`, with the mask broadcast against the trailing
/// axes of the tensor (mask extents must equal the tensor's or be 1).
pub fn apply_mask<S: Scalar>(tensor: &Tensor<S>, mask: &Mask) -> Result<Tensor<S>> {
    let ts = tensor.shape();
    let ms = mask.shape();
    if ms.len() > ts.len() {
        return shape_err(format!("mask {:?} has higher rank than tensor {:?}", ms, ts));
    }
    let offset = ts.len() - ms.len();
    for (i, &m) in ms.iter().enumerate() {
        if m != 1 && m != ts[offset + i] {
            return shape_err(format!("mask {:?} not broadcastable to {:?}", ms, ts));
        }
    }
    let scale = S::of(mask.scale);
    if ms == &ts[offset..] {
        let period = mask.keep.len();
        let data = tensor
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask.keep[i % period] { x * scale } else { S::zero() })
            .collect();
        return Tensor::from_vec(ts, data);
    }
    // General broadcast: map each tensor index to its mask index.
    let mut mask_strides = vec![0usize; ts.len()];
    let mut acc = 1;
    for i in (0..ms.len()).rev() {
        mask_strides[offset + i] = if ms[i] == 1 { 0 } else { acc };
        acc *= ms[i];
    }
    let mut idx = vec![0usize; ts.len()];
    let mut data = Vec::with_capacity(tensor.len());
    for &x in tensor.data() {
        let mi: usize = idx.iter().zip(&mask_strides).map(|(a, b)| a * b).sum();
        data.push(if mask.keep[mi] { x * scale } else { S::zero() });
        for d in (0..ts.len()).rev() {
            idx[d] += 1;
            if idx[d] < ts[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(ts, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Domain;

    fn rng(i: u64) -> RngStream {
        RngStream::derive(11, Domain::McMask, &[i])
    }

    #[test]
    fn zero_rate_masks_keep_everything() {
        let m = sample_element_mask(&[4, 5], 0.0, &mut rng(0));
        assert_eq!(m.dropped(), 0);
        assert_eq!(m.scale(), 1.0);
        assert_eq!(sample_channel_mask(8, 0.0, &mut rng(1)).dropped(), 0);
        assert_eq!(sample_block_mask(6, 6, 0.0, 3, &mut rng(2)).unwrap().dropped(), 0);
        let gates = sample_layer_gates(4, 0.0, &[false; 4], GateMode::Train, &mut rng(3)).unwrap();
        assert!(gates.iter().all(|&g| g));
    }

    #[test]
    fn same_stream_same_mask() {
        let a = sample_element_mask(&[100], 0.5, &mut rng(5));
        let b = sample_element_mask(&[100], 0.5, &mut rng(5));
        let c = sample_element_mask(&[100], 0.5, &mut rng(6));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn seed_rate_for_32_with_block_3() {
        let gamma = block_seed_rate(32, 32, 0.1, 3);
        assert!((gamma - (0.1 / 9.0) * (1024.0 / 900.0)).abs() < 1e-15);
        assert!((gamma - 0.012642).abs() < 1e-6);
    }

    #[test]
    fn oversized_block_is_config_error() {
        assert!(matches!(sample_block_mask(2, 4, 0.1, 3, &mut rng(0)), Err(Error::Config(_))));
        assert!(sample_block_mask(4, 4, 0.1, 2, &mut rng(0)).is_err());
    }

    #[test]
    fn block_mask_zeroes_whole_patches() {
        // With a high rate every dropped pixel must lie in some fully dropped
        // clipped 3x3 patch around a seed; check the weaker property that an
        // isolated dropped pixel never occurs.
        let m = sample_block_mask(10, 10, 0.3, 3, &mut rng(9)).unwrap();
        let k = m.keep();
        for y in 0..10usize {
            for x in 0..10usize {
                if k[y * 10 + x] {
                    continue;
                }
                let mut neighbours = 0;
                for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if (0..10).contains(&yy) && (0..10).contains(&xx) && !k[(yy * 10 + xx) as usize] {
                        neighbours += 1;
                    }
                }
                assert!(neighbours > 0, "isolated drop at ({y},{x})");
            }
        }
    }

    #[test]
    fn mc_test_keeps_downsampling_blocks() {
        for i in 0..200 {
            let gates = sample_layer_gates(3, 0.9, &[true; 3], GateMode::McTest, &mut rng(i)).unwrap();
            assert!(gates.iter().all(|&g| g));
        }
    }

    #[test]
    fn apply_mask_examples() {
        let t = Tensor::from_vec(&[1], vec![2.0f64]).unwrap();
        let kept = Mask::from_keep(&[1], vec![true], 0.5).unwrap();
        assert_eq!(apply_mask(&t, &kept).unwrap().data(), &[4.0]);
        let dropped = Mask::from_keep(&[1], vec![false], 0.5).unwrap();
        assert_eq!(apply_mask(&t, &dropped).unwrap().data(), &[0.0]);
        let x = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(apply_mask(&x, &Mask::ones(&[2, 2])).unwrap(), x);
    }

    #[test]
    fn channel_mask_broadcasts_constant_per_channel() {
        let x = Tensor::full(&[3, 4, 4], 1.0f64);
        let m = Mask::from_keep(&[3, 1, 1], vec![true, false, true], 0.25).unwrap();
        let y = apply_mask(&x, &m).unwrap();
        for (c, chunk) in y.data().chunks(16).enumerate() {
            let want = if c == 1 { 0.0 } else { 1.0 / 0.75 };
            assert!(chunk.iter().all(|&v| (v - want).abs() < 1e-15));
        }
        let bad = Mask::ones(&[2, 1, 1]);
        assert!(apply_mask(&x, &bad).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(DropoutSpec::new(DropoutVariant::Element, 1.0).is_err());
        assert!(DropoutSpec::new(DropoutVariant::Element, -0.1).is_err());
        assert!(DropoutSpec::new(DropoutVariant::Block, 0.1).unwrap().with_block_size(4).is_err());
        assert_eq!("channel".parse::<DropoutVariant>().unwrap(), DropoutVariant::Channel);
        assert!("spatial".parse::<DropoutVariant>().is_err());
    }
}

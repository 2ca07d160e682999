//! Synthetic generators with known conditionals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{config_err, Error, Result};
use crate::io::{write_atomic, Reader, Writer};
use crate::rng::{Domain, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Family of `p(y = 1 | x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum ConditionalFamily {
    /// `p(y = 1 | x) = value` everywhere.
    Constant { value: f64 },
    /// `p(y = 1 | x) = sigmoid(scale * w.x / sqrt(dim) + bias)`, with `w`, `x` standard normal.
    Logistic { scale: f64, bias: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBinarySpec {
    pub dim: usize,
    pub family: ConditionalFamily,
    pub n: usize,
    pub seed: u64,
}

/// Features `(N, dim)`, sampled labels and the exact conditional per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBinary {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub conditionals: Vec<f64>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn generate_synthetic_binary(spec: &SyntheticBinarySpec) -> Result<SyntheticBinary> {
    match spec.family {
        ConditionalFamily::Constant { value } if !(0.0..=1.0).contains(&value) => {
            return config_err(format!("constant conditional {value} outside [0, 1]"));
        }
        ConditionalFamily::Logistic { scale, bias } if !(scale.is_finite() && bias.is_finite()) => {
            return config_err("logistic scale and bias must be finite");
        }
        _ => {}
    }
    let dim = spec.dim;
    let mut wrng = RngStream::derive(spec.seed, Domain::Synthetic, &[0]);
    let w: Vec<f64> = (0..dim).map(|_| wrng.normal()).collect();
    let norm = (dim.max(1) as f64).sqrt();
    let mut features = Vec::with_capacity(spec.n * dim);
    let mut labels = Vec::with_capacity(spec.n);
    let mut conditionals = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = RngStream::derive(spec.seed, Domain::Synthetic, &[1, i as u64]);
        let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let p = match spec.family {
            ConditionalFamily::Constant { value } => value,
            ConditionalFamily::Logistic { scale, bias } => {
                let score: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                sigmoid(scale * score / norm + bias)
            }
        };
        labels.push(usize::from(rng.uniform() < p));
        conditionals.push(p);
        features.extend(x);
    }
    Ok(SyntheticBinary {
        features: Tensor::from_vec(&[spec.n, dim], features)?,
        labels,
        conditionals,
    })
}

const SYN_MAGIC: &[u8; 4] = b"CDSB";

/// Container: magic, version, N, dim, K=2, features, labels (u32), conditionals.
pub fn write_synthetic_binary(data: &SyntheticBinary, path: impl AsRef<Path>) -> Result<()> {
    let (n, dim) = data.features.dims2()?;
    let mut w = Writer::new();
    w.bytes(SYN_MAGIC);
    w.u32(1);
    w.u64(n as u64);
    w.u64(dim as u64);
    w.u32(2);
    w.scalars(data.features.data());
    for &l in &data.labels {
        w.u32(l as u32);
    }
    w.scalars(&data.conditionals);
    write_atomic(path, &w.into_inner())
}

pub fn read_synthetic_binary(path: impl AsRef<Path>) -> Result<SyntheticBinary> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, "synthetic container");
    r.expect_magic(SYN_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported synthetic container version {version}")));
    }
    let n = r.len(1)?;
    let dim = r.len(0)?;
    if r.u32()? != 2 {
        return Err(Error::Format("synthetic container must be binary".into()));
    }
    let features = r.scalars::<f64>(n * dim)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.u32()? as usize;
        if l > 1 {
            return Err(Error::Format(format!("binary label {l}")));
        }
        labels.push(l);
    }
    let conditionals = r.scalars::<f64>(n)?;
    r.finish()?;
    Ok(SyntheticBinary {
        features: Tensor::from_vec(&[n, dim], features)?,
        labels,
        conditionals,
    })
}

/// Class-prototype images with Gaussian noise.
///
/// Every sample is its class prototype blended toward a random other class
/// with weight `u * max_blend`, `u ~ U(0, 1)`. An `ambiguous_fraction` of the
/// samples is an even blend of two prototypes whose label is a coin flip
/// between the two, so no model can predict them better than chance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticImageSpec {
    pub n: usize,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub noise: f64,
    pub max_blend: f64,
    pub ambiguous_fraction: f64,
    /// Seed of the class prototypes; datasets sharing it are draws of one task.
    pub task_seed: u64,
    pub seed: u64,
}

pub fn generate_synthetic_images<S: Scalar>(spec: &SyntheticImageSpec) -> Result<ImageDataset<S>> {
    if spec.num_classes < 2 {
        return config_err("synthetic images need at least 2 classes");
    }
    if !(0.0..=1.0).contains(&spec.ambiguous_fraction) || !(0.0..0.5).contains(&spec.max_blend) {
        return config_err("ambiguous_fraction must be in [0, 1] and max_blend in [0, 0.5)");
    }
    let per: usize = spec.shape.iter().product();
    let k = spec.num_classes;
    let mut prng = RngStream::derive(spec.task_seed, Domain::Synthetic, &[2]);
    let protos: Vec<Vec<f64>> = (0..k).map(|_| (0..per).map(|_| prng.normal()).collect()).collect();
    let mut data = Vec::with_capacity(spec.n * per);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = RngStream::derive(spec.seed, Domain::Synthetic, &[3, i as u64]);
        let a = rng.below(k);
        let b = (a + 1 + rng.below(k - 1)) % k;
        let (blend, label) = if rng.uniform() < spec.ambiguous_fraction {
            (0.5, if rng.bernoulli(0.5) { b } else { a })
        } else {
            (rng.uniform() * spec.max_blend, a)
        };
        for (pa, pb) in protos[a].iter().zip(&protos[b]) {
            let v = (1.0 - blend) * pa + blend * pb + spec.noise * rng.normal();
            data.push(S::of(v));
        }
        labels.push(label);
    }
    let [c, h, w] = spec.shape;
    ImageDataset::new(Tensor::from_vec(&[spec.n, c, h, w], data)?, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: ConditionalFamily, n: usize) -> SyntheticBinarySpec {
        SyntheticBinarySpec { dim: 4, family, n, seed: 11 }
    }

    #[test]
    fn constant_one_gives_all_ones() {
        let d = generate_synthetic_binary(&spec(ConditionalFamily::Constant { value: 1.0 }, 500)).unwrap();
        assert!(d.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn constant_half_is_balanced_within_three_sigma() {
        let n = 20_000;
        let d = generate_synthetic_binary(&spec(ConditionalFamily::Constant { value: 0.5 }, n)).unwrap();
        let mean = d.labels.iter().sum::<usize>() as f64 / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn reproducible_and_roundtrips() {
        let s = spec(ConditionalFamily::Logistic { scale: 2.0, bias: 0.0 }, 50);
        let a = generate_synthetic_binary(&s).unwrap();
        assert_eq!(a, generate_synthetic_binary(&s).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("syn.bin");
        write_synthetic_binary(&a, &p).unwrap();
        assert_eq!(read_synthetic_binary(&p).unwrap(), a);
    }

    #[test]
    fn invalid_constant_rejected() {
        assert!(generate_synthetic_binary(&spec(ConditionalFamily::Constant { value: 1.5 }, 5)).is_err());
    }

    #[test]
    fn images_share_prototypes_per_task() {
        let mut s = SyntheticImageSpec {
            n: 30,
            num_classes: 3,
            shape: [1, 4, 4],
            noise: 0.0,
            max_blend: 0.0,
            ambiguous_fraction: 0.0,
            task_seed: 1,
            seed: 2,
        };
        let a = generate_synthetic_images::<f64>(&s).unwrap();
        s.seed = 3;
        let b = generate_synthetic_images::<f64>(&s).unwrap();
        let ia = a.labels.iter().position(|&l| l == 0).unwrap();
        let ib = b.labels.iter().position(|&l| l == 0).unwrap();
        assert_eq!(a.images.item(ia), b.images.item(ib));
    }
}

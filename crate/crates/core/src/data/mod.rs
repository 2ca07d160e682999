//! Image datasets, deterministic splits and per-pixel mean preprocessing.

mod cifar;
mod synthetic;

pub use cifar::{decode_cifar10, load_cifar10_binary, load_cifar10_dir, CIFAR10_RECORD_BYTES};
pub use synthetic::{
    generate_synthetic_binary, generate_synthetic_images, read_synthetic_binary, write_synthetic_binary,
    ConditionalFamily, SyntheticBinary, SyntheticBinarySpec, SyntheticImageSpec,
};

use std::fmt;

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::{Domain, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Pool,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Pool => "pool",
        })
    }
}

/// Labeled images, `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset<S> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<S: Scalar> ImageDataset<S> {
    pub fn new(images: Tensor<S>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return shape_err(format!("{n} images but {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn empty(example_shape: [usize; 3], num_classes: usize) -> Self {
        let [c, h, w] = example_shape;
        Self {
            images: Tensor::zeros(&[0, c, h, w]),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenation along the example axis.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.example_shape() != other.example_shape() || self.num_classes != other.num_classes {
            return shape_err("cannot concatenate datasets with different layouts");
        }
        let [c, h, w] = self.example_shape();
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            images: Tensor::from_vec(&[labels.len(), c, h, w], data)?,
            labels,
            num_classes: self.num_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Pixel-wise mean image `(C*H*W)`.
    pub fn mean_image(&self) -> Vec<S> {
        let per = self.images.item_len();
        let mut sum = vec![0.0f64; per];
        for i in 0..self.len() {
            for (s, v) in sum.iter_mut().zip(self.images.item(i)) {
                *s += v.as_f64();
            }
        }
        let n = self.len().max(1) as f64;
        sum.into_iter().map(|s| S::of(s / n)).collect()
    }

    fn subtract(&mut self, mean: &[S]) {
        let per = mean.len();
        for chunk in self.images.data_mut().chunks_exact_mut(per) {
            for (v, &m) in chunk.iter_mut().zip(mean) {
                *v -= m;
            }
        }
    }
}

/// Train / validation / test splits with the preprocessing mean, if applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits<S> {
    pub train: ImageDataset<S>,
    pub val: ImageDataset<S>,
    pub test: ImageDataset<S>,
    pub mean_image: Option<Vec<S>>,
}

impl<S: Scalar> Splits<S> {
    pub fn get(&self, tag: SplitTag) -> Option<&ImageDataset<S>> {
        match tag {
            SplitTag::Train => Some(&self.train),
            SplitTag::Val => Some(&self.val),
            SplitTag::Test => Some(&self.test),
            SplitTag::Pool => None,
        }
    }
}

/// Subtracts the train-split pixel mean from every split and records it.
/// When a mean was already applied it is folded in, so `mean_image` always
/// maps back to raw pixel space.
pub fn per_pixel_mean_subtract<S: Scalar>(splits: &mut Splits<S>) -> Result<()> {
    if splits.train.is_empty() {
        return config_err("per-pixel mean needs a non-empty train split");
    }
    let mean = splits.train.mean_image();
    for part in [&mut splits.train, &mut splits.val, &mut splits.test] {
        part.subtract(&mean);
    }
    splits.mean_image = Some(match splits.mean_image.take() {
        Some(prev) => prev.iter().zip(&mean).map(|(&a, &b)| a + b).collect(),
        None => mean,
    });
    Ok(())
}

/// Index order for a stratified partition: ranks within each class are
/// spread evenly over `[0, 1)`, so any prefix holds every class in proportion
/// (within one example per class).
fn stratified_order(labels: &[usize], num_classes: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keyed = Vec::with_capacity(labels.len());
    for (c, members) in by_class.iter_mut().enumerate() {
        rng.shuffle(members);
        let n = members.len() as f64;
        for (r, &i) in members.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / n, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

/// Index partition of `0..n` into consecutive parts of the given sizes; any
/// remainder is dropped.
pub fn split_indices(
    labels: &[usize],
    num_classes: usize,
    sizes: &[usize],
    seed: u64,
    stratified: bool,
) -> Result<Vec<Vec<usize>>> {
    let total: usize = sizes.iter().sum();
    if total > labels.len() {
        return config_err(format!("split sizes sum to {total}, dataset has {}", labels.len()));
    }
    let mut rng = RngStream::derive(seed, Domain::Split, &[labels.len() as u64]);
    let order = if stratified {
        stratified_order(labels, num_classes, &mut rng)
    } else {
        let mut o: Vec<usize> = (0..labels.len()).collect();
        rng.shuffle(&mut o);
        o
    };
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let mut part = order[start..start + s].to_vec();
        if stratified {
            rng.shuffle(&mut part);
        }
        parts.push(part);
        start += s;
    }
    Ok(parts)
}

pub fn split<S: Scalar>(
    dataset: &ImageDataset<S>,
    sizes: &[usize],
    seed: u64,
    stratified: bool,
) -> Result<Vec<ImageDataset<S>>> {
    Ok(split_indices(&dataset.labels, dataset.num_classes, sizes, seed, stratified)?
        .iter()
        .map(|idx| dataset.subset(idx))
        .collect())
}

pub fn subsample<S: Scalar>(dataset: &ImageDataset<S>, n: usize, seed: u64, stratified: bool) -> Result<ImageDataset<S>> {
    Ok(split(dataset, &[n], seed, stratified)?.pop().expect("one part"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, k: usize) -> ImageDataset<f64> {
        let images = Tensor::from_vec(&[n, 1, 1, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap();
        ImageDataset::new(images, (0..n).map(|i| i % k).collect(), k).unwrap()
    }

    #[test]
    fn identity_split_keeps_everything() {
        let d = balanced(20, 2);
        let parts = split(&d, &[20, 0], 3, false).unwrap();
        assert_eq!(parts[0].len(), 20);
        assert!(parts[1].is_empty());
        let mut seen: Vec<f64> = parts[0].images.data().to_vec();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, d.images.data());
    }

    #[test]
    fn stratified_split_is_exact_on_balanced_classes() {
        let d = balanced(1000, 10);
        let parts = split(&d, &[900, 100], 5, true).unwrap();
        assert_eq!(parts[0].class_counts(), vec![90; 10]);
        assert_eq!(parts[1].class_counts(), vec![10; 10]);
        let again = split(&d, &[900, 100], 5, true).unwrap();
        assert_eq!(parts, again);
    }

    #[test]
    fn parts_are_disjoint() {
        let d = balanced(97, 3);
        let idx = split_indices(&d.labels, 3, &[50, 30, 17], 9, true).unwrap();
        let mut all: Vec<usize> = idx.concat();
        all.sort();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_split_is_rejected() {
        let d = balanced(10, 2);
        assert!(matches!(split(&d, &[8, 3], 0, false), Err(Error::Config(_))));
    }

    #[test]
    fn mean_subtraction() {
        let d = balanced(40, 4);
        let parts = split(&d, &[30, 5, 5], 1, true).unwrap();
        let mut s = Splits {
            train: parts[0].clone(),
            val: parts[1].clone(),
            test: parts[2].clone(),
            mean_image: None,
        };
        per_pixel_mean_subtract(&mut s).unwrap();
        for m in s.train.mean_image() {
            assert!(m.abs() < 1e-9);
        }
        let once = s.clone();
        per_pixel_mean_subtract(&mut s).unwrap();
        for (a, b) in s.train.images.data().iter().zip(once.train.images.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let raw = parts[1].images.data();
        let mean = s.mean_image.as_ref().unwrap();
        for (i, (v, r)) in s.val.images.data().iter().zip(raw).enumerate() {
            assert!((v + mean[i % 2] - r).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_dataset_becomes_zero() {
        let images = Tensor::full(&[4, 1, 2, 2], 0.7f64);
        let d = ImageDataset::new(images, vec![0, 1, 0, 1], 2).unwrap();
        let mut s = Splits {
            train: d.clone(),
            val: d.clone(),
            test: ImageDataset::empty([1, 2, 2], 2),
            mean_image: None,
        };
        per_pixel_mean_subtract(&mut s).unwrap();
        assert!(s.train.images.data().iter().all(|v| v.abs() < 1e-12));
    }
}

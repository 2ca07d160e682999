//! Augmentation, the SGD training loop with step decay, validation-based
//! model selection and the dropout-rate grid search.

use std::fmt::Write as _;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::calibration;
use crate::data::ImageDataset;
use crate::ensemble::{ensemble_average, mc_predict, predict_probs, PredictionSet};
use crate::error::{config_err, Error, Result};
use crate::nn::classifier::{Classifier, Pass};
use crate::nn::param::sgd_step;
use crate::rng::{Domain, RngStream};
use crate::scalar::Scalar;

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    1e-4
}
fn default_drops() -> Vec<usize> {
    vec![30, 45]
}
fn default_factor() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_drops")]
    pub lr_drop_epochs: Vec<usize>,
    #[serde(default = "default_factor")]
    pub lr_drop_factor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augment: bool,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 60 epochs, drops at 30 and 45.
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_decay(),
            lr_drop_epochs: default_drops(),
            lr_drop_factor: default_factor(),
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config_err(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lr_drop_factor <= 0.0 {
            return config_err("momentum must be in [0, 1), weight_decay >= 0, lr_drop_factor > 0");
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return config_err(format!("lr_drop_epochs must be strictly increasing: {:?}", self.lr_drop_epochs));
        }
        if self.epochs > 0 && self.lr_drop_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return config_err(format!(
                "lr_drop_epochs {:?} must be below epochs = {}",
                self.lr_drop_epochs, self.epochs
            ));
        }
        Ok(())
    }
}

/// Right-continuous step schedule: `lr / factor^(#drops <= epoch)`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr / cfg.lr_drop_factor.powi(passed as i32)
}

pub const AUGMENT_PAD: usize = 4;

/// Crop of the zero-padded image at offset `(dy, dx)` in the padded frame,
/// optionally mirrored horizontally. `dy = dx = AUGMENT_PAD` without a flip
/// is the identity.
pub fn augment_with<S: Scalar>(image: &[S], shape: [usize; 3], dy: usize, dx: usize, flip: bool) -> Vec<S> {
    let [c, h, w] = shape;
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + dx) as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Pad by 4 with zeros (the dataset mean after mean subtraction), take a
/// random crop of the original size, flip with probability 1/2.
pub fn augment<S: Scalar>(image: &[S], shape: [usize; 3], rng: &mut RngStream) -> Vec<S> {
    let dy = rng.below(2 * AUGMENT_PAD + 1);
    let dx = rng.below(2 * AUGMENT_PAD + 1);
    let flip = rng.bernoulli(0.5);
    augment_with(image, shape, dy, dx, flip)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Running means over the epoch's minibatches (train mode).
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Deterministic-mode metrics on the validation split; `None` when empty.
    pub val_accuracy: Option<f64>,
    pub val_nll: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult<M> {
    /// Parameters of the selected epoch.
    pub model: M,
    pub curves: Vec<EpochRecord>,
    /// `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
}

pub fn curves_csv(curves: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_acc,val_nll\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in curves {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_accuracy,
            opt(r.val_accuracy),
            opt(r.val_nll)
        )
        .expect("string write");
    }
    out
}

/// Deterministic-mode predictions of a dataset.
pub fn predict_deterministic<S: Scalar, M: Classifier<S>>(net: &M, data: &ImageDataset<S>, batch_size: usize) -> Result<PredictionSet<S>> {
    let probs = predict_probs(net, data, Pass::deterministic(), batch_size)?;
    PredictionSet::new(probs, net.num_classes(), data.labels.clone())
}

fn minibatch<S: Scalar>(train: &ImageDataset<S>, idx: &[usize], augmenting: bool, seed: u64, epoch: usize) -> crate::tensor::Tensor<S> {
    let mut x = train.images.gather(idx);
    if augmenting {
        let shape = train.example_shape();
        let per = x.item_len();
        for (j, &i) in idx.iter().enumerate() {
            let mut rng = RngStream::derive(seed, Domain::Augment, &[epoch as u64, i as u64]);
            let out = augment(&x.data()[j * per..(j + 1) * per], shape, &mut rng);
            x.data_mut()[j * per..(j + 1) * per].copy_from_slice(&out);
        }
    }
    x
}

/// Minibatch SGD with momentum. Selects the first epoch with the highest
/// validation accuracy, or the last epoch when `val` is empty.
pub fn fit<S: Scalar, M: Classifier<S>>(
    mut net: M,
    train: &ImageDataset<S>,
    val: &ImageDataset<S>,
    cfg: &TrainConfig,
) -> Result<FitResult<M>> {
    cfg.validate()?;
    if cfg.epochs > 0 && train.is_empty() {
        return config_err("cannot train on an empty split");
    }
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, M)> = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngStream::derive(cfg.seed, Domain::Shuffle, &[epoch as u64]).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = minibatch(train, idx, cfg.augment, cfg.seed, epoch);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, logits) = net.compute_gradients(&x, &labels, &Pass::train(cfg.seed, step))?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, step {bi} (global step {step}): loss {loss}"
                )));
            }
            sgd_step(&mut net.params_mut(), S::of(lr), S::of(cfg.momentum), S::of(cfg.weight_decay))
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {bi}: {e}")))?;
            loss_sum += loss * idx.len() as f64;
            let k = net.num_classes();
            for (row, &y) in logits.data().chunks(k).zip(&labels) {
                correct += usize::from(crate::ensemble::argmax(row).0 == y);
            }
            step += 1;
        }
        let n = train.len() as f64;
        let (val_accuracy, val_nll) = if val.is_empty() {
            (None, None)
        } else {
            let p = predict_deterministic(&net, val, cfg.batch_size.max(256))?;
            (Some(calibration::accuracy(&p)), Some(calibration::nll(&p)))
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_accuracy,
            val_nll,
        };
        debug!("{record:?}");
        curves.push(record);
        match val_accuracy {
            Some(acc) if best.as_ref().is_none_or(|b| acc > b.0) => best = Some((acc, epoch, net.clone())),
            _ => {}
        }
    }
    if let Some(last) = curves.last() {
        info!(
            "trained {} epochs: train acc {:.4}, val acc {:?}",
            curves.len(),
            last.train_accuracy,
            last.val_accuracy
        );
    }
    let (model, selected_epoch) = match best {
        Some((_, epoch, model)) => (model, Some(epoch)),
        None => (net, cfg.epochs.checked_sub(1)),
    };
    Ok(FitResult {
        model,
        curves,
        selected_epoch,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub rate: f64,
    pub nll: Option<f64>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    /// Lowest-NLL rate among successful cells (`None` if all failed).
    pub best_rate: Option<f64>,
    /// One row per distinct rate, sorted by rate.
    pub rows: Vec<GridRow>,
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("rate,nll,accuracy,error\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
        writeln!(out, "{},{},{},{}", r.rate, opt(r.nll), opt(r.accuracy), err).expect("string write");
    }
    out
}

/// Default grid: 0.05, 0.10, ... up to `cap`.
pub fn default_rates(cap: f64) -> Vec<f64> {
    (1..).map(|i| i as f64 * 0.05).take_while(|&r| r <= cap + 1e-9).map(|r| (r * 100.0).round() / 100.0).collect()
}

/// Settings of the MC evaluation used to score each grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridEval {
    pub mc_samples: usize,
    pub mc_seed: u64,
    pub batch_size: usize,
}

/// Trains one network per rate and scores it by MC-averaged NLL on `val`
/// (or on `test` when `val` is empty). Cell failures become rows with an
/// error message.
#[allow(clippy::too_many_arguments)]
pub fn grid_search_dropout_rate<S, M, B>(
    build: B,
    rates: &[f64],
    train: &ImageDataset<S>,
    val: &ImageDataset<S>,
    test: &ImageDataset<S>,
    cfg: &TrainConfig,
    eval: GridEval,
) -> Result<GridSearchResult>
where
    S: Scalar,
    M: Classifier<S>,
    B: Fn(f64) -> Result<M>,
{
    let mut rates: Vec<f64> = rates.to_vec();
    if rates.is_empty() {
        return config_err("grid search needs at least one rate");
    }
    if let Some(bad) = rates.iter().find(|r| !r.is_finite()) {
        return config_err(format!("invalid dropout rate {bad}"));
    }
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let score_on = if val.is_empty() { test } else { val };
    if score_on.is_empty() {
        return config_err("grid search needs a non-empty validation or test split");
    }
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in &rates {
        let cell = || -> Result<(f64, f64)> {
            let net = build(rate)?;
            let fitted = fit(net, train, val, cfg)?;
            let ens = mc_predict(&fitted.model, score_on, eval.mc_samples, eval.mc_seed, eval.batch_size)?;
            let avg = ensemble_average(&ens);
            Ok((calibration::nll(&avg), calibration::accuracy(&avg)))
        };
        match cell() {
            Ok((nll, acc)) => {
                info!("rate {rate}: nll {nll:.4}, accuracy {acc:.4}");
                rows.push(GridRow {
                    rate,
                    nll: Some(nll),
                    accuracy: Some(acc),
                    error: None,
                });
            }
            Err(e) => {
                warn!("rate {rate} failed: {e}");
                rows.push(GridRow {
                    rate,
                    nll: None,
                    accuracy: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let best_rate = rows
        .iter()
        .filter_map(|r| r.nll.map(|n| (n, r.rate)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, r)| r);
    Ok(GridSearchResult { best_rate, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_right_continuous_step() {
        let cfg = TrainConfig {
            epochs: 10,
            lr: 0.1,
            lr_drop_epochs: vec![3, 6],
            ..TrainConfig::default()
        };
        assert_eq!(learning_rate(&cfg, 0), 0.1);
        assert_eq!(learning_rate(&cfg, 2), 0.1);
        assert!((learning_rate(&cfg, 3) - 0.01).abs() < 1e-15);
        assert!((learning_rate(&cfg, 9) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn drop_epochs_validated() {
        let mut cfg = TrainConfig {
            epochs: 10,
            lr_drop_epochs: vec![5, 5],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.lr_drop_epochs = vec![2, 10];
        assert!(cfg.validate().is_err());
        cfg.lr_drop_epochs = vec![2, 9];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn centered_crop_without_flip_is_identity() {
        let img: Vec<f64> = (0..2 * 5 * 5).map(|i| i as f64).collect();
        assert_eq!(augment_with(&img, [2, 5, 5], 4, 4, false), img);
        let flipped = augment_with(&img, [2, 5, 5], 4, 4, true);
        assert_eq!(augment_with(&flipped, [2, 5, 5], 4, 4, true), img);
    }

    #[test]
    fn corner_crop_shifts_ramp() {
        let (h, w) = (6, 6);
        let img: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 + 1.0).collect();
        let out = augment_with(&img, [1, h, w], 0, 0, false);
        for y in 0..h {
            for x in 0..w {
                let want = if y < 4 || x < 4 { 0.0 } else { (x - 4) as f64 + 1.0 };
                assert_eq!(out[y * w + x], want, "({y},{x})");
            }
        }
    }

    #[test]
    fn default_grid() {
        assert_eq!(default_rates(0.2), vec![0.05, 0.1, 0.15, 0.2]);
    }
}

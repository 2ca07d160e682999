//! Accuracy, NLL, Brier, binned top-label ECE, reliability tables and
//! bootstrap intervals.
//!
//! Metrics accept either precision and accumulate in `f64`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::ensemble::PredictionSet;
use crate::error::{Error, Result};
use crate::rng::{Domain, RngStream};
use crate::scalar::Scalar;

pub const DEFAULT_BINS: usize = 20;
pub const NLL_FLOOR: f64 = 1e-12;

/// Fraction of argmax predictions equal to the label (0 for an empty set).
pub fn accuracy<S: Scalar>(preds: &PredictionSet<S>) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let correct = (0..preds.len()).filter(|&n| preds.top(n).0 == preds.labels()[n]).count();
    correct as f64 / preds.len() as f64
}

/// Mean `-ln max(p_true, 1e-12)`.
pub fn nll<S: Scalar>(preds: &PredictionSet<S>) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..preds.len())
        .map(|n| -preds.row(n)[preds.labels()[n]].as_f64().max(NLL_FLOOR).ln())
        .sum();
    total / preds.len() as f64
}

/// `(1 / (N K)) * sum_n sum_c (p_nc - [y_n = c])^2`.
pub fn brier<S: Scalar>(preds: &PredictionSet<S>) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 0..preds.len() {
        let y = preds.labels()[n];
        for (c, p) in preds.row(n).iter().enumerate() {
            let d = p.as_f64() - if c == y { 1.0 } else { 0.0 };
            total += d * d;
        }
    }
    total / (preds.len() * preds.num_classes()) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub weight: f64,
}

/// Equal-width confidence bins over `[0, 1]`; empty bins have zero statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBins {
    pub num_bins: usize,
    pub bins: Vec<Bin>,
}

/// Bin of a value in `[0, 1]`: `floor(c * bins)`, with 1 in the last bin.
pub fn bin_index(c: f64, num_bins: usize) -> usize {
    ((c * num_bins as f64).floor().max(0.0) as usize).min(num_bins - 1)
}

/// Top-label ECE: `sum_b w_b |acc_b - conf_b|`.
pub fn ece_binned<S: Scalar>(preds: &PredictionSet<S>, num_bins: usize) -> Result<(f64, ReliabilityBins)> {
    if num_bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf = vec![0.0f64; num_bins];
    let mut hits = vec![0usize; num_bins];
    for n in 0..preds.len() {
        let (cls, p) = preds.top(n);
        let c = p.as_f64();
        let b = bin_index(c, num_bins);
        count[b] += 1;
        conf[b] += c;
        hits[b] += usize::from(cls == preds.labels()[n]);
    }
    let total = preds.len().max(1) as f64;
    let width = 1.0 / num_bins as f64;
    let mut ece = 0.0;
    let bins = (0..num_bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] > 0 {
                (conf[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            let weight = count[b] as f64 / total;
            ece += weight * (accuracy - mean_confidence).abs();
            Bin {
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                count: count[b],
                mean_confidence,
                accuracy,
                weight,
            }
        })
        .collect();
    Ok((ece, ReliabilityBins { num_bins, bins }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityRow {
    pub conf_mid: f64,
    pub acc_minus_conf: f64,
    pub weight: f64,
}

/// One row per non-empty bin.
pub fn reliability_data(bins: &ReliabilityBins) -> Vec<ReliabilityRow> {
    bins.bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| ReliabilityRow {
            conf_mid: 0.5 * (b.lo + b.hi),
            acc_minus_conf: b.accuracy - b.mean_confidence,
            weight: b.weight,
        })
        .collect()
}

pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let mut out = String::from("conf_mid,acc_minus_conf,weight\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.conf_mid, r.acc_minus_conf, r.weight).expect("string write");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub std: f64,
    /// 2.5th and 97.5th percentiles (linear interpolation between order statistics).
    pub ci_lo: f64,
    pub ci_hi: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resamples `N` indices with replacement per replicate; replicate `r` draws
/// from its own stream, so results do not depend on scheduling.
pub fn bootstrap<S, F>(metric: F, preds: &PredictionSet<S>, reps: usize, seed: u64) -> Result<BootstrapSummary>
where
    S: Scalar,
    F: Fn(&PredictionSet<S>) -> f64 + Sync,
{
    if reps < 2 {
        return Err(Error::Config(format!("bootstrap needs at least 2 replicates, got {reps}")));
    }
    if preds.is_empty() {
        return Err(Error::Usage("cannot bootstrap an empty prediction set".into()));
    }
    let n = preds.len();
    let mut values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::derive(seed, Domain::Bootstrap, &[r as u64]);
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            metric(&preds.subset(&idx))
        })
        .collect();
    let mean = values.iter().sum::<f64>() / reps as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    values.sort_by(f64::total_cmp);
    Ok(BootstrapSummary {
        mean,
        std: var.sqrt(),
        ci_lo: percentile(&values, 0.025),
        ci_hi: percentile(&values, 0.975),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricIntervals {
    pub accuracy: BootstrapSummary,
    pub nll: BootstrapSummary,
    pub brier: BootstrapSummary,
    pub ece: BootstrapSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub bins: ReliabilityBins,
    pub intervals: Option<MetricIntervals>,
}

/// All metrics; bootstrap intervals when `reps >= 2`.
pub fn evaluate<S: Scalar>(preds: &PredictionSet<S>, num_bins: usize, reps: usize, seed: u64) -> Result<CalibrationReport> {
    if preds.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty prediction set".into()));
    }
    let (ece, bins) = ece_binned(preds, num_bins)?;
    let report = CalibrationReport {
        num_samples: preds.len(),
        accuracy: accuracy(preds),
        nll: nll(preds),
        brier: brier(preds),
        ece,
        bins,
        intervals: None,
    };
    for (name, v) in [("accuracy", report.accuracy), ("nll", report.nll), ("brier", report.brier), ("ece", report.ece)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite")));
        }
    }
    if reps < 2 {
        return Ok(report);
    }
    let ece_of = |p: &PredictionSet<S>| ece_binned(p, num_bins).map(|e| e.0).unwrap_or(f64::NAN);
    let intervals = MetricIntervals {
        accuracy: bootstrap(accuracy, preds, reps, seed)?,
        nll: bootstrap(nll, preds, reps, seed)?,
        brier: bootstrap(brier, preds, reps, seed)?,
        ece: bootstrap(ece_of, preds, reps, seed)?,
    };
    Ok(CalibrationReport {
        intervals: Some(intervals),
        ..report
    })
}

impl CalibrationReport {
    /// `key = value` lines; the `table.*` keys use the scale of the paper's
    /// results table (Brier x 1e-3, ECE x 1e-2).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("samples", self.num_samples.to_string());
        kv("bins", self.bins.num_bins.to_string());
        kv("accuracy", self.accuracy.to_string());
        kv("nll", self.nll.to_string());
        kv("brier", self.brier.to_string());
        kv("ece", self.ece.to_string());
        kv("table.accuracy_pct", format!("{:.2}", 100.0 * self.accuracy));
        kv("table.nll", format!("{:.4}", self.nll));
        kv("table.brier_e3", format!("{:.3}", 1e3 * self.brier));
        kv("table.ece_e2", format!("{:.3}", 1e2 * self.ece));
        if let Some(iv) = &self.intervals {
            for (name, s) in [("accuracy", iv.accuracy), ("nll", iv.nll), ("brier", iv.brier), ("ece", iv.ece)] {
                kv(&format!("bootstrap.{name}.mean"), s.mean.to_string());
                kv(&format!("bootstrap.{name}.std"), s.std.to_string());
                kv(&format!("bootstrap.{name}.ci_lo"), s.ci_lo.to_string());
                kv(&format!("bootstrap.{name}.ci_hi"), s.ci_hi.to_string());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(probs: Vec<f64>, k: usize, labels: Vec<usize>) -> PredictionSet<f64> {
        PredictionSet::new(probs, k, labels).unwrap()
    }

    #[test]
    fn nll_examples() {
        let p = set(vec![0.5, 0.5, 0.25, 0.75], 2, vec![0, 0]);
        assert!((nll(&p) - 1.039721).abs() < 1e-6);
        let u = set(vec![0.1; 10], 10, vec![3]);
        assert!((nll(&u) - 10f64.ln()).abs() < 1e-12);
        let perfect = set(vec![0.0, 1.0], 2, vec![1]);
        assert!(nll(&perfect).abs() < 1e-12);
    }

    #[test]
    fn brier_examples() {
        assert!((brier(&set(vec![0.5, 0.5], 2, vec![0])) - 0.25).abs() < 1e-15);
        assert!((brier(&set(vec![0.1; 10], 10, vec![0])) - 0.09).abs() < 1e-15);
        assert_eq!(brier(&set(vec![0.0, 1.0], 2, vec![1])), 0.0);
    }

    #[test]
    fn ece_examples() {
        let perfect = set(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1]);
        assert_eq!(ece_binned(&perfect, 20).unwrap().0, 0.0);
        let over = set(vec![0.9, 0.1, 0.9, 0.1], 2, vec![0, 1]);
        let (e, bins) = ece_binned(&over, 20).unwrap();
        assert!((e - 0.4).abs() < 1e-12);
        let rows = reliability_data(&bins);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].acc_minus_conf + 0.4).abs() < 1e-12);
        assert!((rows[0].conf_mid - 0.925).abs() < 1e-12);
    }

    #[test]
    fn confidence_one_lands_in_last_bin() {
        assert_eq!(bin_index(1.0, 20), 19);
        assert_eq!(bin_index(0.05, 20), 1);
        assert_eq!(bin_index(0.0, 20), 0);
    }

    #[test]
    fn empty_input_gives_empty_table() {
        let e = set(vec![], 3, vec![]);
        let (ece, bins) = ece_binned(&e, 20).unwrap();
        assert_eq!(ece, 0.0);
        assert!(reliability_data(&bins).is_empty());
        assert_eq!(reliability_csv(&[]), "conf_mid,acc_minus_conf,weight\n");
    }

    #[test]
    fn bootstrap_constant_metric_has_zero_spread() {
        let p = set(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 2, vec![0, 1, 0]);
        let s = bootstrap(accuracy, &p, 50, 3).unwrap();
        assert_eq!((s.mean, s.std, s.ci_lo, s.ci_hi), (1.0, 0.0, 1.0, 1.0));
        assert!(bootstrap(accuracy, &p, 1, 3).is_err());
    }

    #[test]
    fn report_text_is_keyed() {
        let p = set(vec![0.9, 0.1, 0.2, 0.8], 2, vec![0, 0]);
        let r = evaluate(&p, 20, 10, 1).unwrap();
        let text = r.to_text();
        assert!(text.contains("accuracy = 0.5\n"));
        assert!(text.contains("bootstrap.ece.ci_hi = "));
        assert_eq!(text, evaluate(&p, 20, 10, 1).unwrap().to_text());
    }
}

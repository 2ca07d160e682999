//! Ambiguity, the error-ambiguity decomposition, ECE decompositions on binary
//! views and interrater agreement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::calibration::{self, bin_index, BootstrapSummary};
use crate::ensemble::{prefix_average, EnsemblePredictions};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Member probabilities of class 1 (`T x N`), binary labels and the stored
/// member mean `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryEnsembleView {
    h: Vec<f64>,
    num_members: usize,
    y: Vec<f64>,
    mean: Vec<f64>,
}

impl BinaryEnsembleView {
    pub fn new(h: Vec<f64>, num_members: usize, labels: &[usize]) -> Result<Self> {
        let n = labels.len();
        if num_members == 0 || h.len() != num_members * n {
            return Err(Error::Shape(format!("{} values for {num_members} members x {n} samples", h.len())));
        }
        if let Some(v) = h.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("member probability {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Config(format!("binary view needs 0/1 labels, got {l}")));
        }
        let mut mean = vec![0.0; n];
        for t in 0..num_members {
            for (m, v) in mean.iter_mut().zip(&h[t * n..(t + 1) * n]) {
                *m += v;
            }
        }
        let inv = 1.0 / num_members as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        Ok(Self {
            h,
            num_members,
            y: labels.iter().map(|&l| l as f64).collect(),
            mean,
        })
    }

    /// One-vs-rest view on `class`: `h = p(class)`, `y = [label == class]`.
    pub fn one_vs_rest<S: Scalar>(ens: &EnsemblePredictions<S>, class: usize) -> Result<Self> {
        if class >= ens.num_classes() {
            return Err(Error::Config(format!("class {class} outside {} classes", ens.num_classes())));
        }
        let n = ens.num_samples();
        let mut h = Vec::with_capacity(ens.num_members() * n);
        for t in 0..ens.num_members() {
            for s in 0..n {
                h.push(ens.row(t, s)[class].as_f64().clamp(0.0, 1.0));
            }
        }
        let labels: Vec<usize> = ens.labels().iter().map(|&l| usize::from(l == class)).collect();
        Self::new(h, ens.num_members(), &labels)
    }

    pub fn num_members(&self) -> usize {
        self.num_members
    }

    pub fn num_samples(&self) -> usize {
        self.y.len()
    }

    pub fn member(&self, t: usize) -> &[f64] {
        let n = self.y.len();
        &self.h[t * n..(t + 1) * n]
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    /// The ensemble prediction `H`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

/// `(h_t - H)^2`.
pub fn ambiguity(h_t: f64, big_h: f64) -> f64 {
    (h_t - big_h).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompositionReport {
    pub ensemble_mse: f64,
    pub avg_member_mse: f64,
    pub avg_ambiguity: f64,
    /// `|ensemble_mse - (avg_member_mse - avg_ambiguity)|`.
    pub residual: f64,
}

/// Error-ambiguity decomposition: `MSE(H) = mean_t MSE(h_t) - mean_t A(h_t)`.
pub fn decompose_mse(view: &BinaryEnsembleView) -> DecompositionReport {
    let n = view.num_samples().max(1) as f64;
    let t = view.num_members as f64;
    let ensemble_mse = view.mean.iter().zip(&view.y).map(|(h, y)| (y - h).powi(2)).sum::<f64>() / n;
    let (mut mse, mut amb) = (0.0, 0.0);
    for m in 0..view.num_members {
        for ((h, big_h), y) in view.member(m).iter().zip(&view.mean).zip(&view.y) {
            mse += (y - h).powi(2);
            amb += ambiguity(*h, *big_h);
        }
    }
    let avg_member_mse = mse / (n * t);
    let avg_ambiguity = amb / (n * t);
    DecompositionReport {
        ensemble_mse,
        avg_member_mse,
        avg_ambiguity,
        residual: (ensemble_mse - (avg_member_mse - avg_ambiguity)).abs(),
    }
}

/// Cells over which `E[y | H(x)]` is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    /// Equal-width bins on `H` over `[0, 1]`.
    Binned(usize),
    /// One cell per distinct value of `H`.
    LevelSets,
}

impl Partition {
    fn cells(self, big_h: &[f64]) -> Result<Vec<usize>> {
        match self {
            Partition::Binned(0) => Err(Error::Config("need at least one bin".into())),
            Partition::Binned(b) => Ok(big_h.iter().map(|&h| bin_index(h, b)).collect()),
            Partition::LevelSets => {
                let mut ids = BTreeMap::new();
                Ok(big_h
                    .iter()
                    .map(|h| {
                        let next = ids.len();
                        *ids.entry(h.to_bits()).or_insert(next)
                    })
                    .collect())
            }
        }
    }
}

/// Per-sample cell mean of `values` under the partition of `H`.
fn cell_means(cells: &[usize], values: &[f64]) -> Vec<f64> {
    let k = cells.iter().max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&c, &v) in cells.iter().zip(values) {
        sum[c] += v;
        count[c] += 1;
    }
    cells.iter().map(|&c| sum[c] / count[c] as f64).collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len().max(1) as f64
}

/// Binary ECE `E_x[(E[y | H(x)] - H(x))^2]`, with `E[y | H]` estimated per cell
/// from the labels, or from the true conditionals `p(y = 1 | x)` when given.
pub fn binary_ece(view: &BinaryEnsembleView, true_conditional: Option<&[f64]>, partition: Partition) -> Result<f64> {
    let cells = partition.cells(&view.mean)?;
    let target = match true_conditional {
        Some(p) if p.len() != view.num_samples() => {
            return Err(Error::Shape(format!("{} conditionals for {} samples", p.len(), view.num_samples())));
        }
        Some(p) => p,
        None => &view.y,
    };
    let c = cell_means(&cells, target);
    Ok(mean(&c.iter().zip(&view.mean).map(|(c, h)| (c - h).powi(2)).collect::<Vec<_>>()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EceDecompositionReport {
    pub mse_h: f64,
    pub ece_h: f64,
    /// `Var_x[E[y | H(x)]]`.
    pub sharpness: f64,
    /// `Var_x[y]` (population variance of the labels).
    pub label_variance: f64,
    /// `E_x[(y - E[y | H(x)])^2]`.
    pub refinement: f64,
    pub avg_member_mse: f64,
    pub avg_ambiguity: f64,
    /// `|mse_h - (refinement + ece_h)|`.
    pub eq4_residual: f64,
    /// `|ece_h - (avg_member_mse - avg_ambiguity + sharpness - label_variance)|`.
    pub eq5_residual: f64,
    pub partition: Partition,
}

fn decomposition_with(view: &BinaryEnsembleView, conditional: &[f64], partition: Partition) -> EceDecompositionReport {
    let big_h = &view.mean;
    let y = &view.y;
    let mse_h = mean(&big_h.iter().zip(y).map(|(h, y)| (y - h).powi(2)).collect::<Vec<_>>());
    let ece_h = mean(&conditional.iter().zip(big_h).map(|(c, h)| (c - h).powi(2)).collect::<Vec<_>>());
    let refinement = mean(&conditional.iter().zip(y).map(|(c, y)| (y - c).powi(2)).collect::<Vec<_>>());
    let sharpness = variance(conditional);
    let label_variance = variance(y);
    let d = decompose_mse(view);
    EceDecompositionReport {
        mse_h,
        ece_h,
        sharpness,
        label_variance,
        refinement,
        avg_member_mse: d.avg_member_mse,
        avg_ambiguity: d.avg_ambiguity,
        eq4_residual: (mse_h - (refinement + ece_h)).abs(),
        eq5_residual: (ece_h - (d.avg_member_mse - d.avg_ambiguity + sharpness - label_variance)).abs(),
        partition,
    }
}

/// ECE decomposition with `E[y | H]` taken as the empirical cell mean of the
/// labels. With level-set cells this is a finite-sample identity; with wider
/// bins `H` varies inside a cell and the identity holds only approximately.
pub fn empirical_ece_decomposition(view: &BinaryEnsembleView, partition: Partition) -> Result<EceDecompositionReport> {
    let cells = partition.cells(&view.mean)?;
    let c = cell_means(&cells, &view.y);
    Ok(decomposition_with(view, &c, partition))
}

/// ECE decomposition with `E[y | H]` estimated from the generator's true
/// conditionals (cell mean of `p(y = 1 | x)` over bins of `H`). Data without
/// known conditionals is unsupported.
pub fn ece_decomposition_for(
    view: &BinaryEnsembleView,
    true_conditional: Option<&[f64]>,
    num_bins: usize,
) -> Result<EceDecompositionReport> {
    let Some(p) = true_conditional else {
        return Err(Error::Unsupported(
            "ECE decomposition needs the true conditional p(y|x); only synthetic data provides it".into(),
        ));
    };
    if p.len() != view.num_samples() {
        return Err(Error::Shape(format!("{} conditionals for {} samples", p.len(), view.num_samples())));
    }
    let partition = Partition::Binned(num_bins);
    let cells = partition.cells(&view.mean)?;
    let c = cell_means(&cells, p);
    Ok(decomposition_with(view, &c, partition))
}

/// `T x n` correctness indicators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectnessMatrix {
    num_members: usize,
    num_samples: usize,
    correct: Vec<bool>,
}

impl CorrectnessMatrix {
    pub fn new(correct: Vec<bool>, num_members: usize, num_samples: usize) -> Result<Self> {
        if correct.len() != num_members * num_samples {
            return Err(Error::Shape(format!(
                "{} entries for {num_members} x {num_samples}",
                correct.len()
            )));
        }
        Ok(Self {
            num_members,
            num_samples,
            correct,
        })
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged correctness rows".into()));
        }
        Self::new(rows.concat(), rows.len(), n)
    }

    /// Member `t` is correct on sample `k` when its argmax equals the label.
    pub fn from_ensemble<S: Scalar>(ens: &EnsemblePredictions<S>) -> Self {
        let n = ens.num_samples();
        let mut correct = Vec::with_capacity(ens.num_members() * n);
        for t in 0..ens.num_members() {
            for s in 0..n {
                correct.push(crate::ensemble::argmax(ens.row(t, s)).0 == ens.labels()[s]);
            }
        }
        Self {
            num_members: ens.num_members(),
            num_samples: n,
            correct,
        }
    }

    pub fn num_members(&self) -> usize {
        self.num_members
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn get(&self, t: usize, k: usize) -> bool {
        self.correct[t * self.num_samples + k]
    }

    /// Number of members correct on sample `k`.
    pub fn rho(&self, k: usize) -> usize {
        (0..self.num_members).filter(|&t| self.get(t, k)).count()
    }

    /// Mean member accuracy.
    pub fn p_bar(&self) -> f64 {
        let total = self.num_members * self.num_samples;
        if total == 0 {
            return 0.0;
        }
        self.correct.iter().filter(|&&c| c).count() as f64 / total as f64
    }
}

/// Interrater agreement
/// `1 - [(1/T) sum_k rho_k (T - rho_k)] / [n (T - 1) p (1 - p)]`.
/// `None` when undefined: fewer than two members, no samples, or `p` in {0, 1}.
pub fn interrater_agreement(m: &CorrectnessMatrix) -> Option<f64> {
    let t = m.num_members;
    let n = m.num_samples;
    let p = m.p_bar();
    if t < 2 || n == 0 || p <= 0.0 || p >= 1.0 {
        return None;
    }
    let tf = t as f64;
    let disagreement: f64 = (0..n)
        .map(|k| {
            let r = m.rho(k) as f64;
            r * (tf - r)
        })
        .sum::<f64>()
        / tf;
    Some(1.0 - disagreement / (n as f64 * (tf - 1.0) * p * (1.0 - p)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub m: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub accuracy_bootstrap: Option<BootstrapSummary>,
    pub ece_bootstrap: Option<BootstrapSummary>,
}

/// Accuracy and ECE of the average of the first `m` members, `m = 1..=max_m`,
/// with bootstrap bars when `reps >= 2`.
pub fn ensemble_size_curves<S: Scalar>(
    ens: &EnsemblePredictions<S>,
    max_m: usize,
    num_bins: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if max_m == 0 || max_m > ens.num_members() {
        return Err(Error::Usage(format!("max_m {max_m} outside 1..={}", ens.num_members())));
    }
    (1..=max_m)
        .map(|m| {
            let avg = prefix_average(ens, m)?;
            let (ece, _) = calibration::ece_binned(&avg, num_bins)?;
            let (accuracy_bootstrap, ece_bootstrap) = if reps >= 2 && !avg.is_empty() {
                let ece_of = |p: &crate::ensemble::PredictionSet<S>| {
                    calibration::ece_binned(p, num_bins).map(|e| e.0).unwrap_or(f64::NAN)
                };
                (
                    Some(calibration::bootstrap(calibration::accuracy, &avg, reps, seed)?),
                    Some(calibration::bootstrap(ece_of, &avg, reps, seed)?),
                )
            } else {
                (None, None)
            };
            Ok(CurvePoint {
                m,
                accuracy: calibration::accuracy(&avg),
                ece,
                accuracy_bootstrap,
                ece_bootstrap,
            })
        })
        .collect()
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("m,accuracy,ece,accuracy_std,ece_std\n");
    let std = |b: Option<BootstrapSummary>| b.map(|s| s.std.to_string()).unwrap_or_default();
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.m,
            p.accuracy,
            p.ece,
            std(p.accuracy_bootstrap),
            std(p.ece_bootstrap)
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ambiguity_examples() {
        assert_eq!(ambiguity(0.3, 0.3), 0.0);
        assert_eq!(ambiguity(0.0, 1.0), 1.0);
        assert!((ambiguity(0.2, 0.5) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn three_member_hand_case() {
        let v = BinaryEnsembleView::new(vec![0.2, 0.4, 0.9], 3, &[1]).unwrap();
        let d = decompose_mse(&v);
        assert!((d.avg_member_mse - 0.336667).abs() < 1e-6);
        assert!((d.avg_ambiguity - 0.086667).abs() < 1e-6);
        assert!((d.ensemble_mse - 0.25).abs() < 1e-12);
        assert!(d.residual < 1e-12);
    }

    #[test]
    fn single_member_has_no_ambiguity() {
        let v = BinaryEnsembleView::new(vec![0.3, 0.8], 1, &[0, 1]).unwrap();
        let d = decompose_mse(&v);
        assert_eq!(d.avg_ambiguity, 0.0);
        assert_eq!(d.ensemble_mse, d.avg_member_mse);
    }

    #[test]
    fn binary_ece_constant_predictors() {
        let y = [0, 1, 0, 1];
        let half = BinaryEnsembleView::new(vec![0.5; 4], 1, &y).unwrap();
        assert_eq!(binary_ece(&half, None, Partition::Binned(20)).unwrap(), 0.0);
        let nine = BinaryEnsembleView::new(vec![0.9; 4], 1, &y).unwrap();
        assert!((binary_ece(&nine, None, Partition::Binned(20)).unwrap() - 0.16).abs() < 1e-12);
        let r = empirical_ece_decomposition(&nine, Partition::Binned(20)).unwrap();
        assert_eq!(r.sharpness, 0.0);
        assert!((r.ece_h - 0.16).abs() < 1e-12);
        assert!(r.eq4_residual < 1e-12);
    }

    #[test]
    fn decomposition_without_conditionals_is_unsupported() {
        let v = BinaryEnsembleView::new(vec![0.5; 2], 1, &[0, 1]).unwrap();
        assert!(matches!(ece_decomposition_for(&v, None, 20), Err(Error::Unsupported(_))));
    }

    #[test]
    fn kappa_hand_fixture() {
        let m = CorrectnessMatrix::from_rows(&[vec![true, true], vec![true, false]]).unwrap();
        assert_eq!((m.rho(0), m.rho(1)), (2, 1));
        assert_eq!(m.p_bar(), 0.75);
        let k = interrater_agreement(&m).unwrap();
        assert!((k + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_identical_and_degenerate() {
        let row = vec![true, false, true, false, false];
        let m = CorrectnessMatrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        assert_eq!(interrater_agreement(&m), Some(1.0));
        let all = CorrectnessMatrix::from_rows(&[vec![true; 3], vec![true; 3]]).unwrap();
        assert_eq!(interrater_agreement(&all), None);
        let single = CorrectnessMatrix::from_rows(&[vec![true, false]]).unwrap();
        assert_eq!(interrater_agreement(&single), None);
    }

    #[test]
    fn level_sets_group_equal_values() {
        let cells = Partition::LevelSets.cells(&[0.3, 0.7, 0.3, 0.1]).unwrap();
        assert_eq!(cells, vec![0, 1, 0, 2]);
    }
}

//! Finite-difference verification of analytic gradients.

use super::classifier::{Classifier, Pass};
use super::loss::softmax_cross_entropy;
use crate::error::{Error, Result};
use crate::rng::{Domain, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(param tensor, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error `|a - n| / max(|a| + |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compares analytic gradients of the mean cross-entropy with central
/// differences over `samples` randomly chosen parameter entries (all entries
/// when `samples` is `None`).
///
/// A central difference is only known to within the loss roundoff,
/// `8 * machine_eps * max(|L|, 1) / epsilon`; that much disagreement is
/// discounted before the relative error is taken, so entries whose true
/// gradient is zero do not report spurious errors. Entries that still
/// disagree are retried with a step ten times smaller and the better of the
/// two differences is kept.
///
/// The loss is evaluated in train mode at a fixed step, so dropout masks are
/// frozen for the duration of the check.
pub fn gradient_check<S: Scalar, M: Classifier<S>>(
    model: &mut M,
    input: &Tensor<S>,
    labels: &[usize],
    epsilon: f64,
    samples: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let pass = Pass::train(seed, 0);
    let mut probe = model.clone();
    model.compute_gradients(input, labels, &pass)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();

    let mut positions: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(pi, g)| (0..g.len()).map(move |i| (pi, i)))
        .collect();
    if let Some(k) = samples {
        let mut rng = RngStream::derive(seed, Domain::Shuffle, &[u64::MAX]);
        rng.shuffle(&mut positions);
        positions.truncate(k);
    }
    if positions.is_empty() {
        return Err(Error::Usage("model has no parameters to check".into()));
    }

    let loss_at = |m: &M| -> Result<f64> {
        let logits = m.forward_pass(input, &pass)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0.as_f64())
    };

    let loss0 = loss_at(model)?.abs().max(1.0);
    let mut central = |pi: usize, i: usize, h: f64| -> Result<f64> {
        let original = probe.params()[pi].value.data()[i];
        probe.params_mut()[pi].value.data_mut()[i] = original + S::of(h);
        let up = loss_at(&probe)?;
        probe.params_mut()[pi].value.data_mut()[i] = original - S::of(h);
        let down = loss_at(&probe)?;
        probe.params_mut()[pi].value.data_mut()[i] = original;
        Ok((up - down) / (2.0 * h))
    };
    let discounted = |a: f64, numeric: f64, h: f64| {
        let noise = 8.0 * S::epsilon().as_f64() * loss0 / h;
        relative_error(a, numeric, 1e-10) * (1.0 - noise / (a - numeric).abs()).max(0.0)
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (pi, i) in positions {
        let a = analytic[pi][i];
        let mut numeric = central(pi, i, epsilon)?;
        let mut err = discounted(a, numeric, epsilon);
        if err > 0.0 {
            // A ReLU kink inside the step spoils one difference but not both.
            let fine = central(pi, i, epsilon / 10.0)?;
            let fine_err = discounted(a, fine, epsilon / 10.0);
            if fine_err < err {
                (numeric, err) = (fine, fine_err);
            }
        }
        report.checked += 1;
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((pi, i, a, numeric));
        }
    }
    Ok(report)
}

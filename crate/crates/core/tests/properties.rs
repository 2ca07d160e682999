use approx::assert_abs_diff_eq;
use calidrop::active::{bald_scores, entropy, max_entropy_scores};
use calidrop::calibration::{brier, ece_binned, nll};
use calidrop::diversity::{decompose_mse, interrater_agreement, BinaryEnsembleView, CorrectnessMatrix};
use calidrop::ensemble::{ensemble_average, EnsembleSource, EnsemblePredictions, PredictionSet};
use proptest::prelude::*;

fn normalize(raw: &[f64], k: usize) -> Vec<f64> {
    raw.chunks(k)
        .flat_map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(move |v| v / s).collect::<Vec<_>>()
        })
        .collect()
}

prop_compose! {
    fn ensemble()(t in 1usize..6, n in 1usize..20, k in 2usize..5)
        (raw in prop::collection::vec(0.01f64..1.0, t * n * k),
         labels in prop::collection::vec(0..k, n),
         t in Just(t), k in Just(k))
        -> EnsemblePredictions<f64> {
        EnsemblePredictions::new(normalize(&raw, k), k, labels, (0..t as u64).collect(), EnsembleSource::DeepEnsemble).unwrap()
    }
}

prop_compose! {
    fn binary_view()(t in 1usize..8, n in 1usize..40)
        (h in prop::collection::vec(0.0f64..=1.0, t * n),
         y in prop::collection::vec(0usize..2, n))
        -> BinaryEnsembleView {
        let t = h.len() / y.len();
        BinaryEnsembleView::new(h, t, &y).unwrap()
    }
}

proptest! {
    #[test]
    fn ambiguity_decomposition_is_exact(view in binary_view()) {
        let r = decompose_mse(&view);
        prop_assert!(r.residual < 1e-12);
        prop_assert!(r.avg_ambiguity >= 0.0);
        prop_assert!(r.ensemble_mse <= r.avg_member_mse + 1e-12);
    }

    #[test]
    fn bald_never_exceeds_entropy(ens in ensemble()) {
        let ent = max_entropy_scores(&ensemble_average(&ens));
        for (b, e) in bald_scores(&ens).iter().zip(&ent) {
            prop_assert!(*b >= -1e-12);
            prop_assert!(*b <= e + 1e-12);
        }
    }

    #[test]
    fn averaging_never_hurts_nll_or_brier(ens in ensemble()) {
        let avg = ensemble_average(&ens);
        let t = ens.num_members() as f64;
        let member_nll: f64 = (0..ens.num_members()).map(|m| nll(&ens.member_set(m))).sum::<f64>() / t;
        let member_brier: f64 = (0..ens.num_members()).map(|m| brier(&ens.member_set(m))).sum::<f64>() / t;
        prop_assert!(nll(&avg) <= member_nll + 1e-12);
        prop_assert!(brier(&avg) <= member_brier + 1e-12);
    }

    #[test]
    fn ece_ignores_sample_order(ens in ensemble(), rot in 0usize..20) {
        let avg = ensemble_average(&ens);
        let n = avg.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let (a, _) = ece_binned(&avg, 20).unwrap();
        let (b, _) = ece_binned(&avg.subset(&perm), 20).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn agreement_bounded_and_order_free(
        rows in (2usize..6, 1usize..30).prop_flat_map(|(t, n)| prop::collection::vec(prop::collection::vec(any::<bool>(), n), t)),
        shift in 0usize..6,
    ) {
        let m = CorrectnessMatrix::from_rows(&rows).unwrap();
        let Some(kappa) = interrater_agreement(&m) else { return Ok(()); };
        prop_assert!(kappa <= 1.0 + 1e-12);
        let mut members = rows.clone();
        members.rotate_left(shift % rows.len());
        let n = rows[0].len();
        let samples: Vec<Vec<bool>> = members.iter().map(|r| (0..n).map(|k| r[(k + shift) % n]).collect()).collect();
        let permuted = interrater_agreement(&CorrectnessMatrix::from_rows(&samples).unwrap()).unwrap();
        assert_abs_diff_eq!(kappa, permuted, epsilon = 1e-12);
    }

    #[test]
    fn entropy_bounded_by_log_k(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 0.0);
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let h = entropy(&p);
        prop_assert!(h >= -1e-15 && h <= (p.len() as f64).ln() + 1e-12);
    }
}

#[test]
fn one_hot_predictions_are_perfectly_calibrated() {
    let preds = PredictionSet::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1]).unwrap();
    assert_abs_diff_eq!(ece_binned(&preds, 20).unwrap().0, 0.0);
    assert_abs_diff_eq!(brier(&preds), 0.0);
}

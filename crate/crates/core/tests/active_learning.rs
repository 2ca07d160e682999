use calidrop::active::{al_table_csv, run_al_loop, ALConfig, AcquisitionFunction};
use calidrop::data::{generate_synthetic_images, ImageDataset, SyntheticImageSpec};
use calidrop::nn::{Mlp, MlpConfig};
use calidrop::training::TrainConfig;
use calidrop::Error;

fn toy(n: usize, seed: u64) -> ImageDataset<f64> {
    generate_synthetic_images(&SyntheticImageSpec {
        n,
        num_classes: 3,
        shape: [1, 2, 3],
        noise: 0.8,
        max_blend: 0.4,
        ambiguous_fraction: 0.2,
        task_seed: 5,
        seed,
    })
    .unwrap()
}

fn config(acq: AcquisitionFunction, rounds: usize) -> ALConfig {
    ALConfig {
        initial_labeled: 12,
        acquire_per_round: 7,
        rounds,
        repeats: 2,
        mc_samples: 4,
        ..ALConfig::new(acq)
    }
}

fn train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        lr_drop_epochs: vec![],
        augment: false,
        ..TrainConfig::default()
    }
}

fn build(d: &calidrop::dropout::DropoutSpec, seed: u64) -> calidrop::Result<Mlp<f64>> {
    Mlp::new(
        MlpConfig {
            input_dim: 6,
            hidden: vec![8],
            num_classes: 3,
            dropout_rate: d.rate,
        },
        seed,
    )
}

#[test]
fn labeled_counts_follow_schedule() {
    let (pool, test) = (toy(80, 1), toy(40, 2));
    for acq in AcquisitionFunction::ALL {
        let r = run_al_loop(&config(acq, 3), &pool, &test, &train(), build, 9).unwrap();
        let counts: Vec<usize> = r.rows.iter().map(|row| row.labeled_count).collect();
        assert_eq!(counts, vec![12, 19, 26, 33]);
        assert_eq!(r.rows[0].mean_rel_improvement, 0.0);
        assert!(r.repeats.iter().all(|x| x.error.is_none() && x.accuracies.len() == 4));
    }
}

#[test]
fn zero_rounds_gives_single_row() {
    let r = run_al_loop(&config(AcquisitionFunction::Bald, 0), &toy(30, 1), &toy(10, 2), &train(), build, 1).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(al_table_csv(&r.rows).lines().count(), 2);
}

#[test]
fn reruns_are_identical() {
    let (pool, test) = (toy(60, 3), toy(30, 4));
    let a = run_al_loop(&config(AcquisitionFunction::VariationRatio, 2), &pool, &test, &train(), build, 4).unwrap();
    let b = run_al_loop(&config(AcquisitionFunction::VariationRatio, 2), &pool, &test, &train(), build, 4).unwrap();
    assert_eq!(al_table_csv(&a.rows), al_table_csv(&b.rows));
}

#[test]
fn oversized_schedule_rejected() {
    let err = run_al_loop(&config(AcquisitionFunction::Random, 10), &toy(50, 1), &toy(10, 2), &train(), build, 1);
    assert!(matches!(err, Err(Error::Config(_))));
}

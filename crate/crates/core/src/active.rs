//! Pool-based active learning with MC-dropout acquisition functions.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration;
use crate::data::ImageDataset;
use crate::dropout::DropoutSpec;
use crate::ensemble::{ensemble_average, mc_predict, EnsemblePredictions, PredictionSet};
use crate::error::{config_err, Error, Result};
use crate::nn::classifier::Classifier;
use crate::rng::{child_seed, Domain, RngStream};
use crate::scalar::Scalar;
use crate::training::{fit, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionFunction {
    MaxEntropy,
    Bald,
    VariationRatio,
    /// Uniform scores; the baseline.
    Random,
}

impl AcquisitionFunction {
    pub const ALL: [AcquisitionFunction; 4] = [
        AcquisitionFunction::MaxEntropy,
        AcquisitionFunction::Bald,
        AcquisitionFunction::VariationRatio,
        AcquisitionFunction::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AcquisitionFunction::MaxEntropy => "max_entropy",
            AcquisitionFunction::Bald => "bald",
            AcquisitionFunction::VariationRatio => "variation_ratio",
            AcquisitionFunction::Random => "random",
        }
    }
}

impl fmt::Display for AcquisitionFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcquisitionFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown acquisition function {s:?}")))
    }
}

/// Natural-log entropy with `0 log 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn row_f64<S: Scalar>(row: &[S]) -> Vec<f64> {
    row.iter().map(|p| p.as_f64()).collect()
}

pub fn max_entropy_scores<S: Scalar>(preds: &PredictionSet<S>) -> Vec<f64> {
    (0..preds.len()).map(|n| entropy(&row_f64(preds.row(n)))).collect()
}

/// `H[mean_t p_t] - mean_t H[p_t]`; zeros (with a warning) for one member.
pub fn bald_scores<S: Scalar>(ens: &EnsemblePredictions<S>) -> Vec<f64> {
    let t = ens.num_members();
    let n = ens.num_samples();
    if t < 2 {
        warn!("BALD with a single member is identically zero");
        return vec![0.0; n];
    }
    let k = ens.num_classes();
    (0..n)
        .map(|s| {
            let mut mean = vec![0.0; k];
            let mut member_entropy = 0.0;
            for m in 0..t {
                let row = row_f64(ens.row(m, s));
                member_entropy += entropy(&row);
                for (a, p) in mean.iter_mut().zip(&row) {
                    *a += p;
                }
            }
            mean.iter_mut().for_each(|a| *a /= t as f64);
            entropy(&mean) - member_entropy / t as f64
        })
        .collect()
}

/// `1 - max_c p_c`.
pub fn variation_ratio_scores<S: Scalar>(preds: &PredictionSet<S>) -> Vec<f64> {
    (0..preds.len()).map(|n| 1.0 - preds.top(n).1.as_f64()).collect()
}

/// Scores for each sample of the MC ensemble; `Random` draws from the
/// acquisition stream keyed by `(seed, round)`.
pub fn acquisition_scores<S: Scalar>(
    fun: AcquisitionFunction,
    ens: &EnsemblePredictions<S>,
    seed: u64,
    round: usize,
) -> Vec<f64> {
    match fun {
        AcquisitionFunction::MaxEntropy => max_entropy_scores(&ensemble_average(ens)),
        AcquisitionFunction::Bald => bald_scores(ens),
        AcquisitionFunction::VariationRatio => variation_ratio_scores(&ensemble_average(ens)),
        AcquisitionFunction::Random => {
            let mut rng = RngStream::derive(seed, Domain::Acquire, &[round as u64]);
            (0..ens.num_samples()).map(|_| rng.uniform()).collect()
        }
    }
}

/// Labeled and pool index sets into one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolState {
    pub labeled: Vec<usize>,
    pub pool: Vec<usize>,
    pub round: usize,
}

impl PoolState {
    pub fn new(labeled: Vec<usize>, pool: Vec<usize>) -> Result<Self> {
        let mut all: Vec<usize> = labeled.iter().chain(&pool).copied().collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return config_err("labeled and pool indices overlap or repeat");
        }
        Ok(Self { labeled, pool, round: 0 })
    }
}

/// Moves the `k` highest-scoring pool entries (`scores` aligned with
/// `state.pool`) to the labeled set; ties go to the lower dataset index.
pub fn acquire(state: &PoolState, scores: &[f64], k: usize) -> Result<PoolState> {
    if scores.len() != state.pool.len() {
        return Err(Error::Shape(format!("{} scores for a pool of {}", scores.len(), state.pool.len())));
    }
    if k > state.pool.len() {
        return config_err(format!("cannot acquire {k} from a pool of {}", state.pool.len()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite acquisition score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(state.pool[a].cmp(&state.pool[b])));
    let chosen: Vec<usize> = order[..k].iter().map(|&i| state.pool[i]).collect();
    let mut taken = vec![false; scores.len()];
    for &i in &order[..k] {
        taken[i] = true;
    }
    let pool = state.pool.iter().zip(&taken).filter(|(_, &t)| !t).map(|(&i, _)| i).collect();
    let mut labeled = state.labeled.clone();
    labeled.extend(chosen);
    Ok(PoolState {
        labeled,
        pool,
        round: state.round + 1,
    })
}

fn default_initial() -> usize {
    500
}
fn default_acquire() -> usize {
    250
}
fn default_rounds() -> usize {
    4
}
fn default_repeats() -> usize {
    3
}
fn default_t() -> usize {
    30
}
fn default_al_dropout() -> DropoutSpec {
    DropoutSpec::new(crate::dropout::DropoutVariant::Element, 0.1).expect("valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ALConfig {
    #[serde(default = "default_initial")]
    pub initial_labeled: usize,
    #[serde(default = "default_acquire")]
    pub acquire_per_round: usize,
    /// Number of acquisitions; the table has `rounds + 1` rows.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_t")]
    pub mc_samples: usize,
    pub acquisition: AcquisitionFunction,
    #[serde(default = "default_al_dropout")]
    pub dropout: DropoutSpec,
}

impl ALConfig {
    pub fn new(acquisition: AcquisitionFunction) -> Self {
        Self {
            initial_labeled: default_initial(),
            acquire_per_round: default_acquire(),
            rounds: default_rounds(),
            repeats: default_repeats(),
            mc_samples: default_t(),
            acquisition,
            dropout: default_al_dropout(),
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.initial_labeled == 0 || self.repeats == 0 || self.mc_samples == 0 {
            return config_err("initial_labeled, repeats and mc_samples must be positive");
        }
        if self.rounds > 0 && self.acquire_per_round == 0 {
            return config_err("acquire_per_round must be positive");
        }
        let needed = self.initial_labeled + self.rounds * self.acquire_per_round;
        if needed > pool_size {
            return config_err(format!(
                "{} initial + {} x {} acquisitions exceeds the pool of {pool_size}",
                self.initial_labeled, self.rounds, self.acquire_per_round
            ));
        }
        self.dropout.validate()
    }

    pub fn labeled_count(&self, round: usize) -> usize {
        self.initial_labeled + round * self.acquire_per_round
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatOutcome {
    pub seed: u64,
    /// Test accuracy after each round's retraining; empty if the repeat failed.
    pub accuracies: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ALRow {
    pub round: usize,
    pub labeled_count: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Mean over repeats of `acc_r / acc_0 - 1`.
    pub mean_rel_improvement: f64,
    pub std_rel_improvement: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ALResult {
    pub acquisition: AcquisitionFunction,
    pub rows: Vec<ALRow>,
    pub repeats: Vec<RepeatOutcome>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn al_table_csv(rows: &[ALRow]) -> String {
    let mut out = String::from("round,labeled_count,mean_acc,std_acc,mean_rel_improvement,std_rel_improvement\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round, r.labeled_count, r.mean_acc, r.std_acc, r.mean_rel_improvement, r.std_rel_improvement
        )
        .expect("string write");
    }
    out
}

fn run_repeat<S, M, B>(
    cfg: &ALConfig,
    pool_data: &ImageDataset<S>,
    test: &ImageDataset<S>,
    train_cfg: &TrainConfig,
    build: &B,
    seed: u64,
) -> Result<Vec<f64>>
where
    S: Scalar,
    M: Classifier<S>,
    B: Fn(&DropoutSpec, u64) -> Result<M> + Sync,
{
    let mut order: Vec<usize> = (0..pool_data.len()).collect();
    RngStream::derive(seed, Domain::Acquire, &[u64::MAX]).shuffle(&mut order);
    let pool = order.split_off(cfg.initial_labeled);
    let mut state = PoolState::new(order, pool)?;
    let mut accuracies = Vec::with_capacity(cfg.rounds + 1);
    let batch = train_cfg.batch_size.max(256);
    for round in 0..=cfg.rounds {
        let net = build(&cfg.dropout, child_seed(seed, 2 * round as u64))?;
        let tcfg = TrainConfig {
            seed: child_seed(seed, 2 * round as u64 + 1),
            ..train_cfg.clone()
        };
        let empty = ImageDataset::empty(pool_data.example_shape(), pool_data.num_classes);
        let fitted = fit(net, &pool_data.subset(&state.labeled), &empty, &tcfg)?;
        let mc_seed = child_seed(seed, 1 << 32 | round as u64);
        let test_preds = ensemble_average(&mc_predict(&fitted.model, test, cfg.mc_samples, mc_seed, batch)?);
        let acc = calibration::accuracy(&test_preds);
        info!(
            "{} seed {seed} round {round}: {} labeled, test accuracy {acc:.4}",
            cfg.acquisition,
            state.labeled.len()
        );
        accuracies.push(acc);
        if round == cfg.rounds {
            break;
        }
        let pool_set = pool_data.subset(&state.pool);
        let scores = if cfg.acquisition == AcquisitionFunction::Random {
            let mut rng = RngStream::derive(seed, Domain::Acquire, &[round as u64]);
            (0..pool_set.len()).map(|_| rng.uniform()).collect()
        } else {
            let ens = mc_predict(&fitted.model, &pool_set, cfg.mc_samples, mc_seed ^ 1, batch)?;
            acquisition_scores(cfg.acquisition, &ens, seed, round)
        };
        state = acquire(&state, &scores, cfg.acquire_per_round)?;
        debug_assert_eq!(state.labeled.len(), cfg.labeled_count(round + 1));
    }
    Ok(accuracies)
}

/// Runs `repeats` independent active-learning experiments. Every round
/// retrains a fresh network (`build(dropout, seed)`) on the labeled set for
/// the full schedule without validation, records MC-averaged test accuracy,
/// then scores the pool and acquires. A failed repeat is recorded and left
/// out of the mean curves.
pub fn run_al_loop<S, M, B>(
    cfg: &ALConfig,
    pool_data: &ImageDataset<S>,
    test: &ImageDataset<S>,
    train_cfg: &TrainConfig,
    build: B,
    seed: u64,
) -> Result<ALResult>
where
    S: Scalar,
    M: Classifier<S>,
    B: Fn(&DropoutSpec, u64) -> Result<M> + Sync,
{
    cfg.validate(pool_data.len())?;
    if test.is_empty() {
        return config_err("active learning needs a non-empty test split");
    }
    let repeats: Vec<RepeatOutcome> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let rseed = child_seed(seed, r as u64);
            match run_repeat(cfg, pool_data, test, train_cfg, &build, rseed) {
                Ok(accuracies) => RepeatOutcome {
                    seed: rseed,
                    accuracies,
                    error: None,
                },
                Err(e) => {
                    warn!("{} repeat {r} failed: {e}", cfg.acquisition);
                    RepeatOutcome {
                        seed: rseed,
                        accuracies: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let ok: Vec<&RepeatOutcome> = repeats.iter().filter(|r| r.error.is_none()).collect();
    if ok.is_empty() {
        return Err(Error::Numeric(format!(
            "every repeat failed; first error: {}",
            repeats[0].error.as_deref().unwrap_or("unknown")
        )));
    }
    let rows = (0..=cfg.rounds)
        .map(|round| {
            let accs: Vec<f64> = ok.iter().map(|r| r.accuracies[round]).collect();
            let rels: Vec<f64> = ok
                .iter()
                .map(|r| {
                    let base = r.accuracies[0];
                    if base > 0.0 {
                        r.accuracies[round] / base - 1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            let (mean_rel_improvement, std_rel_improvement) = mean_std(&rels);
            ALRow {
                round,
                labeled_count: cfg.labeled_count(round),
                mean_acc,
                std_acc,
                mean_rel_improvement,
                std_rel_improvement,
            }
        })
        .collect();
    Ok(ALResult {
        acquisition: cfg.acquisition,
        rows,
        repeats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(probs: Vec<f64>, k: usize) -> PredictionSet<f64> {
        let n = probs.len() / k;
        PredictionSet::new(probs, k, vec![0; n]).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.1; 10]) - 10f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.7, 0.3]) - 0.610864).abs() < 1e-6);
    }

    #[test]
    fn bald_examples() {
        let ens = EnsemblePredictions::new(
            vec![0.9, 0.1, 0.5, 0.5],
            2,
            vec![0],
            vec![0, 1],
            crate::ensemble::EnsembleSource::DeepEnsemble,
        )
        .unwrap();
        assert!((bald_scores(&ens)[0] - 0.101749).abs() < 1e-6);
        let same = EnsemblePredictions::new(
            vec![0.3, 0.7, 0.3, 0.7],
            2,
            vec![0],
            vec![0, 1],
            crate::ensemble::EnsembleSource::DeepEnsemble,
        )
        .unwrap();
        assert!(bald_scores(&same)[0].abs() < 1e-15);
    }

    #[test]
    fn variation_ratio_examples() {
        assert_eq!(variation_ratio_scores(&set(vec![0.0, 1.0], 2)), vec![0.0]);
        assert!((variation_ratio_scores(&set(vec![0.25; 4], 4))[0] - 0.75).abs() < 1e-15);
        assert!((variation_ratio_scores(&set(vec![0.5, 0.3, 0.2], 3))[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn acquire_examples() {
        let s = PoolState::new(vec![], vec![10, 11, 12]).unwrap();
        let a = acquire(&s, &[3.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(a.labeled, vec![10, 12]);
        assert_eq!(a.pool, vec![11]);
        let tie = acquire(&PoolState::new(vec![0], vec![7, 3, 5, 1]).unwrap(), &[1.0; 4], 2).unwrap();
        assert_eq!(tie.labeled, vec![0, 1, 3]);
        let all = acquire(&s, &[0.0; 3], 3).unwrap();
        assert!(all.pool.is_empty());
        assert!(matches!(acquire(&s, &[0.0; 3], 4), Err(Error::Config(_))));
    }

    #[test]
    fn overlapping_state_rejected() {
        assert!(PoolState::new(vec![1, 2], vec![2, 3]).is_err());
    }

    #[test]
    fn names_roundtrip() {
        for a in AcquisitionFunction::ALL {
            assert_eq!(a.name().parse::<AcquisitionFunction>().unwrap(), a);
        }
    }
}

//! Experiment commands behind the `calidrop` binary. Every command writes
//! its tables atomically into an output directory together with the resolved
//! configuration it ran with.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use calidrop::active::{al_table_csv, run_al_loop, ALConfig};
use calidrop::calibration::{self, reliability_csv, reliability_data};
use calidrop::checkpoint::{checkpoint_header, decode_checkpoint_into, save_checkpoint};
use calidrop::data::{
    generate_synthetic_images, load_cifar10_dir, per_pixel_mean_subtract, split, subsample, ImageDataset,
    Splits, SyntheticImageSpec,
};
use calidrop::diversity::{self, decompose_mse, interrater_agreement, BinaryEnsembleView, CorrectnessMatrix};
use calidrop::dropout::DropoutSpec;
use calidrop::ensemble::{deep_ensemble_predict, ensemble_average, mc_predict, read_ensemble, write_ensemble};
use calidrop::io::write_atomic;
use calidrop::resnet::ResNet;
use calidrop::rng::child_seed;
use calidrop::training::{curves_csv, fit, grid_search_dropout_rate, predict_deterministic, GridEval};
use calidrop::Scalar;
use log::info;
use thiserror::Error;

pub use config::{Precision, Profile, RunConfig};

use config::DataSource;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] calidrop::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialization error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("usage error: {0}")]
    Usage(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for data and IO, 4 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        use calidrop::Error as E;
        match self {
            CliError::Parse(_) | CliError::Serialize(_) | CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Usage(_) | E::Unsupported(_) => 2,
                E::Format(_) | E::Io(_) => 3,
                E::Numeric(_) => 4,
                E::Shape(_) => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write(out: &Path, name: &str, contents: &str) -> CliResult<()> {
    write_atomic(out.join(name), contents.as_bytes())?;
    Ok(())
}

fn prepare_out(out: &Path, cfg: Option<&RunConfig>) -> CliResult<()> {
    fs::create_dir_all(out).map_err(calidrop::Error::from)?;
    if let Some(cfg) = cfg {
        write(out, RESOLVED_CONFIG, &cfg.to_toml()?)?;
    }
    Ok(())
}

/// Train / validation / test splits as configured, mean-subtracted if asked.
pub fn load_splits<S: Scalar>(cfg: &RunConfig) -> CliResult<Splits<S>> {
    let d = &cfg.dataset;
    let split_seed = child_seed(cfg.seed, 100);
    let (pool, test) = match d.source {
        DataSource::Cifar10 => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| CliError::Usage("dataset.path is required for cifar10".into()))?;
            let raw = load_cifar10_dir::<S>(path)?;
            let test = if d.test_size < raw.test.len() {
                subsample(&raw.test, d.test_size, split_seed ^ 1, d.stratified)?
            } else {
                raw.test
            };
            (raw.train, test)
        }
        DataSource::Synthetic => {
            let s = &d.synthetic;
            let spec = |n, seed| SyntheticImageSpec {
                n,
                num_classes: s.num_classes,
                shape: s.shape,
                noise: s.noise,
                max_blend: s.max_blend,
                ambiguous_fraction: s.ambiguous_fraction,
                task_seed: s.task_seed,
                seed,
            };
            (
                generate_synthetic_images::<S>(&spec(d.train_size + d.val_size, child_seed(cfg.seed, 101)))?,
                generate_synthetic_images::<S>(&spec(d.test_size, child_seed(cfg.seed, 102)))?,
            )
        }
    };
    let mut parts = split(&pool, &[d.train_size, d.val_size], split_seed, d.stratified)?;
    let val = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    let mut splits = Splits {
        train,
        val,
        test,
        mean_image: None,
    };
    if d.mean_subtract {
        per_pixel_mean_subtract(&mut splits)?;
    }
    info!(
        "data: {} train, {} val, {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(splits)
}

fn build<S: Scalar>(cfg: &RunConfig, dropout: DropoutSpec, data: &ImageDataset<S>, seed: u64) -> CliResult<ResNet<S>> {
    Ok(ResNet::new(cfg.resnet(dropout, data.example_shape(), data.num_classes), seed)?)
}

/// Trains one network; writes `model.ckpt`, `curves.csv` and `train_report.txt`.
pub fn cmd_train<S: Scalar>(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    prepare_out(out, Some(cfg))?;
    let splits = load_splits::<S>(cfg)?;
    let net = build(cfg, cfg.dropout, &splits.train, child_seed(cfg.seed, 0))?;
    let hash = net.config().hash();
    let fitted = fit(net, &splits.train, &splits.val, &cfg.train)?;
    save_checkpoint(&fitted.model, out.join("model.ckpt"))?;
    write(out, "curves.csv", &curves_csv(&fitted.curves))?;
    let test = predict_deterministic(&fitted.model, &splits.test, cfg.eval.batch_size)?;
    let mut report = String::new();
    writeln!(report, "variant = {}", cfg.dropout.variant).expect("string write");
    writeln!(report, "rate = {}", cfg.dropout.rate).expect("string write");
    writeln!(report, "config_hash = {hash:016x}").expect("string write");
    let selected = fitted.selected_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into());
    writeln!(report, "selected_epoch = {selected}").expect("string write");
    writeln!(report, "test_accuracy_deterministic = {}", calibration::accuracy(&test)).expect("string write");
    write(out, "train_report.txt", &report)?;
    info!("trained {} epochs, selected epoch {selected}", fitted.curves.len());
    Ok(())
}

/// MC evaluation of one checkpoint, or a deep ensemble of several. Writes
/// `report.txt`, `reliability.csv` and `predictions.cdep`.
pub fn cmd_mc_eval<S: Scalar>(cfg: &RunConfig, checkpoints: &[PathBuf], out: &Path) -> CliResult<()> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage("mc-eval needs at least one --checkpoint".into()));
    }
    prepare_out(out, Some(cfg))?;
    let splits = load_splits::<S>(cfg)?;
    let mut nets = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let bytes = fs::read(path).map_err(calidrop::Error::from)?;
        let header = checkpoint_header(&bytes)?;
        let mut net = build(cfg, cfg.dropout, &splits.test, header.seed)?;
        decode_checkpoint_into(&mut net, &bytes)?;
        nets.push(net);
    }
    let batch = cfg.eval.batch_size;
    let ens = if nets.len() == 1 {
        mc_predict(&nets[0], &splits.test, cfg.eval.mc_samples, child_seed(cfg.seed, 1), batch)?
    } else {
        deep_ensemble_predict(&nets, &splits.test, batch)?
    };
    let avg = ensemble_average(&ens);
    let report = calibration::evaluate(&avg, cfg.eval.bins, cfg.eval.bootstrap_reps, child_seed(cfg.seed, 2))?;
    let mut text = String::new();
    writeln!(text, "source = {}", ens.source()).expect("string write");
    writeln!(text, "members = {}", ens.num_members()).expect("string write");
    text.push_str(&report.to_text());
    write(out, "report.txt", &text)?;
    write(out, "reliability.csv", &reliability_csv(&reliability_data(&report.bins)))?;
    write_ensemble(&ens, out.join("predictions.cdep"))?;
    info!("accuracy {:.4}, nll {:.4}, ece {:.4}", report.accuracy, report.nll, report.ece);
    Ok(())
}

/// Diversity analysis of an ensemble interchange file. Writes
/// `diversity_report.txt`, `decomposition.csv` (one-vs-rest per class) and
/// `size_curves.csv`.
pub fn cmd_diversity(ensemble: &Path, bins: usize, reps: usize, seed: u64, out: &Path) -> CliResult<()> {
    prepare_out(out, None)?;
    let ens = read_ensemble::<f64>(ensemble)?;
    let mut table = String::from("class,ensemble_mse,avg_member_mse,avg_ambiguity,residual\n");
    let (mut mse, mut member_mse, mut amb, mut residual) = (0.0, 0.0, 0.0, 0.0f64);
    for c in 0..ens.num_classes() {
        let r = decompose_mse(&BinaryEnsembleView::one_vs_rest(&ens, c)?);
        writeln!(
            table,
            "{c},{},{},{},{}",
            r.ensemble_mse, r.avg_member_mse, r.avg_ambiguity, r.residual
        )
        .expect("string write");
        mse += r.ensemble_mse;
        member_mse += r.avg_member_mse;
        amb += r.avg_ambiguity;
        residual = residual.max(r.residual);
    }
    let kappa = interrater_agreement(&CorrectnessMatrix::from_ensemble(&ens));
    let curves = diversity::ensemble_size_curves(&ens, ens.num_members(), bins, reps, seed)?;
    let mut text = String::new();
    writeln!(text, "source = {}", ens.source()).expect("string write");
    writeln!(text, "members = {}", ens.num_members()).expect("string write");
    writeln!(text, "samples = {}", ens.num_samples()).expect("string write");
    let kappa_text = kappa.map(|k| k.to_string()).unwrap_or_else(|| "undefined".into());
    writeln!(text, "interrater_agreement = {kappa_text}").expect("string write");
    writeln!(text, "sum_ensemble_mse = {mse}").expect("string write");
    writeln!(text, "sum_avg_member_mse = {member_mse}").expect("string write");
    writeln!(text, "sum_avg_ambiguity = {amb}").expect("string write");
    writeln!(text, "max_residual = {residual}").expect("string write");
    write(out, "diversity_report.txt", &text)?;
    write(out, "decomposition.csv", &table)?;
    write(out, "size_curves.csv", &diversity::curves_csv(&curves))?;
    info!("interrater agreement {kappa_text}");
    Ok(())
}

/// Dropout-rate grid per variant and repeat; failed cells are recorded in
/// the table and the sweep continues. Writes `sweep.csv` and `sweep_best.csv`.
pub fn cmd_sweep<S: Scalar>(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    prepare_out(out, Some(cfg))?;
    let splits = load_splits::<S>(cfg)?;
    let mut table = String::from("variant,repeat,rate,nll,accuracy,error\n");
    let mut best = String::from("variant,repeat,best_rate\n");
    let eval = GridEval {
        mc_samples: cfg.eval.mc_samples,
        mc_seed: child_seed(cfg.seed, 1),
        batch_size: cfg.eval.batch_size,
    };
    for &variant in &cfg.sweep.variants {
        for repeat in 0..cfg.sweep.repeats {
            let seed = child_seed(cfg.seed, repeat as u64);
            let train_cfg = calidrop::training::TrainConfig {
                seed: child_seed(cfg.train.seed, repeat as u64),
                ..cfg.train.clone()
            };
            let builder = |rate: f64| -> calidrop::Result<ResNet<S>> {
                let spec = DropoutSpec::new(variant, rate)?.with_block_size(cfg.dropout.block_size)?;
                ResNet::new(cfg.resnet(spec, splits.train.example_shape(), splits.train.num_classes), seed)
            };
            let result = grid_search_dropout_rate(
                builder,
                &cfg.sweep.rates,
                &splits.train,
                &splits.val,
                &splits.test,
                &train_cfg,
                eval,
            )?;
            for row in &result.rows {
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let err = row.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
                writeln!(
                    table,
                    "{variant},{repeat},{},{},{},{err}",
                    row.rate,
                    opt(row.nll),
                    opt(row.accuracy)
                )
                .expect("string write");
            }
            let b = result.best_rate.map(|r| r.to_string()).unwrap_or_default();
            writeln!(best, "{variant},{repeat},{b}").expect("string write");
        }
    }
    write(out, "sweep.csv", &table)?;
    write(out, "sweep_best.csv", &best)?;
    Ok(())
}

/// Active learning for every configured acquisition function. Writes
/// `al_<name>.csv` per function and `al_summary.csv` over all of them.
pub fn cmd_active_learn<S: Scalar>(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    prepare_out(out, Some(cfg))?;
    if cfg.al.acquisitions.is_empty() {
        return Err(CliError::Usage("al.acquisitions is empty".into()));
    }
    let splits = load_splits::<S>(cfg)?;
    let pool = splits.train.concat(&splits.val)?;
    let mut summary = String::from("acquisition,round,labeled_count,mean_acc,std_acc,mean_rel_improvement\n");
    for &acq in &cfg.al.acquisitions {
        let al = ALConfig {
            initial_labeled: cfg.al.initial_labeled,
            acquire_per_round: cfg.al.acquire_per_round,
            rounds: cfg.al.rounds,
            repeats: cfg.al.repeats,
            mc_samples: cfg.al.mc_samples,
            acquisition: acq,
            dropout: cfg.dropout,
        };
        let builder = |d: &DropoutSpec, seed: u64| -> calidrop::Result<ResNet<S>> {
            ResNet::new(cfg.resnet(*d, pool.example_shape(), pool.num_classes), seed)
        };
        let result = run_al_loop(&al, &pool, &splits.test, &cfg.train, builder, cfg.seed)?;
        for r in result.repeats.iter().filter(|r| r.error.is_some()) {
            log::warn!("{acq} repeat with seed {} failed: {}", r.seed, r.error.as_deref().unwrap_or(""));
        }
        write(out, &format!("al_{acq}.csv"), &al_table_csv(&result.rows))?;
        for r in &result.rows {
            writeln!(
                summary,
                "{acq},{},{},{},{},{}",
                r.round, r.labeled_count, r.mean_acc, r.std_acc, r.mean_rel_improvement
            )
            .expect("string write");
        }
    }
    write(out, "al_summary.csv", &summary)?;
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use calidrop_cli::{
    cmd_active_learn, cmd_diversity, cmd_mc_eval, cmd_sweep, cmd_train, CliError, CliResult, Precision, Profile,
    RunConfig,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calidrop", version, about = "Structured-dropout MC uncertainty experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes a checkpoint and training curves.
    Train(Common),
    /// MC-dropout evaluation of a checkpoint, or a deep ensemble of several.
    McEval {
        #[command(flatten)]
        common: Common,
        /// Repeat for a deep ensemble.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Error-ambiguity decomposition, interrater agreement and ensemble-size curves.
    Diversity {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long, default_value_t = calidrop::calibration::DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = 200)]
        bootstrap_reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Dropout-rate grid search per variant.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rates replacing `sweep.rates`.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Pool-based active learning for each configured acquisition function.
    ActiveLearn(Common),
}

fn resolve(c: &Common) -> CliResult<RunConfig> {
    let text = match &c.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(calidrop::Error::from)?),
        None => None,
    };
    let cfg = RunConfig::resolve(text.as_deref(), c.profile, c.seed)?;
    log::info!("resolved config:\n{}", cfg.to_toml()?);
    Ok(cfg)
}

macro_rules! dispatch {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn set_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("CALIDROP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Usage(format!("CALIDROP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    set_threads()?;
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            dispatch!(cfg, cmd_train(&cfg, &c.out))
        }
        Command::McEval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            dispatch!(cfg, cmd_mc_eval(&cfg, &checkpoint, &common.out))
        }
        Command::Diversity {
            ensemble,
            bins,
            bootstrap_reps,
            seed,
            out,
        } => cmd_diversity(&ensemble, bins, bootstrap_reps, seed, &out),
        Command::Sweep { common, rates } => {
            let mut cfg = resolve(&common)?;
            if let Some(r) = rates {
                cfg.sweep.rates = r;
            }
            dispatch!(cfg, cmd_sweep(&cfg, &common.out))
        }
        Command::ActiveLearn(c) => {
            let cfg = resolve(&c)?;
            dispatch!(cfg, cmd_active_learn(&cfg, &c.out))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

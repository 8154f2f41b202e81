mod attr;
mod config;
mod output;
mod rec;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use modabric::recsys::Mode;

/// Exit status 2: bad flags, bad configuration or missing inputs.
/// Exit status 1: anything that fails while running.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] modabric::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(modabric::Error::Config(_) | modabric::Error::Unknown { .. }) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "modabric", version, about = "Product attribute classifier and hybrid recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a run configuration.
#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set rec.k=32`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; replaces `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<config::RunConfig> {
        config::RunConfig::resolve(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalogue, taxonomy, interaction log and item features.
    SynthGen {
        /// TOML generator spec; defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the multi-task attribute model.
    AttrTrain {
        #[arg(long)]
        catalogue: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-attribute metrics of a trained model as CSV.
    AttrEval {
        /// Directory written by attr-train.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        catalogue: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["test", "train"], default_value = "test")]
        split: String,
    },
    /// Train the full model and one model per dropped input group.
    AttrAblate {
        #[arg(long)]
        catalogue: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Predict every applicable attribute for each catalogue product (JSONL).
    AttrPredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        catalogue: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one recommender variant.
    RecTrain {
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare popularity, cf, content and hybrid over several seeds.
    RecEval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Also report metrics restricted to items unseen in training.
        #[arg(long)]
        cold_subset: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Nearest items by cosine similarity, per model and seed item.
    RecSimilar {
        /// Directories written by rec-train. Repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        /// Seed product ids. Repeatable.
        #[arg(long = "item", required = true)]
        items: Vec<String>,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-N recommendations for every customer in an interaction log.
    RecRecommend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Keep items the customer already interacted with.
        #[arg(long)]
        include_seen: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: modabric::Error| e.to_string())
}

fn set_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("MODABRIC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("MODABRIC_THREADS must be a positive integer, got {:?}", v)))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    set_threads()?;
    match cli.command {
        Command::SynthGen { spec, out, seed } => synth::synth_gen(spec.as_deref(), &out, seed),
        Command::AttrTrain {
            catalogue,
            taxonomy,
            out,
            config,
        } => attr::train(&catalogue, &taxonomy, &out, &config.resolve()?),
        Command::AttrEval {
            model,
            catalogue,
            taxonomy,
            out,
            split,
        } => attr::eval(&model, &catalogue, &taxonomy, &out, &split),
        Command::AttrAblate {
            catalogue,
            taxonomy,
            out,
            config,
        } => attr::ablate(&catalogue, &taxonomy, &out, &config.resolve()?),
        Command::AttrPredict { model, catalogue, out } => attr::predict(&model, &catalogue, &out),
        Command::RecTrain {
            mode,
            features,
            interactions,
            out,
            config,
        } => rec::train(mode, &features, &interactions, &out, &config.resolve()?),
        Command::RecEval {
            features,
            interactions,
            out,
            runs,
            cold_subset,
            config,
        } => rec::eval(&features, &interactions, &out, runs, cold_subset, &config.resolve()?),
        Command::RecSimilar {
            models,
            features,
            items,
            n,
            out,
        } => rec::similar(&models, &features, &items, n, &out),
        Command::RecRecommend {
            model,
            features,
            interactions,
            n,
            include_seen,
            out,
        } => rec::recommend(&model, &features, &interactions, n, include_seen, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{}", e);
            ExitCode::from(e.exit_code())
        }
    }
}

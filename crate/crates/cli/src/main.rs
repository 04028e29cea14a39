//! `sketchret`: generate data, build semantic codes, train, evaluate, and
//! query the cross-modal retrieval engine.
//!
//! Every command is a deterministic function of its config file, flags,
//! and seed. Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sketchret_core::semantics::HierarchyMeasure;
use sketchret_core::{Error, ErrorKind};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration: unparseable config file, contradictory flags.
    Config(String),
    /// A required input file does not exist.
    MissingInput(PathBuf),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::MissingInput(path) => write!(f, "missing input file: {}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "sketchret", version, about = "Zero-shot sketch-based image retrieval engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the seed for training, generation, and embedding.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; also where unset paths resolve.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: features, taxonomy, text vectors.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Also write a second, independent text-embedding file.
        #[arg(long)]
        alt_text: bool,
    },
    /// Build per-class semantic codes from text vectors and the taxonomy.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Taxonomy similarity: "path" or "jc".
        #[arg(long)]
        measure: Option<HierarchyMeasure>,
        /// Emit all four text-source x measure combinations.
        #[arg(long)]
        grid: bool,
    },
    /// Train the model and write a checkpoint plus a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_iter: Option<u64>,
        /// Drop the adversarial (Wasserstein critic) terms.
        #[arg(long)]
        no_wd: bool,
        /// Drop the cycle-consistency terms.
        #[arg(long)]
        no_cyc: bool,
        /// Drop the classification terms.
        #[arg(long)]
        no_cls: bool,
        /// Drop the identity-matching term.
        #[arg(long)]
        no_iml: bool,
        /// Score validation mAP on the test split after every epoch.
        #[arg(long)]
        validate: bool,
    },
    /// Score zero-shot retrieval and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also write every query's full ranking as CSV.
        #[arg(long)]
        dump_rankings: bool,
        /// Also write the test records' codes as CSV.
        #[arg(long)]
        dump_codes: bool,
    },
    /// Rank the gallery for specific sketch queries.
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sketch record ids.
        #[arg(long, value_delimiter = ',', required = true)]
        query_ids: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.embed.combiner.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynth { common, alt_text } => {
            let config = load_config(&common)?;
            commands::gen_synth(&config, &common.out, alt_text)
        }
        Command::Embed { common, measure, grid } => {
            let mut config = load_config(&common)?;
            if let Some(measure) = measure {
                config.embed.measure = measure;
            }
            commands::embed(&config, &common.out, grid)
        }
        Command::Train {
            common,
            max_iter,
            no_wd,
            no_cyc,
            no_cls,
            no_iml,
            validate,
        } => {
            let mut config = load_config(&common)?;
            if let Some(max_iter) = max_iter {
                config.train.max_iterations = max_iter;
            }
            if no_wd {
                config.train.weights.adversarial = 0.0;
            }
            if no_cyc {
                config.train.weights.cycle = 0.0;
            }
            if no_cls {
                config.train.weights.classification = 0.0;
            }
            if no_iml {
                config.train.weights.identity = 0.0;
            }
            commands::train(&config, &common.out, validate)
        }
        Command::Eval {
            common,
            dump_rankings,
            dump_codes,
        } => {
            let config = load_config(&common)?;
            commands::eval(&config, &common.out, dump_rankings, dump_codes)
        }
        Command::Retrieve { common, query_ids, k } => {
            let config = load_config(&common)?;
            if k == 0 {
                return Err(CliError::Config("k must be at least 1".into()));
            }
            commands::retrieve(&config, &common.out, &query_ids, k)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crel::CrelError;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CrelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    TooManyFailures(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 64,
            Self::Core(CrelError::Hull) => 2,
            Self::Core(CrelError::Sampler(_) | CrelError::Degenerate(_)) => 3,
            Self::Core(CrelError::Parse(_) | CrelError::Schema(_) | CrelError::Domain(_)) => 64,
            Self::TooManyFailures(_) => 3,
            Self::Core(_) | Self::Io(_) => 1,
        }
    }
}

/// Generalized empirical likelihood posteriors from M-estimating equations.
#[derive(Parser, Debug)]
#[command(name = "crel", version, about)]
struct Cli {
    /// Flat `key = value` configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (falls back to CREL_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for result files and the run manifest [default: crel-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap for parallel replications.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CSV file with a header row; `y,x1,..,xp` is read as regression data.
    data: Option<PathBuf>,
    /// Estimating function: mean, median, huber[:c], tukey[:k], glm, robust-glm[:c].
    #[arg(long)]
    psi: Option<String>,
    /// Cressie-Read index (0 is empirical likelihood, -1 exponential tilting).
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Implied observation weights at a parameter value.
    Weights {
        #[command(flatten)]
        common: DataArgs,
        /// Parameter value, comma-separated for vector parameters.
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<String>,
    },
    /// GELR statistic over a grid of scalar parameter values.
    Profile {
        #[command(flatten)]
        common: DataArgs,
        /// Grid as lo:hi:m (m equally spaced points).
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        /// Add a parametric log-likelihood ratio column (only `laplace`).
        #[arg(long)]
        parametric: Option<String>,
    },
    /// Posterior quantiles from the GEL posterior.
    Posterior {
        #[command(flatten)]
        common: DataArgs,
        /// `flat` or `normal:mean,sd`; mean and sd may be `/`-separated per component.
        #[arg(long)]
        prior: Option<String>,
        /// Comma-separated quantile levels.
        #[arg(long)]
        alpha: Option<String>,
        /// mcmc or grid (grid needs a scalar parameter).
        #[arg(long)]
        method: Option<String>,
        /// Grid nodes for --method grid.
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        chain_length: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
        /// Also write the chain to chain.csv.
        #[arg(long)]
        chain: bool,
    },
    /// Regenerate a results table.
    Reproduce {
        /// 1, 2, 3 or thm5.
        #[arg(long)]
        table: Option<String>,
        /// desk or paper.
        #[arg(long)]
        scale: Option<String>,
        /// Table 3 reference posterior data: clean or contaminated.
        #[arg(long)]
        reference: Option<String>,
        /// Quantile level for the thm5 study.
        #[arg(long)]
        alpha: Option<f64>,
    },
}

fn put<T: ToString>(m: &mut BTreeMap<String, String>, k: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(k.into(), v.to_string());
    }
}

fn put_data(m: &mut BTreeMap<String, String>, d: DataArgs) {
    put(m, "data", d.data.map(|p| p.display().to_string()));
    put(m, "psi", d.psi);
    put(m, "gamma", d.gamma);
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut values = BTreeMap::new();
    put(&mut values, "seed", cli.seed);
    put(&mut values, "out", cli.out.map(|p| p.display().to_string()));
    put(&mut values, "threads", cli.threads);
    let name = match cli.command {
        Command::Weights { common, theta } => {
            put_data(&mut values, common);
            put(&mut values, "theta", theta);
            "weights"
        }
        Command::Profile { common, grid, parametric } => {
            put_data(&mut values, common);
            put(&mut values, "grid", grid);
            put(&mut values, "parametric", parametric);
            "profile"
        }
        Command::Posterior { common, prior, alpha, method, nodes, chain_length, burn_in, thin, chain } => {
            put_data(&mut values, common);
            put(&mut values, "prior", prior);
            put(&mut values, "alpha", alpha);
            put(&mut values, "method", method);
            put(&mut values, "nodes", nodes);
            put(&mut values, "chain_length", chain_length);
            put(&mut values, "burn_in", burn_in);
            put(&mut values, "thin", thin);
            if chain {
                values.insert("chain".into(), "true".into());
            }
            "posterior"
        }
        Command::Reproduce { table, scale, reference, alpha } => {
            put(&mut values, "table", table);
            put(&mut values, "scale", scale);
            put(&mut values, "reference", reference);
            put(&mut values, "alpha", alpha);
            "reproduce"
        }
    };
    let mut cfg = RunConfig::build(name, cli.config.as_deref(), values, std::env::var("CREL_SEED").ok())?;
    if let Some(t) = cfg.get("threads") {
        let t: usize = t.parse().map_err(|_| CliError::Usage(format!("threads must be a positive integer, got `{t}`")))?;
        if t == 0 {
            return Err(CliError::Usage("threads must be positive".into()));
        }
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    match name {
        "weights" => commands::weights(&mut cfg),
        "profile" => commands::profile(&mut cfg),
        "posterior" => commands::posterior(&mut cfg),
        _ => commands::reproduce(&mut cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(64),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crel: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

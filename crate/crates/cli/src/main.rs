use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sae_groups_cli::commands::{self, Session, TrainTarget};
use sae_groups_cli::exit_code;

#[derive(Parser)]
#[command(name = "sae-groups", version, about = "Layer-grouped sparse autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// TOML config file; defaults to the run directory's saved config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` config override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sequential reductions and no wall-clock fields, for byte-identical reruns.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and train the desk model.
    Prepare(Common),
    /// Capture residual-stream activations.
    Capture {
        #[command(flatten)]
        common: Common,
        /// Include the final layer.
        #[arg(long)]
        include_last: bool,
    },
    /// Mean angular distance between captured layers.
    Distances(Common),
    /// Partition layers into contiguous groups.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
    /// Train per-layer baselines or one SAE per group.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        k: Option<usize>,
        #[arg(long)]
        baseline: bool,
    },
    /// Reconstruction metrics and MMCS against baselines.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "sae")]
        saes: Vec<String>,
    },
    /// Feature attribution and faithfulness / completeness curves.
    Downstream {
        #[command(flatten)]
        common: Common,
        /// exact, atp, ig (averaged) or ig-sum.
        #[arg(long, default_value = "atp")]
        method: String,
        #[arg(long = "sae")]
        saes: Vec<String>,
    },
    /// Merge run directories into one report.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn session(c: Common) -> anyhow::Result<Session> {
    let mut overrides = c.overrides;
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    Session::open(&c.out, c.config.as_deref(), overrides, c.deterministic)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let summary = match cli.command {
        Command::Prepare(c) => commands::prepare(&session(c)?)?,
        Command::Capture { common, include_last } => commands::capture(&session(common)?, include_last)?,
        Command::Distances(c) => commands::distances(&session(c)?)?,
        Command::Cluster { common, k } => commands::cluster(&session(common)?, &k)?,
        Command::Train { common, k, baseline } => {
            let target = if baseline {
                TrainTarget::Baseline
            } else {
                TrainTarget::Grouped(k.expect("clap requires k"))
            };
            commands::train(&session(common)?, target)?
        }
        Command::Eval { common, saes } => commands::eval(&session(common)?, &saes)?,
        Command::Downstream { common, method, saes } => commands::downstream(&session(common)?, &method, &saes)?,
        Command::Report { runs, out } => {
            let r = commands::report(&runs, &out)?;
            return emit(&r);
        }
    };
    emit(&summary)
}

// A closed stdout (e.g. piped into `head`) is not an error.
fn emit<S: serde::Serialize>(value: &S) -> anyhow::Result<()> {
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("SAE_GROUPS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

mod commands;
mod config;
mod corpus_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use blindguard_core::graph::TopologyKind;
use blindguard_core::remediation::PruneMode;
use blindguard_core::sim::DefenseKind;
use blindguard_core::ErrorClass;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "blindguard",
    version,
    about = "Unsupervised detection and isolation of compromised agents in multi-agent systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AttackArgs {
    /// Attack kind, or `none`.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    attackers: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus of interaction graphs with embeddings.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        topology: Vec<TopologyKind>,
        #[arg(long)]
        dim: Option<usize>,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Train an encoder on a corpus of normal graphs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        no_neigh: bool,
        #[arg(long)]
        no_global: bool,
    },
    /// Score and flag agents in every graph of a corpus.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run one multi-round simulation and write its trace.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        topology: Option<TopologyKind>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        defense: Option<DefenseKind>,
        #[arg(long)]
        prune_mode: Option<PruneMode>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        task: Option<u64>,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Sweep topologies, attacks and defenses; write ASR/accuracy/AUC tables.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        topology: Vec<TopologyKind>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        defense: Vec<DefenseKind>,
        #[arg(long)]
        prune_mode: Option<PruneMode>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
        /// Comma-separated attack kinds.
        #[arg(long, value_delimiter = ',')]
        attack: Vec<String>,
        #[arg(long)]
        attackers: Option<usize>,
        #[arg(long)]
        strength: Option<f64>,
        /// Skip the no-attack control rows.
        #[arg(long)]
        no_control: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}

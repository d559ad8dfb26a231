use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use earn_cli::commands;
use earn_cli::ExperimentConfig;
use earn_core::trainer::TrainMode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    Earn,
    EarnNoRt,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => TrainMode::Vanilla,
            ModeArg::Earn => TrainMode::Earn,
            ModeArg::EarnNoRt => TrainMode::EarnNoRt,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "earn",
    about = "Register-token transformer engine: training, inference, and efficiency experiments"
)]
struct Cli {
    /// Experiment configuration (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every stage seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (also via EARN_OUT_DIR)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker count for the bench harness (also via EARN_WORKERS)
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic interaction log and identifier catalog
    GenData,
    /// Train in the selected mode and write a checkpoint
    Train {
        #[arg(long, value_enum, default_value = "earn")]
        mode: ModeArg,
        /// Start from an existing checkpoint instead of seeded init
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split (beam search + Recall/NDCG)
    Eval {
        #[arg(long, value_enum, default_value = "earn")]
        mode: ModeArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Measure walltime speedup, throughput, and cache metrics
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit the analytic FLOPs/cache/time table
    CostModel,
    /// Capture attention distributions and report sparsity/sink metrics
    AnalyzeAttn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let config_path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let mut cfg = ExperimentConfig::load(&config_path)?;
    cfg.apply_overrides(cli.seed, cli.out, cli.workers);

    match cli.command {
        Command::GenData => commands::cmd_gen_data(&cfg),
        Command::Train {
            mode,
            init_checkpoint,
        } => commands::cmd_train(&cfg, mode.into(), init_checkpoint.as_deref()),
        Command::Eval { mode, checkpoint } => commands::cmd_eval(&cfg, mode.into(), &checkpoint),
        Command::Bench { checkpoint } => commands::cmd_bench(&cfg, checkpoint.as_deref()),
        Command::CostModel => commands::cmd_cost(&cfg),
        Command::AnalyzeAttn { checkpoint } => commands::cmd_attn(&cfg, checkpoint.as_deref()),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

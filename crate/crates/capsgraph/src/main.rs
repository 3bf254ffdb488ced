use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use capsgraph::commands::{self, Overrides};
use capsgraph::Result;
use clap::{Args, Parser, Subcommand};

/// Capsule-network text classification with graph routing.
#[derive(Parser)]
#[command(name = "capsgraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (train, dump-adjacency) or CSV file (ablate).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus JSONL metrics.
    Train(Common),
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also time forward+backward passes per batch.
        #[arg(long)]
        timing: bool,
    },
    /// Train one model per routing configuration and emit a CSV row each.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Preset name (normalization, baselines) or a JSON grid file.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every parameter block of a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_grad_fault: bool,
    },
    /// Write adjacency matrices and the routing trace for one document.
    DumpAdjacency {
        #[command(flatten)]
        common: Common,
        /// Raw document text; defaults to the first test document.
        #[arg(long)]
        document: Option<String>,
    },
    /// Semantic consistency of the NCL, PCL and RL outputs.
    Consistency(Common),
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Train(c) | Command::Consistency(c) => c,
        Command::Eval { common, .. }
        | Command::Ablate { common, .. }
        | Command::Gradcheck { common, .. }
        | Command::DumpAdjacency { common, .. } => common,
    };
    let ov = Overrides {
        seed: common.seed,
        checkpoint: common.checkpoint.clone(),
        out: common.out.clone(),
    };
    let cfg = commands::resolve_config(common.config.as_deref(), &ov)?;
    let (mut out, mut err) = (io::stdout().lock(), io::stderr().lock());
    let _ = writeln!(err, "{}", cfg.to_json());
    match &cli.command {
        Command::Train(_) => commands::cmd_train(&cfg, &ov, &mut out, &mut err),
        Command::Eval { timing, .. } => commands::cmd_eval(&cfg, *timing, &mut out),
        Command::Ablate { grid, jobs, .. } => {
            let grid = commands::resolve_grid(&cfg, grid.as_deref())?;
            commands::cmd_ablate(&cfg, &ov, &grid, *jobs, &mut out, &mut err)
        }
        Command::Gradcheck { inject_grad_fault, .. } => commands::cmd_gradcheck(&cfg, *inject_grad_fault, &mut out),
        Command::DumpAdjacency { document, .. } => commands::cmd_dump_adjacency(&cfg, &ov, document.as_deref(), &mut out),
        Command::Consistency(_) => commands::cmd_consistency(&cfg, &mut out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedcollm::federation::{BaselineKind, TransportKind};
use fedcollm_cli::commands::{comm_row, format_comm_table, parse_targets, preset_rows};
use fedcollm_cli::{cmd_eval, cmd_run, RunOptions};

#[derive(Parser)]
#[command(name = "fedcollm", version, about = "Federated LoRA co-tuning of client SLMs with a server LLM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// `plain` or `secure`.
    #[arg(long, value_parser = |s: &str| TransportKind::parse(s).map_err(|e| e.to_string()))]
    transport: Option<TransportKind>,
}

impl RunArgs {
    fn options(self) -> RunOptions {
        RunOptions {
            config: self.config,
            seed: self.seed,
            out: self.out,
            transport: self.transport,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Federated co-tuning with mutual distillation.
    Fedcollm(RunArgs),
    /// A comparison run: zero_shot, standalone, fedavg, centralized or fedcollm.
    Baseline {
        kind: String,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Re-evaluate the checkpoints in a run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Adapter parameter counts and per-round traffic.
    Commcost {
        /// Custom row: layer count (requires --d-model and --full-params).
        #[arg(long, requires_all = ["d_model", "full_params"])]
        layers: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value = "q,v")]
        targets: String,
        #[arg(long)]
        full_params: Option<usize>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut log = std::io::stderr();
    match cli.command {
        Command::Fedcollm(args) => {
            let report = cmd_run(BaselineKind::FedCoLlm, &args.options(), &mut log)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Baseline { kind, args } => {
            let kind: BaselineKind = kind.parse().context("baseline kind")?;
            let report = cmd_run(kind, &args.options(), &mut log)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval { run } => {
            let report = cmd_eval(&run)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Commcost {
            layers,
            d_model,
            rank,
            targets,
            full_params,
        } => {
            let mut rows = preset_rows()?;
            if let (Some(l), Some(d), Some(full)) = (layers, d_model, full_params) {
                rows.push(comm_row("custom", l, d, rank, &parse_targets(&targets)?, full, None)?);
            }
            print!("{}", format_comm_table(&rows));
        }
    }
    Ok(())
}

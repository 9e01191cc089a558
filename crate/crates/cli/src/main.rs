use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saferl_cli::commands;
use saferl_cli::config::ExperimentConfig;
use saferl_cli::CliError;

#[derive(Parser)]
#[command(name = "saferl", version, about = "Offline-to-online safe RL experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip finished stages and continue from checkpoints.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect the offline dataset.
    GenData(Common),
    /// Conservative offline pretraining.
    Pretrain(Common),
    /// Value pre-alignment of the pretrained critics.
    Vpa(Common),
    /// Online Lagrangian finetuning of the configured variant.
    Finetune(Common),
    /// Evaluate a checkpoint and report critic alignment.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Agent checkpoint directory; defaults to the newest stage output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Learning-curve and cost/reward figures from metrics CSV files.
    Plot {
        /// Supplies the cost threshold line.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Exact constrained optimum of a tabular environment.
    Oracle(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = read_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn read_config(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.clone()))?;
    ExperimentConfig::parse(&text)
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.cmd {
        Cmd::GenData(c) => commands::gen_data(&load(&c)?, c.resume),
        Cmd::Pretrain(c) => commands::cmd_pretrain(&load(&c)?, c.resume),
        Cmd::Vpa(c) => commands::cmd_vpa(&load(&c)?, c.resume),
        Cmd::Finetune(c) => commands::cmd_finetune(&load(&c)?, c.resume),
        Cmd::Eval { common, checkpoint } => commands::cmd_eval(&load(&common)?, checkpoint.as_deref()),
        Cmd::Plot { config, out, metrics } => {
            let c_th = match config {
                Some(p) => read_config(&p)?.c_th(),
                None => saferl_core::cmdp::PointConfig::default().cost_threshold,
            };
            commands::cmd_plot(&metrics, c_th, &out)
        }
        Cmd::Oracle(c) => commands::cmd_oracle(&load(&c)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

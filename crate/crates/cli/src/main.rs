use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trajformer::commands::{self, Ctx, Failure, Task, EXIT_CONFIG};
use trajformer::config::{parse_assignment, RunConfig, SEED_ENV};
use trajformer::pool::Pool;

#[derive(Parser)]
#[command(name = "trajformer", version, about = "Vehicle-group trajectory transformer pipeline")]
struct Cli {
    /// Plain `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment, global = true)]
    set: Vec<(String, String)>,
    /// Root seed; overrides the file and the environment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs single-threaded, 0 uses all cores.
    #[arg(long, default_value_t = 0, global = true)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a highway and write raw tracks.
    Syngen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn raw tracks into a sample dataset with a train/test split.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoising pretraining on the training split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Gap-filling fine-tune of a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// One-shot prediction for a test sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continuous prediction from a test sample's history.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Defaults to `rollout.loops`.
        #[arg(long)]
        loops: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Task::Prediction)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the parameter count of the configured model.
    ParamCount,
    /// Write ground truth and noised samples for inspection.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Failure {
            code: EXIT_CONFIG,
            error: anyhow::anyhow!("reading {}: {e}", p.display()),
        })?),
        None => None,
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut flags = cli.set.clone();
    if let Some(s) = cli.seed {
        flags.push(("seed".into(), s.to_string()));
    }
    let cfg = RunConfig::resolve(file.as_deref(), env_seed.as_deref(), &flags)?;
    let pool = Pool::new(cli.threads).map_err(Failure::data)?;
    let ctx = Ctx { cfg: &cfg, pool: &pool };
    match cli.cmd {
        Cmd::Syngen { out } => commands::syngen(&ctx, &out),
        Cmd::Preprocess { input, out } => commands::preprocess(&ctx, &input, &out),
        Cmd::Pretrain { data, out, trace } => commands::pretrain_cmd(&ctx, &data, &out, trace.as_deref()),
        Cmd::Finetune {
            checkpoint,
            data,
            out,
            trace,
        } => commands::finetune_cmd(&ctx, &checkpoint, &data, &out, trace.as_deref()),
        Cmd::Predict {
            checkpoint,
            data,
            index,
            out,
        } => commands::rollout_cmd(&ctx, &checkpoint, &data, index, 1, &out),
        Cmd::Rollout {
            checkpoint,
            data,
            index,
            loops,
            out,
        } => commands::rollout_cmd(&ctx, &checkpoint, &data, index, loops.unwrap_or(cfg.rollout_loops), &out),
        Cmd::Evaluate {
            checkpoint,
            data,
            task,
            out,
            csv,
        } => commands::evaluate_cmd(&ctx, &checkpoint, &data, task, &out, csv.as_deref()).map(|_| ()),
        Cmd::ParamCount => {
            println!("{}", commands::param_count_cmd(&ctx));
            Ok(())
        }
        Cmd::Export { data, out_dir } => commands::export(&ctx, &data, &out_dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}

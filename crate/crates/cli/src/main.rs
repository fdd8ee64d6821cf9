//! `flowdistill`: run each pipeline stage from the command line.

mod commands;
mod error;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowdistill::config::RunConfig;
use flowdistill::distill::PipelineFlags;

use commands::{DistillArgs, SampleArgs};
use error::CliError;

#[derive(Parser)]
#[command(name = "flowdistill", version, about = "Few-step rectified-flow distillation on 2D toy data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Full-length defaults.
    Default,
    /// Reduced iteration counts for a single CPU core.
    Desk,
}

#[derive(Args)]
struct Common {
    /// TOML config; keys it omits take the full-length defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config used when no --config is given.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write into this directory instead of a new timestamped one.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config as TOML.
    Config,
    /// Draw ground-truth samples.
    GenData {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the flow-matching teacher.
    TrainTeacher,
    /// Distill a few-step student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 4)]
        target_steps: usize,
        /// Four-step student checkpoint to continue from (two-step target only).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        no_adv: bool,
        #[arg(long)]
        no_pretrain: bool,
        #[arg(long)]
        no_timestep_sharing: bool,
        #[arg(long)]
        no_refresh: bool,
        #[arg(long)]
        split_ft: bool,
    },
    /// Score a checkpoint against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampling steps; defaults to the checkpoint's own schedule.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run every ablation on every configured seed.
    Ablate,
    /// Quantize checkpoint weights.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bits: u32,
    },
    /// Sample from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            RunConfig::from_toml_str(&text)?
        }
        None => match common.profile {
            Profile::Default => RunConfig::default(),
            Profile::Desk => RunConfig::desk(),
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Option<PathBuf>, CliError> {
    let cfg = load_config(&cli.common)?;
    let dir = cli.common.run_dir.as_deref();
    let out = match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml_string());
            return Ok(None);
        }
        Command::GenData { n } => commands::gen_data_cmd(&cfg, dir, n)?,
        Command::TrainTeacher => commands::train_teacher_cmd(&cfg, dir)?,
        Command::Distill {
            teacher,
            target_steps,
            from,
            no_adv,
            no_pretrain,
            no_timestep_sharing,
            no_refresh,
            split_ft,
        } => {
            let flags = PipelineFlags {
                adversarial: !no_adv,
                pretrain: !no_pretrain,
                timestep_sharing: !no_timestep_sharing,
                refresh: !no_refresh && !no_adv,
                split_ft,
            };
            let args = DistillArgs {
                teacher: &teacher,
                target_steps,
                from: from.as_deref(),
                flags,
            };
            commands::distill_cmd(&cfg, dir, &args)?
        }
        Command::Eval { checkpoint, steps } => commands::eval_cmd(&cfg, dir, &checkpoint, steps)?,
        Command::Ablate => commands::ablate_cmd(&cfg, dir)?,
        Command::Quantize { checkpoint, bits } => commands::quantize_cmd(&cfg, dir, &checkpoint, bits)?,
        Command::Sample {
            checkpoint,
            n,
            steps,
            guidance,
        } => {
            let args = SampleArgs {
                checkpoint: &checkpoint,
                n,
                steps,
                guidance,
            };
            commands::sample_cmd(&cfg, dir, &args)?
        }
    };
    Ok(Some(out))
}

fn print_dir(p: &Path) {
    println!("{}", p.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Some(dir)) => {
            print_dir(&dir);
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}

use std::path::PathBuf;

use anyhow::Result;
use bdense::solvers::SolverKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

mod commands;
mod config;

use commands::SampleArgs;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "bdense", version, about = "Train, distill and evaluate toy diffusion models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the component the command runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Validate and print the resolved configuration, then exit.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured dataset to `data.csv`.
    GenData,
    /// Train the single-branch teacher.
    TrainTeacher {
        /// Continue from a checkpoint saved with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many updates have been applied in total.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Distill the teacher into a few-step student.
    Distill {
        /// Defaults to `teacher.bdns` in the output directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        solver: Option<SolverKind>,
        /// Defaults to `samples.csv` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare a samples file against a reference and append to `metrics.csv`.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        /// Defaults to `data.csv` in the output directory.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Comma-separated metric names; overrides the config.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
    },
    /// Random search over geometric branch weights.
    SearchWeights {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        match command {
            Command::GenData => cfg.dataset.seed = seed,
            Command::TrainTeacher { .. } => cfg.teacher.seed = seed,
            Command::Distill { .. } => {
                if let Some(d) = cfg.distill.as_mut() {
                    d.seed = seed;
                }
            }
            Command::Sample { .. } | Command::Eval { .. } | Command::SearchWeights { .. } => cfg.seed = seed,
        }
    }
    cfg.validate()?;
    if let Command::Eval { metrics: Some(m), .. } = command {
        config::check_metrics(m)?;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let cfg = resolve(&cli.common, &cli.command)?;

    if cli.common.dry_run {
        let mut view = json!({ "config": cfg });
        match &cli.command {
            Command::Distill { .. } => {
                view["distill"] = commands::describe_distill(commands::distill_config(&cfg)?)?;
            }
            Command::SearchWeights { .. } => {
                let d = commands::search_config(&cfg)?;
                d.validate()?;
                view["distill"] = commands::describe_distill(&d)?;
            }
            _ => {}
        }
        println!("{}", serde_json::to_string_pretty(&view)?);
        return Ok(());
    }

    let default_teacher = || cfg.out_dir.join(commands::TEACHER_FILE);
    match cli.command {
        Command::GenData => {
            commands::gen_data(&cfg)?;
        }
        Command::TrainTeacher { resume, stop_at } => {
            commands::train_teacher(&cfg, resume.as_deref(), stop_at)?;
        }
        Command::Distill { teacher } => {
            commands::distill(&cfg, &teacher.unwrap_or_else(default_teacher))?;
        }
        Command::Sample {
            checkpoint,
            nfe,
            n,
            solver,
            output,
        } => {
            let args = SampleArgs {
                checkpoint,
                nfe,
                n,
                solver,
                output,
            };
            commands::sample(&cfg, &args)?;
        }
        Command::Eval {
            samples,
            reference,
            metrics,
        } => {
            let reference = reference.unwrap_or_else(|| cfg.out_dir.join(commands::DATA_FILE));
            commands::eval(&cfg, &samples, &reference, metrics)?;
        }
        Command::SearchWeights { teacher } => {
            commands::search_weights(&cfg, &teacher.unwrap_or_else(default_teacher))?;
        }
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gkd_cli::commands::{
    cmd_build_corpus, cmd_eval, cmd_gradcheck, cmd_pretrain_teacher, cmd_report, cmd_run,
    CommonOverrides,
};

#[derive(Parser)]
#[command(
    name = "gkd",
    about = "Generalizable knowledge distillation for segmentation on a synthetic multi-domain benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by a manifest
    BuildCorpus {
        /// Corpus manifest (TOML)
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the corpus
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the frozen teacher on a labeled multi-style pool
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output root
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Execute a training protocol for every configured seed
    Run {
        #[arg(long)]
        config: PathBuf,
        /// gkd | single_stage | single_stage_qsd | pointwise_kd | no_distill
        #[arg(long)]
        method: String,
        /// Run a single seed instead of the configured list
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of labeled source samples available to task learning
        #[arg(long)]
        label_fraction: Option<f64>,
        /// Override the configured output root
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
        /// Run seeds concurrently (each run stays internally deterministic)
        #[arg(long)]
        parallel: bool,
    },
    /// Re-evaluate an existing run directory
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Run directory produced by `gkd run`
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences
    Gradcheck,
    /// Aggregate completed runs into comparison tables
    Report {
        /// Output directory for the tables
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
        /// Run directories to aggregate
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildCorpus {
            manifest,
            out,
            overwrite,
        } => cmd_build_corpus(&manifest, &out, overwrite),
        Command::PretrainTeacher {
            config,
            out,
            overwrite,
        } => cmd_pretrain_teacher(
            &config,
            &CommonOverrides {
                seed: None,
                label_fraction: None,
                out,
            },
            overwrite,
        ),
        Command::Run {
            config,
            method,
            seed,
            label_fraction,
            out,
            overwrite,
            parallel,
        } => cmd_run(
            &config,
            &method,
            &CommonOverrides {
                seed,
                label_fraction,
                out,
            },
            overwrite,
            parallel,
        ),
        Command::Eval { config, run, out } => cmd_eval(
            &config,
            &run,
            &CommonOverrides {
                seed: None,
                label_fraction: None,
                out,
            },
        ),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Report {
            out,
            overwrite,
            runs,
        } => cmd_report(&runs, &out, overwrite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

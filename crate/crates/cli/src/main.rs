use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpcn::{cmd_eval, cmd_gen_synthetic, cmd_plot, cmd_predict, cmd_train, CliResult, TrainOverrides};
use tpcn_core::scene::Profile;

/// Trajectory forecasting on spatio-temporal point clouds.
#[derive(Parser)]
#[command(name = "tpcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes and a manifest listing them.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Falls back to TPCN_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// straight, turn, lane-change or mixed.
        #[arg(long, default_value = "mixed")]
        profile: Profile,
    },
    /// Train a model, checkpointing after every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Print top-1 and top-6 metrics over a directory of scenes as JSON.
    Eval {
        /// Model section to check the checkpoint against; defaults to the checkpoint's own.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write per-scene scores as CSV.
        #[arg(long)]
        per_scene: Option<PathBuf>,
    },
    /// Forecast one scene and write ranked world-frame trajectories.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a scene and a prediction file as SVG.
    Plot {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenSynthetic { out, n, seed, profile } => {
            let manifest = cmd_gen_synthetic(&out, n, seed, profile)?;
            eprintln!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
        }
        Command::Train {
            config,
            resume,
            data,
            checkpoint_dir,
            log,
            seed,
            epochs,
            lr,
            batch_size,
        } => {
            let overrides = TrainOverrides {
                data_dir: data,
                checkpoint_dir,
                log_path: log,
                seed,
                epochs,
                lr,
                batch_size,
            };
            cmd_train(&config, resume.as_deref(), &overrides)?;
        }
        Command::Eval {
            config,
            ckpt,
            data,
            per_scene,
        } => {
            let report = cmd_eval(config.as_deref(), &ckpt, &data, per_scene.as_deref())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(tpcn_core::Error::from)?
            );
        }
        Command::Predict { ckpt, scene, out } => {
            cmd_predict(&ckpt, &scene, &out)?;
        }
        Command::Plot { scene, pred, out } => cmd_plot(&scene, &pred, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

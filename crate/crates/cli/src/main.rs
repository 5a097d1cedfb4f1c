//! `srt`: synthetic benchmark, training, evaluation and sweeps.
//!
//! Exit status is 0 on success, 2 for bad input (configuration, missing
//! files, infeasible scenes) and 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srt_core::experiment::{cmd_ablate, cmd_eval, cmd_flowcheck, cmd_synth, cmd_train, ExperimentConfig, Mode};
use srt_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "srt",
    version,
    about = "Registration and triangulation supervision experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// baseline, sbr, sbt or srt.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark directory.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector.
    Train {
        #[command(flatten)]
        common: Common,
        /// Benchmark directory; generated in memory when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test scene.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Runs in flight at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare interpolated dense flow with direct LK tracks.
    Flowcheck {
        #[command(flatten)]
        common: Common,
        /// Scene or benchmark directory.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.mode {
        let mode = Mode::parse(m)?;
        if mode != cfg.mode {
            cfg.weights = None;
        }
        cfg.mode = mode;
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let dir = cmd_synth(&config(&common)?, None)?;
            println!("wrote {}", dir.display());
        }
        Command::Train { common, scene, resume } => {
            let cfg = config(&common)?;
            let state = cmd_train(&cfg, scene.as_deref(), None, resume.as_deref())?;
            if let Some(last) = state.log.last() {
                println!("epoch {} nme {:.6} p_error {:.6}", last.epoch, last.nme, last.p_error);
            }
        }
        Command::Eval {
            common,
            checkpoint,
            scene,
        } => {
            let s = cmd_eval(&config(&common)?, &checkpoint, scene.as_deref(), None)?;
            println!(
                "nme {:.6} auc {:.6} failure {:.6} p_error {:.6}",
                s.nme, s.auc, s.failure_rate, s.p_error
            );
        }
        Command::Ablate { common, jobs } => {
            let rows = cmd_ablate(&config(&common)?, None, jobs)?;
            for r in rows.iter().filter(|r| r.seed == "mean") {
                println!(
                    "cell {} {} w=({}, {}) noise {} data {}: nme {} p_error {} [{}]",
                    r.cell,
                    r.mode.as_str(),
                    r.w_sbr,
                    r.w_sbt,
                    r.noise_std,
                    r.data_fraction,
                    r.nme.map_or("-".into(), |v| format!("{v:.6}")),
                    r.p_error.map_or("-".into(), |v| format!("{v:.6}")),
                    r.status
                );
            }
        }
        Command::Flowcheck { common, scene } => {
            let rows = cmd_flowcheck(&config(&common)?, scene.as_deref(), None)?;
            if let Some(all) = rows.last() {
                println!("points {} mean {:.6} max {:.6}", all.points, all.mean, all.max);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_user_error() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

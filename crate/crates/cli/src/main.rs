//! `gaintuner`: command-line front end for simulation, linearization, gain
//! tuning, SPD tracking and rank diagnostics.
//!
//! Exit codes: 0 success, 1 bad input (files, parsing, flags), 2 numeric
//! failure (infeasible, unstable, diverged).

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaintuner_core::Error as CoreError;
use serde::Serialize;

use run::{NumericFailure, Run};

#[derive(Parser)]
#[command(name = "gaintuner", version, about = "Momentum-based balancing and automatic gain tuning")]
struct Cli {
    /// Directory receiving all outputs and `manifest.json`.
    #[arg(long, global = true, default_value = "gaintuner-out")]
    out: PathBuf,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the balancing controller (or the passive robot) from the equilibrium.
    Simulate(SimulateArgs),
    /// Linearize the closed-loop joint dynamics at the equilibrium.
    Linearize(LinearizeArgs),
    /// Fit SPD gains to desired joint-space dynamics.
    Tune(TuneArgs),
    /// Track the closest SPD matrix to a target.
    TrackSpd(TrackSpdArgs),
    /// Report the rank of the gain-fitting map.
    CheckRank(CheckRankArgs),
    /// Step the postural reference of one or more joints and measure settling.
    StepResponse(StepResponseArgs),
}

#[derive(Args, Serialize)]
struct ModelArgs {
    /// Model file, or a bundled model name (`chain7`, `biped14`).
    #[arg(long)]
    model: String,
    /// Equilibrium file; defaults to the bundled posture of a bundled model.
    #[arg(long)]
    equilibrium: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Gains file; defaults to critically damped nominal gains with ω = 4.
    #[arg(long)]
    gains: Option<PathBuf>,
    /// No control torques and no contacts.
    #[arg(long)]
    passive: bool,
    /// Half-width of the uniform random joint offset applied to the start posture.
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// Record every k-th step.
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Penalty contacts with this stiffness [1/s²] instead of rigid contacts.
    #[arg(long)]
    soft_stiffness: Option<f64>,
    /// Damping [1/s] of the penalty contacts.
    #[arg(long, default_value_t = 0.0)]
    soft_damping: f64,
}

#[derive(Args, Serialize)]
struct LinearizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    gains: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TuneArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Desired dynamics file (`Q1`, `Q2` as rows or `{"diag": [...]}`).
    #[arg(long)]
    desired: PathBuf,
    #[arg(long, default_value_t = 1e-2)]
    tracker_dt: f64,
    #[arg(long, default_value_t = 100_000)]
    tracker_steps: usize,
    /// Start the trackers from `O = I, L = 0` instead of the eigen warm start.
    #[arg(long)]
    cold_start: bool,
    /// Tikhonov damping of the pseudoinverse (0 keeps the hard cutoff).
    #[arg(long, default_value_t = 0.0)]
    pinv_damping: f64,
    /// With several contacts, fit every column of the corrected target
    /// instead of only the contact-compatible motions.
    #[arg(long)]
    full_space: bool,
}

#[derive(Args, Serialize)]
struct TrackSpdArgs {
    /// Target matrix file: JSON array of rows.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    #[arg(long, default_value_t = 100_000)]
    steps: usize,
    /// Scalar `K_U`.
    #[arg(long, default_value_t = 1.0)]
    ku: f64,
    /// Scalar `K_v`.
    #[arg(long, default_value_t = 1.0)]
    kv: f64,
    #[arg(long)]
    cold_start: bool,
    /// Record every k-th step in the trace.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Serialize)]
struct CheckRankArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Serialize)]
struct StepResponseArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Joint to step; repeat for several.
    #[arg(long = "joint", default_values_t = [0usize])]
    joints: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    amplitude: f64,
    #[arg(long, default_value_t = 2e-3)]
    dt: f64,
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
}

fn config<T: Serialize>(args: &T, seed: u64) -> serde_json::Value {
    let mut v = serde_json::to_value(args).expect("arguments serialize");
    v["seed"] = seed.into();
    v
}

fn is_numeric(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<NumericFailure>() {
            return true;
        }
        matches!(
            e.downcast_ref::<CoreError>(),
            Some(
                CoreError::IllConditioned { .. }
                    | CoreError::RankDeficient { .. }
                    | CoreError::Infeasible { .. }
                    | CoreError::NoConvergence { .. }
                    | CoreError::NotEquilibrium { .. }
                    | CoreError::Embedding { .. }
                    | CoreError::SingularKkt
                    | CoreError::Diverged { .. }
                    | CoreError::Unstable { .. }
            )
        )
    })
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GAINTUNER_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| anyhow::anyhow!("GAINTUNER_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let seed = cli.seed;
    let (name, cfg) = match &cli.command {
        Command::Simulate(a) => ("simulate", config(a, seed)),
        Command::Linearize(a) => ("linearize", config(a, seed)),
        Command::Tune(a) => ("tune", config(a, seed)),
        Command::TrackSpd(a) => ("track-spd", config(a, seed)),
        Command::CheckRank(a) => ("check-rank", config(a, seed)),
        Command::StepResponse(a) => ("step-response", config(a, seed)),
    };
    let mut run = match Run::new(name, &cli.out, cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(&mut run, a, seed),
        Command::Linearize(a) => commands::linearize(&mut run, a),
        Command::Tune(a) => commands::tune(&mut run, a),
        Command::TrackSpd(a) => commands::track_spd(&mut run, a),
        Command::CheckRank(a) => commands::check_rank(&mut run, a),
        Command::StepResponse(a) => commands::step_response(&mut run, a),
    };
    let (status, code) = match &result {
        Ok(()) => ("ok", 0),
        Err(e) if is_numeric(e) => ("numeric_failure", 2),
        Err(_) => ("input_error", 1),
    };
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    if let Err(e) = run.finish(status) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}

//! `bwnet` — train deep linear Gaussian generators under the
//! Bures-Wasserstein loss, enumerate closed-form critical points, certify
//! convergence rates, and study Hessian conditioning.

mod commands;
mod config;
mod error;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Config;
use error::CliError;

#[derive(Parser)]
#[command(name = "bwnet", version, about)]
struct Cli {
    /// Flat `key = value` configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Perturbation strength of the smoothed loss.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Step size for gradient descent, or `auto` for the certified bound.
    #[arg(long, global = true)]
    eta: Option<String>,
    /// Network depth (number of layers).
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Zipf-spectrum target covariance and write it to JSON.
    Target {
        /// Ambient dimension.
        #[arg(long)]
        n: Option<usize>,
        /// Smallest eigenvalue of the target.
        #[arg(long)]
        lambda_min: Option<f64>,
    },
    /// Build a balanced initialization near the target with a verified
    /// deficiency margin.
    Init {
        /// Target JSON produced by `target`.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Scale of the random diagonal perturbation of Sigma(0).
        #[arg(long)]
        perturb_scale: Option<f64>,
    },
    /// Train by gradient descent or gradient flow; writes trajectory CSV
    /// and a final checkpoint.
    Train {
        #[arg(long)]
        target: Option<PathBuf>,
        /// Checkpoint JSON produced by `init` (or a previous `train`).
        #[arg(long)]
        params: Option<PathBuf>,
        /// `gd` or `flow`.
        #[arg(long)]
        mode: Option<String>,
        /// Flow horizon.
        #[arg(long)]
        t_end: Option<f64>,
        /// Gradient-descent iteration cap.
        #[arg(long)]
        iters: Option<usize>,
        /// Record a full sample every this many iterations/steps.
        #[arg(long)]
        record_every: Option<usize>,
        /// Early-stop loss threshold.
        #[arg(long)]
        target_loss: Option<f64>,
    },
    /// Empirical convergence-rate sweep over depths and spectra.
    SweepRate {
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated depths, e.g. `2,3,4,5`.
        #[arg(long)]
        depths: Option<String>,
        /// Comma-separated smallest eigenvalues.
        #[arg(long)]
        lambda_min_grid: Option<String>,
        #[arg(long)]
        t_end: Option<f64>,
        /// Inject a synthetic exponential instead of integrating (self-test).
        #[arg(long)]
        synthetic: bool,
    },
    /// Closed-form critical values for all rank-k index sets.
    Critical {
        #[arg(long)]
        target: Option<PathBuf>,
        /// Rank of the enumerated family.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Condition numbers of both parameter Hessians at low-rank saddles.
    HessianStudy {
        #[arg(long)]
        n: Option<usize>,
        /// Number of seeded targets to average over.
        #[arg(long)]
        seeds: Option<u64>,
        /// Number of decreasing-rank critical points.
        #[arg(long)]
        indices: Option<usize>,
    },
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn build_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    cfg.set_override("seed", cli.seed.map(|s| s.to_string()));
    cfg.set_override("out", path_str(&cli.out));
    cfg.set_override("tau", cli.tau.map(|t| t.to_string()));
    cfg.set_override("eta", cli.eta.clone());
    cfg.set_override("depth", cli.depth.map(|d| d.to_string()));
    match &cli.command {
        Command::Target { n, lambda_min } => {
            cfg.set_override("n", n.map(|v| v.to_string()));
            cfg.set_override("lambda_min", lambda_min.map(|v| v.to_string()));
        }
        Command::Init {
            target,
            perturb_scale,
        } => {
            cfg.set_override("target", path_str(target));
            cfg.set_override("perturb_scale", perturb_scale.map(|v| v.to_string()));
        }
        Command::Train {
            target,
            params,
            mode,
            t_end,
            iters,
            record_every,
            target_loss,
        } => {
            cfg.set_override("target", path_str(target));
            cfg.set_override("params", path_str(params));
            cfg.set_override("mode", mode.clone());
            cfg.set_override("t_end", t_end.map(|v| v.to_string()));
            cfg.set_override("iters", iters.map(|v| v.to_string()));
            cfg.set_override("record_every", record_every.map(|v| v.to_string()));
            cfg.set_override("target_loss", target_loss.map(|v| v.to_string()));
        }
        Command::SweepRate {
            n,
            depths,
            lambda_min_grid,
            t_end,
            synthetic,
        } => {
            cfg.set_override("n", n.map(|v| v.to_string()));
            cfg.set_override("depths", depths.clone());
            cfg.set_override("lambda_min_grid", lambda_min_grid.clone());
            cfg.set_override("t_end", t_end.map(|v| v.to_string()));
            if *synthetic {
                cfg.set_override("synthetic", Some("true".into()));
            }
        }
        Command::Critical { target, k } => {
            cfg.set_override("target", path_str(target));
            cfg.set_override("k", k.map(|v| v.to_string()));
        }
        Command::HessianStudy { n, seeds, indices } => {
            cfg.set_override("n", n.map(|v| v.to_string()));
            cfg.set_override("seeds", seeds.map(|v| v.to_string()));
            cfg.set_override("indices", indices.map(|v| v.to_string()));
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Target { .. } => commands::cmd_target(&cfg),
        Command::Init { .. } => commands::cmd_init(&cfg),
        Command::Train { .. } => commands::cmd_train(&cfg),
        Command::SweepRate { .. } => commands::cmd_sweep_rate(&cfg),
        Command::Critical { .. } => commands::cmd_critical(&cfg),
        Command::HessianStudy { .. } => commands::cmd_hessian_study(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

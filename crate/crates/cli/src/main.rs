//! `macformer`: approximation benchmarks, tail-bound checks, self-verification
//! and a forward-pass demo for random Maclaurin feature attention.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical or
//! property failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use macformer_core::model::NormPlacement;
use macformer_core::KernelId;

#[derive(Debug, Parser)]
#[command(
    name = "macformer",
    version,
    about = "Random Maclaurin feature attention experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Shared {
    /// Root seed; every random quantity is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (CSV for bench-approx, JSON otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Flat TOML file whose keys override the defaults. Flags override the file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Reduced sizes for a fast run.
    #[arg(long, global = true)]
    pub quick: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Error and speed grid over sequence lengths and feature dimensions.
    BenchApprox(BenchArgs),
    /// Empirical exceedance frequencies next to the concentration bound.
    TailCheck(TailArgs),
    /// Oracle-equivalence and unbiasedness suites.
    Verify(VerifyArgs),
    /// Forward pass of an encoder stack on random input.
    DemoForward(DemoArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub kernel: Option<KernelId>,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Comma-separated feature dimensions D.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Head dimension.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub sbn_epsilon: Option<f64>,
    /// Time feature sampling together with RMFA.
    #[arg(long)]
    pub include_sampling: bool,
    /// Smooth the printed table along the length axis (stored CSV stays raw).
    #[arg(long)]
    pub smooth: bool,
}

#[derive(Debug, Args)]
pub struct TailArgs {
    #[arg(long)]
    pub kernel: Option<KernelId>,
    /// Sequence length per trial.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Feature dimension.
    #[arg(long = "D")]
    pub feature_dim: Option<usize>,
    /// Bound on |V_ij|.
    #[arg(long = "L")]
    pub value_bound: Option<f64>,
    /// Comma-separated epsilon grid.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Double the linear Maclaurin coefficient of every kernel; the suites
    /// must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Number of tokens.
    #[arg(long, default_value_t = 128)]
    pub length: usize,
    #[arg(long)]
    pub kernel: Option<KernelId>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Residual wiring: post (default) or pre.
    #[arg(long, value_parser = parse_norm)]
    pub norm: Option<NormPlacement>,
    #[arg(long)]
    pub causal: bool,
}

fn parse_norm(s: &str) -> Result<NormPlacement, String> {
    match s {
        "post" => Ok(NormPlacement::Post),
        "pre" => Ok(NormPlacement::Pre),
        other => Err(format!(
            "unknown norm placement `{other}` (expected pre or post)"
        )),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let outcome = match cli.command {
        Command::BenchApprox(args) => commands::bench_approx(&cli.shared, args),
        Command::TailCheck(args) => commands::tail_check(&cli.shared, args),
        Command::Verify(args) => commands::verify(&cli.shared, args),
        Command::DemoForward(args) => commands::demo_forward(&cli.shared, args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("macformer: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

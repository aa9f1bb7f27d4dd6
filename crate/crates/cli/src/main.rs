//! `sigmaquant` — mixed-precision quantization planning from the command
//! line. Reads a TOML or JSON run config, resolves flag overrides, and
//! dispatches to the subcommands.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "sigmaquant",
    about = "Mixed-precision bitwidth planning with a shift-add cost model",
    version
)]
struct Cli {
    /// Run configuration (TOML or JSON; format detected from content)
    #[arg(long, global = true, default_value = "sigmaquant.toml")]
    config: PathBuf,

    /// Override the run seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the accuracy target (percent)
    #[arg(long, global = true, value_name = "PCT")]
    target_acc: Option<f64>,

    /// Override the size budget (bytes); selects the size metric
    #[arg(long, global = true, value_name = "BYTES")]
    target_size: Option<u64>,

    /// Override the BOPs budget; selects the BOPs metric
    #[arg(long, global = true, value_name = "BOPS")]
    target_bops: Option<u64>,

    /// Accuracy guard-band width (percentage points)
    #[arg(long, global = true, value_name = "PCT")]
    delta_a: Option<f64>,

    /// Metric guard-band width (bytes or BOPs, matching the metric)
    #[arg(long, global = true, value_name = "UNITS")]
    delta_m: Option<u64>,

    /// Cap on greedy refinement rounds
    #[arg(long = "imax", global = true, value_name = "ROUNDS")]
    i_max: Option<usize>,

    /// Output directory for artifacts
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the float baseline and save the model artifact
    Train,
    /// Write per-layer sigma and quantization-KL statistics
    Stats,
    /// Cluster layers by weight sigma and show candidate bitwidths
    Cluster {
        /// Cluster-size balance penalty
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
    },
    /// Run the two-phase bitwidth search; writes plan, trace, tuned model
    Plan,
    /// Apply the saved plan's weight grids and save the quantized model
    Quantize,
    /// Evaluate a model on the eval split, optionally under a plan
    Evaluate {
        /// Model artifact to evaluate (default: tuned, then trained)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Plan to apply during the forward pass
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Price a plan on the shift-add hardware cost model
    HwReport {
        /// Plan to price (default: the saved plan)
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Replay the saved trace and check it reproduces the saved plan
    VerifyTrace,
}

fn run(cli: &Cli) -> sigmaquant_core::Result<i32> {
    let overrides = Overrides {
        seed: cli.seed,
        target_acc: cli.target_acc,
        target_size: cli.target_size,
        target_bops: cli.target_bops,
        delta_a: cli.delta_a,
        delta_m: cli.delta_m,
        i_max: cli.i_max,
        out_dir: cli.out.clone(),
    };
    let cfg = RunConfig::load(&cli.config, &overrides)?;
    match &cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Stats => commands::cmd_stats(&cfg),
        Command::Cluster { lambda } => commands::cmd_cluster(&cfg, *lambda),
        Command::Plan => commands::cmd_plan(&cfg),
        Command::Quantize => commands::cmd_quantize(&cfg),
        Command::Evaluate { model, plan } => {
            commands::cmd_evaluate(&cfg, model.as_deref(), plan.as_deref())
        }
        Command::HwReport { plan } => commands::cmd_hw_report(&cfg, plan.as_deref()),
        Command::VerifyTrace => commands::cmd_verify_trace(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(u8::try_from(code).unwrap_or(1)),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

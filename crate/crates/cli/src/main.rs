use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use auction_rebates::diagnostics::{self, CheckOutcome};
use auction_rebates::io::{
    calibrate, resolve_output_dir, run_config_with, RunConfig, RunSummary, OUTPUT_ENV,
};
use auction_rebates::ModelParams;
use clap::{Args, Parser, Subcommand};

/// Batch-auction rebate laboratory.
#[derive(Parser)]
#[command(name = "rebate-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or sweep, if enabled in the config) and write all outputs.
    Run(RunArgs),
    /// Like `run` with the fee sweep forced on.
    Sweep(RunArgs),
    /// Estimate P0_star and sigma from a daily close-price CSV.
    Calibrate {
        price_csv: PathBuf,
        /// Length of one bar in model time units.
        #[arg(long, default_value_t = 1.0)]
        bar_interval: f64,
    },
    /// Run the numerical oracle checks.
    Verify {
        /// Smaller sample sizes, for a quick smoke check.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config, or a `manifest.json` from an earlier run.
    config: PathBuf,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `output_dir`, then $REBATE_LAB_OUT, then `out`).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Write the per-time series files.
    #[arg(long, overrides_with = "no_trajectories")]
    trajectories: bool,
    /// Skip the per-time series files.
    #[arg(long)]
    no_trajectories: bool,
}

fn run(args: RunArgs, force_sweep: bool) -> Result<RunSummary> {
    let mut cfg = RunConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if args.trajectories {
        cfg.emit_trajectories = true;
    }
    if args.no_trajectories {
        cfg.emit_trajectories = false;
    }
    if force_sweep {
        cfg.sweep.enabled = true;
    }
    let env = std::env::var(OUTPUT_ENV).ok();
    let dir = resolve_output_dir(
        args.output.as_deref(),
        cfg.output_dir.as_deref(),
        env.as_deref(),
    );
    cfg.output_dir = Some(dir.clone());
    let summary = run_config_with(&cfg, &dir, |msg| eprintln!("{msg}"))?;
    print_summary(&summary);
    Ok(summary)
}

fn print_summary(s: &RunSummary) {
    if let Some(sw) = &s.sweep {
        println!("fee sweep:");
        for pt in &sw.points {
            match pt.rho() {
                Some(r) => println!("  d = {:<5} rho = {:.3} +- {:.3}", pt.d, r.mean, r.se),
                None => println!("  d = {:<5} failed", pt.d),
            }
        }
        println!("d_hat = {} (interior: {})", s.d, sw.interior);
    }
    let (a, b) = (&s.no_incentive, &s.with_incentive);
    println!(
        "spread_sq: no incentive {:.3} +- {:.3}, with incentive (d = {}) {:.3} +- {:.3}",
        a.spread_sq.mean, a.spread_sq.se, s.d, b.spread_sq.mean, b.spread_sq.se
    );
    println!("outputs in {}", s.output_dir.display());
}

fn verify(quick: bool, seed: u64) -> Result<bool> {
    let apple = ModelParams::apple();
    let short = diagnostics::short_horizon(&apple);
    let (n, n_br, m) = if quick {
        (1_000, 10, 5_000)
    } else {
        (10_000, 100, 100_000)
    };
    let checks: Vec<CheckOutcome> = vec![
        diagnostics::clearing_price_oracle(n, seed),
        diagnostics::best_response_oracle(n_br, seed, &apple),
        diagnostics::gamma_oracle(n, seed),
        diagnostics::martingale_check(&short, m, seed)?,
        diagnostics::incentive_check(&short, m, seed)?,
        diagnostics::gradient_check(&short, 4, 100, 1e-5, seed)?,
    ];
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {}: {}", c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args, false).map(|_| true),
        Command::Sweep(args) => run(args, true).map(|_| true),
        Command::Calibrate {
            price_csv,
            bar_interval,
        } => calibrate(&price_csv, bar_interval)
            .map(|c| {
                println!("P0_star = {}", c.p0_star);
                println!("sigma = {}", c.sigma);
                eprintln!("({} rows, bar interval {bar_interval})", c.rows);
                true
            })
            .map_err(Into::into),
        Command::Verify { quick, seed } => verify(quick, seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

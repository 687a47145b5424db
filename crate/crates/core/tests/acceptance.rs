//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run everything with `cargo test --release --test acceptance`, or a subset
//! with e.g. `cargo test --release --test acceptance -- 1 3 5`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use auction_rebates::diagnostics::{self, CheckOutcome};
use auction_rebates::io::{run_config, RunConfig, SweepConfig};
use auction_rebates::policy::{train, TrainConfig};
use auction_rebates::search::{baseline_comparison, fee_grid, sweep_fee, SweepResult};
use auction_rebates::ModelParams;

const SEED: u64 = 20231229;

struct Verdict {
    passed: bool,
    detail: String,
}

fn check(c: CheckOutcome) -> Verdict {
    Verdict {
        passed: c.passed,
        detail: c.detail,
    }
}

fn within(mut v: Verdict, elapsed: Duration, limit: Duration) -> Verdict {
    v.detail = format!(
        "{} [{:.1}s, limit {}s]",
        v.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    v.passed &= elapsed <= limit;
    v
}

fn timed(limit_secs: u64, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let v = f();
    within(v, start.elapsed(), Duration::from_secs(limit_secs))
}

fn clearing_price() -> Verdict {
    timed(2, || {
        check(diagnostics::clearing_price_oracle(10_000, SEED))
    })
}

fn best_response() -> Verdict {
    timed(60, || {
        check(diagnostics::best_response_oracle(
            100,
            SEED,
            &ModelParams::apple(),
        ))
    })
}

fn gamma_root() -> Verdict {
    check(diagnostics::gamma_oracle(10_000, SEED))
}

fn martingale() -> Verdict {
    timed(300, || {
        let short = diagnostics::short_horizon(&ModelParams::apple());
        let a = diagnostics::martingale_check(&short, 100_000, SEED).expect("simulation");
        let b = diagnostics::incentive_check(&short, 100_000, SEED).expect("simulation");
        Verdict {
            passed: a.passed && b.passed,
            detail: format!("{}; {}", a.detail, b.detail),
        }
    })
}

fn gradient() -> Verdict {
    let short = diagnostics::short_horizon(&ModelParams::apple());
    check(diagnostics::gradient_check(&short, 4, 100, 1e-5, SEED).expect("gradient"))
}

fn training_progress() -> Verdict {
    timed(1800, || {
        let cfg = TrainConfig::default();
        let out = train(&ModelParams::apple(), &cfg).expect("training");
        let losses: Vec<f64> = out.history.iter().map(|s| s.loss).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (first, last) = (mean(&losses[..50]), mean(&losses[losses.len() - 50..]));
        Verdict {
            passed: last < first,
            detail: format!(
                "{} iterations, M = {}, lr = {}: mean loss first 50 = {first:.2}, last 50 = {last:.2}",
                cfg.iterations, cfg.batch_size, cfg.learning_rate
            ),
        }
    })
}

/// Sweep shared by criteria 7 and 8: every grid point trained for 50
/// iterations on 128 paths, evaluated on 512 fresh paths.
fn fee_sweep() -> (ModelParams, SweepResult) {
    let params = ModelParams::apple();
    let cfg = TrainConfig {
        iterations: 50,
        batch_size: 128,
        ..TrainConfig::default()
    };
    let result = sweep_fee(
        &fee_grid(0.0, 6.0, 1.0),
        &cfg,
        512,
        params.rng_seed,
        &params,
    )
    .expect("sweep");
    (params, result)
}

fn sweep_shape(sweep: &(ModelParams, SweepResult)) -> Verdict {
    let r = &sweep.1;
    let curve: Vec<String> = r
        .points
        .iter()
        .map(|p| match p.rho() {
            Some(x) => format!("{}: {:.1} +- {:.1}", p.d, x.mean, x.se),
            None => format!("{}: failed", p.d),
        })
        .collect();
    Verdict {
        passed: r.interior && r.d_hat.is_some_and(|d| r.grid.contains(&d)),
        detail: format!(
            "d_hat = {:?}, interior = {}; rho(d) = [{}]",
            r.d_hat,
            r.interior,
            curve.join(", ")
        ),
    }
}

fn efficiency(sweep: &(ModelParams, SweepResult)) -> Verdict {
    let (params, r) = sweep;
    let Some(i) = r.d_hat_index else {
        return Verdict {
            passed: false,
            detail: "no trained policy".into(),
        };
    };
    let net = r.points[i]
        .net
        .as_ref()
        .expect("trained point keeps its network");
    let (base, with) =
        baseline_comparison(params, net, r.points[i].d, 256, params.rng_seed).expect("evaluation");
    let ratio = with.spread_sq.mean / base.spread_sq.mean;
    Verdict {
        passed: ratio <= 0.9,
        detail: format!(
            "m = 256: no incentive {:.2} +- {:.2}, with incentive (d = {}) {:.2} +- {:.2}, ratio {ratio:.3}",
            base.spread_sq.mean,
            base.spread_sq.se,
            r.points[i].d,
            with.spread_sq.mean,
            with.spread_sq.se
        ),
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let cfg = RunConfig {
        model: diagnostics::short_horizon(&ModelParams::apple()),
        train: TrainConfig {
            iterations: 3,
            batch_size: 16,
            ..TrainConfig::default()
        },
        sweep: SweepConfig {
            enabled: true,
            grid: vec![0.0, 1.0, 2.0],
        },
        evaluation: auction_rebates::io::EvaluationConfig { paths: 32 },
        emit_trajectories: true,
        ..RunConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_config(&cfg, a.path()).expect("first run");
    run_config(&cfg, b.path()).expect("second run");
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let csv: Vec<&String> = ta.keys().filter(|k| k.ends_with(".csv")).collect();
    let differing: Vec<&String> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    Verdict {
        passed: ta.len() == tb.len() && differing.is_empty() && csv.len() >= 8,
        detail: format!(
            "{} files ({} CSV) compared, differing: {:?}",
            ta.len(),
            csv.len(),
            differing
        ),
    }
}

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let names = [
        "clearing-price oracle",
        "best-response oracle",
        "gamma root",
        "martingale / contract consistency",
        "gradient check",
        "training progress",
        "fee sweep shape",
        "efficiency improvement",
        "determinism",
    ];
    let mut sweep = None;
    let mut failed = Vec::new();
    for k in 1..=9u32 {
        if !run(k) {
            continue;
        }
        let v = match k {
            1 => clearing_price(),
            2 => best_response(),
            3 => gamma_root(),
            4 => martingale(),
            5 => gradient(),
            6 => training_progress(),
            7 => sweep_shape(sweep.get_or_insert_with(fee_sweep)),
            8 => efficiency(sweep.get_or_insert_with(fee_sweep)),
            _ => determinism(),
        };
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {k} ({}): {tag} - {}",
            names[k as usize - 1],
            v.detail
        );
        if !v.passed {
            failed.push(k);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

//! Grid search over the flat fee `d` and the no-incentive comparison.

use serde::{Deserialize, Serialize};

use crate::contract::{exchange_objective, no_rebate_report, RebateReport};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::policy::train::EVAL_STREAM_BASE;
use crate::policy::{train, IterationStats, PolicyNetwork, TrainConfig};
use crate::sim::{
    simulate_batch_with, ContractPolicy, PathBatch, SimMode, SimOptions, ZeroContract,
};
use crate::stats::MeanSe;

/// One evaluated fee level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub d: f64,
    pub report: Option<RebateReport>,
    /// Some maker's estimated value fell below its reservation level.
    pub penalty_active: bool,
    /// Training diverged; no report.
    pub failed: bool,
    pub error: Option<String>,
    pub final_loss: Option<f64>,
    pub history: Vec<IterationStats>,
    #[serde(skip)]
    pub net: Option<PolicyNetwork>,
}

impl SweepPoint {
    pub fn rho(&self) -> Option<MeanSe> {
        self.report.map(|r| r.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
    /// Grid value with the smallest estimated `rho`, among non-failed points.
    pub d_hat: Option<f64>,
    pub d_hat_index: Option<usize>,
    /// `d_hat` is neither the first nor the last grid value.
    pub interior: bool,
    /// `d = 0`, no contract, on the same evaluation numbers.
    pub baseline: RebateReport,
}

/// Simulates `m` evaluation paths under `policy` and reports the exchange
/// objective at `params.d`.
pub fn evaluate_policy<P: ContractPolicy + ?Sized>(
    policy: &P,
    params: &ModelParams,
    m: usize,
    seed: u64,
    record_trajectories: bool,
) -> Result<(RebateReport, PathBatch)> {
    let batch = simulate_batch_with(
        policy,
        params,
        m,
        seed,
        SimOptions {
            mode: SimMode::Fallback,
            record_trajectories,
            stream: EVAL_STREAM_BASE,
        },
    )?;
    Ok((exchange_objective(&batch, params.d, params), batch))
}

/// Benchmark without incentives: `d = 0`, `Z = 0`, zero spreads wherever no
/// equilibrium exists, no rebate paid.
pub fn baseline_report(
    params: &ModelParams,
    m: usize,
    seed: u64,
) -> Result<(RebateReport, PathBatch)> {
    let p0 = params.with_fee(0.0);
    let batch = simulate_batch_with(
        &ZeroContract,
        &p0,
        m,
        seed,
        SimOptions {
            mode: SimMode::Fallback,
            record_trajectories: false,
            stream: EVAL_STREAM_BASE,
        },
    )?;
    Ok((no_rebate_report(&batch, 0.0, &p0), batch))
}

/// `(no-incentive report, trained-policy report at d_hat)` on common random
/// numbers.
pub fn baseline_comparison(
    params: &ModelParams,
    net: &PolicyNetwork,
    d_hat: f64,
    m: usize,
    seed: u64,
) -> Result<(RebateReport, RebateReport)> {
    let (base, _) = baseline_report(params, m, seed)?;
    let (with, _) = evaluate_policy(net, &params.with_fee(d_hat), m, seed, false)?;
    Ok((base, with))
}

/// Trains a policy per grid value, each from the same initial weights and
/// training batches (`train_config.seed`), and evaluates it on a fresh batch
/// of `eval_batch` paths drawn from `seed` on the evaluation streams.
pub fn sweep_fee(
    grid: &[f64],
    train_config: &TrainConfig,
    eval_batch: usize,
    seed: u64,
    params: &ModelParams,
) -> Result<SweepResult> {
    sweep_fee_with(grid, train_config, eval_batch, seed, params, |_, _| {})
}

/// [`sweep_fee`] with a callback after each grid point.
pub fn sweep_fee_with(
    grid: &[f64],
    train_config: &TrainConfig,
    eval_batch: usize,
    seed: u64,
    params: &ModelParams,
    mut on_point: impl FnMut(usize, &SweepPoint),
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidParams {
            field: "grid",
            reason: "fee grid is empty".into(),
        });
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::InvalidParams {
            field: "grid",
            reason: "fee grid must be non-negative and strictly increasing".into(),
        });
    }
    if eval_batch < train_config.batch_size.max(1) {
        return Err(Error::InvalidParams {
            field: "eval_batch",
            reason: format!(
                "evaluation batch {eval_batch} must be at least the training batch {}",
                train_config.batch_size
            ),
        });
    }
    let mut points = Vec::with_capacity(grid.len());
    for (i, &d) in grid.iter().enumerate() {
        let p = params.with_fee(d);
        let point = match train(&p, train_config) {
            Ok(out) => {
                let (report, _) = evaluate_policy(&out.net, &p, eval_batch, seed, false)?;
                SweepPoint {
                    d,
                    penalty_active: report.v0_p.mean < p.r0_p || report.v0_q.mean < p.r0_q,
                    report: Some(report),
                    failed: false,
                    error: None,
                    final_loss: out.history.last().map(|s| s.loss),
                    history: out.history,
                    net: Some(out.net),
                }
            }
            Err(e @ Error::TrainingDiverged { .. }) => SweepPoint {
                d,
                report: None,
                penalty_active: false,
                failed: true,
                error: Some(e.to_string()),
                final_loss: None,
                history: Vec::new(),
                net: None,
            },
            Err(e) => return Err(e),
        };
        on_point(i, &point);
        points.push(point);
    }
    let best = points
        .iter()
        .enumerate()
        .filter_map(|(i, pt)| pt.rho().map(|r| (i, r.mean)))
        .fold(None, |acc: Option<(usize, f64)>, (i, r)| match acc {
            Some((_, best)) if best <= r => acc,
            _ => Some((i, r)),
        });
    let (baseline, _) = baseline_report(params, eval_batch, seed)?;
    Ok(SweepResult {
        grid: grid.to_vec(),
        d_hat: best.map(|(i, _)| grid[i]),
        d_hat_index: best.map(|(i, _)| i),
        interior: best.is_some_and(|(i, _)| i > 0 && i + 1 < grid.len()),
        points,
        baseline,
    })
}

/// `start, start + step, ...` up to `end` inclusive (within rounding).
pub fn fee_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| start + k as f64 * step).collect()
}

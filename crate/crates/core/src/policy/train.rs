//! Loss, batch gradients and the training loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{JumpKind, Maker};
use crate::params::ModelParams;
use crate::policy::adam::Adam;
use crate::policy::network::{FeatureScaling, PolicyNetwork, N_PARAMS};
use crate::policy::pathwise::{path_gradient, TerminalSeed};
use crate::sim::{path_rng, run_path, JumpSource, SimMode, TapeStep, TerminalRecord};

/// Stream id of training iteration `k` is `TRAIN_STREAM_BASE + k`.
pub const TRAIN_STREAM_BASE: u32 = 1;
/// Evaluation batches use streams from here upwards.
pub const EVAL_STREAM_BASE: u32 = 0x8000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Seeds weight initialisation and every training batch.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Added to the loss per unit fraction of paths with a failed step.
    pub failure_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            iterations: 200,
            batch_size: 256,
            seed: 20231229,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            failure_penalty: 1000.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidParams {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam moment decays must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be > 0");
        }
        if !(self.failure_penalty >= 0.0 && self.failure_penalty.is_finite()) {
            return bad("failure_penalty", "must be finite and >= 0");
        }
        Ok(())
    }
}

/// Components of the batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `mean(|P^cl - P*|^2 + Y^p + Y^q - d (x1 + x2))`.
    pub rho_term: f64,
    /// `epsilon * max(-mean(g^i + Y^i - penalty^i), 0)` per maker.
    pub participation: [f64; 2],
    pub active: [bool; 2],
    pub failed_fraction: f64,
    pub failure_term: f64,
}

fn path_rho(t: &TerminalRecord, d: f64) -> f64 {
    t.spread_sq() + t.y_p + t.y_q - d * (t.x1 + t.x2)
}

pub fn loss_breakdown(
    terminals: &[TerminalRecord],
    d: f64,
    params: &ModelParams,
    failure_penalty: f64,
) -> LossBreakdown {
    let m = terminals.len().max(1) as f64;
    let rho_term = terminals.iter().map(|t| path_rho(t, d)).sum::<f64>() / m;
    let mut participation = [0.0; 2];
    let mut active = [false; 2];
    for (i, maker) in Maker::BOTH.into_iter().enumerate() {
        let value = terminals
            .iter()
            .map(|t| {
                let (g, y, pen) = t.maker_terms(maker);
                g + y - pen
            })
            .sum::<f64>()
            / m;
        active[i] = value < 0.0;
        participation[i] = params.epsilon * (-value).max(0.0);
    }
    let failed = terminals.iter().filter(|t| t.failed_steps > 0).count() as f64 / m;
    let failure_term = failure_penalty * failed;
    LossBreakdown {
        total: rho_term + participation[0] + participation[1] + failure_term,
        rho_term,
        participation,
        active,
        failed_fraction: failed,
        failure_term,
    }
}

/// Batch loss without the failure term.
pub fn loss(terminals: &[TerminalRecord], d: f64, params: &ModelParams) -> f64 {
    loss_breakdown(terminals, d, params, 0.0).total
}

/// Jump sequences of a batch, one per path, for replaying it.
pub type JumpRecord = Vec<Vec<Option<JumpKind>>>;

fn source<'a>(replay: Option<&'a JumpRecord>, i: usize) -> JumpSource<'a> {
    match replay {
        Some(r) => JumpSource::Replay(&r[i]),
        None => JumpSource::Draw,
    }
}

fn forward_batch(
    net: &PolicyNetwork,
    params: &ModelParams,
    m: usize,
    seed: u64,
    stream: u32,
    replay: Option<&JumpRecord>,
) -> Result<Vec<TerminalRecord>> {
    params.validate()?;
    (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, stream, i);
            run_path(
                net,
                params,
                SimMode::Fallback,
                &mut rng,
                source(replay, i),
                None,
                false,
            )
            .map(|r| r.terminal)
            .map_err(|(step, e)| e.into_error(i, step))
        })
        .collect()
}

/// Loss of the batch `(seed, stream)` under `net`, optionally with the jumps
/// of an earlier run forced.
pub fn batch_loss(
    net: &PolicyNetwork,
    params: &ModelParams,
    m: usize,
    seed: u64,
    stream: u32,
    failure_penalty: f64,
    replay: Option<&JumpRecord>,
) -> Result<LossBreakdown> {
    let terminals = forward_batch(net, params, m, seed, stream, replay)?;
    Ok(loss_breakdown(
        &terminals,
        params.d,
        params,
        failure_penalty,
    ))
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
    pub jumps: JumpRecord,
}

/// Loss and its pathwise gradient on the batch `(seed, stream)`.
///
/// A first pass fixes which participation penalties are active; a second
/// pass re-simulates every path with a tape and runs it backwards.
pub fn batch_gradient(
    net: &PolicyNetwork,
    params: &ModelParams,
    m: usize,
    seed: u64,
    stream: u32,
    failure_penalty: f64,
    replay: Option<&JumpRecord>,
) -> Result<GradientResult> {
    let terminals = forward_batch(net, params, m, seed, stream, replay)?;
    let loss = loss_breakdown(&terminals, params.d, params, failure_penalty);
    let inv_m = 1.0 / m as f64;
    let ic = [0, 1].map(|i| {
        if loss.active[i] {
            -params.epsilon * inv_m
        } else {
            0.0
        }
    });
    let seed_weights = TerminalSeed { rho: inv_m, ic };
    let per_path: Vec<(Vec<f64>, Vec<Option<JumpKind>>)> = (0..m)
        .into_par_iter()
        .map_init(Vec::<TapeStep>::new, |tape, i| {
            let mut rng = path_rng(seed, stream, i);
            let run = run_path(
                net,
                params,
                SimMode::Fallback,
                &mut rng,
                source(replay, i),
                Some(tape),
                false,
            )
            .map_err(|(step, e)| e.into_error(i, step))
            .expect("path succeeded in the first pass");
            let mut g = vec![0.0; N_PARAMS];
            path_gradient(
                net,
                params,
                SimMode::Fallback,
                tape,
                &run.final_state,
                seed_weights,
                &mut g,
            );
            (g, tape.iter().map(|s| s.jump).collect())
        })
        .collect();
    let mut grad = vec![0.0; N_PARAMS];
    let mut jumps = Vec::with_capacity(m);
    for (g, j) in per_path {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
        jumps.push(j);
    }
    Ok(GradientResult { loss, grad, jumps })
}

/// Per-iteration training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub loss: f64,
    pub rho_term: f64,
    pub failed_fraction: f64,
    pub participation_active: [bool; 2],
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: PolicyNetwork,
    pub history: Vec<IterationStats>,
}

pub fn initial_network(params: &ModelParams, config: &TrainConfig) -> PolicyNetwork {
    PolicyNetwork::init(config.seed, FeatureScaling::from_params(params))
}

pub fn train(params: &ModelParams, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(params, config, |_| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_with(
    params: &ModelParams,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(&IterationStats),
) -> Result<TrainOutcome> {
    params.validate()?;
    config.validate()?;
    let mut net = initial_network(params, config);
    let mut opt = Adam::new(
        N_PARAMS,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let stream = TRAIN_STREAM_BASE + iteration as u32;
        let res = batch_gradient(
            &net,
            params,
            config.batch_size,
            config.seed,
            stream,
            config.failure_penalty,
            None,
        )?;
        let grad_norm = res.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !res.loss.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration,
                loss: res.loss.total,
            });
        }
        opt.step(&mut net.theta, &res.grad);
        let stats = IterationStats {
            iteration,
            loss: res.loss.total,
            rho_term: res.loss.rho_term,
            failed_fraction: res.loss.failed_fraction,
            participation_active: res.loss.active,
            grad_norm,
        };
        on_iteration(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { net, history })
}

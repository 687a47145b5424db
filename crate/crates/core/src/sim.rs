//! Euler simulation of the controlled market.
//!
//! Each policy step of length `T / n_steps` holds one contract `Z` and is
//! resolved into `substeps` fine steps. Every fine step draws, in this order:
//! three standard normals `(xi0, xip, xiq)` driving `(P*, P^p, P^q)`, one
//! uniform selecting at most one jump among the four processes, and two
//! uniforms `(A, B)` deciding whether the next buy / sell order survives
//! cancellation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contract::{
    all_increments, generator_from_parts, jump_rates, y_increment, Increments, ZMatrix,
};
use crate::equilibrium::{fallback_from_increments, nash_from_increments, ControlPair};
use crate::error::{EquilibriumError, Error, Result};
use crate::model::{cancellation_survival, clearing_price, payoff_g, JumpKind, Maker, MarketState};
use crate::params::ModelParams;

/// Supplies the contract sensitivities at the start of each policy step.
pub trait ContractPolicy: Sync {
    fn z(&self, t: f64, state: &MarketState, y: [f64; 2]) -> ZMatrix;
}

/// `Z = 0`: no incentive at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroContract;

impl ContractPolicy for ZeroContract {
    fn z(&self, _t: f64, _state: &MarketState, _y: [f64; 2]) -> ZMatrix {
        ZMatrix::zero()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantContract(pub ZMatrix);

impl ContractPolicy for ConstantContract {
    fn z(&self, _t: f64, _state: &MarketState, _y: [f64; 2]) -> ZMatrix {
        self.0
    }
}

/// How controls are chosen and what happens when that fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Nash controls; a missing equilibrium or an overfull step is an error.
    #[default]
    Strict,
    /// Nash controls; zero spreads when no equilibrium exists and rates
    /// rescaled when a step would be overfull. Both are counted per path.
    Fallback,
    /// Zero spreads and `lambda^p = lambda^q = lambda0` regardless of `Z`.
    ForcedAnchor,
}

/// Random inputs of one fine step, in draw order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRandomness {
    /// Standard normals for `P*`, `P^p`, `P^q`.
    pub normals: [f64; 3],
    /// Uniform selecting the jump (if any).
    pub jump: f64,
    /// Cancellation marks for the next buy and sell order.
    pub cancel: [f64; 2],
}

impl StepRandomness {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let normals = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let jump = rng.random::<f64>();
        let cancel = [rng.random::<f64>(), rng.random::<f64>()];
        Self {
            normals,
            jump,
            cancel,
        }
    }
}

/// Failure inside a single fine step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepError {
    Equilibrium(EquilibriumError),
    TooCoarse(f64),
}

impl StepError {
    pub(crate) fn into_error(self, path: usize, step: usize) -> Error {
        match self {
            StepError::Equilibrium(source) => Error::EquilibriumNotFound { path, step, source },
            StepError::TooCoarse(total) => Error::StepTooCoarse { path, step, total },
        }
    }
}

/// Everything evaluated at the left endpoint of a fine step.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepEval {
    pub inc: Increments,
    /// Controls with `lam_p`, `lam_q` replaced by the simulated rates.
    pub controls: ControlPair,
    /// Simulated `(lambda^a, lambda^b, lambda^p, lambda^q)`.
    pub rates: [f64; 4],
    /// Sum of the unscaled rates times `dt` when above 1, else 1.
    pub scale: f64,
    pub f: [f64; 2],
}

impl StepEval {
    pub fn rescaled(&self) -> bool {
        self.scale > 1.0
    }
}

pub(crate) fn evaluate_step(
    state: &MarketState,
    z: &ZMatrix,
    params: &ModelParams,
    mode: SimMode,
    dt: f64,
) -> std::result::Result<StepEval, StepError> {
    let inc = all_increments(state, params);
    let mut controls = match mode {
        SimMode::ForcedAnchor => ControlPair::anchor(params),
        SimMode::Strict => nash_from_increments(&inc, z, params).map_err(StepError::Equilibrium)?,
        SimMode::Fallback => nash_from_increments(&inc, z, params)
            .unwrap_or_else(|_| fallback_from_increments(&inc, z, params)),
    };
    let mut rates = jump_rates(&controls, params.d, params);
    let total: f64 = rates.iter().sum::<f64>() * dt;
    let mut scale = 1.0;
    if total > 1.0 {
        if mode == SimMode::Strict || !total.is_finite() {
            return Err(StepError::TooCoarse(total));
        }
        scale = total;
        for r in &mut rates {
            *r /= total;
        }
    }
    controls.lam_p = rates[2];
    controls.lam_q = rates[3];
    let mut f = [0.0; 2];
    for (i, maker) in Maker::BOTH.into_iter().enumerate() {
        f[i] = generator_from_parts(maker, &inc[i], z.row(maker), &rates, &controls, params);
    }
    Ok(StepEval {
        inc,
        controls,
        rates,
        scale,
        f,
    })
}

/// Sets the sizes of the next candidate investor orders from the marks.
pub(crate) fn mark_orders(state: &mut MarketState, cancel: [f64; 2], params: &ModelParams) {
    let survival = cancellation_survival(params.horizon - state.t);
    state.next_buy = if cancel[0] <= survival {
        params.v_a
    } else {
        0.0
    };
    state.next_sell = if cancel[1] <= survival {
        params.v_b
    } else {
        0.0
    };
}

pub(crate) fn select_jump(u: f64, rates: &[f64; 4], dt: f64) -> Option<JumpKind> {
    let mut acc = 0.0;
    for kind in JumpKind::ALL {
        acc += rates[kind.index()] * dt;
        if u < acc {
            return Some(kind);
        }
    }
    None
}

pub(crate) fn brownian(rnd: &StepRandomness, dt: f64) -> [f64; 3] {
    let s = dt.sqrt();
    rnd.normals.map(|xi| s * xi)
}

/// State and Y at the right endpoint of a fine step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance(
    state: &MarketState,
    y: [f64; 2],
    z: &ZMatrix,
    eval: &StepEval,
    rnd: &StepRandomness,
    jump: Option<JumpKind>,
    dt: f64,
    params: &ModelParams,
) -> (MarketState, [f64; 2]) {
    let db = brownian(rnd, dt);
    let mut y_next = y;
    for (i, maker) in Maker::BOTH.into_iter().enumerate() {
        y_next[i] += y_increment(
            z.row(maker),
            &eval.controls,
            jump,
            db,
            eval.f[i],
            dt,
            params,
        );
    }
    let mut s = match jump {
        Some(kind) => state.apply_jump(kind),
        None => *state,
    };
    s.efficient_price += params.sigma * db[0];
    s.p_quote += eval.controls.mu_p * dt + params.sigma * db[1];
    s.q_quote += eval.controls.mu_q * dt + params.sigma * db[2];
    s.t += dt;
    (s, y_next)
}

/// Result of [`simulate_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: MarketState,
    pub y: [f64; 2],
    pub z: ZMatrix,
    pub controls: ControlPair,
    pub rates: [f64; 4],
    pub f: [f64; 2],
    pub jump: Option<JumpKind>,
    /// `(lambda^i - lambda0)^2 / 2 * dt` for both makers.
    pub penalty: [f64; 2],
    pub rescaled: bool,
}

/// One fine step of length `params.dt_fine()`: query the policy, mark the
/// next investor orders, solve for controls, draw a jump and move prices and
/// `Y` with the same realisations.
pub fn simulate_step<P: ContractPolicy + ?Sized>(
    state: &MarketState,
    y: [f64; 2],
    policy: &P,
    params: &ModelParams,
    mode: SimMode,
    rnd: &StepRandomness,
) -> std::result::Result<StepOutcome, StepError> {
    let dt = params.dt_fine();
    let z = policy.z(state.t, state, y);
    let mut s = *state;
    mark_orders(&mut s, rnd.cancel, params);
    let eval = evaluate_step(&s, &z, params, mode, dt)?;
    let jump = select_jump(rnd.jump, &eval.rates, dt);
    let (next, y_next) = advance(&s, y, &z, &eval, rnd, jump, dt, params);
    Ok(StepOutcome {
        state: next,
        y: y_next,
        z,
        controls: eval.controls,
        rates: eval.rates,
        f: eval.f,
        jump,
        penalty: penalty_increment(&eval, dt, params),
        rescaled: eval.rescaled(),
    })
}

fn penalty_increment(eval: &StepEval, dt: f64, params: &ModelParams) -> [f64; 2] {
    [eval.rates[2], eval.rates[3]].map(|l| 0.5 * (l - params.lambda0).powi(2) * dt)
}

/// Terminal summary of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub clearing_price: f64,
    pub efficient_price: f64,
    pub x1: f64,
    pub x2: f64,
    pub p_notional: f64,
    pub p_orders: u32,
    pub q_notional: f64,
    pub q_orders: u32,
    pub y_p: f64,
    pub y_q: f64,
    pub g_p: f64,
    pub g_q: f64,
    pub penalty_p: f64,
    pub penalty_q: f64,
    /// `int F^i dt` along the path.
    pub int_f_p: f64,
    pub int_f_q: f64,
    /// Fine steps with an equilibrium fallback or rescaled rates.
    pub failed_steps: u32,
    /// Fine steps where any control sat on a bound.
    pub clipped_steps: u32,
}

impl TerminalRecord {
    pub fn spread_sq(&self) -> f64 {
        (self.clearing_price - self.efficient_price).powi(2)
    }

    /// `(g^i, Y^i_T, penalty^i)`.
    pub fn maker_terms(&self, maker: Maker) -> (f64, f64, f64) {
        match maker {
            Maker::P => (self.g_p, self.y_p, self.penalty_p),
            Maker::Q => (self.g_q, self.y_q, self.penalty_q),
        }
    }

    fn from_state(
        state: &MarketState,
        acc: &PathAccumulators,
        y: [f64; 2],
        params: &ModelParams,
    ) -> Self {
        Self {
            clearing_price: clearing_price(state, params),
            efficient_price: state.efficient_price,
            x1: state.buy_volume,
            x2: state.sell_volume,
            p_notional: state.p_notional,
            p_orders: state.p_orders,
            q_notional: state.q_notional,
            q_orders: state.q_orders,
            y_p: y[0],
            y_q: y[1],
            g_p: payoff_g(Maker::P, state, params),
            g_q: payoff_g(Maker::Q, state, params),
            penalty_p: acc.penalty[0],
            penalty_q: acc.penalty[1],
            int_f_p: acc.int_f[0],
            int_f_q: acc.int_f[1],
            failed_steps: acc.failed,
            clipped_steps: acc.clipped,
        }
    }
}

/// Path quantities at the start of one policy step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub z: ZMatrix,
    pub mu_p: f64,
    pub mu_q: f64,
    pub lam_p: f64,
    pub lam_q: f64,
    pub lam_a: f64,
    pub lam_b: f64,
    pub f_p: f64,
    pub f_q: f64,
    pub y_p: f64,
    pub y_q: f64,
    pub int_f_p: f64,
    pub int_f_q: f64,
}

/// `n_steps + 1` points, one per policy step plus the terminal time.
pub type Trajectory = Vec<TrajectoryPoint>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBatch {
    pub m: usize,
    pub terminals: Vec<TerminalRecord>,
    pub trajectories: Option<Vec<Trajectory>>,
}

impl PathBatch {
    pub fn failed_paths(&self) -> usize {
        self.terminals.iter().filter(|t| t.failed_steps > 0).count()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PathAccumulators {
    penalty: [f64; 2],
    int_f: [f64; 2],
    failed: u32,
    clipped: u32,
}

/// Where jump realisations come from.
#[derive(Debug, Clone, Copy)]
pub(crate) enum JumpSource<'a> {
    Draw,
    /// Jumps of an earlier run, one entry per fine step. The jump uniform is
    /// still drawn so the stream stays aligned.
    Replay(&'a [Option<JumpKind>]),
}

/// Pre-step record of one fine step, enough to recompute it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TapeStep {
    /// State at the left endpoint with next-order sizes already marked.
    pub state: MarketState,
    pub y: [f64; 2],
    pub normals: [f64; 3],
    pub jump: Option<JumpKind>,
}

pub(crate) struct PathRun {
    pub terminal: TerminalRecord,
    pub trajectory: Option<Trajectory>,
    pub final_state: MarketState,
}

/// Substream of one path: ChaCha8 keyed by `seed`, stream id
/// `(stream << 32) | path_index`.
pub fn path_rng(seed: u64, stream: u32, path_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | (path_index as u64 & 0xffff_ffff));
    rng
}

fn trajectory_point(
    t: f64,
    z: &ZMatrix,
    eval: &StepEval,
    y: [f64; 2],
    acc: &PathAccumulators,
) -> TrajectoryPoint {
    TrajectoryPoint {
        t,
        z: *z,
        mu_p: eval.controls.mu_p,
        mu_q: eval.controls.mu_q,
        lam_p: eval.rates[2],
        lam_q: eval.rates[3],
        lam_a: eval.rates[0],
        lam_b: eval.rates[1],
        f_p: eval.f[0],
        f_q: eval.f[1],
        y_p: y[0],
        y_q: y[1],
        int_f_p: acc.int_f[0],
        int_f_q: acc.int_f[1],
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_path<P: ContractPolicy + ?Sized>(
    policy: &P,
    params: &ModelParams,
    mode: SimMode,
    rng: &mut ChaCha8Rng,
    jumps: JumpSource<'_>,
    mut tape: Option<&mut Vec<TapeStep>>,
    record: bool,
) -> std::result::Result<PathRun, (usize, StepError)> {
    let dt = params.dt_fine();
    let mut state = MarketState::initial(params);
    let mut y = [0.0; 2];
    let mut acc = PathAccumulators::default();
    let mut trajectory = record.then(|| Vec::with_capacity(params.n_steps + 1));
    if let Some(t) = tape.as_deref_mut() {
        t.clear();
        t.reserve(params.total_fine_steps());
    }
    let mut step = 0usize;
    for k in 0..params.n_steps {
        state.t = step as f64 * dt;
        let z = policy.z(state.t, &state, y);
        for j in 0..params.substeps {
            state.t = step as f64 * dt;
            let rnd = StepRandomness::draw(rng);
            mark_orders(&mut state, rnd.cancel, params);
            let eval = evaluate_step(&state, &z, params, mode, dt).map_err(|e| (step, e))?;
            if j == 0 {
                if let Some(tr) = trajectory.as_mut() {
                    tr.push(trajectory_point(k as f64 * params.dt(), &z, &eval, y, &acc));
                }
            }
            let jump = match jumps {
                JumpSource::Draw => select_jump(rnd.jump, &eval.rates, dt),
                JumpSource::Replay(seq) => seq[step],
            };
            if let Some(t) = tape.as_deref_mut() {
                t.push(TapeStep {
                    state,
                    y,
                    normals: rnd.normals,
                    jump,
                });
            }
            let pen = penalty_increment(&eval, dt, params);
            for (i, pen_i) in pen.into_iter().enumerate() {
                acc.penalty[i] += pen_i;
                acc.int_f[i] += eval.f[i] * dt;
            }
            if eval.controls.fallback || eval.rescaled() {
                acc.failed += 1;
            }
            let c = eval.controls.clipped;
            if c.mu_p || c.mu_q || c.lam_p || c.lam_q {
                acc.clipped += 1;
            }
            (state, y) = advance(&state, y, &z, &eval, &rnd, jump, dt, params);
            step += 1;
        }
    }
    state.t = params.horizon;
    if let Some(tr) = trajectory.as_mut() {
        let z = policy.z(state.t, &state, y);
        let end_mode = if mode == SimMode::Strict {
            SimMode::Fallback
        } else {
            mode
        };
        if let Ok(eval) = evaluate_step(&state, &z, params, end_mode, dt) {
            tr.push(trajectory_point(params.horizon, &z, &eval, y, &acc));
        }
    }
    Ok(PathRun {
        terminal: TerminalRecord::from_state(&state, &acc, y, params),
        trajectory,
        final_state: state,
    })
}

/// Batch options beyond the basic simulation arguments.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub mode: SimMode,
    pub record_trajectories: bool,
    /// High half of every path's stream id; separates independent batches
    /// drawn from one seed.
    pub stream: u32,
}

/// `m` independent paths in strict mode on stream 0.
pub fn simulate_batch<P: ContractPolicy + ?Sized>(
    policy: &P,
    params: &ModelParams,
    m: usize,
    seed: u64,
    record_trajectories: bool,
) -> Result<PathBatch> {
    simulate_batch_with(
        policy,
        params,
        m,
        seed,
        SimOptions {
            record_trajectories,
            ..SimOptions::default()
        },
    )
}

pub fn simulate_batch_with<P: ContractPolicy + ?Sized>(
    policy: &P,
    params: &ModelParams,
    m: usize,
    seed: u64,
    opts: SimOptions,
) -> Result<PathBatch> {
    params.validate()?;
    if m == 0 {
        return Err(Error::InvalidParams {
            field: "m",
            reason: "batch size must be >= 1".into(),
        });
    }
    let runs: Vec<_> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, opts.stream, i);
            run_path(
                policy,
                params,
                opts.mode,
                &mut rng,
                JumpSource::Draw,
                None,
                opts.record_trajectories,
            )
            .map_err(|(step, e)| e.into_error(i, step))
        })
        .collect();
    let mut terminals = Vec::with_capacity(m);
    let mut trajectories = opts.record_trajectories.then(|| Vec::with_capacity(m));
    for run in runs {
        let run = run?;
        terminals.push(run.terminal);
        if let (Some(all), Some(tr)) = (trajectories.as_mut(), run.trajectory) {
            all.push(tr);
        }
    }
    Ok(PathBatch {
        m,
        terminals,
        trajectories,
    })
}

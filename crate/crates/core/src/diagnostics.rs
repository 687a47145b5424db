//! Numerical self-checks against independent oracles: bisection for the
//! clearing price and the spread root, a control grid for the Nash point,
//! Monte Carlo for the contract representation and central differences for
//! the policy gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contract::{trader_value_v0, ZMatrix};
use crate::equilibrium::{nash_fixed_point, nash_gap, solve_symmetric_gamma, verify_nash};
use crate::error::Result;
use crate::model::{clearing_price, Maker, MarketState};
use crate::params::ModelParams;
use crate::policy::network::{FeatureScaling, PolicyNetwork, N_PARAMS};
use crate::policy::train::{batch_gradient, batch_loss};
use crate::sim::{simulate_batch_with, SimMode, SimOptions};
use crate::stats::MeanSe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or z-score for statistical checks).
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, metric: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: metric <= tolerance,
            metric,
            tolerance,
            detail,
        }
    }
}

/// Root of a decreasing function by bisection, expanding the bracket from
/// `[x0 - 1, x0 + 1]` first. Stops when the midpoint no longer moves.
fn bisect_decreasing(f: impl Fn(f64) -> f64, x0: f64) -> f64 {
    let (mut lo, mut hi) = (x0 - 1.0, x0 + 1.0);
    let mut w = 1.0;
    while f(lo) < 0.0 {
        w *= 2.0;
        lo = x0 - w;
    }
    while f(hi) > 0.0 {
        w *= 2.0;
        hi = x0 + w;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return mid;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Net demand at auction price `price`: market orders, both makers' limit
/// books and the opening block trade.
fn excess_demand(state: &MarketState, params: &ModelParams, price: f64) -> f64 {
    state.buy_volume - state.sell_volume
        + params.kp * (state.p_notional - state.p_orders as f64 * price)
        + params.kq * (state.q_notional - state.q_orders as f64 * price)
        + params.k0 * (params.p0_star - price)
}

fn random_state<R: Rng>(rng: &mut R, params: &ModelParams) -> MarketState {
    let p_orders = rng.random_range(0..2000u32);
    let q_orders = rng.random_range(0..2000u32);
    let mut avg = || params.p0_star + rng.random_range(-10.0..10.0);
    let (ap, aq) = (avg(), avg());
    MarketState {
        t: rng.random_range(0.0..params.horizon),
        buy_volume: rng.random_range(0.0..2000.0),
        sell_volume: rng.random_range(0.0..2000.0),
        efficient_price: params.p0_star + rng.random_range(-10.0..10.0),
        p_notional: p_orders as f64 * ap,
        p_orders,
        q_notional: q_orders as f64 * aq,
        q_orders,
        p_quote: params.p0_star + rng.random_range(-5.0..5.0),
        q_quote: params.p0_star + rng.random_range(-5.0..5.0),
        ..MarketState::initial(params)
    }
}

/// Closed-form clearing price against bisection on the clearing equation.
pub fn clearing_price_oracle(n: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let params = ModelParams {
            p0_star: rng.random_range(50.0..300.0),
            kp: rng.random_range(0.2..3.0),
            kq: rng.random_range(0.2..3.0),
            k0: rng.random_range(0.2..3.0),
            ..ModelParams::apple()
        };
        let s = random_state(&mut rng, &params);
        let root = bisect_decreasing(|p| excess_demand(&s, &params, p), params.p0_star);
        worst = worst.max((clearing_price(&s, &params) - root).abs());
    }
    CheckOutcome::new(
        "clearing price vs bisection",
        worst,
        1e-9,
        format!("{n} random states, max |closed form - bisection| = {worst:.3e}"),
    )
}

/// Book with identical p and q sides, where a symmetric Nash point exists.
fn random_symmetric_state<R: Rng>(rng: &mut R, params: &ModelParams) -> MarketState {
    let orders = rng.random_range(0..400u32);
    let avg = params.p0_star + rng.random_range(-3.0..3.0);
    let quote = params.p0_star + rng.random_range(-3.0..3.0);
    MarketState {
        t: rng.random_range(0.0..params.horizon),
        buy_volume: rng.random_range(0.0..800.0),
        sell_volume: rng.random_range(0.0..800.0),
        efficient_price: params.p0_star + rng.random_range(-3.0..3.0),
        p_notional: orders as f64 * avg,
        p_orders: orders,
        q_notional: orders as f64 * avg,
        q_orders: orders,
        p_quote: quote,
        q_quote: quote,
        ..MarketState::initial(params)
    }
}

/// Closed-form Nash controls against a `(mu, lambda)` grid search of each
/// maker's generator.
pub fn best_response_oracle(n: usize, seed: u64, params: &ModelParams) -> CheckOutcome {
    let (mu_step, lambda_step, tol) = (0.01, 0.1, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut verified, mut tried) = (f64::NEG_INFINITY, 0, 0);
    let mut found = 0;
    while found < n && tried < 100 * n {
        tried += 1;
        let s = random_symmetric_state(&mut rng, params);
        let z = ZMatrix::from_network_output(std::array::from_fn(|_| rng.random_range(0.0..20.0)));
        let Ok(c) = nash_fixed_point(&s, &z, params) else {
            continue;
        };
        found += 1;
        worst = worst.max(nash_gap(&s, &z, &c, params, mu_step, lambda_step));
        verified += verify_nash(&s, &z, &c, params, mu_step, lambda_step, tol) as usize;
    }
    let mut out = CheckOutcome::new(
        "Nash controls vs grid maximum",
        worst,
        tol,
        format!("{found} (state, Z) pairs ({tried} drawn), max grid gain {worst:.3e}, verify_nash passed {verified}"),
    );
    out.passed &= found == n && verified == n;
    out
}

/// Quadratic residual of `c B g^2 - (zt / sigma) g - c A` relative to the
/// size of its terms.
pub fn gamma_residual(gamma: f64, a: f64, b: f64, zt: f64, sigma: f64, c: f64) -> f64 {
    let terms = [c * b * gamma * gamma, -zt / sigma * gamma, -c * a];
    terms.iter().sum::<f64>().abs() / terms.iter().map(|t| t.abs()).sum::<f64>()
}

/// Spread root against its residual and a bisection root.
pub fn gamma_oracle(n: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_res, mut worst_diff) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for _ in 0..n {
        let a = -rng.random_range(1e-3..50.0);
        let b = -rng.random_range(1e-3..50.0);
        let zt = rng.random_range(-5.0..5.0);
        let sigma = rng.random_range(0.5..3.0);
        let c = rng.random_range(0.01..1.0);
        let Ok(g) = solve_symmetric_gamma(a, b, zt, sigma, c) else {
            failures += 1;
            continue;
        };
        let h = |x: f64| c * b * x * x - zt / sigma * x - c * a;
        let oracle = bisect_decreasing(h, 1.0).max(0.0);
        worst_res = worst_res.max(gamma_residual(g, a, b, zt, sigma, c));
        worst_diff = worst_diff.max((g - oracle).abs() / oracle.max(1.0));
    }
    let worst = worst_res.max(worst_diff);
    let mut out = CheckOutcome::new(
        "spread root residual and bisection",
        worst,
        1e-9,
        format!(
            "{n} draws, max relative residual {worst_res:.3e}, max gap to bisection {worst_diff:.3e}, {failures} solver failures"
        ),
    );
    out.passed &= failures == 0;
    out
}

/// Anchored controls (`lambda = lambda0`, zero spreads) under a random
/// network contract: `Y_T + int F dt` is a martingale increment.
pub fn martingale_check(params: &ModelParams, m: usize, seed: u64) -> Result<CheckOutcome> {
    let net = PolicyNetwork::init(seed, FeatureScaling::from_params(params));
    let batch = simulate_batch_with(
        &net,
        params,
        m,
        seed,
        SimOptions {
            mode: SimMode::ForcedAnchor,
            record_trajectories: false,
            stream: 0,
        },
    )?;
    let est = [
        MeanSe::from_values(batch.terminals.iter().map(|t| t.y_p + t.int_f_p)),
        MeanSe::from_values(batch.terminals.iter().map(|t| t.y_q + t.int_f_q)),
    ];
    let z = est.map(|e| e.z_score(0.0).abs());
    Ok(CheckOutcome::new(
        "martingale Y_T + int F dt at anchored controls",
        z[0].max(z[1]),
        3.0,
        format!(
            "m = {m}: p {:.4} +- {:.4}, q {:.4} +- {:.4} (max |z| {:.2})",
            est[0].mean,
            est[0].se,
            est[1].mean,
            est[1].se,
            z[0].max(z[1])
        ),
    ))
}

/// Equilibrium controls under a random network contract: each maker's value
/// estimate equals its reservation level.
pub fn incentive_check(params: &ModelParams, m: usize, seed: u64) -> Result<CheckOutcome> {
    let net = PolicyNetwork::init(seed, FeatureScaling::from_params(params));
    let batch = simulate_batch_with(
        &net,
        params,
        m,
        seed,
        SimOptions {
            mode: SimMode::Fallback,
            record_trajectories: false,
            stream: 0,
        },
    )?;
    let v = Maker::BOTH.map(|mk| trader_value_v0(&batch, mk, params));
    let z = [
        v[0].z_score(params.r0_p).abs(),
        v[1].z_score(params.r0_q).abs(),
    ];
    Ok(CheckOutcome::new(
        "maker value V0 equals R0",
        z[0].max(z[1]),
        3.0,
        format!(
            "m = {m}: V0_p - R0 = {:.3} +- {:.3}, V0_q - R0 = {:.3} +- {:.3}, fallback paths {}",
            v[0].mean - params.r0_p,
            v[0].se,
            v[1].mean - params.r0_q,
            v[1].se,
            batch.failed_paths()
        ),
    ))
}

/// Pathwise gradient against central differences on `coords` random
/// weights, jumps replayed from the gradient pass.
///
/// The relative error is taken against `max(|adjoint|, |fd|, 1e-6 * max|grad|)`
/// so that coordinates with a vanishing derivative are compared in absolute
/// terms at the scale of the gradient.
pub fn gradient_check(
    params: &ModelParams,
    m: usize,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<CheckOutcome> {
    let net = PolicyNetwork::init(seed, FeatureScaling::from_params(params));
    let stream = 1;
    let res = batch_gradient(&net, params, m, seed, stream, 0.0, None)?;
    let scale = res.grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_at = 0;
    for i in sample(&mut rng, N_PARAMS, coords.min(N_PARAMS)) {
        let shifted = |dx: f64| -> Result<f64> {
            let mut n = net.clone();
            n.theta[i] += dx;
            Ok(batch_loss(&n, params, m, seed, stream, 0.0, Some(&res.jumps))?.total)
        };
        let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let err = (fd - res.grad[i]).abs() / fd.abs().max(res.grad[i].abs()).max(1e-6 * scale);
        if err > worst {
            worst = err;
            worst_at = i;
        }
    }
    Ok(CheckOutcome::new(
        "pathwise gradient vs central differences",
        worst,
        1e-4,
        format!(
            "{} coordinates, h = {h:e}, m = {m}, max relative error {worst:.3e} at theta[{worst_at}]",
            coords.min(N_PARAMS)
        ),
    ))
}

/// Horizon used by the Monte Carlo and gradient checks: one time unit in
/// five policy steps, otherwise the given parameters.
pub fn short_horizon(params: &ModelParams) -> ModelParams {
    ModelParams {
        horizon: 1.0,
        n_steps: 5,
        substeps: 160,
        ..params.clone()
    }
}

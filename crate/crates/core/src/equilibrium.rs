//! Nash equilibrium of the two makers' controls `(mu^i, lambda^i)` given a
//! contract `Z` and a state.
//!
//! Each maker's generator is additively separable in its own spread and its
//! own order intensity. The intensity part is a concave parabola with a
//! closed-form maximiser. The spread part depends on the opponent only
//! through `mu^p + mu^q`; its first-order condition is a quadratic in
//! `gamma = exp(c (mu^p + mu^q))`.

use serde::{Deserialize, Serialize};

use crate::contract::{
    all_increments, generator_from_parts, jump_rates, payoff_increments, Increments, ZMatrix,
    Z_BUY, Z_P_ORDERS, Z_P_PRICE, Z_Q_ORDERS, Z_Q_PRICE, Z_SELL,
};
use crate::error::EquilibriumError;
use crate::model::{delta_g, JumpKind, Maker, MarketState};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClipFlags {
    pub mu_p: bool,
    pub mu_q: bool,
    pub lam_p: bool,
    pub lam_q: bool,
}

/// Equilibrium controls of both makers at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPair {
    pub mu_p: f64,
    pub mu_q: f64,
    pub lam_p: f64,
    pub lam_q: f64,
    /// Positive root of the spread condition, when one was used.
    pub gamma: Option<f64>,
    pub clipped: ClipFlags,
    /// Set when no interior spread equilibrium existed and spreads were
    /// zeroed instead.
    pub fallback: bool,
}

impl ControlPair {
    /// Reference controls: zero spreads and `lambda = lambda0`.
    pub fn anchor(params: &ModelParams) -> Self {
        Self {
            mu_p: 0.0,
            mu_q: 0.0,
            lam_p: params.lambda0,
            lam_q: params.lambda0,
            gamma: None,
            clipped: ClipFlags::default(),
            fallback: false,
        }
    }

    pub fn mu(&self, maker: Maker) -> f64 {
        match maker {
            Maker::P => self.mu_p,
            Maker::Q => self.mu_q,
        }
    }

    pub fn lambda(&self, maker: Maker) -> f64 {
        match maker {
            Maker::P => self.lam_p,
            Maker::Q => self.lam_q,
        }
    }

    fn with(&self, maker: Maker, mu: f64, lam: f64) -> Self {
        let mut c = *self;
        match maker {
            Maker::P => {
                c.mu_p = mu;
                c.lam_p = lam;
            }
            Maker::Q => {
                c.mu_q = mu;
                c.lam_q = lam;
            }
        }
        c
    }
}

pub(crate) fn clip(v: f64, lo: f64, hi: f64) -> (f64, bool) {
    if v < lo {
        (lo, true)
    } else if v > hi {
        (hi, true)
    } else {
        (v, false)
    }
}

/// Column of `Z` paired with maker `i`'s own orders.
pub fn own_orders_column(maker: Maker) -> usize {
    match maker {
        Maker::P => Z_P_ORDERS,
        Maker::Q => Z_Q_ORDERS,
    }
}

/// Column of `Z` paired with maker `i`'s own price noise.
pub fn own_price_column(maker: Maker) -> usize {
    match maker {
        Maker::P => Z_P_PRICE,
        Maker::Q => Z_Q_PRICE,
    }
}

/// `argmax_lambda` of maker `i`'s generator: `lambda0 + z + Dg^i_own`,
/// clipped to `[0, lambda_inf]`.
pub fn best_response_lambda(
    maker: Maker,
    state: &MarketState,
    z_own: f64,
    params: &ModelParams,
) -> f64 {
    let dg = delta_g(maker, state, maker.own_jump(), params);
    clip(params.lambda0 + z_own + dg, 0.0, params.lambda_inf).0
}

/// Positive root of `c B gamma^2 - (z_tilde / sigma) gamma - c A = 0` with
/// `A = Dg1 + z1`, `B = Dg2 + z2`; requires `A < 0` and `B < 0`.
pub fn solve_symmetric_gamma(
    dg1_plus_z1: f64,
    dg2_plus_z2: f64,
    z_tilde: f64,
    sigma: f64,
    c: f64,
) -> Result<f64, EquilibriumError> {
    let (a_sum, b_sum) = (dg1_plus_z1, dg2_plus_z2);
    if !(a_sum < 0.0 && b_sum < 0.0) {
        return Err(EquilibriumError::NoPositiveRoot {
            dg1_plus_z1,
            dg2_plus_z2,
        });
    }
    if !(c > 0.0) || !(sigma > 0.0) || !z_tilde.is_finite() {
        return Err(EquilibriumError::Degenerate { c, sigma, z_tilde });
    }
    let qa = c * b_sum;
    let qb = -z_tilde / sigma;
    let qc = -c * a_sum;
    // qa < 0 < qc, so the discriminant exceeds qb^2 and the roots have
    // opposite signs. Cancellation-free form of the quadratic formula.
    let disc = qb * qb - 4.0 * qa * qc;
    let sign = if qb >= 0.0 { 1.0 } else { -1.0 };
    let q = -0.5 * (qb + sign * disc.sqrt());
    let r1 = q / qa;
    let r2 = qc / q;
    let gamma = if r1 > 0.0 { r1 } else { r2 };
    if gamma > 0.0 && gamma.is_finite() {
        Ok(gamma)
    } else {
        Err(EquilibriumError::Degenerate { c, sigma, z_tilde })
    }
}

/// Inputs of the shared spread condition at a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadCondition {
    /// p/q average of `Dg_a + z1`.
    pub a: f64,
    /// p/q average of `Dg_b + z2`.
    pub b: f64,
    /// Own-price sensitivity divided by `lambda0 exp(-d)`.
    pub z_tilde: f64,
}

pub fn spread_condition(state: &MarketState, z: &ZMatrix, params: &ModelParams) -> SpreadCondition {
    spread_condition_from(&all_increments(state, params), z, params)
}

/// [`spread_condition`] from precomputed payoff increments.
pub fn spread_condition_from(
    inc: &Increments,
    z: &ZMatrix,
    params: &ModelParams,
) -> SpreadCondition {
    let scale = params.lambda0 * (-params.d).exp();
    let mut a = 0.0;
    let mut b = 0.0;
    let mut zt = 0.0;
    for (i, maker) in Maker::BOTH.into_iter().enumerate() {
        let row = z.row(maker);
        a += inc[i][JumpKind::BuyerArrival.index()] + row[Z_BUY];
        b += inc[i][JumpKind::SellerArrival.index()] + row[Z_SELL];
        zt += row[own_price_column(maker)];
    }
    SpreadCondition {
        a: 0.5 * a,
        b: 0.5 * b,
        z_tilde: 0.5 * zt / scale,
    }
}

/// Symmetric Nash controls. Errors when the spread condition has no
/// positive root.
pub fn nash_fixed_point(
    state: &MarketState,
    z: &ZMatrix,
    params: &ModelParams,
) -> Result<ControlPair, EquilibriumError> {
    nash_from_increments(&all_increments(state, params), z, params)
}

/// [`nash_fixed_point`] from precomputed payoff increments.
pub fn nash_from_increments(
    inc: &Increments,
    z: &ZMatrix,
    params: &ModelParams,
) -> Result<ControlPair, EquilibriumError> {
    let cond = spread_condition_from(inc, z, params);
    let gamma = solve_symmetric_gamma(cond.a, cond.b, cond.z_tilde, params.sigma, params.c)?;
    let half_spread = gamma.ln() / params.c / 2.0;
    let (mu, mu_clipped) = clip(half_spread, -params.mu_inf, params.mu_inf);
    let mut out = with_lambdas(inc, z, params, mu);
    out.gamma = Some(gamma);
    out.clipped.mu_p = mu_clipped;
    out.clipped.mu_q = mu_clipped;
    Ok(out)
}

/// Controls used when no equilibrium exists: zero spreads, best-response
/// intensities.
pub fn fallback_controls(state: &MarketState, z: &ZMatrix, params: &ModelParams) -> ControlPair {
    fallback_from_increments(&all_increments(state, params), z, params)
}

pub fn fallback_from_increments(
    inc: &Increments,
    z: &ZMatrix,
    params: &ModelParams,
) -> ControlPair {
    let mut out = with_lambdas(inc, z, params, 0.0);
    out.fallback = true;
    out
}

/// [`nash_fixed_point`], or [`fallback_controls`] on failure.
pub fn nash_or_fallback(state: &MarketState, z: &ZMatrix, params: &ModelParams) -> ControlPair {
    let inc = all_increments(state, params);
    nash_from_increments(&inc, z, params)
        .unwrap_or_else(|_| fallback_from_increments(&inc, z, params))
}

fn with_lambdas(inc: &Increments, z: &ZMatrix, params: &ModelParams, mu: f64) -> ControlPair {
    let mut lam = [0.0; 2];
    let mut flags = [false; 2];
    for (i, maker) in Maker::BOTH.into_iter().enumerate() {
        let raw = params.lambda0
            + z.row(maker)[own_orders_column(maker)]
            + inc[i][maker.own_jump().index()];
        (lam[i], flags[i]) = clip(raw, 0.0, params.lambda_inf);
    }
    ControlPair {
        mu_p: mu,
        mu_q: mu,
        lam_p: lam[0],
        lam_q: lam[1],
        gamma: None,
        clipped: ClipFlags {
            lam_p: flags[0],
            lam_q: flags[1],
            ..ClipFlags::default()
        },
        fallback: false,
    }
}

fn grid(lo: f64, hi: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(move |k| (lo + k as f64 * step).min(hi))
}

/// Largest gain either maker can obtain by deviating unilaterally to a grid
/// point `(mu, lambda)` in `[-mu_inf, mu_inf] x [0, lambda_inf]`.
///
/// Uses additive separability of `F^i` in `(mu^i, lambda^i)`: the best grid
/// pair is the best `mu` combined with the best `lambda`.
pub fn nash_gap(
    state: &MarketState,
    z: &ZMatrix,
    controls: &ControlPair,
    params: &ModelParams,
    mu_step: f64,
    lambda_step: f64,
) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for maker in Maker::BOTH {
        let inc = payoff_increments(maker, state, params);
        let row = z.row(maker);
        let eval = |c: &ControlPair| {
            let rates = jump_rates(c, params.d, params);
            generator_from_parts(maker, &inc, row, &rates, c, params)
        };
        let (mu0, lam0) = (controls.mu(maker), controls.lambda(maker));
        let f0 = eval(controls);
        let best_mu = grid(-params.mu_inf, params.mu_inf, mu_step)
            .map(|m| eval(&controls.with(maker, m, lam0)))
            .fold(f64::NEG_INFINITY, f64::max);
        let best_lam = grid(0.0, params.lambda_inf, lambda_step)
            .map(|l| eval(&controls.with(maker, mu0, l)))
            .fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(best_mu + best_lam - 2.0 * f0);
    }
    worst
}

/// True when no grid deviation improves either maker's generator by more
/// than `tol`.
pub fn verify_nash(
    state: &MarketState,
    z: &ZMatrix,
    controls: &ControlPair,
    params: &ModelParams,
    mu_step: f64,
    lambda_step: f64,
    tol: f64,
) -> bool {
    nash_gap(state, z, controls, params, mu_step, lambda_step) <= tol
}

/// Options for [`iterated_best_response`].
#[derive(Debug, Clone, Copy)]
pub struct IterationOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub damping: f64,
}

impl Default for IterationOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            damping: 0.5,
        }
    }
}

/// Maker `i`'s best spread given the opponent's, without symmetry.
pub fn best_response_mu(
    maker: Maker,
    state: &MarketState,
    z: &ZMatrix,
    mu_other: f64,
    params: &ModelParams,
) -> f64 {
    let row = z.row(maker);
    let a = delta_g(maker, state, JumpKind::BuyerArrival, params) + row[Z_BUY];
    let b = delta_g(maker, state, JumpKind::SellerArrival, params) + row[Z_SELL];
    let zt = row[own_price_column(maker)] / (params.lambda0 * (-params.d).exp());
    if let Ok(gamma) = solve_symmetric_gamma(a, b, zt, params.sigma, params.c) {
        return clip(
            gamma.ln() / params.c - mu_other,
            -params.mu_inf,
            params.mu_inf,
        )
        .0;
    }
    // Not concave: search the admissible interval directly.
    let inc = payoff_increments(maker, state, params);
    let base = ControlPair::anchor(params);
    let objective = |m: f64| {
        let c = match maker {
            Maker::P => ControlPair {
                mu_p: m,
                mu_q: mu_other,
                ..base
            },
            Maker::Q => ControlPair {
                mu_p: mu_other,
                mu_q: m,
                ..base
            },
        };
        let rates = jump_rates(&c, params.d, params);
        generator_from_parts(maker, &inc, row, &rates, &c, params)
    };
    grid(-params.mu_inf, params.mu_inf, 0.01)
        .map(|m| (m, objective(m)))
        .fold((0.0, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
        .0
}

/// Damped best-response iteration for general (asymmetric) states.
pub fn iterated_best_response(
    state: &MarketState,
    z: &ZMatrix,
    params: &ModelParams,
    opts: IterationOptions,
) -> Result<ControlPair, EquilibriumError> {
    let (mut mp, mut mq) = (0.0, 0.0);
    for _ in 0..opts.max_iter {
        let np = best_response_mu(Maker::P, state, z, mq, params);
        let nq = best_response_mu(Maker::Q, state, z, mp, params);
        let step = (np - mp).abs().max((nq - mq).abs());
        mp += opts.damping * (np - mp);
        mq += opts.damping * (nq - mq);
        if step < opts.tol {
            let mut out = with_lambdas(&all_increments(state, params), z, params, 0.0);
            out.mu_p = mp;
            out.mu_q = mq;
            out.clipped.mu_p = mp.abs() >= params.mu_inf;
            out.clipped.mu_q = mq.abs() >= params.mu_inf;
            return Ok(out);
        }
    }
    Err(EquilibriumError::NotConverged {
        iterations: opts.max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::generator_f;
    use proptest::prelude::*;

    /// p and q hold identical books, so the state is p/q symmetric.
    fn symmetric_state(params: &ModelParams) -> MarketState {
        MarketState {
            t: 3.0,
            buy_volume: 240.0,
            sell_volume: 236.0,
            efficient_price: 184.9,
            p_notional: 80.0 * 184.5,
            p_orders: 80,
            q_notional: 80.0 * 184.5,
            q_orders: 80,
            p_quote: 184.8,
            q_quote: 184.8,
            ..MarketState::initial(params)
        }
    }

    fn contract() -> ZMatrix {
        ZMatrix::from_network_output([12.0, 9.0, 2.0, 3.0, 4.0, 1.0, 5.0])
    }

    fn bisect_gamma(a: f64, b: f64, zt: f64, sigma: f64, c: f64) -> f64 {
        let h = |g: f64| c * b * g * g - zt / sigma * g - c * a;
        let mut hi = 1.0;
        while h(hi) > 0.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn balanced_book_gives_zero_spread() {
        assert_eq!(
            solve_symmetric_gamma(-3.0, -3.0, 0.0, 1.76, 0.1).unwrap(),
            1.0
        );
        let p = ModelParams::apple();
        let s = MarketState::initial(&p);
        // Empty book: Dg = 0 for investor jumps, so A = z1 = B = z2.
        let z = ZMatrix::from_network_output([5.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = nash_fixed_point(&s, &z, &p).unwrap();
        assert!(c.mu_p.abs() < 1e-12 && c.mu_q.abs() < 1e-12);
    }

    #[test]
    fn rejects_nonnegative_coefficients() {
        assert!(matches!(
            solve_symmetric_gamma(0.0, -1.0, 0.0, 1.0, 0.1),
            Err(EquilibriumError::NoPositiveRoot { .. })
        ));
        assert!(solve_symmetric_gamma(-1.0, 2.0, 0.0, 1.0, 0.1).is_err());
        let p = ModelParams::apple();
        let s = symmetric_state(&p);
        let c = nash_or_fallback(&s, &ZMatrix::zero(), &p);
        assert!(c.fallback || c.gamma.is_some());
    }

    #[test]
    fn fixed_point_passes_grid_check() {
        for d in [0.0, 1.5] {
            let p = ModelParams::apple().with_fee(d);
            let s = symmetric_state(&p);
            let z = contract();
            let c = nash_fixed_point(&s, &z, &p).unwrap();
            assert!(!c.fallback);
            let gap = nash_gap(&s, &z, &c, &p, 0.01, 0.1);
            assert!(gap <= 1e-3, "gap {gap} at d = {d}");
        }
    }

    #[test]
    fn generator_is_separable_in_own_controls() {
        let p = ModelParams::apple();
        let s = symmetric_state(&p);
        let z = contract();
        let base = nash_fixed_point(&s, &z, &p).unwrap();
        let f = |dm: f64, dl: f64| {
            let c = ControlPair {
                mu_p: base.mu_p + dm,
                lam_p: base.lam_p + dl,
                ..base
            };
            generator_f(Maker::P, &s, &z, &c, p.d, &p)
        };
        let mixed = f(0.7, 3.0) - f(0.7, 0.0) - f(0.0, 3.0) + f(0.0, 0.0);
        assert!(
            mixed.abs() < 1e-8 * (1.0 + f(0.0, 0.0).abs()),
            "mixed = {mixed}"
        );
    }

    #[test]
    fn lambda_clips_at_bounds() {
        let p = ModelParams::apple();
        let s = symmetric_state(&p);
        assert_eq!(best_response_lambda(Maker::P, &s, 1e6, &p), p.lambda_inf);
        assert_eq!(best_response_lambda(Maker::P, &s, -1e6, &p), 0.0);
        let mut w = [0.0; 7];
        w[Z_BUY] = -5.0;
        w[Z_SELL] = -5.0;
        w[Z_P_ORDERS] = 1e6;
        let c = fallback_controls(&s, &ZMatrix::tied(w), &p);
        assert!(c.clipped.lam_p && c.clipped.lam_q && c.fallback);
    }

    #[test]
    fn spread_clips_at_bounds() {
        let p = ModelParams::apple();
        let s = MarketState::initial(&p);
        let z = ZMatrix::from_network_output([1e-6, 20.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = nash_fixed_point(&s, &z, &p).unwrap();
        assert!(c.mu_p < 0.0);
        let z = ZMatrix::tied([-20.0, -1e-12, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = nash_fixed_point(&s, &z, &p).unwrap();
        assert_eq!(c.mu_p, p.mu_inf);
        assert!(c.clipped.mu_p && c.clipped.mu_q);
    }

    #[test]
    fn best_response_iteration_agrees_on_symmetric_states() {
        let p = ModelParams::apple();
        let s = symmetric_state(&p);
        let z = contract();
        let sym = nash_fixed_point(&s, &z, &p).unwrap();
        let ibr = iterated_best_response(&s, &z, &p, IterationOptions::default()).unwrap();
        assert!((sym.mu_p - ibr.mu_p).abs() < 1e-6);
        assert!((sym.mu_q - ibr.mu_q).abs() < 1e-6);
        assert_eq!(sym.lam_p, ibr.lam_p);
    }

    proptest! {
        #[test]
        fn gamma_matches_bisection(
            a in -50.0..-1e-3f64,
            b in -50.0..-1e-3f64,
            zt in -5.0..5.0f64,
            sigma in 0.5..3.0f64,
            c in 0.01..1.0f64,
        ) {
            let g = solve_symmetric_gamma(a, b, zt, sigma, c).unwrap();
            let oracle = bisect_gamma(a, b, zt, sigma, c);
            prop_assert!(g > 0.0);
            prop_assert!((g - oracle).abs() <= 1e-9 * oracle.max(1.0));
        }
    }
}

//! Rebate contracts: sensitivities `Z`, the generator `F^i`, the continuation
//! process `Y` and Monte Carlo estimates of trader values and the exchange
//! objective.

use serde::{Deserialize, Serialize};

use crate::equilibrium::ControlPair;
use crate::model::{delta_g, investor_intensities, payoff_g, JumpKind, Maker, MarketState};
use crate::params::ModelParams;
use crate::sim::PathBatch;
use crate::stats::MeanSe;

/// Column of `Z` multiplying buyer-arrival jumps.
pub const Z_BUY: usize = 0;
/// Column multiplying seller-arrival jumps.
pub const Z_SELL: usize = 1;
/// Column multiplying the efficient-price Brownian motion.
pub const Z_EFFICIENT: usize = 2;
/// Column multiplying maker-p order jumps.
pub const Z_P_ORDERS: usize = 3;
/// Column multiplying maker-p's price Brownian motion.
pub const Z_P_PRICE: usize = 4;
pub const Z_Q_ORDERS: usize = 5;
pub const Z_Q_PRICE: usize = 6;

/// Column of `Z` paired with each jump kind.
pub fn jump_column(kind: JumpKind) -> usize {
    match kind {
        JumpKind::BuyerArrival => Z_BUY,
        JumpKind::SellerArrival => Z_SELL,
        JumpKind::MakerP => Z_P_ORDERS,
        JumpKind::MakerQ => Z_Q_ORDERS,
    }
}

/// Contract sensitivities for both makers: `p[k]` is `Z^{k+1,p}`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ZMatrix {
    pub p: [f64; 7],
    pub q: [f64; 7],
}

/// Position in the q row of each tied p component (p <-> q relabelling).
const TIE: [usize; 7] = [0, 1, 2, 5, 6, 3, 4];

impl ZMatrix {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Identical contracts up to relabelling: q's own-order and own-price
    /// sensitivities equal p's, and the cross columns swap.
    pub fn tied(w: [f64; 7]) -> Self {
        let mut q = [0.0; 7];
        for (k, &j) in TIE.iter().enumerate() {
            q[j] = w[k];
        }
        Self { p: w, q }
    }

    /// Network outputs lie in (0, 20). Buyer and seller columns enter with a
    /// negative sign so that `Dg + z < 0` is attainable.
    pub fn from_network_output(out: [f64; 7]) -> Self {
        Self::tied(signed_components(out))
    }

    pub fn row(&self, maker: Maker) -> &[f64; 7] {
        match maker {
            Maker::P => &self.p,
            Maker::Q => &self.q,
        }
    }

    pub fn is_tied(&self) -> bool {
        *self == Self::tied(self.p)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|v| v.is_finite())
    }

    /// Adjoint of [`ZMatrix::tied`]: gradient w.r.t. the shared components.
    pub(crate) fn untie_adjoint(p_bar: &[f64; 7], q_bar: &[f64; 7]) -> [f64; 7] {
        let mut w = *p_bar;
        for (k, &j) in TIE.iter().enumerate() {
            w[k] += q_bar[j];
        }
        w
    }
}

/// Sign applied to each network output component.
pub const OUTPUT_SIGNS: [f64; 7] = [-1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0];

pub fn signed_components(out: [f64; 7]) -> [f64; 7] {
    let mut w = out;
    for (v, s) in w.iter_mut().zip(OUTPUT_SIGNS) {
        *v *= s;
    }
    w
}

/// Payoff increments of one maker for the four jump kinds, in
/// [`JumpKind::ALL`] order.
pub fn payoff_increments(maker: Maker, state: &MarketState, params: &ModelParams) -> [f64; 4] {
    JumpKind::ALL.map(|k| delta_g(maker, state, k, params))
}

/// `Dg^i_k` for both makers (rows p, q) and the four jump kinds.
pub type Increments = [[f64; 4]; 2];

/// All eight payoff increments at a state, sharing clearing computations.
pub fn all_increments(state: &MarketState, params: &ModelParams) -> Increments {
    let base = [
        payoff_g(Maker::P, state, params),
        payoff_g(Maker::Q, state, params),
    ];
    let mut out = [[0.0; 4]; 2];
    for kind in JumpKind::ALL {
        let s = state.apply_jump(kind);
        for (i, maker) in Maker::BOTH.into_iter().enumerate() {
            out[i][kind.index()] = payoff_g(maker, &s, params) - base[i];
        }
    }
    out
}

/// The four jump intensities `(lambda^a, lambda^b, lambda^p, lambda^q)`.
pub fn jump_rates(controls: &ControlPair, d: f64, params: &ModelParams) -> [f64; 4] {
    let (la, lb) = investor_intensities(controls.mu_p, controls.mu_q, d, params);
    [la, lb, controls.lam_p, controls.lam_q]
}

/// Generator evaluated from precomputed payoff increments and rates.
pub fn generator_from_parts(
    maker: Maker,
    increments: &[f64; 4],
    z: &[f64; 7],
    rates: &[f64; 4],
    controls: &ControlPair,
    params: &ModelParams,
) -> f64 {
    let own_rate = match maker {
        Maker::P => controls.lam_p,
        Maker::Q => controls.lam_q,
    };
    let mut f = 0.0;
    for kind in JumpKind::ALL {
        let i = kind.index();
        f += increments[i] * rates[i] - z[jump_column(kind)] * (params.lambda0 - rates[i]);
    }
    let dev = own_rate - params.lambda0;
    f - 0.5 * dev * dev
        - (controls.mu_p * z[Z_P_PRICE] + controls.mu_q * z[Z_Q_PRICE]) / params.sigma
}

/// Maker `i`'s generator `F^i(x, z, r, P, alpha^j, d; alpha^i)`.
pub fn generator_f(
    maker: Maker,
    state: &MarketState,
    z: &ZMatrix,
    controls: &ControlPair,
    d: f64,
    params: &ModelParams,
) -> f64 {
    let inc = payoff_increments(maker, state, params);
    let rates = jump_rates(controls, d, params);
    generator_from_parts(maker, &inc, z.row(maker), &rates, controls, params)
}

/// One Euler step of `(Y^p, Y^q)`.
///
/// `brownian` holds the increments `(dB, dB^p, dB^q)` that also drive
/// `(P*, P^p, P^q)`. Y integrates against the reference-measure motions,
/// `dW^i = dB^i - (mu^i / sigma) dt` for the two maker prices, and against
/// `lambda0`-compensated jumps.
#[allow(clippy::too_many_arguments)]
pub fn step_y(
    y: [f64; 2],
    state: &MarketState,
    z: &ZMatrix,
    controls: &ControlPair,
    jump: Option<JumpKind>,
    brownian: [f64; 3],
    dt: f64,
    d: f64,
    params: &ModelParams,
) -> [f64; 2] {
    let mut out = y;
    for (slot, maker) in out.iter_mut().zip(Maker::BOTH) {
        let f = generator_f(maker, state, z, controls, d, params);
        *slot += y_increment(z.row(maker), controls, jump, brownian, f, dt, params);
    }
    out
}

pub(crate) fn y_increment(
    z: &[f64; 7],
    controls: &ControlPair,
    jump: Option<JumpKind>,
    brownian: [f64; 3],
    f: f64,
    dt: f64,
    params: &ModelParams,
) -> f64 {
    let compensator = params.lambda0 * dt;
    let mut dy = -f * dt;
    for kind in JumpKind::ALL {
        let hit = if jump == Some(kind) { 1.0 } else { 0.0 };
        dy += z[jump_column(kind)] * (hit - compensator);
    }
    let dw_p = brownian[1] - controls.mu_p / params.sigma * dt;
    let dw_q = brownian[2] - controls.mu_q / params.sigma * dt;
    dy + z[Z_EFFICIENT] * brownian[0] + z[Z_P_PRICE] * dw_p + z[Z_Q_PRICE] * dw_q
}

/// Monte Carlo value of maker `i`: `R0 + mean(g^i + Y^i_T - penalty^i)`, the
/// rebate being `xi^i = R0^i + Y^i_T` with `Y` started at 0.
pub fn trader_value_v0(batch: &PathBatch, maker: Maker, params: &ModelParams) -> MeanSe {
    let r0 = match maker {
        Maker::P => params.r0_p,
        Maker::Q => params.r0_q,
    };
    let est = MeanSe::from_values(batch.terminals.iter().map(|t| {
        let (g, y, pen) = t.maker_terms(maker);
        g + y - pen
    }));
    est.shift(r0)
}

/// Exchange-side summary of a simulated batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RebateReport {
    pub paths: usize,
    /// False for the no-contract benchmark, where no rebate is paid at all.
    pub rebates_paid: bool,
    pub xi_p: MeanSe,
    pub xi_q: MeanSe,
    pub v0_p: MeanSe,
    pub v0_q: MeanSe,
    pub rho: MeanSe,
    pub spread_sq: MeanSe,
    pub fee_revenue: MeanSe,
    /// Fraction of paths that hit an equilibrium fallback or rate overflow.
    pub failed_fraction: f64,
}

impl RebateReport {
    /// `rho - spread_sq - mean(xi_p + xi_q) + fee_revenue`; zero up to rounding.
    pub fn decomposition_residual(&self) -> f64 {
        self.rho.mean
            - (self.spread_sq.mean + self.xi_p.mean + self.xi_q.mean - self.fee_revenue.mean)
    }
}

/// `rho = R0^p + R0^q + E[|P^cl - P*|^2 + Y^p_T + Y^q_T - d (x1 + x2)]`.
pub fn exchange_objective(batch: &PathBatch, d: f64, params: &ModelParams) -> RebateReport {
    build_report(batch, d, params, true)
}

/// Benchmark without any rebate (`xi = 0`): `rho = E|P^cl - P*|^2 - fees`.
pub fn no_rebate_report(batch: &PathBatch, d: f64, params: &ModelParams) -> RebateReport {
    build_report(batch, d, params, false)
}

fn build_report(batch: &PathBatch, d: f64, params: &ModelParams, paid: bool) -> RebateReport {
    let ts = &batch.terminals;
    let (r0p, r0q) = if paid {
        (params.r0_p, params.r0_q)
    } else {
        (0.0, 0.0)
    };
    let xi = |maker: Maker, r0: f64| {
        if paid {
            MeanSe::from_values(ts.iter().map(|t| t.maker_terms(maker).1)).shift(r0)
        } else {
            MeanSe::from_values(ts.iter().map(|_| 0.0))
        }
    };
    let value = |maker: Maker, r0: f64| {
        MeanSe::from_values(ts.iter().map(|t| {
            let (g, y, pen) = t.maker_terms(maker);
            if paid {
                g + y - pen
            } else {
                g - pen
            }
        }))
        .shift(r0)
    };
    let spread_sq = MeanSe::from_values(ts.iter().map(|t| t.spread_sq()));
    let fee_revenue = MeanSe::from_values(ts.iter().map(|t| d * (t.x1 + t.x2)));
    let rho = MeanSe::from_values(ts.iter().map(|t| {
        let rebates = if paid { t.y_p + t.y_q } else { 0.0 };
        t.spread_sq() + rebates - d * (t.x1 + t.x2)
    }))
    .shift(r0p + r0q);
    let failed = ts.iter().filter(|t| t.failed_steps > 0).count();
    RebateReport {
        paths: ts.len(),
        rebates_paid: paid,
        xi_p: xi(Maker::P, r0p),
        xi_q: xi(Maker::Q, r0q),
        v0_p: value(Maker::P, r0p),
        v0_q: value(Maker::Q, r0q),
        rho,
        spread_sq,
        fee_revenue,
        failed_fraction: if ts.is_empty() {
            0.0
        } else {
            failed as f64 / ts.len() as f64
        },
    }
}

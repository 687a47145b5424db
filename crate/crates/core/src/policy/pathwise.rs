//! Reverse-mode derivative of one simulated path with respect to the network
//! weights. Jump realisations and all random draws are held fixed; the
//! derivative flows through payoff increments, the Nash controls (including
//! the implicit dependence of gamma on `Z`), the jump rates, the generator,
//! `Y`, maker quotes, recorded notionals and the network inputs.

use crate::contract::{
    jump_column, signed_components, ZMatrix, OUTPUT_SIGNS, Z_BUY, Z_EFFICIENT, Z_P_ORDERS,
    Z_P_PRICE, Z_Q_ORDERS, Z_Q_PRICE, Z_SELL,
};
use crate::equilibrium::spread_condition_from;
use crate::model::{clearing_price, payoff_grad, JumpKind, Maker, MarketState};
use crate::params::ModelParams;
use crate::policy::network::{ForwardCache, PolicyNetwork, OUTPUT};
use crate::sim::{evaluate_step, SimMode, TapeStep};

/// Weights of one path's terminal values in the batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TerminalSeed {
    /// On `|P^cl - P*|^2 + Y^p + Y^q - d (x1 + x2)`.
    pub rho: f64,
    /// On `g^i + Y^i - penalty^i`.
    pub ic: [f64; 2],
}

/// Adjoints of the differentiable path state.
#[derive(Debug, Clone, Copy, Default)]
struct Adjoint {
    p_notional: f64,
    q_notional: f64,
    p_quote: f64,
    q_quote: f64,
    y: [f64; 2],
    penalty: [f64; 2],
}

fn terminal_adjoint(state: &MarketState, seed: TerminalSeed, params: &ModelParams) -> Adjoint {
    let den = params.kp * state.p_orders as f64 + params.kq * state.q_orders as f64 + params.k0;
    let gap = clearing_price(state, params) - state.efficient_price;
    let mut adj = Adjoint {
        p_notional: seed.rho * 2.0 * gap * params.kp / den,
        q_notional: seed.rho * 2.0 * gap * params.kq / den,
        ..Adjoint::default()
    };
    for (i, maker) in Maker::BOTH.into_iter().enumerate() {
        let g = payoff_grad(maker, state, params);
        adj.p_notional += seed.ic[i] * g.d_p_notional;
        adj.q_notional += seed.ic[i] * g.d_q_notional;
        adj.y[i] = seed.rho + seed.ic[i];
        adj.penalty[i] = -seed.ic[i];
    }
    adj
}

/// Pulls the adjoint of one fine step's outputs back to its inputs and adds
/// the step's `Z` adjoint (p and q rows) to `z_bar`.
fn step_backward(
    e: &TapeStep,
    z: &ZMatrix,
    params: &ModelParams,
    mode: SimMode,
    dt: f64,
    adj: &mut Adjoint,
    z_bar: &mut [[f64; 7]; 2],
) {
    let ev =
        evaluate_step(&e.state, z, params, mode, dt).expect("step succeeded in the forward pass");
    let out = *adj;
    let c = ev.controls;
    let sigma = params.sigma;
    let lambda0 = params.lambda0;
    let sq = dt.sqrt();
    let db = e.normals.map(|xi| sq * xi);

    if e.jump == Some(JumpKind::MakerP) {
        adj.p_quote += out.p_notional;
    }
    if e.jump == Some(JumpKind::MakerQ) {
        adj.q_quote += out.q_notional;
    }
    let mut mu_bar = [out.p_quote * dt, out.q_quote * dt];
    let mut rate_bar = [0.0; 4];
    let mut inc_bar = [[0.0; 4]; 2];

    for (i, maker) in Maker::BOTH.into_iter().enumerate() {
        let zi = z.row(maker);
        let zb = &mut z_bar[i];
        let a = out.y[i];
        // Y increment: compensated jumps, Brownian terms, -F dt.
        for kind in JumpKind::ALL {
            let hit = if e.jump == Some(kind) { 1.0 } else { 0.0 };
            zb[jump_column(kind)] += a * (hit - lambda0 * dt);
        }
        zb[Z_EFFICIENT] += a * db[0];
        zb[Z_P_PRICE] += a * (db[1] - c.mu_p * dt / sigma);
        zb[Z_Q_PRICE] += a * (db[2] - c.mu_q * dt / sigma);
        mu_bar[0] -= a * zi[Z_P_PRICE] * dt / sigma;
        mu_bar[1] -= a * zi[Z_Q_PRICE] * dt / sigma;

        let own = 2 + i;
        rate_bar[own] += out.penalty[i] * (ev.rates[own] - lambda0) * dt;

        let f_bar = -a * dt;
        for kind in JumpKind::ALL {
            let k = kind.index();
            let col = jump_column(kind);
            inc_bar[i][k] += f_bar * ev.rates[k];
            rate_bar[k] += f_bar * (ev.inc[i][k] + zi[col]);
            zb[col] += f_bar * (ev.rates[k] - lambda0);
        }
        rate_bar[own] -= f_bar * (ev.rates[own] - lambda0);
        zb[Z_P_PRICE] -= f_bar * c.mu_p / sigma;
        zb[Z_Q_PRICE] -= f_bar * c.mu_q / sigma;
        mu_bar[0] -= f_bar * zi[Z_P_PRICE] / sigma;
        mu_bar[1] -= f_bar * zi[Z_Q_PRICE] / sigma;
    }

    // Undo the rescaling r_k = raw_k / (dt * sum raw).
    let raw_bar = if ev.rescaled() {
        let dot: f64 = rate_bar.iter().zip(&ev.rates).map(|(b, r)| b * r).sum();
        rate_bar.map(|b| (b - dt * dot) / ev.scale)
    } else {
        rate_bar
    };

    if mode != SimMode::ForcedAnchor {
        let la = ev.rates[0] * ev.scale;
        let lb = ev.rates[1] * ev.scale;
        let d_mu = params.c * (lb * raw_bar[1] - la * raw_bar[0]);
        mu_bar[0] += d_mu;
        mu_bar[1] += d_mu;
        if !c.clipped.lam_p {
            z_bar[0][Z_P_ORDERS] += raw_bar[2];
            inc_bar[0][JumpKind::MakerP.index()] += raw_bar[2];
        }
        if !c.clipped.lam_q {
            z_bar[1][Z_Q_ORDERS] += raw_bar[3];
            inc_bar[1][JumpKind::MakerQ.index()] += raw_bar[3];
        }
        if let (Some(gamma), false) = (c.gamma, c.clipped.mu_p) {
            // mu = ln(gamma) / (2c); gamma solves c B g^2 - (zt / sigma) g - c A = 0.
            let cond = spread_condition_from(&ev.inc, z, params);
            let s_bar = 0.5 * (mu_bar[0] + mu_bar[1]);
            let g_bar = s_bar / (params.c * gamma);
            let phi = 2.0 * params.c * cond.b * gamma - cond.z_tilde / sigma;
            let a_bar = g_bar * params.c / phi;
            let b_bar = -g_bar * params.c * gamma * gamma / phi;
            let zt_bar = g_bar * (gamma / sigma) / phi;
            let kappa = lambda0 * (-params.d).exp();
            for i in 0..2 {
                inc_bar[i][JumpKind::BuyerArrival.index()] += 0.5 * a_bar;
                inc_bar[i][JumpKind::SellerArrival.index()] += 0.5 * b_bar;
                z_bar[i][Z_BUY] += 0.5 * a_bar;
                z_bar[i][Z_SELL] += 0.5 * b_bar;
            }
            z_bar[0][Z_P_PRICE] += 0.5 * zt_bar / kappa;
            z_bar[1][Z_Q_PRICE] += 0.5 * zt_bar / kappa;
        }
    }

    // Payoff increments depend on the notionals and, through the recorded
    // quote, on the maker's own price.
    let s0 = &e.state;
    let base = [
        payoff_grad(Maker::P, s0, params),
        payoff_grad(Maker::Q, s0, params),
    ];
    for kind in JumpKind::ALL {
        let k = kind.index();
        if inc_bar[0][k] == 0.0 && inc_bar[1][k] == 0.0 {
            continue;
        }
        let sk = s0.apply_jump(kind);
        for (i, maker) in Maker::BOTH.into_iter().enumerate() {
            let b = inc_bar[i][k];
            let gk = payoff_grad(maker, &sk, params);
            adj.p_notional += b * (gk.d_p_notional - base[i].d_p_notional);
            adj.q_notional += b * (gk.d_q_notional - base[i].d_q_notional);
            match kind {
                JumpKind::MakerP => adj.p_quote += b * gk.d_p_notional,
                JumpKind::MakerQ => adj.q_quote += b * gk.d_q_notional,
                _ => {}
            }
        }
    }
}

/// Adds `d(path loss) / d theta` to `grad` for a path recorded in `tape`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn path_gradient(
    net: &PolicyNetwork,
    params: &ModelParams,
    mode: SimMode,
    tape: &[TapeStep],
    final_state: &MarketState,
    seed: TerminalSeed,
    grad: &mut [f64],
) {
    let dt = params.dt_fine();
    let sub = params.substeps;
    let sc = net.scaling;
    let mut adj = terminal_adjoint(final_state, seed, params);
    for k in (0..params.n_steps).rev() {
        let first = &tape[k * sub];
        let cache: ForwardCache =
            net.forward_cached(&sc.features(first.state.t, &first.state, first.y));
        let z = ZMatrix::from_network_output(cache.scaled_output());
        debug_assert_eq!(z.p, signed_components(cache.scaled_output()));
        let mut z_bar = [[0.0; 7]; 2];
        for j in (0..sub).rev() {
            step_backward(
                &tape[k * sub + j],
                &z,
                params,
                mode,
                dt,
                &mut adj,
                &mut z_bar,
            );
        }
        let w_bar = ZMatrix::untie_adjoint(&z_bar[0], &z_bar[1]);
        let out_bar: [f64; OUTPUT] = std::array::from_fn(|i| w_bar[i] * OUTPUT_SIGNS[i]);
        let fb = net.backward(&cache, &out_bar, grad);
        adj.p_notional += fb[4] / sc.notional;
        adj.q_notional += fb[6] / sc.notional;
        adj.y[0] += fb[8] / sc.utility;
        adj.y[1] += fb[9] / sc.utility;
        adj.p_quote += fb[10] / sc.price;
        adj.q_quote += fb[11] / sc.price;
    }
}

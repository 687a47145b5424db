//! Static market algebra: state, clearing rule, maker payoffs, investor
//! intensities and order cancellation.

use serde::{Deserialize, Serialize};

use crate::params::ModelParams;

/// One of the two strategic market makers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Maker {
    P,
    Q,
}

impl Maker {
    pub const BOTH: [Maker; 2] = [Maker::P, Maker::Q];

    pub fn other(self) -> Maker {
        match self {
            Maker::P => Maker::Q,
            Maker::Q => Maker::P,
        }
    }

    pub fn own_jump(self) -> JumpKind {
        match self {
            Maker::P => JumpKind::MakerP,
            Maker::Q => JumpKind::MakerQ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JumpKind {
    BuyerArrival,
    SellerArrival,
    MakerP,
    MakerQ,
}

impl JumpKind {
    pub const ALL: [JumpKind; 4] = [
        JumpKind::BuyerArrival,
        JumpKind::SellerArrival,
        JumpKind::MakerP,
        JumpKind::MakerQ,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Auction characteristics `X = (x1..x7)` plus the makers' live quotes and
/// the sizes of the next candidate investor orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub t: f64,
    /// x1: surviving buy volume.
    pub buy_volume: f64,
    /// x2: surviving sell volume.
    pub sell_volume: f64,
    /// x3: efficient price P*.
    pub efficient_price: f64,
    /// x4: sum of maker-p quote prices at its order times.
    pub p_notional: f64,
    /// x5: maker-p order count.
    pub p_orders: u32,
    /// x6: sum of maker-q quote prices at its order times.
    pub q_notional: f64,
    /// x7: maker-q order count.
    pub q_orders: u32,
    pub p_quote: f64,
    pub q_quote: f64,
    /// r1: size of the next buy order after its cancellation draw (0 if cancelled).
    pub next_buy: f64,
    /// r2: size of the next sell order after its cancellation draw.
    pub next_sell: f64,
}

impl MarketState {
    /// Opening state: only the block trade at P0*, quotes at P0*.
    pub fn initial(params: &ModelParams) -> Self {
        Self {
            t: 0.0,
            buy_volume: 0.0,
            sell_volume: 0.0,
            efficient_price: params.p0_star,
            p_notional: 0.0,
            p_orders: 0,
            q_notional: 0.0,
            q_orders: 0,
            p_quote: params.p0_star,
            q_quote: params.p0_star,
            next_buy: params.v_a,
            next_sell: params.v_b,
        }
    }

    pub fn x(&self) -> [f64; 7] {
        [
            self.buy_volume,
            self.sell_volume,
            self.efficient_price,
            self.p_notional,
            self.p_orders as f64,
            self.q_notional,
            self.q_orders as f64,
        ]
    }

    fn orders(&self, maker: Maker) -> (f64, f64) {
        match maker {
            Maker::P => (self.p_orders as f64, self.p_notional),
            Maker::Q => (self.q_orders as f64, self.q_notional),
        }
    }

    pub fn quote(&self, maker: Maker) -> f64 {
        match maker {
            Maker::P => self.p_quote,
            Maker::Q => self.q_quote,
        }
    }

    /// State after one jump of `kind`. Maker jumps record the current quote.
    pub fn apply_jump(&self, kind: JumpKind) -> Self {
        let mut s = *self;
        match kind {
            JumpKind::BuyerArrival => s.buy_volume += self.next_buy,
            JumpKind::SellerArrival => s.sell_volume += self.next_sell,
            JumpKind::MakerP => {
                s.p_notional += self.p_quote;
                s.p_orders += 1;
            }
            JumpKind::MakerQ => {
                s.q_notional += self.q_quote;
                s.q_orders += 1;
            }
        }
        s
    }
}

fn clearing_parts(state: &MarketState, params: &ModelParams) -> (f64, f64) {
    let num = state.buy_volume - state.sell_volume
        + params.kp * state.p_notional
        + params.kq * state.q_notional
        + params.k0 * params.p0_star;
    let den = params.kp * state.p_orders as f64 + params.kq * state.q_orders as f64 + params.k0;
    (num, den)
}

/// Price zeroing `LM(x) + MO = 0` under linear maker supply/demand.
pub fn clearing_price(state: &MarketState, params: &ModelParams) -> f64 {
    let (num, den) = clearing_parts(state, params);
    num / den
}

fn slope(maker: Maker, params: &ModelParams) -> f64 {
    match maker {
        Maker::P => params.kp,
        Maker::Q => params.kq,
    }
}

/// Terminal trading gain `K^i (P^cl - P*) (count * P^cl - notional)`.
pub fn payoff_g(maker: Maker, state: &MarketState, params: &ModelParams) -> f64 {
    let pcl = clearing_price(state, params);
    let (count, notional) = state.orders(maker);
    slope(maker, params) * (pcl - state.efficient_price) * (count * pcl - notional)
}

/// `g^i(state after jump) - g^i(state)`.
pub fn delta_g(maker: Maker, state: &MarketState, jump: JumpKind, params: &ModelParams) -> f64 {
    payoff_g(maker, &state.apply_jump(jump), params) - payoff_g(maker, state, params)
}

/// Payoff together with its partial derivatives in the two notional
/// coordinates (x4, x6); the only payoff inputs that depend on maker spreads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayoffGrad {
    pub value: f64,
    pub d_p_notional: f64,
    pub d_q_notional: f64,
}

pub fn payoff_grad(maker: Maker, state: &MarketState, params: &ModelParams) -> PayoffGrad {
    let (num, den) = clearing_parts(state, params);
    let pcl = num / den;
    let (count, notional) = state.orders(maker);
    let k = slope(maker, params);
    let gap = pcl - state.efficient_price;
    let executed = count * pcl - notional;
    let d_pcl = k * (executed + gap * count);
    let (own_x4, own_x6) = match maker {
        Maker::P => (-k * gap, 0.0),
        Maker::Q => (0.0, -k * gap),
    };
    PayoffGrad {
        value: k * gap * executed,
        d_p_notional: d_pcl * params.kp / den + own_x4,
        d_q_notional: d_pcl * params.kq / den + own_x6,
    }
}

/// Investor arrival rates `(lambda^a, lambda^b)` given maker spreads and fee.
pub fn investor_intensities(mu_p: f64, mu_q: f64, d: f64, params: &ModelParams) -> (f64, f64) {
    let base = params.lambda0 * (-d).exp();
    let s = params.c * (mu_p + mu_q);
    (base * (-s).exp(), base * s.exp())
}

/// Probability that an order placed `time_remaining` before the close survives.
pub fn cancellation_survival(time_remaining: f64) -> f64 {
    (1.0 / (1.0 + time_remaining) + 0.5).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_params(p0: f64) -> ModelParams {
        ModelParams {
            p0_star: p0,
            ..ModelParams::apple()
        }
    }

    fn empty(params: &ModelParams) -> MarketState {
        MarketState::initial(params)
    }

    #[test]
    fn clearing_empty_state_is_block_price() {
        let p = unit_params(184.39);
        assert_eq!(clearing_price(&empty(&p), &p), 184.39);
    }

    #[test]
    fn clearing_single_buy() {
        let p = unit_params(100.0);
        let s = MarketState {
            buy_volume: 1.0,
            ..empty(&p)
        };
        assert!((clearing_price(&s, &p) - 101.0).abs() < 1e-12);
    }

    #[test]
    fn clearing_one_maker_order_at_block_price() {
        let p = unit_params(100.0);
        let s = MarketState {
            p_notional: 100.0,
            p_orders: 1,
            ..empty(&p)
        };
        assert_eq!(clearing_price(&s, &p), 100.0);
        assert_eq!(payoff_g(Maker::P, &s, &p), 0.0);
    }

    #[test]
    fn payoff_without_orders_is_zero() {
        let p = unit_params(100.0);
        let s = MarketState {
            buy_volume: 7.0,
            efficient_price: 93.0,
            q_notional: 300.0,
            q_orders: 3,
            ..empty(&p)
        };
        assert_eq!(payoff_g(Maker::P, &s, &p), 0.0);
    }

    #[test]
    fn delta_g_trivial_cases() {
        let p = unit_params(100.0);
        let s = MarketState {
            buy_volume: 3.0,
            p_notional: 205.0,
            p_orders: 2,
            next_buy: 0.0,
            ..empty(&p)
        };
        assert_eq!(delta_g(Maker::P, &s, JumpKind::BuyerArrival, &p), 0.0);
        let e = empty(&p);
        assert_eq!(delta_g(Maker::P, &e, JumpKind::MakerP, &p), 0.0);
    }

    #[test]
    fn intensities_examples() {
        let p = ModelParams {
            lambda0: 100.0,
            c: 0.1,
            ..ModelParams::apple()
        };
        assert_eq!(investor_intensities(0.0, 0.0, 0.0, &p), (100.0, 100.0));
        let (a, b) = investor_intensities(4.0, 6.0, 0.0, &p);
        assert!((a - 100.0 / std::f64::consts::E).abs() < 1e-10);
        assert!((b - 100.0 * std::f64::consts::E).abs() < 1e-9);
        assert!((a - 36.787944117144235).abs() < 1e-9);
        assert!((b - 271.8281828459045).abs() < 1e-9);
    }

    #[test]
    fn survival_examples() {
        assert_eq!(cancellation_survival(0.0), 1.0);
        assert_eq!(cancellation_survival(1.0), 1.0);
        let oracle = |u: f64| f64::min(1.0, 1.0 / (1.0 + u) + 0.5);
        assert!((cancellation_survival(9.0) - 0.6).abs() < 1e-15);
        assert_eq!(cancellation_survival(9.0), oracle(9.0));
    }

    #[test]
    fn survival_is_a_nonincreasing_probability() {
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let s = cancellation_survival(i as f64 * 0.05);
            assert!((0.0..=1.0).contains(&s));
            assert!(s <= prev);
            prev = s;
        }
    }

    fn arb_state() -> impl Strategy<Value = (MarketState, ModelParams)> {
        (
            (0.0..500.0f64, 0.0..500.0f64, 150.0..220.0f64),
            (0u32..300, 0u32..300, 150.0..220.0f64, 150.0..220.0f64),
            (150.0..220.0f64, 150.0..220.0f64, 0.0..2.0f64, 0.0..2.0f64),
            (0.2..3.0f64, 0.2..3.0f64, 0.2..3.0f64),
        )
            .prop_map(
                |((x1, x2, x3), (n5, n7, avg_p, avg_q), (pp, pq, r1, r2), (k0, kp, kq))| {
                    let params = ModelParams {
                        k0,
                        kp,
                        kq,
                        ..ModelParams::apple()
                    };
                    let s = MarketState {
                        t: 1.0,
                        buy_volume: x1,
                        sell_volume: x2,
                        efficient_price: x3,
                        p_notional: n5 as f64 * avg_p,
                        p_orders: n5,
                        q_notional: n7 as f64 * avg_q,
                        q_orders: n7,
                        p_quote: pp,
                        q_quote: pq,
                        next_buy: r1,
                        next_sell: r2,
                    };
                    (s, params)
                },
            )
    }

    proptest! {
        #[test]
        fn delta_g_matches_two_payoff_calls((s, p) in arb_state(), k in 0usize..4, m in 0usize..2) {
            let maker = Maker::BOTH[m];
            let jump = JumpKind::ALL[k];
            let direct = payoff_g(maker, &s.apply_jump(jump), &p) - payoff_g(maker, &s, &p);
            prop_assert!((delta_g(maker, &s, jump, &p) - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
        }

        #[test]
        fn intensity_product_is_spread_free(mp in -60.0..60.0f64, mq in -60.0..60.0f64, d in 0.0..6.0f64) {
            let p = ModelParams::apple();
            let (a, b) = investor_intensities(mp, mq, d, &p);
            let expected = p.lambda0 * p.lambda0 * (-2.0 * d).exp();
            prop_assert!(a >= 0.0 && b >= 0.0);
            prop_assert!(((a * b) - expected).abs() <= 1e-12 * expected);
        }

        #[test]
        fn payoff_grad_matches_finite_differences((s, p) in arb_state(), m in 0usize..2) {
            let maker = Maker::BOTH[m];
            let g = payoff_grad(maker, &s, &p);
            prop_assert!((g.value - payoff_g(maker, &s, &p)).abs() <= 1e-9 * (1.0 + g.value.abs()));
            let h = 1e-4;
            let bump = |dx4: f64, dx6: f64| {
                let t = MarketState { p_notional: s.p_notional + dx4, q_notional: s.q_notional + dx6, ..s };
                payoff_g(maker, &t, &p)
            };
            let fd4 = (bump(h, 0.0) - bump(-h, 0.0)) / (2.0 * h);
            let fd6 = (bump(0.0, h) - bump(0.0, -h)) / (2.0 * h);
            prop_assert!((g.d_p_notional - fd4).abs() <= 1e-5 * (1.0 + fd4.abs()));
            prop_assert!((g.d_q_notional - fd6).abs() <= 1e-5 * (1.0 + fd6.abs()));
        }
    }
}

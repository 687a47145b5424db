use auction_rebates::contract::{exchange_objective, trader_value_v0, ZMatrix};
use auction_rebates::model::cancellation_survival;
use auction_rebates::sim::{
    simulate_batch_with, ConstantContract, SimMode, SimOptions, ZeroContract,
};
use auction_rebates::stats::MeanSe;
use auction_rebates::{Maker, ModelParams};

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|k| f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn opts(mode: SimMode) -> SimOptions {
    SimOptions {
        mode,
        record_trajectories: false,
        stream: 0,
    }
}

#[test]
fn surviving_buy_volume_matches_quadrature() {
    let p = ModelParams {
        horizon: 2.0,
        n_steps: 2,
        substeps: 800,
        ..ModelParams::apple()
    };
    let batch =
        simulate_batch_with(&ZeroContract, &p, 100_000, 11, opts(SimMode::ForcedAnchor)).unwrap();
    let x1 = MeanSe::from_values(batch.terminals.iter().map(|t| t.x1));
    // Survival has a kink at one time unit before the close.
    let f = |t: f64| p.v_a * p.lambda0 * cancellation_survival(p.horizon - t);
    let oracle = simpson(f, 0.0, 1.0, 2000) + simpson(f, 1.0, 2.0, 2000);
    assert!((oracle - 190.5465).abs() < 1e-3, "quadrature {oracle}");
    let z = x1.z_score(oracle);
    assert!(z.abs() < 3.0, "x1_T = {} +- {} vs {oracle}", x1.mean, x1.se);
}

#[test]
fn constant_contract_keeps_makers_at_reservation_value() {
    let p = ModelParams {
        horizon: 1.0,
        n_steps: 5,
        substeps: 160,
        d: 1.0,
        ..ModelParams::apple()
    };
    let z = ZMatrix::from_network_output([12.0, 9.0, 2.0, 3.0, 4.0, 1.0, 5.0]);
    let batch =
        simulate_batch_with(&ConstantContract(z), &p, 20_000, 5, opts(SimMode::Fallback)).unwrap();
    for (maker, r0) in [(Maker::P, p.r0_p), (Maker::Q, p.r0_q)] {
        let v = trader_value_v0(&batch, maker, &p);
        assert!(
            v.z_score(r0).abs() < 3.0,
            "{maker:?}: V0 - R0 = {} +- {}",
            v.mean - r0,
            v.se
        );
    }
    let report = exchange_objective(&batch, p.d, &p);
    assert!(report.decomposition_residual().abs() < 1e-6 * report.rho.mean.abs());
    assert_eq!(report.paths, 20_000);
}

#[test]
fn strict_mode_reports_the_failing_path() {
    let p = ModelParams {
        horizon: 1.0,
        n_steps: 5,
        substeps: 160,
        ..ModelParams::apple()
    };
    // With Z = 0 and an empty book the spread condition has no positive root.
    match simulate_batch_with(&ZeroContract, &p, 8, 1, opts(SimMode::Strict)) {
        Err(auction_rebates::Error::EquilibriumNotFound { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected EquilibriumNotFound, got {other:?}"),
    }
    let fallback = simulate_batch_with(&ZeroContract, &p, 8, 1, opts(SimMode::Fallback)).unwrap();
    assert_eq!(fallback.terminals.len(), 8);
}

//! The rebate policy: a 12-8-7 sigmoid network whose scaled outputs are the
//! shared contract sensitivities.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contract::{signed_components, ZMatrix};
use crate::error::{Error, Result};
use crate::model::MarketState;
use crate::params::ModelParams;
use crate::sim::{path_rng, ContractPolicy};

pub const INPUT: usize = 12;
pub const HIDDEN: usize = 8;
pub const OUTPUT: usize = 7;
/// Outputs are `OUTPUT_SCALE * sigmoid(.)`.
pub const OUTPUT_SCALE: f64 = 20.0;
pub const N_PARAMS: usize = HIDDEN * INPUT + HIDDEN + OUTPUT * HIDDEN + OUTPUT;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * INPUT;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + OUTPUT * HIDDEN;

/// Stream id reserved for weight initialisation.
pub const INIT_STREAM: u32 = u32::MAX;

/// Affine input normalisation, fixed per run from the model constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    /// Divides `t`.
    pub time: f64,
    /// Divides volumes `x1, x2` and order counts `x5, x7`.
    pub volume: f64,
    /// Subtracted from every price.
    pub price_center: f64,
    /// Divides centred prices.
    pub price: f64,
    /// Divides notionals `x4, x6`.
    pub notional: f64,
    /// Divides `Y^p, Y^q`.
    pub utility: f64,
}

impl FeatureScaling {
    pub fn from_params(params: &ModelParams) -> Self {
        let volume = (params.lambda0 * params.horizon).max(1.0);
        Self {
            time: params.horizon,
            volume,
            price_center: params.p0_star,
            price: params.sigma * params.horizon.sqrt(),
            notional: params.p0_star.abs().max(1.0) * volume,
            utility: volume,
        }
    }

    /// Features in the order `t, x1..x7, Y^p, Y^q, P^p, P^q`.
    pub fn features(&self, t: f64, state: &MarketState, y: [f64; 2]) -> [f64; INPUT] {
        let x = state.x();
        [
            t / self.time,
            x[0] / self.volume,
            x[1] / self.volume,
            (x[2] - self.price_center) / self.price,
            x[3] / self.notional,
            x[4] / self.volume,
            x[5] / self.notional,
            x[6] / self.volume,
            y[0] / self.utility,
            y[1] / self.utility,
            (state.p_quote - self.price_center) / self.price,
            (state.q_quote - self.price_center) / self.price,
        ]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCache {
    pub features: [f64; INPUT],
    pub hidden: [f64; HIDDEN],
    /// Sigmoid outputs before scaling.
    pub output: [f64; OUTPUT],
}

impl ForwardCache {
    pub fn scaled_output(&self) -> [f64; OUTPUT] {
        self.output.map(|o| OUTPUT_SCALE * o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNetwork {
    /// `W1` (row-major, 8 x 12), `b1`, `W2` (7 x 8), `b2`.
    pub theta: Vec<f64>,
    pub scaling: FeatureScaling,
}

impl PolicyNetwork {
    pub fn zeros(scaling: FeatureScaling) -> Self {
        Self {
            theta: vec![0.0; N_PARAMS],
            scaling,
        }
    }

    /// Weights and biases uniform in `[-0.5, 0.5]`.
    pub fn init(seed: u64, scaling: FeatureScaling) -> Self {
        let mut rng = path_rng(seed, INIT_STREAM, 0);
        let theta = (0..N_PARAMS)
            .map(|_| rng.random_range(-0.5..=0.5))
            .collect();
        Self { theta, scaling }
    }

    pub fn forward_cached(&self, features: &[f64; INPUT]) -> ForwardCache {
        let th = &self.theta;
        let mut hidden = [0.0; HIDDEN];
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &th[W1 + j * INPUT..W1 + (j + 1) * INPUT];
            let pre: f64 = row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>() + th[B1 + j];
            *h = sigmoid(pre);
        }
        let mut output = [0.0; OUTPUT];
        for (k, o) in output.iter_mut().enumerate() {
            let row = &th[W2 + k * HIDDEN..W2 + (k + 1) * HIDDEN];
            let pre: f64 = row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + th[B2 + k];
            *o = sigmoid(pre);
        }
        ForwardCache {
            features: *features,
            hidden,
            output,
        }
    }

    /// `20 * MLP(features)`, each component in `(0, 20)`.
    pub fn forward(&self, features: &[f64; INPUT]) -> [f64; OUTPUT] {
        self.forward_cached(features).scaled_output()
    }

    /// Accumulates `d(out . out_bar) / d theta` into `grad` and returns the
    /// gradient with respect to the features. `out_bar` is the adjoint of the
    /// scaled output.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        out_bar: &[f64; OUTPUT],
        grad: &mut [f64],
    ) -> [f64; INPUT] {
        let th = &self.theta;
        let mut hidden_bar = [0.0; HIDDEN];
        for k in 0..OUTPUT {
            let o = cache.output[k];
            let pre_bar = out_bar[k] * OUTPUT_SCALE * o * (1.0 - o);
            grad[B2 + k] += pre_bar;
            for j in 0..HIDDEN {
                grad[W2 + k * HIDDEN + j] += pre_bar * cache.hidden[j];
                hidden_bar[j] += pre_bar * th[W2 + k * HIDDEN + j];
            }
        }
        let mut feat_bar = [0.0; INPUT];
        for j in 0..HIDDEN {
            let h = cache.hidden[j];
            let pre_bar = hidden_bar[j] * h * (1.0 - h);
            grad[B1 + j] += pre_bar;
            for i in 0..INPUT {
                grad[W1 + j * INPUT + i] += pre_bar * cache.features[i];
                feat_bar[i] += pre_bar * th[W1 + j * INPUT + i];
            }
        }
        feat_bar
    }

    /// Contract produced at `(t, state, Y)`.
    pub fn contract(&self, t: f64, state: &MarketState, y: [f64; 2]) -> ZMatrix {
        let out = self.forward(&self.scaling.features(t, state, y));
        ZMatrix::from_network_output(out)
    }

    /// Shared signed components `w` (before tying) at `(t, state, Y)`.
    pub fn components(&self, t: f64, state: &MarketState, y: [f64; 2]) -> [f64; OUTPUT] {
        signed_components(self.forward(&self.scaling.features(t, state, y)))
    }

    /// Text checkpoint: a magic line, the layer sizes, the feature scaling,
    /// then each weight matrix row by row followed by its bias vector.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, vals: &[f64]| {
            let parts: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", parts.join(" "));
        };
        let _ = writeln!(s, "rebate-policy-network 1");
        let _ = writeln!(s, "{INPUT} {HIDDEN} {OUTPUT}");
        let sc = &self.scaling;
        line(
            &mut s,
            &[
                sc.time,
                sc.volume,
                sc.price_center,
                sc.price,
                sc.notional,
                sc.utility,
            ],
        );
        for j in 0..HIDDEN {
            line(&mut s, &self.theta[W1 + j * INPUT..W1 + (j + 1) * INPUT]);
        }
        line(&mut s, &self.theta[B1..B1 + HIDDEN]);
        for k in 0..OUTPUT {
            line(&mut s, &self.theta[W2 + k * HIDDEN..W2 + (k + 1) * HIDDEN]);
        }
        line(&mut s, &self.theta[B2..B2 + OUTPUT]);
        s
    }

    pub fn from_text(text: &str, source: &Path) -> Result<Self> {
        let bad = |row: usize, reason: &str| Error::MalformedInput {
            path: source.to_path_buf(),
            row,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        if lines.next().map(|(_, l)| l) != Some("rebate-policy-network 1") {
            return Err(bad(1, "missing header `rebate-policy-network 1`"));
        }
        let mut numbers = |expected: usize| -> Result<Vec<f64>> {
            let (row, l) = lines
                .next()
                .ok_or_else(|| bad(0, "unexpected end of file"))?;
            let vals = l
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(row, "not a number")))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != expected {
                return Err(bad(
                    row,
                    &format!("expected {expected} values, found {}", vals.len()),
                ));
            }
            Ok(vals)
        };
        let sizes = numbers(3)?;
        if sizes != [INPUT as f64, HIDDEN as f64, OUTPUT as f64] {
            return Err(bad(2, "layer sizes must be 12 8 7"));
        }
        let sc = numbers(6)?;
        let scaling = FeatureScaling {
            time: sc[0],
            volume: sc[1],
            price_center: sc[2],
            price: sc[3],
            notional: sc[4],
            utility: sc[5],
        };
        let mut theta = Vec::with_capacity(N_PARAMS);
        for _ in 0..HIDDEN {
            theta.extend(numbers(INPUT)?);
        }
        theta.extend(numbers(HIDDEN)?);
        for _ in 0..OUTPUT {
            theta.extend(numbers(HIDDEN)?);
        }
        theta.extend(numbers(OUTPUT)?);
        Ok(Self { theta, scaling })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

impl ContractPolicy for PolicyNetwork {
    fn z(&self, t: f64, state: &MarketState, y: [f64; 2]) -> ZMatrix {
        self.contract(t, state, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scaling() -> FeatureScaling {
        FeatureScaling::from_params(&ModelParams::apple())
    }

    #[test]
    fn zero_network_outputs_ten() {
        let net = PolicyNetwork::zeros(scaling());
        assert_eq!(net.forward(&[0.3; INPUT]), [10.0; OUTPUT]);
    }

    #[test]
    fn outputs_stay_in_range() {
        let mut net = PolicyNetwork::init(4, scaling());
        for v in &mut net.theta {
            *v *= 40.0;
        }
        for k in 0..50 {
            let f = [k as f64 - 25.0; INPUT];
            for o in net.forward(&f) {
                assert!((0.0..=20.0).contains(&o));
            }
        }
        let net = PolicyNetwork::init(4, scaling());
        assert!(net.theta.iter().all(|v| (-0.5..=0.5).contains(v)));
        assert_eq!(net, PolicyNetwork::init(4, scaling()));
        assert_ne!(net, PolicyNetwork::init(5, scaling()));
    }

    #[test]
    fn features_of_opening_state() {
        let p = ModelParams::apple();
        let f = scaling().features(0.0, &MarketState::initial(&p), [0.0; 2]);
        assert_eq!(f, [0.0; INPUT]);
        let f = scaling().features(
            5.0,
            &MarketState {
                buy_volume: 500.0,
                ..MarketState::initial(&p)
            },
            [1000.0, 0.0],
        );
        assert_eq!((f[0], f[1], f[8]), (0.5, 0.5, 1.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = PolicyNetwork::init(11, scaling());
        let feats: [f64; INPUT] = std::array::from_fn(|i| 0.1 * i as f64 - 0.4);
        let weights: [f64; OUTPUT] = std::array::from_fn(|k| 1.0 - 0.3 * k as f64);
        let objective = |n: &PolicyNetwork, f: &[f64; INPUT]| -> f64 {
            n.forward(f).iter().zip(weights).map(|(o, w)| o * w).sum()
        };
        let mut grad = vec![0.0; N_PARAMS];
        let feat_bar = net.backward(&net.forward_cached(&feats), &weights, &mut grad);
        let h = 1e-6;
        for (i, &g) in grad.iter().enumerate() {
            let mut a = net.clone();
            a.theta[i] += h;
            let mut b = net.clone();
            b.theta[i] -= h;
            let fd = (objective(&a, &feats) - objective(&b, &feats)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-7 * (1.0 + fd.abs()), "theta[{i}]");
        }
        for i in 0..INPUT {
            let mut fa = feats;
            fa[i] += h;
            let mut fb = feats;
            fb[i] -= h;
            let fd = (objective(&net, &fa) - objective(&net, &fb)) / (2.0 * h);
            assert!(
                (fd - feat_bar[i]).abs() < 1e-7 * (1.0 + fd.abs()),
                "feature {i}"
            );
        }
    }

    #[test]
    fn single_weight_quadratic_gradient() {
        // L = (o_0 - 3)^2 with o_0 = 20 sigmoid(b2_0) when everything else is 0.
        let mut net = PolicyNetwork::zeros(scaling());
        net.theta[B2] = 0.7;
        let cache = net.forward_cached(&[0.0; INPUT]);
        let o = cache.scaled_output()[0];
        let mut out_bar = [0.0; OUTPUT];
        out_bar[0] = 2.0 * (o - 3.0);
        let mut grad = vec![0.0; N_PARAMS];
        net.backward(&cache, &out_bar, &mut grad);
        let s = sigmoid(0.7);
        let analytic = 2.0 * (20.0 * s - 3.0) * 20.0 * s * (1.0 - s);
        assert!((grad[B2] - analytic).abs() < 1e-10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = PolicyNetwork::init(8, scaling());
        let text = net.to_text();
        assert!(text.starts_with("rebate-policy-network 1\n12 8 7\n"));
        let back = PolicyNetwork::from_text(&text, Path::new("mem")).unwrap();
        assert_eq!(back, net);
        let broken = text.replacen("12 8 7", "12 9 7", 1);
        assert!(matches!(
            PolicyNetwork::from_text(&broken, Path::new("mem")),
            Err(Error::MalformedInput { row: 2, .. })
        ));
    }
}

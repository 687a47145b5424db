//! Market, penalty and discretisation constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All constants of the auction model.
///
/// Time is split into `n_steps` policy steps (the grid on which the rebate
/// policy is queried and trajectories are recorded), each resolved by
/// `substeps` fine steps on which jumps are thinned. Field names in the
/// serialised form follow the model's notation (`T`, `K0`, `R0_p`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
    pub substeps: usize,
    #[serde(rename = "K0")]
    pub k0: f64,
    #[serde(rename = "Kp")]
    pub kp: f64,
    #[serde(rename = "Kq")]
    pub kq: f64,
    #[serde(rename = "P0_star")]
    pub p0_star: f64,
    pub sigma: f64,
    pub lambda0: f64,
    pub lambda_inf: f64,
    pub mu_inf: f64,
    pub c: f64,
    pub v_a: f64,
    pub v_b: f64,
    pub d: f64,
    pub epsilon: f64,
    #[serde(rename = "R0_p")]
    pub r0_p: f64,
    #[serde(rename = "R0_q")]
    pub r0_q: f64,
    pub rng_seed: u64,
}

impl ModelParams {
    /// Apple calibration (Oct-Dec 2023 closes): P0* = 184.39, sigma = 1.76.
    pub fn apple() -> Self {
        Self {
            horizon: 10.0,
            n_steps: 50,
            substeps: 160,
            k0: 1.0,
            kp: 1.0,
            kq: 1.0,
            p0_star: 184.39,
            sigma: 1.76,
            lambda0: 100.0,
            lambda_inf: 200.0,
            mu_inf: 60.0,
            c: 0.1,
            v_a: 1.0,
            v_b: 1.0,
            d: 0.0,
            epsilon: 2.0,
            r0_p: 100.0 - 35000.0,
            r0_q: 100.0 - 35000.0,
            rng_seed: 20231229,
        }
    }

    /// Alphabet calibration: P0* = 134.24, sigma = 2.11.
    pub fn alphabet() -> Self {
        Self {
            p0_star: 134.24,
            sigma: 2.11,
            ..Self::apple()
        }
    }

    pub fn with_fee(&self, d: f64) -> Self {
        Self { d, ..self.clone() }
    }

    /// Length of one policy step.
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Length of one fine (jump-resolution) step.
    pub fn dt_fine(&self) -> f64 {
        self.dt() / self.substeps as f64
    }

    pub fn total_fine_steps(&self) -> usize {
        self.n_steps * self.substeps
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &'static str, reason: impl Into<String>) -> Result<()> {
            Err(Error::InvalidParams {
                field,
                reason: reason.into(),
            })
        }
        let finite = [
            ("T", self.horizon),
            ("K0", self.k0),
            ("Kp", self.kp),
            ("Kq", self.kq),
            ("P0_star", self.p0_star),
            ("sigma", self.sigma),
            ("lambda0", self.lambda0),
            ("lambda_inf", self.lambda_inf),
            ("mu_inf", self.mu_inf),
            ("c", self.c),
            ("v_a", self.v_a),
            ("v_b", self.v_b),
            ("d", self.d),
            ("epsilon", self.epsilon),
            ("R0_p", self.r0_p),
            ("R0_q", self.r0_q),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return bad(name, format!("must be finite, got {v}"));
            }
        }
        if self.horizon <= 0.0 {
            return bad("T", "must be > 0");
        }
        if self.n_steps == 0 {
            return bad("n_steps", "must be >= 1");
        }
        if self.substeps == 0 {
            return bad("substeps", "must be >= 1");
        }
        for (name, v) in [("K0", self.k0), ("Kp", self.kp), ("Kq", self.kq)] {
            if v <= 0.0 {
                return bad(name, "must be > 0");
            }
        }
        if self.sigma <= 0.0 {
            return bad("sigma", "must be > 0");
        }
        if self.lambda0 < 0.0 || self.lambda0 > self.lambda_inf {
            return bad("lambda0", "must satisfy 0 <= lambda0 <= lambda_inf");
        }
        if self.mu_inf <= 0.0 {
            return bad("mu_inf", "must be > 0");
        }
        if self.c < 0.0 {
            return bad("c", "must be >= 0");
        }
        if self.v_a < 0.0 || self.v_b < 0.0 {
            return bad("v_a", "order sizes must be >= 0");
        }
        if self.d < 0.0 {
            return bad("d", "must be >= 0");
        }
        if self.epsilon < 0.0 {
            return bad("epsilon", "must be >= 0");
        }
        // Four competing processes, each nominally capped at lambda_inf.
        let budget = 4.0 * self.lambda_inf * self.dt_fine();
        if budget > 1.0 {
            return bad(
                "substeps",
                format!("4 * lambda_inf * dt_fine = {budget:.3} must be <= 1"),
            );
        }
        Ok(())
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::apple()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelParams::apple().validate().unwrap();
        ModelParams::alphabet().validate().unwrap();
        assert_eq!(ModelParams::apple().r0_p, -34900.0);
    }

    #[test]
    fn rejects_coarse_grid() {
        let p = ModelParams {
            substeps: 1,
            ..ModelParams::apple()
        };
        assert!(matches!(
            p.validate(),
            Err(Error::InvalidParams {
                field: "substeps",
                ..
            })
        ));
    }

    #[test]
    fn rejects_bad_values() {
        let mut p = ModelParams::apple();
        p.k0 = 0.0;
        assert!(p.validate().is_err());
        let mut p = ModelParams::apple();
        p.lambda0 = 300.0;
        assert!(p.validate().is_err());
        let mut p = ModelParams::apple();
        p.sigma = f64::NAN;
        assert!(p.validate().is_err());
    }

    #[test]
    fn toml_uses_model_names() {
        let text = toml::to_string(&ModelParams::apple()).unwrap();
        assert!(text.contains("T = 10.0"));
        assert!(text.contains("R0_p = -34900.0"));
        let back: ModelParams = toml::from_str(&text).unwrap();
        assert_eq!(back, ModelParams::apple());
        assert!(toml::from_str::<ModelParams>(&format!("{text}\nbogus = 1\n")).is_err());
    }
}

//! Sample means with standard errors.

use serde::{Deserialize, Serialize};

/// Sample mean and its standard error (sample SD over sqrt(n)).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for v in values {
            n += 1;
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
        }
        let se = if n > 1 {
            (m2 / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self::from_values(values.iter().copied())
    }

    pub fn shift(self, by: f64) -> Self {
        Self {
            mean: self.mean + by,
            se: self.se,
        }
    }

    /// `|mean - target| / se` (infinite when se is 0 and the mean is off).
    pub fn z_score(&self, target: f64) -> f64 {
        let gap = (self.mean - target).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.se
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_two_pass_formula() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25];
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m = MeanSe::from_slice(&xs);
        assert!((m.mean - mean).abs() < 1e-12);
        assert!((m.se - (var / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_sizes() {
        assert_eq!(MeanSe::from_slice(&[]), MeanSe { mean: 0.0, se: 0.0 });
        assert_eq!(MeanSe::from_slice(&[3.0]).se, 0.0);
    }
}

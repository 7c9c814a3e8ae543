use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Linear-beta DDPM noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(config_err(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let span = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / span)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(50, 1e-4, 0.05).expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn two_step_cumulative_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.beta(), &[0.1, 0.2]);
        assert!((s.alpha_bar()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn constant_beta() {
        let s = NoiseSchedule::linear(7, 0.02, 0.02).unwrap();
        assert!(s.beta().iter().all(|&b| b == 0.02));
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar()[0], s.alpha()[0]);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.beta().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn invalid_ranges_rejected() {
        for (t, a, b) in [(1, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.3, 0.2), (5, 0.1, 1.0)] {
            assert!(matches!(NoiseSchedule::linear(t, a, b), Err(Error::Config(_))));
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-step variances of the forward noising process and derived products.
///
/// Steps are indexed `1..=T`; index `t` maps to slot `t - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = Error;
    fn try_from(beta: Vec<f64>) -> Result<Self> {
        NoiseSchedule::from_betas(beta)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.beta
    }
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Invalid("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule { beta, alpha, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn slot(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "step {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.slot(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.slot(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.slot(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.slot(t)]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.steps() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("step {t} outside 1..={}", self.steps())))
        }
    }
}

/// Draw from the forward marginal: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("noise has {} entries, state has {}", eps.len(), x0.len())));
    }
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.beta(1), 0.5);
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.sigma(1), 0.5f64.sqrt());
    }

    #[test]
    fn rejects_out_of_range_betas() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn thousand_step_linear_schedule() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        // independent oracle: product over the closed-form betas in log space
        let log_prod: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_bar(1000) - log_prod.exp()).abs() < 1e-15);
        assert!((s.alpha_bar(1000) - 4.035829e-5).abs() < 1e-10);
    }

    #[test]
    fn forward_sample_branches() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = vec![1.0, -2.0];
        let a = s.alpha_bar(4).sqrt();
        assert_eq!(forward_sample(&x, 4, &[0.0, 0.0], &s).unwrap(), vec![a, -2.0 * a]);
        let b = (1.0 - s.alpha_bar(4)).sqrt();
        assert_eq!(forward_sample(&[0.0, 0.0], 4, &x, &s).unwrap(), vec![b, -2.0 * b]);
        assert!(forward_sample(&x, 4, &[0.0], &s).is_err());
        assert!(forward_sample(&x, 11, &x, &s).is_err());
    }
}

//! Overfitting detector and the adaptive `(β, γ)` schedule.
//!
//! The detector tracks `r`, a running estimate of `E[sign(D(x_real))]`. When
//! `r` sits above `η` the discriminator is judged to be memorizing, so `β`
//! moves up by `Δβ` and more of each block's output is routed through the
//! manifold; below `η` it moves down. `γ` follows `γ₀ + Δγ·β`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub beta: f64,
    pub gamma: f64,
    pub beta0: f64,
    pub gamma0: f64,
    pub delta_beta: f64,
    pub delta_gamma: f64,
    pub eta: f64,
    pub r_stat: f64,
    pub ema_decay: f64,
    frozen: bool,
}

impl Default for MetaState {
    fn default() -> Self {
        MetaState::new(0.1, 0.1, 0.001, 1.2, 0.5, 0.99).expect("defaults are valid")
    }
}

impl MetaState {
    pub fn new(beta0: f64, gamma0: f64, delta_beta: f64, delta_gamma: f64, eta: f64, ema_decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta0) {
            return Err(Error::InvalidParameter(format!("beta0 must lie in [0, 1], got {beta0}")));
        }
        if !(gamma0 >= 0.0) || !(delta_beta >= 0.0) || !(delta_gamma >= 0.0) {
            return Err(Error::InvalidParameter("gamma0, delta_beta and delta_gamma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::InvalidParameter(format!("ema_decay must lie in [0, 1), got {ema_decay}")));
        }
        if !eta.is_finite() {
            return Err(Error::InvalidParameter("eta must be finite".into()));
        }
        Ok(MetaState {
            beta: beta0,
            gamma: gamma0 + delta_gamma * beta0,
            beta0,
            gamma0,
            delta_beta,
            delta_gamma,
            eta,
            r_stat: 0.0,
            ema_decay,
            frozen: false,
        })
    }

    /// Folds one batch of discriminator outputs on real data into `r`.
    /// Returns the batch statistic `mean(sign(D(x)))` with `sign(0) = 0`.
    pub fn update_r(&mut self, disc_real: &[f64]) -> Result<f64> {
        if disc_real.is_empty() {
            return Err(Error::InvalidParameter("update_r needs a nonempty batch".into()));
        }
        let stat = disc_real.iter().map(|&v| sign(v)).sum::<f64>() / disc_real.len() as f64;
        self.r_stat = (self.ema_decay * self.r_stat + (1.0 - self.ema_decay) * stat).clamp(-1.0, 1.0);
        Ok(stat)
    }

    /// Moves `β` one step toward the side `r` indicates and refreshes `γ`.
    /// Does nothing while frozen.
    pub fn step_beta_gamma(&mut self) {
        if self.frozen {
            return;
        }
        let decision = sign(self.r_stat - self.eta);
        self.beta = (self.beta + self.delta_beta * decision).clamp(0.0, 1.0);
        self.gamma = self.gamma0 + self.delta_gamma * self.beta;
    }

    /// Pins `β` and `γ`; later steps leave them alone until [`MetaState::unfreeze`].
    pub fn fixed_mode(&mut self, beta: f64, gamma: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidParameter(format!("fixed beta must lie in [0, 1], got {beta}")));
        }
        if !(gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("fixed gamma must be non-negative, got {gamma}")));
        }
        self.beta = beta;
        self.gamma = gamma;
        self.frozen = true;
        Ok(())
    }

    /// Resumes adaptive stepping from the current `β`.
    pub fn unfreeze(&mut self) {
        self.frozen = false;
        self.gamma = self.gamma0 + self.delta_gamma * self.beta;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batch_statistic() {
        let mut m = MetaState::default();
        assert_eq!(m.update_r(&[0.3, 2.0, 9.0]).unwrap(), 1.0);
        assert_eq!(m.update_r(&[2.0, -3.0, 0.0, 5.0]).unwrap(), 0.25);
        assert!(m.update_r(&[]).is_err());
    }

    #[test]
    fn no_memory_ema() {
        let mut m = MetaState::new(0.1, 0.1, 0.001, 1.2, 0.5, 0.0).unwrap();
        m.update_r(&[2.0, -3.0, 0.0, 5.0]).unwrap();
        assert_eq!(m.r_stat, 0.25);
    }

    #[test]
    fn first_step_from_defaults() {
        let mut m = MetaState {
            r_stat: 0.8,
            ..MetaState::default()
        };
        m.step_beta_gamma();
        assert!((m.beta - 0.101).abs() < 1e-15);
        assert!((m.gamma - 0.2212).abs() < 1e-15);
    }

    #[test]
    fn tie_keeps_beta() {
        let mut m = MetaState::default();
        m.r_stat = m.eta;
        m.step_beta_gamma();
        assert_eq!(m.beta, 0.1);
    }

    #[test]
    fn frozen_values_stay_put() {
        let mut m = MetaState::default();
        m.fixed_mode(0.4, 0.48).unwrap();
        for i in 0..1000 {
            m.update_r(&[if i % 2 == 0 { 1.0 } else { -1.0 }]).unwrap();
            m.step_beta_gamma();
        }
        assert_eq!((m.beta, m.gamma), (0.4, 0.48));
        m.unfreeze();
        m.r_stat = 0.9;
        m.step_beta_gamma();
        assert!((m.beta - 0.401).abs() < 1e-15);
        assert!(m.fixed_mode(1.5, 0.0).is_err());
    }

    #[test]
    fn frozen_at_zero() {
        let mut m = MetaState::default();
        m.fixed_mode(0.0, 0.0).unwrap();
        m.r_stat = 1.0;
        m.step_beta_gamma();
        assert_eq!((m.beta, m.gamma), (0.0, 0.0));
    }

    #[test]
    fn clamps_at_both_ends() {
        let mut m = MetaState::new(0.995, 0.0, 0.002, 1.0, 0.5, 0.9).unwrap();
        m.r_stat = 1.0;
        for _ in 0..10 {
            m.step_beta_gamma();
        }
        assert_eq!(m.beta, 1.0);
        m.r_stat = -1.0;
        for _ in 0..1000 {
            m.step_beta_gamma();
        }
        assert_eq!(m.beta, 0.0);
        assert_eq!(m.gamma, m.gamma0);
    }

    proptest! {
        #[test]
        fn sign_statistic_is_scale_free(out in prop::collection::vec(-5.0f64..5.0, 1..50), c in 1e-3f64..1e3) {
            let mut a = MetaState::default();
            let mut b = MetaState::default();
            let scaled: Vec<f64> = out.iter().map(|v| v * c).collect();
            prop_assert_eq!(a.update_r(&out).unwrap(), b.update_r(&scaled).unwrap());
            a.step_beta_gamma();
            b.step_beta_gamma();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn invariants_hold_on_any_trace(batches in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 1..8), 1..200)) {
            let mut m = MetaState::default();
            for b in &batches {
                m.update_r(b).unwrap();
                let before = m.beta;
                m.step_beta_gamma();
                prop_assert!((0.0..=1.0).contains(&m.beta));
                prop_assert!((-1.0..=1.0).contains(&m.r_stat));
                prop_assert_eq!(m.gamma, m.gamma0 + m.delta_gamma * m.beta);
                let moved = (m.beta - before).abs();
                prop_assert!(moved == 0.0 || (moved - m.delta_beta).abs() < 1e-15 || m.beta == 0.0 || m.beta == 1.0);
            }
        }
    }
}

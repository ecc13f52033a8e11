//! Sequential probability ratio test over label-change observations.

use crate::error::{config, Result};
use serde::{Deserialize, Serialize};

/// Mutation stage. Stage I looks for high change rates (AEs), stage II for
/// low change rates (BEs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SprtConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Indifference half-width around `sigma_h`.
    pub delta: f64,
    /// Change-rate threshold.
    pub sigma_h: f64,
    pub n_max: usize,
}

impl SprtConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return config(format!("sprt {name} must lie in (0, 1), got {v}"));
            }
        }
        let bound = self.sigma_h.min(1.0 - self.sigma_h);
        if !(self.delta > 0.0 && self.delta < bound) {
            return config(format!(
                "sprt delta must lie in (0, min(sigma_h, 1 - sigma_h)) = (0, {bound}), got {} (sigma_h = {})",
                self.delta, self.sigma_h
            ));
        }
        if self.n_max == 0 {
            return config("sprt n_max must be at least 1");
        }
        Ok(())
    }

    /// `p1 = sigma_h - delta`.
    pub fn p1(&self) -> f64 {
        self.sigma_h - self.delta
    }

    /// `p0 = sigma_h + delta`.
    pub fn p0(&self) -> f64 {
        self.sigma_h + self.delta
    }

    /// `ln(beta / (1 - alpha))`; at or below it H0 is accepted.
    pub fn lower_bound(&self) -> f64 {
        (self.beta / (1.0 - self.alpha)).ln()
    }

    /// `ln((1 - beta) / alpha)`; at or above it H1 is accepted.
    pub fn upper_bound(&self) -> f64 {
        ((1.0 - self.beta) / self.alpha).ln()
    }
}

/// `ln [p1^z (1-p1)^(n-z) / (p0^z (1-p0)^(n-z))]`.
pub fn log_ratio(n: usize, z: usize, p1: f64, p0: f64) -> f64 {
    z as f64 * (p1 / p0).ln() + (n - z) as f64 * ((1.0 - p1) / (1.0 - p0)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SprtDecision {
    AcceptH0,
    AcceptH1,
    UndecidedAtCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SprtOutcome {
    pub decision: SprtDecision,
    /// Observations consumed.
    pub n: usize,
    /// Changes among them.
    pub z: usize,
    pub log_ratio: f64,
    /// Whether the sample is flagged for the stage's attack type. At the cap
    /// this falls back to comparing `z / n` with `sigma_h`.
    pub malicious: bool,
}

/// Incremental SPRT. In stage I, H0 is "rate above `sigma_h`" (malicious);
/// in stage II the roles reverse and H1 ("rate at or below") is malicious.
#[derive(Clone, Debug)]
pub struct SprtState {
    cfg: SprtConfig,
    stage: Stage,
    step_change: f64,
    step_keep: f64,
    n: usize,
    z: usize,
    log_ratio: f64,
    decision: Option<SprtDecision>,
}

impl SprtState {
    pub fn new(cfg: SprtConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        Ok(SprtState {
            step_change: (cfg.p1() / cfg.p0()).ln(),
            step_keep: ((1.0 - cfg.p1()) / (1.0 - cfg.p0())).ln(),
            cfg,
            stage,
            n: 0,
            z: 0,
            log_ratio: 0.0,
            decision: None,
        })
    }

    /// Adds one observation; returns the decision once reached. Further
    /// observations after a decision are ignored.
    pub fn push(&mut self, changed: bool) -> Option<SprtDecision> {
        if self.decision.is_some() {
            return self.decision;
        }
        self.n += 1;
        if changed {
            self.z += 1;
        }
        self.log_ratio = self.z as f64 * self.step_change + (self.n - self.z) as f64 * self.step_keep;
        if self.log_ratio <= self.cfg.lower_bound() {
            self.decision = Some(SprtDecision::AcceptH0);
        } else if self.log_ratio >= self.cfg.upper_bound() {
            self.decision = Some(SprtDecision::AcceptH1);
        } else if self.n >= self.cfg.n_max {
            self.decision = Some(SprtDecision::UndecidedAtCap);
        }
        self.decision
    }

    pub fn decision(&self) -> Option<SprtDecision> {
        self.decision
    }

    pub fn log_ratio(&self) -> f64 {
        self.log_ratio
    }

    pub fn outcome(&self) -> SprtOutcome {
        let decision = self.decision.unwrap_or(SprtDecision::UndecidedAtCap);
        let rate = if self.n == 0 { 0.0 } else { self.z as f64 / self.n as f64 };
        let malicious = match (self.stage, decision) {
            (Stage::I, SprtDecision::AcceptH0) | (Stage::II, SprtDecision::AcceptH1) => true,
            (Stage::I, SprtDecision::AcceptH1) | (Stage::II, SprtDecision::AcceptH0) => false,
            (Stage::I, SprtDecision::UndecidedAtCap) => rate > self.cfg.sigma_h,
            (Stage::II, SprtDecision::UndecidedAtCap) => rate <= self.cfg.sigma_h,
        };
        SprtOutcome { decision, n: self.n, z: self.z, log_ratio: self.log_ratio, malicious }
    }
}

/// Runs the test over `changes` until a boundary or the end of the sequence.
pub fn sprt_decide(changes: &[bool], cfg: &SprtConfig, stage: Stage) -> Result<SprtOutcome> {
    if changes.len() > cfg.n_max {
        return config(format!("sequence of {} exceeds n_max = {}", changes.len(), cfg.n_max));
    }
    let mut state = SprtState::new(*cfg, stage)?;
    for &c in changes {
        if state.push(c).is_some() {
            break;
        }
    }
    Ok(state.outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(sigma_h: f64) -> SprtConfig {
        SprtConfig { alpha: 0.05, beta: 0.05, delta: 0.1, sigma_h, n_max: 100 }
    }

    #[test]
    fn symmetric_case_has_unit_ratio() {
        assert!(log_ratio(10, 5, 0.4, 0.6).abs() < 1e-15);
        let mut seq = vec![true; 5];
        seq.extend([false; 5]);
        let c = SprtConfig { n_max: 10, ..cfg(0.5) };
        let out = sprt_decide(&seq, &c, Stage::I).unwrap();
        assert_eq!(out.decision, SprtDecision::UndecidedAtCap);
        assert!(out.log_ratio.abs() < 1e-12);
    }

    #[test]
    fn all_changes_accept_h0_early() {
        let c = cfg(0.2);
        let out = sprt_decide(&[true; 100], &c, Stage::I).unwrap();
        assert_eq!(out.decision, SprtDecision::AcceptH0);
        // ln(1/3) per change against ln(0.05/0.95): crossed at the third change.
        let mut acc = 0.0;
        let mut steps = 0;
        while acc > (0.05f64 / 0.95).ln() {
            acc += (0.1f64 / 0.3).ln();
            steps += 1;
        }
        assert_eq!(out.n, steps);
        assert_eq!(steps, 3);
        assert!(out.malicious);
    }

    #[test]
    fn stage_two_flags_stable_samples() {
        let out = sprt_decide(&[false; 100], &cfg(0.3), Stage::II).unwrap();
        assert_eq!(out.decision, SprtDecision::AcceptH1);
        assert!(out.malicious);
        let out = sprt_decide(&[false; 100], &cfg(0.3), Stage::I).unwrap();
        assert!(!out.malicious);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(cfg(0.05).validate().is_err());
        assert!(SprtConfig { alpha: 0.0, ..cfg(0.5) }.validate().is_err());
        assert!(SprtConfig { n_max: 0, ..cfg(0.5) }.validate().is_err());
        assert!(sprt_decide(&[true; 101], &cfg(0.5), Stage::I).is_err());
    }

    proptest! {
        #[test]
        fn closed_form_matches_accumulation(seq in proptest::collection::vec(any::<bool>(), 0..60),
                                            sigma_h in 0.15f64..0.85) {
            let c = SprtConfig { alpha: 1e-300, beta: 1e-300, delta: 0.05, sigma_h, n_max: 100 };
            let mut s = SprtState::new(c, Stage::I).unwrap();
            for &b in &seq {
                s.push(b);
            }
            let z = seq.iter().filter(|&&b| b).count();
            let direct = (c.p1().powi(z as i32) * (1.0 - c.p1()).powi((seq.len() - z) as i32)
                / (c.p0().powi(z as i32) * (1.0 - c.p0()).powi((seq.len() - z) as i32))).ln();
            prop_assert_eq!(s.log_ratio(), log_ratio(seq.len(), z, c.p1(), c.p0()));
            prop_assert!((s.log_ratio() - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        }

        #[test]
        fn change_moves_toward_malicious(seq in proptest::collection::vec(any::<bool>(), 0..40)) {
            let c = SprtConfig { alpha: 1e-300, beta: 1e-300, ..cfg(0.3) };
            let z = seq.iter().filter(|&&b| b).count();
            let base = log_ratio(seq.len(), z, c.p1(), c.p0());
            prop_assert!(log_ratio(seq.len() + 1, z + 1, c.p1(), c.p0()) < base);
            prop_assert!(log_ratio(seq.len() + 1, z, c.p1(), c.p0()) > base);
        }
    }
}

//! Pruning-aware cap on the fine-tuning learning rate.
//!
//! The cap falls smoothly from `lr_base` (unpruned, alpha = 1) towards
//! `lr_base - delta` as the retained-parameter fraction alpha shrinks. Half of
//! `delta` is applied when alpha reaches `1 - p`; `beta` sets the steepness.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrHyper {
    pub lr_base: f64,
    pub delta: f64,
    pub p: f64,
    pub beta: f64,
}

impl LrHyper {
    pub fn new(lr_base: f64, delta: f64, p: f64, beta: f64) -> Result<Self> {
        let h = Self {
            lr_base,
            delta,
            p,
            beta,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(invalid(format!("lr_base {} must be positive", self.lr_base)));
        }
        if !(self.delta > 0.0 && self.delta < self.lr_base) {
            return Err(invalid(format!("delta {} outside (0, lr_base)", self.delta)));
        }
        if !(self.p > 0.0 && self.p <= 0.5) {
            return Err(invalid(format!("p {} outside (0, 0.5]", self.p)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta {} must be positive", self.beta)));
        }
        Ok(())
    }
}

/// `lr_base - delta / (1 + (alpha / (2(1 - p) - alpha))^beta)`.
///
/// At the singular point (p = 0.5, alpha = 1) the limit `lr_base` is returned.
pub fn max_lr(alpha: f64, h: &LrHyper) -> Result<f64> {
    h.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let denom = 2.0 * (1.0 - h.p) - alpha;
    if denom <= 0.0 {
        return Ok(h.lr_base);
    }
    let ratio = alpha / denom;
    Ok(h.lr_base - h.delta / (1.0 + ratio.powf(h.beta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerKind {
    Constant,
    CosineDecay,
}

impl std::str::FromStr for InnerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" | "cosine_decay" => Ok(Self::CosineDecay),
            other => Err(invalid(format!("unknown inner schedule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerSchedule {
    pub kind: InnerKind,
    pub steps_per_epoch: usize,
}

/// Learning rate at optimizer step `step` of a fine-tuning epoch, capped by `lr_max`.
pub fn epoch_lr(step: usize, lr_max: f64, s: &InnerSchedule) -> f64 {
    match s.kind {
        InnerKind::Constant => lr_max,
        InnerKind::CosineDecay => {
            let t = step as f64 / s.steps_per_epoch.max(1) as f64;
            lr_max * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_halves_delta() {
        for beta in [0.3, 1.0, 2.0, 7.5] {
            let h = LrHyper::new(0.001, 0.0006, 0.3, beta).unwrap();
            let lr = max_lr(1.0 - 0.3, &h).unwrap();
            assert!((lr - 0.0007).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_alpha_gives_floor() {
        let h = LrHyper::new(0.01, 0.004, 0.2, 3.0).unwrap();
        assert_eq!(max_lr(0.0, &h).unwrap(), 0.01 - 0.004);
    }

    #[test]
    fn direct_evaluation() {
        let h = LrHyper::new(0.001, 0.0005, 0.3, 2.0).unwrap();
        // ratio 1 / 0.4 = 2.5, term 0.0005 / 7.25
        let want = 0.001 - 0.0005 / 7.25;
        assert!((max_lr(1.0, &h).unwrap() - want).abs() < 1e-15);
        assert!((max_lr(1.0, &h).unwrap() - 9.3103e-4).abs() < 1e-8);
    }

    #[test]
    fn singular_point_returns_base() {
        let h = LrHyper::new(0.001, 0.0005, 0.5, 2.0).unwrap();
        assert_eq!(max_lr(1.0, &h).unwrap(), 0.001);
    }

    #[test]
    fn range_checks() {
        assert!(LrHyper::new(0.001, 0.001, 0.3, 1.0).is_err());
        assert!(LrHyper::new(0.001, 0.0005, 0.0, 1.0).is_err());
        assert!(LrHyper::new(0.001, 0.0005, 0.6, 1.0).is_err());
        assert!(LrHyper::new(0.001, 0.0005, 0.3, 0.0).is_err());
        let h = LrHyper::new(0.001, 0.0005, 0.3, 1.0).unwrap();
        assert!(max_lr(1.01, &h).is_err());
        assert!(max_lr(-0.1, &h).is_err());
    }

    #[test]
    fn inner_schedules() {
        let c = InnerSchedule { kind: InnerKind::Constant, steps_per_epoch: 10 };
        assert!((0..10).all(|s| epoch_lr(s, 0.0007, &c) == 0.0007));
        let cos = InnerSchedule { kind: InnerKind::CosineDecay, steps_per_epoch: 10 };
        assert_eq!(epoch_lr(0, 0.5, &cos), 0.5);
        assert!((epoch_lr(5, 0.5, &cos) - 0.25).abs() < 1e-15);
        assert!((0..10).all(|s| epoch_lr(s, 0.5, &cos) <= 0.5));
    }
}

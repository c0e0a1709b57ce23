//! Endogenous discounting and institutional confidence.
//!
//! Three pieces interact in the simulation loop:
//!
//! - the volatility-adjusted discount `1 / (1 + beta + phi(sigma2))`, which
//!   is the level the live discount factor relaxes towards in quiet epochs,
//! - the multiplicative shock rule `delta * (1 - kappa * eps)`, applied in
//!   epochs where a rule shock lands,
//! - the confidence factor `psi`, which decays per shock and recovers
//!   towards one while the rules stay put.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discount factors are kept inside `[DELTA_MIN, 1 - DELTA_MIN]`.
pub const DELTA_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscountParams {
    /// Subjective time-preference rate.
    pub base_rho: f64,
    /// Sensitivity of rate and revenue to uncertainty.
    pub lambda_sens: f64,
    pub phi_linear: f64,
    pub phi_quad: f64,
    /// Confidence lost per shock.
    pub psi_decay: f64,
    /// Fraction of the gap to full confidence recovered per quiet epoch.
    pub psi_recovery: f64,
    /// Fraction of the gap to the volatility-adjusted discount recovered
    /// per quiet epoch.
    pub delta_recovery: f64,
}

impl Default for DiscountParams {
    fn default() -> Self {
        Self {
            base_rho: 0.05,
            lambda_sens: 2.0,
            phi_linear: 5.0,
            phi_quad: 20.0,
            psi_decay: 0.03,
            psi_recovery: 0.5,
            delta_recovery: 0.3,
        }
    }
}

impl DiscountParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::config(format!("simulation.discount.{field}"), msg))
        };
        if !(self.base_rho > 0.0) {
            return bad("base_rho", "must be positive");
        }
        for (name, v) in [
            ("lambda_sens", self.lambda_sens),
            ("phi_linear", self.phi_linear),
            ("phi_quad", self.phi_quad),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(name, "must be nonnegative");
            }
        }
        for (name, v) in [
            ("psi_decay", self.psi_decay),
            ("psi_recovery", self.psi_recovery),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, "must lie in [0,1)");
            }
        }
        if !(0.0..=1.0).contains(&self.delta_recovery) {
            return bad("delta_recovery", "must lie in [0,1]");
        }
        Ok(())
    }

    /// Noise penalty `phi(x) = phi_linear * x + phi_quad * x^2`.
    pub fn phi(&self, sigma2: f64) -> f64 {
        self.phi_linear * sigma2 + self.phi_quad * sigma2 * sigma2
    }
}

/// `rho' = rho + lambda * sigma`.
pub fn effective_rate(params: &DiscountParams, sigma_t: f64) -> Result<f64> {
    if !(sigma_t >= 0.0) {
        return Err(Error::domain(format!(
            "sigma_t must be nonnegative, got {sigma_t}"
        )));
    }
    Ok(params.base_rho + params.lambda_sens * sigma_t)
}

/// `R0 * exp(-lambda * sigma)`.
pub fn expected_revenue_decay(r0: f64, lambda_sens: f64, sigma_t: f64) -> f64 {
    r0 * (-lambda_sens * sigma_t).exp()
}

/// `1 / (1 + beta + phi(sigma2))`. Always in `(0, 1)` for `beta > 0`.
pub fn volatility_discount(params: &DiscountParams, beta: f64, sigma2: f64) -> f64 {
    1.0 / (1.0 + beta + params.phi(sigma2.max(0.0)))
}

/// Shock rule `delta * (1 - kappa * eps)`, clamped to the legal range.
pub fn update_discount(delta_t: f64, kappa: f64, epsilon_t: f64) -> f64 {
    let raw = delta_t * (1.0 - kappa * epsilon_t);
    if raw < DELTA_MIN {
        log::debug!(
            "discount clamped at {DELTA_MIN} (kappa*eps = {})",
            kappa * epsilon_t
        );
    }
    raw.clamp(DELTA_MIN, 1.0 - DELTA_MIN)
}

/// Moves `delta_t` a fraction `rate` of the way towards `anchor`.
pub fn relax_discount(delta_t: f64, anchor: f64, rate: f64) -> f64 {
    (delta_t + rate * (anchor - delta_t)).clamp(DELTA_MIN, 1.0 - DELTA_MIN)
}

/// Multiplicative decay on a shock, partial recovery towards one otherwise.
pub fn update_confidence(psi_t: f64, shock_occurred: bool, params: &DiscountParams) -> f64 {
    let next = if shock_occurred {
        psi_t * (1.0 - params.psi_decay)
    } else {
        psi_t + params.psi_recovery * (1.0 - psi_t)
    };
    next.clamp(f64::MIN_POSITIVE, 1.0)
}

/// One epoch of a utility stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityTerm {
    pub payoff: f64,
    /// Discount factor in force during this epoch; it discounts the epochs
    /// that follow.
    pub delta: f64,
    pub psi: f64,
}

/// `sum_t (prod_{s<t} delta_s) * psi_t * payoff_t`.
///
/// The first epoch is undiscounted, so a constant-`delta` stream reduces
/// to `sum_t delta^t * psi_t * payoff_t`.
pub fn discounted_utility(stream: &[UtilityTerm]) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for term in stream {
        total += weight * term.psi * term.payoff;
        weight *= term.delta;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_eq(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300)
    }

    #[test]
    fn effective_rate_examples() {
        let p = DiscountParams {
            base_rho: 0.05,
            lambda_sens: 2.0,
            ..DiscountParams::default()
        };
        assert!(rel_eq(effective_rate(&p, 0.0).unwrap(), 0.05));
        assert!(rel_eq(effective_rate(&p, 0.1).unwrap(), 0.25));
        let p0 = DiscountParams {
            lambda_sens: 0.0,
            ..p
        };
        assert!(rel_eq(effective_rate(&p0, 5.0).unwrap(), 0.05));
        assert!(effective_rate(&p0, -0.1).is_err());
    }

    #[test]
    fn revenue_decay_examples() {
        assert_eq!(expected_revenue_decay(100.0, 2.0, 0.0), 100.0);
        assert!(rel_eq(expected_revenue_decay(100.0, 1.0, 2f64.ln()), 50.0));
    }

    #[test]
    fn volatility_discount_examples() {
        let p = DiscountParams::default();
        assert!(rel_eq(volatility_discount(&p, 0.05, 0.0), 1.0 / 1.05));
        let lin = DiscountParams {
            phi_linear: 10.0,
            phi_quad: 0.0,
            ..p.clone()
        };
        assert!(rel_eq(volatility_discount(&lin, 0.05, 0.095), 0.5));
        let unit = DiscountParams {
            phi_linear: 1.0,
            phi_quad: 0.0,
            ..p
        };
        assert!(volatility_discount(&unit, 0.05, 1e6) < 0.01);
    }

    #[test]
    fn update_discount_examples() {
        assert_eq!(update_discount(0.95, 1.0, 0.0), 0.95);
        assert!(rel_eq(update_discount(0.95, 2.0, 0.1), 0.76));
        assert_eq!(update_discount(0.95, 2.0, 0.6), DELTA_MIN);
    }

    #[test]
    fn confidence_examples() {
        let p = DiscountParams {
            psi_decay: 0.2,
            psi_recovery: 0.1,
            ..DiscountParams::default()
        };
        assert!(rel_eq(update_confidence(1.0, true, &p), 0.8));
        assert!(rel_eq(update_confidence(0.5, false, &p), 0.55));
        let mut psi = 1.0;
        for _ in 0..40 {
            let next = update_confidence(psi, true, &p);
            assert!(next < psi);
            psi = next;
        }
        assert!(psi < 1e-3);
    }

    #[test]
    fn discounted_utility_geometric() {
        let stream = vec![
            UtilityTerm {
                payoff: 1.0,
                delta: 0.9,
                psi: 1.0
            };
            200
        ];
        let closed = 10.0 * (1.0 - 0.9f64.powi(200));
        assert!(rel_eq(discounted_utility(&stream), closed));
        assert!((discounted_utility(&stream) - 10.0).abs() < 1e-8);
    }

    #[test]
    fn discounted_utility_single_epoch_is_undiscounted() {
        let s = [UtilityTerm {
            payoff: 5.0,
            delta: 0.5,
            psi: 0.5,
        }];
        assert_eq!(discounted_utility(&s), 2.5);
        assert_eq!(discounted_utility(&[]), 0.0);
    }

    #[test]
    fn relax_moves_towards_anchor() {
        assert!(rel_eq(relax_discount(0.5, 0.9, 0.25), 0.6));
        assert_eq!(relax_discount(0.9, 0.9, 0.5), 0.9);
    }
}

//! Stochastic evolution of the protocol rule vector.
//!
//! Each epoch a shock fires with probability `1 - exp(-shock_rate)`. A
//! shock perturbs every continuous field with Gaussian noise of standard
//! deviation `mutability * continuous_sd_scale * field.scale`, reflected
//! back into the field's legal range. Lobbying agents tilt the noise mean
//! towards larger blocks and laxer relay policy.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProtocolState;

/// Scale and legal range of one protocol field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    /// Natural unit of change; shock noise and magnitudes are measured in it.
    pub scale: f64,
    pub lower: f64,
    pub upper: f64,
}

impl FieldSpec {
    /// Folds `x` back into `[lower, upper]` by repeated reflection.
    pub fn reflect(&self, x: f64) -> f64 {
        let width = self.upper - self.lower;
        if width <= 0.0 {
            return self.lower;
        }
        let period = 2.0 * width;
        let mut y = (x - self.lower).rem_euclid(period);
        if y > width {
            y = period - y;
        }
        (self.lower + y).clamp(self.lower, self.upper)
    }
}

/// Direction in which lobbying pushes each field: larger blocks, laxer
/// relay filtering, no preference on the other two.
pub const LOBBY_DIRECTION: [f64; 4] = [1.0, -1.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationConfig {
    /// Shock magnitude scale, in `[0, 0.3]` for the published sweeps.
    pub mutability: f64,
    /// Poisson arrival rate of shocks per epoch.
    pub shock_rate: f64,
    pub continuous_sd_scale: f64,
    /// Mean tilt per lobbying agent, in units of the shock noise sd.
    pub lobby_bias_strength: f64,
    pub volatility_window: usize,
    pub block_size_limit: FieldSpec,
    pub relay_strictness: FieldSpec,
    pub fee_threshold: FieldSpec,
    pub validation_overhead: FieldSpec,
}

impl Default for MutationConfig {
    fn default() -> Self {
        Self {
            mutability: 0.1,
            shock_rate: 0.05,
            continuous_sd_scale: 0.75,
            lobby_bias_strength: 0.1,
            volatility_window: 50,
            block_size_limit: FieldSpec {
                scale: 1.0,
                lower: 0.1,
                upper: 8.0,
            },
            relay_strictness: FieldSpec {
                scale: 0.5,
                lower: 0.0,
                upper: 1.0,
            },
            fee_threshold: FieldSpec {
                scale: 1.0,
                lower: 0.0,
                upper: 10.0,
            },
            validation_overhead: FieldSpec {
                scale: 0.5,
                lower: 0.0,
                upper: 1.0,
            },
        }
    }
}

impl MutationConfig {
    pub fn field_specs(&self) -> [FieldSpec; 4] {
        [
            self.block_size_limit,
            self.relay_strictness,
            self.fee_threshold,
            self.validation_overhead,
        ]
    }

    /// Probability that a shock fires in one epoch.
    pub fn shock_probability(&self) -> f64 {
        -(-self.shock_rate).exp_m1()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::config(format!("simulation.mutation.{field}"), msg))
        };
        if !(self.mutability >= 0.0) || !self.mutability.is_finite() {
            return bad("mutability", "must be a nonnegative number");
        }
        if !(self.shock_rate >= 0.0) || !self.shock_rate.is_finite() {
            return bad("shock_rate", "must be a nonnegative number");
        }
        if !(self.continuous_sd_scale > 0.0) || !self.continuous_sd_scale.is_finite() {
            return bad("continuous_sd_scale", "must be positive");
        }
        if !(self.lobby_bias_strength >= 0.0) || !self.lobby_bias_strength.is_finite() {
            return bad("lobby_bias_strength", "must be nonnegative");
        }
        if self.volatility_window < 2 {
            return bad("volatility_window", "must be at least 2");
        }
        for (name, f) in ProtocolState::FIELD_NAMES.iter().zip(self.field_specs()) {
            if !(f.scale > 0.0) || !(f.upper > f.lower) {
                return bad(name, "needs scale > 0 and upper > lower");
            }
        }
        if !(self.block_size_limit.lower > 0.0) {
            return bad("block_size_limit", "lower bound must be positive");
        }
        for (name, f) in [
            ("relay_strictness", self.relay_strictness),
            ("validation_overhead", self.validation_overhead),
        ] {
            if f.lower < 0.0 || f.upper > 1.0 {
                return bad(name, "bounds must lie within [0,1]");
            }
        }
        if self.fee_threshold.lower < 0.0 {
            return bad("fee_threshold", "lower bound must be nonnegative");
        }
        Ok(())
    }

    /// Normalised L2 distance between two states.
    pub fn distance(&self, a: &ProtocolState, b: &ProtocolState) -> f64 {
        let (fa, fb) = (a.fields(), b.fields());
        self.field_specs()
            .iter()
            .enumerate()
            .map(|(k, s)| ((fa[k] - fb[k]) / s.scale).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolStep {
    pub state: ProtocolState,
    pub shock_occurred: bool,
    /// Normalised L2 norm of the change; zero when nothing moved.
    pub shock_magnitude: f64,
}

/// Advances the protocol by one epoch.
///
/// Always consumes one uniform draw, plus four standard normals when the
/// shock fires, so the stream position depends only on the gate outcomes.
pub fn step_protocol<R: Rng + ?Sized>(
    state: &ProtocolState,
    cfg: &MutationConfig,
    lobby_count: usize,
    epoch: u64,
    rng: &mut R,
) -> ProtocolStep {
    let gate: f64 = rng.random();
    if gate >= cfg.shock_probability() {
        return ProtocolStep {
            state: *state,
            shock_occurred: false,
            shock_magnitude: 0.0,
        };
    }
    let sd_unit = cfg.mutability * cfg.continuous_sd_scale;
    let tilt = cfg.lobby_bias_strength * lobby_count as f64;
    let old = state.fields();
    let mut new = old;
    for (k, spec) in cfg.field_specs().iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let step = sd_unit * spec.scale * (z + tilt * LOBBY_DIRECTION[k]);
        new[k] = spec.reflect(old[k] + step);
    }
    let magnitude = cfg
        .field_specs()
        .iter()
        .enumerate()
        .map(|(k, s)| ((new[k] - old[k]) / s.scale).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut next = state.with_fields(new);
    if magnitude > 0.0 {
        next.epoch_of_last_shock = epoch;
    } else {
        next = *state;
    }
    ProtocolStep {
        state: next,
        shock_occurred: true,
        shock_magnitude: magnitude,
    }
}

/// Rolling variance of recent shock magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VolatilityEstimate {
    pub sigma2: f64,
    pub window_fill: usize,
}

/// Ring buffer of the last `capacity` magnitudes (zeros for quiet epochs).
#[derive(Debug, Clone)]
pub struct VolatilityWindow {
    values: VecDeque<f64>,
    capacity: usize,
}

impl VolatilityWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            values: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.values.iter()
    }

    pub fn push(&mut self, magnitude: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(magnitude);
    }

    /// Population variance of the window contents.
    pub fn estimate(&self) -> VolatilityEstimate {
        let n = self.values.len();
        if n == 0 {
            return VolatilityEstimate::default();
        }
        let mean = self.values.iter().sum::<f64>() / n as f64;
        let sigma2 = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        VolatilityEstimate {
            sigma2,
            window_fill: n,
        }
    }
}

/// Pushes `shock_magnitude` into `window` and returns the new estimate.
pub fn update_volatility(
    _est: &VolatilityEstimate,
    shock_magnitude: f64,
    window: &mut VolatilityWindow,
) -> VolatilityEstimate {
    debug_assert!(shock_magnitude >= 0.0);
    window.push(shock_magnitude.max(0.0));
    window.estimate()
}

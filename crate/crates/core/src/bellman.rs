//! Volatility-adjusted value iteration over a discretised protocol space.
//!
//! The protocol state is projected onto a uniform per-field grid. The
//! transition kernel is estimated by Monte Carlo from [`step_protocol`],
//! and each grid state carries its own discount factor derived from the
//! variance of its sampled one-step shock magnitudes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discounting::{volatility_discount, DiscountParams};
use crate::error::{Error, Result};
use crate::model::{
    stage_outcome, Action, ActionConstants, EpochEconomy, MinerAgent, ProtocolState,
};
use crate::mutation::{step_protocol, MutationConfig};
use crate::seed::{derive, rng_for, stream};

/// Largest grid that will be built.
pub const MAX_STATES: usize = 10_000;

/// Sparse row of a stochastic matrix, sorted by column.
pub type KernelRow = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace {
    pub levels: usize,
    /// Grid coordinates per field.
    pub axes: [Vec<f64>; 4],
    pub states: Vec<ProtocolState>,
    pub transition: Vec<KernelRow>,
    /// Population variance of sampled one-step magnitudes from each state.
    pub local_sigma2: Vec<f64>,
    pub delta_per_state: Vec<f64>,
}

impl DiscreteStateSpace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Index of the grid point nearest to `state`. The grid is a product
    /// of uniform axes, so the nearest point is found field by field.
    pub fn nearest(&self, state: &ProtocolState) -> usize {
        let f = state.fields();
        let mut idx = 0;
        for (k, axis) in self.axes.iter().enumerate() {
            idx = idx * self.levels + nearest_level(axis, f[k]);
        }
        idx
    }

    /// Dense copy of the kernel, for inspection and tests.
    pub fn dense_transition(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        self.transition
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; n];
                for &(j, p) in row {
                    dense[j] = p;
                }
                dense
            })
            .collect()
    }
}

fn nearest_level(axis: &[f64], x: f64) -> usize {
    let lo = axis[0];
    let hi = axis[axis.len() - 1];
    let step = (hi - lo) / (axis.len() - 1) as f64;
    let pos = ((x - lo) / step).round();
    pos.clamp(0.0, (axis.len() - 1) as f64) as usize
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Grid over each field's full legal range with an empirical kernel.
///
/// Every row uses its own random stream derived from `seed`, so the result
/// does not depend on how rows are scheduled across threads.
pub fn build_state_space(
    cfg: &MutationConfig,
    discount: &DiscountParams,
    beta: f64,
    grid_levels: usize,
    samples: usize,
    seed: u64,
) -> Result<DiscreteStateSpace> {
    if grid_levels < 2 {
        return Err(Error::domain("grid_levels must be at least 2"));
    }
    if samples < 100 {
        return Err(Error::domain("samples must be at least 100"));
    }
    let count = (grid_levels as u128).pow(4);
    if count > MAX_STATES as u128 {
        return Err(Error::Capacity {
            what: "protocol grid states",
            needed: count,
            limit: MAX_STATES as u128,
        });
    }
    cfg.validate()?;
    let specs = cfg.field_specs();
    let axes: [Vec<f64>; 4] =
        std::array::from_fn(|k| linspace(specs[k].lower, specs[k].upper, grid_levels));
    let n = count as usize;
    let states: Vec<ProtocolState> = (0..n)
        .map(|mut idx| {
            let mut f = [0.0; 4];
            for k in (0..4).rev() {
                f[k] = axes[k][idx % grid_levels];
                idx /= grid_levels;
            }
            ProtocolState::default().with_fields(f)
        })
        .collect();

    let mut space = DiscreteStateSpace {
        levels: grid_levels,
        axes,
        states,
        transition: Vec::new(),
        local_sigma2: Vec::new(),
        delta_per_state: Vec::new(),
    };
    let rows: Vec<(KernelRow, f64)> = (0..n)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(derive(seed, &[r as u64]), stream::KERNEL);
            let mut counts = vec![0u64; n];
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..samples {
                let step = step_protocol(&space.states[r], cfg, 0, 0, &mut rng);
                counts[space.nearest(&step.state)] += 1;
                sum += step.shock_magnitude;
                sum_sq += step.shock_magnitude * step.shock_magnitude;
            }
            let mean = sum / samples as f64;
            let sigma2 = (sum_sq / samples as f64 - mean * mean).max(0.0);
            let row = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(j, &c)| (j, c as f64 / samples as f64))
                .collect();
            (row, sigma2)
        })
        .collect();
    for (row, sigma2) in rows {
        space.transition.push(row);
        space.local_sigma2.push(sigma2);
        space
            .delta_per_state
            .push(volatility_discount(discount, beta, sigma2));
    }
    Ok(space)
}

/// One available action in one state of a finite MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub action: Action,
    pub reward: f64,
    pub next: KernelRow,
}

/// Finite MDP with a state-dependent discount factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    pub delta: Vec<f64>,
    /// Choices per state; the first maximiser wins ties.
    pub choices: Vec<Vec<Choice>>,
}

impl Mdp {
    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.delta.len() != self.choices.len() {
            return Err(Error::domain("one discount factor per state is required"));
        }
        for (s, (d, cs)) in self.delta.iter().zip(&self.choices).enumerate() {
            if !(*d > 0.0 && *d < 1.0) {
                return Err(Error::domain(format!(
                    "discount of state {s} must lie in (0,1)"
                )));
            }
            if cs.is_empty() {
                return Err(Error::domain(format!("state {s} has no choices")));
            }
            for c in cs {
                if !c.reward.is_finite() || c.next.iter().any(|&(j, _)| j >= self.len()) {
                    return Err(Error::domain(format!("invalid choice in state {s}")));
                }
            }
        }
        Ok(())
    }

    /// One application of the Bellman operator: new values and the greedy
    /// action per state.
    pub fn apply(&self, values: &[f64]) -> (Vec<f64>, Vec<Action>) {
        self.choices
            .par_iter()
            .zip(&self.delta)
            .map(|(cs, &d)| {
                let mut best = (f64::NEG_INFINITY, cs[0].action);
                for c in cs {
                    let cont: f64 = c.next.iter().map(|&(j, p)| p * values[j]).sum();
                    let q = c.reward + d * cont;
                    if q > best.0 {
                        best = (q, c.action);
                    }
                }
                best
            })
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSolution {
    pub values: Vec<f64>,
    pub policy: Vec<Action>,
    pub iterations: usize,
    pub residual: f64,
    /// Sup-norm change of every iteration.
    pub residuals: Vec<f64>,
}

/// Sup-norm fixed-point iteration from zero values.
pub fn value_iterate(mdp: &Mdp, tolerance: f64, max_iter: usize) -> Result<ValueSolution> {
    if !(tolerance > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    mdp.validate()?;
    let mut values = vec![0.0; mdp.len()];
    let mut residuals = Vec::new();
    for it in 1..=max_iter {
        let (next, policy) = mdp.apply(&values);
        let residual = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        residuals.push(residual);
        values = next;
        if residual <= tolerance {
            return Ok(ValueSolution {
                values,
                policy,
                iterations: it,
                residual,
                residuals,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// How the other miners behave in the single-agent program.
#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    /// Others play this profile forever (the agent's own slot is ignored).
    Fixed(Vec<Action>),
    /// Others play `cooperative` until the agent deviates and `punishment`
    /// forever after. Adds a second, absorbing phase to every grid state.
    GrimTrigger {
        cooperative: Vec<Action>,
        punishment: Vec<Action>,
    },
}

/// Builds agent `index`'s dynamic program over `space`.
///
/// States `0..space.len()` are the grid states (cooperative phase under
/// [`Background::GrimTrigger`]); punished-phase states follow at an offset
/// of `space.len()`.
pub fn miner_mdp(
    space: &DiscreteStateSpace,
    agents: &[MinerAgent],
    index: usize,
    background: &Background,
    economy: EpochEconomy,
    constants: &ActionConstants,
) -> Result<Mdp> {
    if index >= agents.len() {
        return Err(Error::domain(format!("agent index {index} out of range")));
    }
    let n = space.len();
    let reward = |state: &ProtocolState, others: &[Action], a: Action| -> Result<f64> {
        if others.len() != agents.len() {
            return Err(Error::domain(
                "background profile needs one action per agent",
            ));
        }
        let mut profile = others.to_vec();
        profile[index] = a;
        Ok(stage_outcome(agents, &profile, state, economy, constants)?.payoff(index))
    };
    let shifted = |row: &KernelRow, offset: usize| -> KernelRow {
        row.iter().map(|&(j, p)| (j + offset, p)).collect()
    };
    match background {
        Background::Fixed(others) => {
            let mut choices = Vec::with_capacity(n);
            for s in 0..n {
                let mut cs = Vec::with_capacity(Action::ALL.len());
                for a in Action::ALL {
                    cs.push(Choice {
                        action: a,
                        reward: reward(&space.states[s], others, a)?,
                        next: space.transition[s].clone(),
                    });
                }
                choices.push(cs);
            }
            Ok(Mdp {
                delta: space.delta_per_state.clone(),
                choices,
            })
        }
        Background::GrimTrigger {
            cooperative,
            punishment,
        } => {
            let mut choices = Vec::with_capacity(2 * n);
            for s in 0..n {
                let mut cs = Vec::with_capacity(Action::ALL.len());
                for a in Action::ALL {
                    let offset = if a == Action::Honest { 0 } else { n };
                    cs.push(Choice {
                        action: a,
                        reward: reward(&space.states[s], cooperative, a)?,
                        next: shifted(&space.transition[s], offset),
                    });
                }
                choices.push(cs);
            }
            for s in 0..n {
                let mut cs = Vec::with_capacity(Action::ALL.len());
                for a in Action::ALL {
                    cs.push(Choice {
                        action: a,
                        reward: reward(&space.states[s], punishment, a)?,
                        next: shifted(&space.transition[s], n),
                    });
                }
                choices.push(cs);
            }
            let mut delta = space.delta_per_state.clone();
            delta.extend_from_slice(&space.delta_per_state);
            Ok(Mdp { delta, choices })
        }
    }
}

/// Smallest mutability on `grid` whose solved policy is deviant.
///
/// `policy_at` solves the program for one mutability and returns the greedy
/// action at the baseline state.
pub fn abandonment_volatility<F>(grid: &[f64], mut policy_at: F) -> Result<Option<f64>>
where
    F: FnMut(f64) -> Result<Action>,
{
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("mutability grid must be strictly increasing"));
    }
    for &m in grid {
        if policy_at(m)?.is_deviant() {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(reward: f64, delta: f64) -> Mdp {
        Mdp {
            delta: vec![delta],
            choices: vec![vec![Choice {
                action: Action::Honest,
                reward,
                next: vec![(0, 1.0)],
            }]],
        }
    }

    #[test]
    fn single_state_geometric_value() {
        let sol = value_iterate(&single(1.0, 0.9), 1e-10, 10_000).unwrap();
        assert!((sol.values[0] - 10.0).abs() < 1e-8);
    }

    #[test]
    fn decoupled_states_take_best_stage_payoff() {
        let mk = |r: [f64; 2], s: usize| {
            vec![
                Choice {
                    action: Action::Honest,
                    reward: r[0],
                    next: vec![(s, 1.0)],
                },
                Choice {
                    action: Action::EmptyBlock,
                    reward: r[1],
                    next: vec![(s, 1.0)],
                },
            ]
        };
        let mdp = Mdp {
            delta: vec![0.9, 0.5],
            choices: vec![mk([1.0, 2.0], 0), mk([3.0, 1.0], 1)],
        };
        let sol = value_iterate(&mdp, 1e-12, 10_000).unwrap();
        assert!((sol.values[0] - 20.0).abs() < 1e-9);
        assert!((sol.values[1] - 6.0).abs() < 1e-9);
        assert_eq!(sol.policy, vec![Action::EmptyBlock, Action::Honest]);
    }

    #[test]
    fn non_convergence_carries_residual() {
        let err = value_iterate(&single(1.0, 0.99), 1e-12, 5).unwrap_err();
        match err {
            Error::NonConvergence {
                iterations,
                residual,
            } => {
                assert_eq!(iterations, 5);
                assert!(residual > 0.9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_rules_give_identity_kernel() {
        let p = DiscountParams::default();
        for cfg in [
            MutationConfig {
                mutability: 0.0,
                ..MutationConfig::default()
            },
            MutationConfig {
                shock_rate: 0.0,
                ..MutationConfig::default()
            },
        ] {
            let space = build_state_space(&cfg, &p, 0.1, 2, 200, 7).unwrap();
            for (i, row) in space.transition.iter().enumerate() {
                assert_eq!(row, &vec![(i, 1.0)]);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_nearest_is_consistent() {
        let cfg = MutationConfig {
            mutability: 0.3,
            shock_rate: 0.5,
            ..MutationConfig::default()
        };
        let space = build_state_space(&cfg, &DiscountParams::default(), 0.1, 3, 500, 1).unwrap();
        assert_eq!(space.len(), 81);
        for (i, row) in space.transition.iter().enumerate() {
            let s: f64 = row.iter().map(|r| r.1).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert_eq!(space.nearest(&space.states[i]), i);
        }
        assert!(space.delta_per_state.iter().all(|&d| d > 0.0 && d < 1.0));
    }

    #[test]
    fn grid_capacity_and_preconditions() {
        let cfg = MutationConfig::default();
        let p = DiscountParams::default();
        assert!(matches!(
            build_state_space(&cfg, &p, 0.1, 11, 100, 0),
            Err(Error::Capacity { .. })
        ));
        assert!(build_state_space(&cfg, &p, 0.1, 1, 100, 0).is_err());
        assert!(build_state_space(&cfg, &p, 0.1, 2, 99, 0).is_err());
    }

    #[test]
    fn abandonment_by_dominance() {
        let grid = [0.0, 0.1, 0.2];
        assert_eq!(
            abandonment_volatility(&grid, |_| Ok(Action::Honest)).unwrap(),
            None
        );
        assert_eq!(
            abandonment_volatility(&grid, |_| Ok(Action::EmptyBlock)).unwrap(),
            Some(0.0)
        );
        let switch = abandonment_volatility(&grid, |m| {
            Ok(if m > 0.15 {
                Action::SelfishWithhold
            } else {
                Action::Honest
            })
        });
        assert_eq!(switch.unwrap(), Some(0.2));
    }
}

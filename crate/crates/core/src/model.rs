//! Agents, protocol rules, actions and the stage-game payoff `u_i(s, rho)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the hash-share normalisation.
pub const SHARE_TOLERANCE: f64 = 1e-9;

/// The mutable rule vector: four continuous protocol parameters plus the
/// epoch at which the last shock landed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolState {
    /// Megabytes.
    pub block_size_limit: f64,
    /// Fraction of transactions filtered by relay policy.
    pub relay_strictness: f64,
    /// Minimum fee rate for inclusion.
    pub fee_threshold: f64,
    /// Fractional extra cost imposed on full-block validation.
    pub validation_overhead: f64,
    pub epoch_of_last_shock: u64,
}

impl Default for ProtocolState {
    fn default() -> Self {
        Self {
            block_size_limit: 1.0,
            relay_strictness: 0.1,
            fee_threshold: 1.0,
            validation_overhead: 0.1,
            epoch_of_last_shock: 0,
        }
    }
}

impl ProtocolState {
    pub const FIELD_COUNT: usize = 4;
    pub const FIELD_NAMES: [&'static str; 4] = [
        "block_size_limit",
        "relay_strictness",
        "fee_threshold",
        "validation_overhead",
    ];

    pub fn fields(&self) -> [f64; 4] {
        [
            self.block_size_limit,
            self.relay_strictness,
            self.fee_threshold,
            self.validation_overhead,
        ]
    }

    pub fn with_fields(&self, f: [f64; 4]) -> Self {
        Self {
            block_size_limit: f[0],
            relay_strictness: f[1],
            fee_threshold: f[2],
            validation_overhead: f[3],
            epoch_of_last_shock: self.epoch_of_last_shock,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.block_size_limit > 0.0) || !self.block_size_limit.is_finite() {
            return Err(Error::domain(format!(
                "block_size_limit must be positive, got {}",
                self.block_size_limit
            )));
        }
        for (name, v) in [
            ("relay_strictness", self.relay_strictness),
            ("validation_overhead", self.validation_overhead),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if !(self.fee_threshold >= 0.0) || !self.fee_threshold.is_finite() {
            return Err(Error::domain(format!(
                "fee_threshold must be nonnegative, got {}",
                self.fee_threshold
            )));
        }
        Ok(())
    }
}

/// A miner's per-epoch choice.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub enum Action {
    #[default]
    Honest,
    SelfishWithhold,
    EmptyBlock,
    FeeSnipe,
    Lobby,
    Exit,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Honest,
        Action::SelfishWithhold,
        Action::EmptyBlock,
        Action::FeeSnipe,
        Action::Lobby,
        Action::Exit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// Everything except honest mining counts as deviant.
    pub fn is_deviant(self) -> bool {
        self != Action::Honest
    }

    /// Actions aimed at the rule-making process rather than the stage game.
    pub fn is_meta(self) -> bool {
        self == Action::Lobby
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Honest => "honest",
            Action::SelfishWithhold => "selfish_withhold",
            Action::EmptyBlock => "empty_block",
            Action::FeeSnipe => "fee_snipe",
            Action::Lobby => "lobby",
            Action::Exit => "exit",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::domain(format!("unknown action `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerAgent {
    pub id: u32,
    /// Fraction of network hash power, in (0, 1].
    pub hash_share: f64,
    /// Intrinsic time preference.
    pub beta: f64,
    /// Sensitivity of the discount factor to realised rule shocks.
    pub kappa: f64,
    /// Live discount factor.
    pub discount: f64,
    /// Institutional confidence.
    pub confidence: f64,
    /// Sunk capital. Only used for amortisation reporting.
    pub capital_stock: f64,
    /// Operating cost per epoch when mining honestly.
    pub opex_rate: f64,
    pub strategy: Action,
}

impl MinerAgent {
    pub fn validate(&self) -> Result<()> {
        let id = self.id;
        if !(self.hash_share > 0.0 && self.hash_share <= 1.0) {
            return Err(Error::domain(format!(
                "agent {id}: hash_share must lie in (0,1], got {}",
                self.hash_share
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::domain(format!("agent {id}: beta must be positive")));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::domain(format!(
                "agent {id}: kappa must be nonnegative"
            )));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::domain(format!(
                "agent {id}: discount must lie in (0,1), got {}",
                self.discount
            )));
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(Error::domain(format!(
                "agent {id}: confidence must lie in (0,1], got {}",
                self.confidence
            )));
        }
        if !(self.capital_stock >= 0.0) || !(self.opex_rate >= 0.0) {
            return Err(Error::domain(format!(
                "agent {id}: capital_stock and opex_rate must be nonnegative"
            )));
        }
        Ok(())
    }

    /// Epochs needed to recover `capital_stock` from a per-epoch margin.
    /// `None` when the margin is not positive.
    pub fn amortization_horizon(&self, margin_per_epoch: f64) -> Option<f64> {
        (margin_per_epoch > 0.0).then(|| self.capital_stock / margin_per_epoch)
    }
}

/// Checks every agent and that the hash shares sum to one.
pub fn validate_agents(agents: &[MinerAgent]) -> Result<()> {
    if agents.is_empty() {
        return Err(Error::domain("no agents"));
    }
    for a in agents {
        a.validate()?;
    }
    let total: f64 = agents.iter().map(|a| a.hash_share).sum();
    if (total - 1.0).abs() > SHARE_TOLERANCE {
        return Err(Error::domain(format!(
            "hash shares sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Subsidy halving schedule plus the fee market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSchedule {
    pub initial_subsidy: f64,
    pub halving_interval: u64,
    /// Mean fee pool of a full block.
    pub base_fee_pool: f64,
    pub fee_noise_sd: f64,
}

impl Default for RewardSchedule {
    fn default() -> Self {
        Self {
            initial_subsidy: 6.25,
            halving_interval: 210_000,
            base_fee_pool: 0.5,
            fee_noise_sd: 0.15,
        }
    }
}

impl RewardSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_subsidy > 0.0) {
            return Err(Error::domain("initial_subsidy must be positive"));
        }
        if self.halving_interval == 0 {
            return Err(Error::domain("halving_interval must be positive"));
        }
        if !(self.base_fee_pool >= 0.0) || !(self.fee_noise_sd >= 0.0) {
            return Err(Error::domain(
                "base_fee_pool and fee_noise_sd must be nonnegative",
            ));
        }
        Ok(())
    }

    /// Draws the realised fee pool `F_t`, clamped at zero.
    pub fn draw_fee<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.fee_noise_sd == 0.0 {
            return self.base_fee_pool.max(0.0);
        }
        let normal = Normal::new(self.base_fee_pool, self.fee_noise_sd)
            .expect("fee_noise_sd validated as finite and nonnegative");
        normal.sample(rng).max(0.0)
    }
}

/// `S_0 * 2^-(epoch / halving_interval)`, with integer division.
pub fn subsidy_at(schedule: &RewardSchedule, epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::domain(format!(
            "epoch must be nonnegative, got {epoch}"
        )));
    }
    let halvings = epoch as u64 / schedule.halving_interval;
    // Past 1100 halvings the subsidy is below the smallest subnormal.
    let halvings = halvings.min(1100) as i32;
    Ok(schedule.initial_subsidy * 2f64.powi(-halvings))
}

/// `R_t = S_t + F_t`.
pub fn gross_reward(schedule: &RewardSchedule, epoch: i64, fee_draw: f64) -> Result<f64> {
    Ok(subsidy_at(schedule, epoch)? + fee_draw.max(0.0))
}

/// Magnitudes of the non-honest behaviours, relative to honest mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionConstants {
    /// Extra fee capture of a fee sniper, as a fraction of its fee share.
    pub snipe_bonus: f64,
    /// Multiplicative boost of a withholder's effective hash share.
    pub withhold_edge: f64,
    /// Fraction of a withholder's blocks lost per unit of *other*
    /// withholding hash share (races between withholders).
    pub orphan_loss: f64,
    /// Lobbying cost as a fraction of `opex_rate`.
    pub lobby_cost_fraction: f64,
    /// Cost an exited miner still pays, as a fraction of `opex_rate`.
    pub exit_residual: f64,
}

impl Default for ActionConstants {
    fn default() -> Self {
        Self {
            snipe_bonus: 0.5,
            withhold_edge: 0.15,
            orphan_loss: 0.13,
            lobby_cost_fraction: 0.2,
            exit_residual: 0.1,
        }
    }
}

impl ActionConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("snipe_bonus", self.snipe_bonus),
            ("withhold_edge", self.withhold_edge),
            ("lobby_cost_fraction", self.lobby_cost_fraction),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be nonnegative")));
            }
        }
        for (name, v) in [
            ("orphan_loss", self.orphan_loss),
            ("exit_residual", self.exit_residual),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Block subsidy and (pre-relay) fee pool of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEconomy {
    pub subsidy: f64,
    pub fees: f64,
}

impl EpochEconomy {
    /// Subsidy at `epoch` and the mean fee pool.
    pub fn expected(schedule: &RewardSchedule, epoch: u64) -> Self {
        Self {
            subsidy: subsidy_at(schedule, epoch.min(i64::MAX as u64) as i64)
                .expect("epoch is nonnegative"),
            fees: schedule.base_fee_pool.max(0.0),
        }
    }
}

/// Per-agent reward, cost and effective share of one stage game.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub effective_share: Vec<f64>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
}

impl StageOutcome {
    pub fn payoffs(&self) -> Vec<f64> {
        self.reward
            .iter()
            .zip(&self.cost)
            .map(|(r, c)| r - c)
            .collect()
    }

    pub fn payoff(&self, i: usize) -> f64 {
        self.reward[i] - self.cost[i]
    }

    /// Resolves the expected-value split into a single block winner drawn
    /// in proportion to effective share. The residual probability
    /// `1 - sum(effective_share)` is lost to orphaning.
    pub fn into_lottery<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut winner = None;
        for (i, &e) in self.effective_share.iter().enumerate() {
            acc += e;
            if e > 0.0 && u < acc {
                winner = Some(i);
                break;
            }
        }
        for (i, r) in self.reward.iter_mut().enumerate() {
            let e = self.effective_share[i];
            *r = if Some(i) == winner { *r / e } else { 0.0 };
        }
        self
    }
}

/// Evaluates the stage game for a full profile.
///
/// Rules, relative to honest mining (`share * (S + F) - opex`):
///
/// - `SelfishWithhold`: own effective share is `(1 + withhold_edge)` times
///   the base share; non-withholders split what is left. Withholders race
///   each other and lose `orphan_loss` of their blocks per unit of other
///   withholding share.
/// - `EmptyBlock`: no fee income; cost scaled by `1 - validation_overhead`.
/// - `FeeSnipe`: captures `snipe_bonus` times its own fee income, taken
///   from the fee income of fee-including non-snipers.
/// - `Lobby`: honest reward, cost raised by `lobby_cost_fraction * opex`.
/// - `Exit`: no share, pays `exit_residual * opex`.
///
/// The fee pool is `fees * (1 - relay_strictness)`. Exited agents' hash is
/// removed and the remaining shares renormalised.
pub fn stage_outcome(
    agents: &[MinerAgent],
    profile: &[Action],
    state: &ProtocolState,
    economy: EpochEconomy,
    c: &ActionConstants,
) -> Result<StageOutcome> {
    if profile.is_empty() || agents.is_empty() {
        return Err(Error::domain("empty profile"));
    }
    if profile.len() != agents.len() {
        return Err(Error::domain(format!(
            "profile has {} actions for {} agents",
            profile.len(),
            agents.len()
        )));
    }
    let n = agents.len();
    let effective_share = effective_shares(agents, profile, c);

    let fee_pool = economy.fees.max(0.0) * (1.0 - state.relay_strictness);
    let mut fee = vec![0.0; n];
    let mut bonus = vec![0.0; n];
    let mut coop_pool = 0.0;
    let mut wanted = 0.0;
    for i in 0..n {
        match profile[i] {
            Action::Exit | Action::EmptyBlock => {}
            Action::FeeSnipe => {
                fee[i] = effective_share[i] * fee_pool;
                bonus[i] = c.snipe_bonus * fee[i];
                wanted += bonus[i];
            }
            _ => {
                fee[i] = effective_share[i] * fee_pool;
                coop_pool += fee[i];
            }
        }
    }
    let sniped = wanted.min(coop_pool);
    let bonus_scale = if wanted > 0.0 { sniped / wanted } else { 0.0 };
    let coop_scale = if coop_pool > 0.0 {
        1.0 - sniped / coop_pool
    } else {
        1.0
    };

    let mut reward = vec![0.0; n];
    let mut cost = vec![0.0; n];
    for i in 0..n {
        let opex = agents[i].opex_rate;
        let a = profile[i];
        reward[i] = match a {
            Action::Exit => 0.0,
            Action::FeeSnipe => {
                effective_share[i] * economy.subsidy + fee[i] + bonus[i] * bonus_scale
            }
            Action::EmptyBlock => effective_share[i] * economy.subsidy,
            _ => effective_share[i] * economy.subsidy + fee[i] * coop_scale,
        };
        cost[i] = match a {
            Action::EmptyBlock => opex * (1.0 - state.validation_overhead),
            Action::Lobby => opex * (1.0 + c.lobby_cost_fraction),
            Action::Exit => opex * c.exit_residual,
            _ => opex,
        };
    }
    Ok(StageOutcome {
        effective_share,
        reward,
        cost,
    })
}

/// All agents' expected payoffs for `profile`.
pub fn stage_payoffs(
    agents: &[MinerAgent],
    profile: &[Action],
    state: &ProtocolState,
    economy: EpochEconomy,
    c: &ActionConstants,
) -> Result<Vec<f64>> {
    Ok(stage_outcome(agents, profile, state, economy, c)?.payoffs())
}

/// Expected payoff of agent `index` at `epoch`, using the mean fee pool.
pub fn stage_payoff(
    agents: &[MinerAgent],
    index: usize,
    profile: &[Action],
    state: &ProtocolState,
    schedule: &RewardSchedule,
    epoch: u64,
    c: &ActionConstants,
) -> Result<f64> {
    if index >= agents.len() {
        return Err(Error::domain(format!("agent index {index} out of range")));
    }
    let economy = EpochEconomy::expected(schedule, epoch);
    Ok(stage_outcome(agents, profile, state, economy, c)?.payoff(index))
}

fn effective_shares(agents: &[MinerAgent], profile: &[Action], c: &ActionConstants) -> Vec<f64> {
    let n = agents.len();
    let active_total: f64 = agents
        .iter()
        .zip(profile)
        .filter(|(_, a)| **a != Action::Exit)
        .map(|(ag, _)| ag.hash_share)
        .sum();
    let mut e = vec![0.0; n];
    if active_total <= 0.0 {
        return e;
    }
    let base = |i: usize| {
        if profile[i] == Action::Exit {
            0.0
        } else {
            agents[i].hash_share / active_total
        }
    };
    let withheld_base: f64 = (0..n)
        .filter(|&i| profile[i] == Action::SelfishWithhold)
        .map(base)
        .sum();
    let others_base: f64 = (0..n)
        .filter(|&i| !matches!(profile[i], Action::SelfishWithhold | Action::Exit))
        .map(base)
        .sum();
    let boosted = withheld_base * (1.0 + c.withhold_edge);
    // Withholders take their boosted share first. When that exhausts the
    // block (or nobody else is mining) their shares are renormalised to one.
    let (wh_scale, other_scale) = if boosted >= 1.0 || others_base <= 0.0 {
        (if boosted > 0.0 { 1.0 / boosted } else { 0.0 }, 0.0)
    } else {
        (1.0, (1.0 - boosted) / others_base)
    };
    for i in 0..n {
        e[i] = match profile[i] {
            Action::Exit => 0.0,
            Action::SelfishWithhold => {
                let b = base(i);
                let rivals = (withheld_base - b).max(0.0);
                b * (1.0 + c.withhold_edge) * wh_scale * (1.0 - c.orphan_loss * rivals)
            }
            _ => base(i) * other_scale,
        };
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(id: u32, share: f64, opex: f64) -> MinerAgent {
        MinerAgent {
            id,
            hash_share: share,
            beta: 0.05,
            kappa: 1.0,
            discount: 0.9,
            confidence: 1.0,
            capital_stock: 0.0,
            opex_rate: opex,
            strategy: Action::Honest,
        }
    }

    fn schedule50() -> RewardSchedule {
        RewardSchedule {
            initial_subsidy: 50.0,
            halving_interval: 1000,
            base_fee_pool: 5.0,
            fee_noise_sd: 0.0,
        }
    }

    fn open_state() -> ProtocolState {
        ProtocolState {
            relay_strictness: 0.0,
            validation_overhead: 0.2,
            ..ProtocolState::default()
        }
    }

    #[test]
    fn subsidy_halves_on_schedule() {
        let s = schedule50();
        assert_eq!(subsidy_at(&s, 0).unwrap(), 50.0);
        assert_eq!(subsidy_at(&s, 999).unwrap(), 50.0);
        assert_eq!(subsidy_at(&s, 1000).unwrap(), 25.0);
        assert_eq!(subsidy_at(&s, 3500).unwrap(), 6.25);
        assert!(matches!(subsidy_at(&s, -1), Err(Error::Domain(_))));
    }

    #[test]
    fn gross_reward_adds_clamped_fee() {
        let s = schedule50();
        assert_eq!(gross_reward(&s, 0, 5.0).unwrap(), 55.0);
        assert_eq!(gross_reward(&s, 1000, 0.0).unwrap(), 25.0);
        assert_eq!(gross_reward(&s, 0, -3.0).unwrap(), 50.0);
        let mut rng = crate::seed::rng_for(1, 0);
        let f = s.draw_fee(&mut rng);
        assert_eq!(gross_reward(&s, 0, f).unwrap(), 50.0 + s.base_fee_pool);
    }

    #[test]
    fn symmetric_honest_split() {
        let agents = [agent(0, 0.5, 10.0), agent(1, 0.5, 10.0)];
        let p = stage_payoffs(
            &agents,
            &[Action::Honest; 2],
            &open_state(),
            EpochEconomy {
                subsidy: 50.0,
                fees: 5.0,
            },
            &ActionConstants::default(),
        )
        .unwrap();
        assert_eq!(p, vec![17.5, 17.5]);
    }

    #[test]
    fn empty_block_saves_validation_cost() {
        let agents = [agent(0, 1.0, 10.0)];
        let u = stage_payoff(
            &agents,
            0,
            &[Action::EmptyBlock],
            &open_state(),
            &schedule50(),
            0,
            &ActionConstants::default(),
        )
        .unwrap();
        // 50 - 10 * (1 - 0.2)
        assert!((u - 42.0).abs() < 1e-12);
    }

    #[test]
    fn exit_pays_residual_opex() {
        let agents = [agent(0, 1.0, 10.0)];
        let u = stage_payoff(
            &agents,
            0,
            &[Action::Exit],
            &open_state(),
            &schedule50(),
            0,
            &ActionConstants::default(),
        )
        .unwrap();
        assert!((u + 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_exit_everyone_pays_residual() {
        let agents = [agent(0, 0.3, 10.0), agent(1, 0.7, 20.0)];
        let p = stage_payoffs(
            &agents,
            &[Action::Exit; 2],
            &open_state(),
            EpochEconomy {
                subsidy: 50.0,
                fees: 5.0,
            },
            &ActionConstants::default(),
        )
        .unwrap();
        assert!((p[0] + 1.0).abs() < 1e-12 && (p[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_profile_is_domain_error() {
        let r = stage_payoffs(
            &[],
            &[],
            &open_state(),
            EpochEconomy {
                subsidy: 50.0,
                fees: 5.0,
            },
            &ActionConstants::default(),
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn lone_withholder_gets_exact_edge() {
        let agents = [agent(0, 0.4, 0.0), agent(1, 0.6, 0.0)];
        let o = stage_outcome(
            &agents,
            &[Action::SelfishWithhold, Action::Honest],
            &open_state(),
            EpochEconomy {
                subsidy: 10.0,
                fees: 0.0,
            },
            &ActionConstants::default(),
        )
        .unwrap();
        assert!((o.effective_share[0] - 0.46).abs() < 1e-12);
        assert!((o.effective_share[1] - 0.54).abs() < 1e-12);
    }

    #[test]
    fn withholders_race_each_other() {
        let c = ActionConstants::default();
        let agents = [agent(0, 0.5, 0.0), agent(1, 0.5, 0.0)];
        let o = stage_outcome(
            &agents,
            &[Action::SelfishWithhold; 2],
            &open_state(),
            EpochEconomy {
                subsidy: 10.0,
                fees: 0.0,
            },
            &c,
        )
        .unwrap();
        let expected = 0.5 * (1.0 - c.orphan_loss * 0.5);
        assert!((o.effective_share[0] - expected).abs() < 1e-12);
        assert!(o.effective_share.iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn snipers_take_from_cooperative_pool() {
        let c = ActionConstants::default();
        let agents = [agent(0, 0.5, 0.0), agent(1, 0.5, 0.0)];
        let p = stage_payoffs(
            &agents,
            &[Action::FeeSnipe, Action::Honest],
            &open_state(),
            EpochEconomy {
                subsidy: 0.0,
                fees: 10.0,
            },
            &c,
        )
        .unwrap();
        assert!((p[0] - 7.5).abs() < 1e-12);
        assert!((p[1] - 2.5).abs() < 1e-12);
        // Total fee income is conserved.
        assert!((p[0] + p[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn relay_strictness_shrinks_fee_pool() {
        let agents = [agent(0, 1.0, 0.0)];
        let state = ProtocolState {
            relay_strictness: 0.25,
            ..open_state()
        };
        let p = stage_payoffs(
            &agents,
            &[Action::Honest],
            &state,
            EpochEconomy {
                subsidy: 0.0,
                fees: 8.0,
            },
            &ActionConstants::default(),
        )
        .unwrap();
        assert!((p[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn lottery_preserves_expectation_per_winner() {
        let agents = [agent(0, 0.25, 1.0), agent(1, 0.75, 3.0)];
        let o = stage_outcome(
            &agents,
            &[Action::Honest; 2],
            &open_state(),
            EpochEconomy {
                subsidy: 50.0,
                fees: 5.0,
            },
            &ActionConstants::default(),
        )
        .unwrap();
        let mut rng = crate::seed::rng_for(9, 0);
        let mut wins = [0u32; 2];
        for _ in 0..4000 {
            let l = o.clone().into_lottery(&mut rng);
            let w = l.reward.iter().position(|&r| r > 0.0).unwrap();
            assert!((l.reward[w] - 55.0).abs() < 1e-12);
            wins[w] += 1;
        }
        let frac = wins[0] as f64 / 4000.0;
        assert!((frac - 0.25).abs() < 0.03, "{frac}");
    }

    #[test]
    fn deviance_classification_by_enumeration() {
        for a in Action::ALL {
            assert_eq!(a.is_deviant(), a != Action::Honest);
            assert_eq!(a.as_str().parse::<Action>().unwrap(), a);
            assert_eq!(Action::from_index(a.index()), Some(a));
        }
        assert!(Action::Lobby.is_meta() && Action::Lobby.is_deviant());
    }

    #[test]
    fn share_validation() {
        let mut agents = vec![agent(0, 0.5, 1.0), agent(1, 0.5, 1.0)];
        validate_agents(&agents).unwrap();
        agents[1].hash_share = 0.4;
        assert!(validate_agents(&agents).is_err());
    }
}

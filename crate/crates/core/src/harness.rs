//! The epoch loop, parameter sweeps and collapse-threshold detection.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{
    abandonment_volatility, build_state_space, miner_mdp, value_iterate, Background,
    DiscreteStateSpace, ValueSolution,
};
use crate::discounting::{
    discounted_utility, relax_discount, update_confidence, update_discount, volatility_discount,
    DiscountParams, UtilityTerm,
};
use crate::error::{Error, Result};
use crate::game::{
    analyze_deviations, cohorts, miner_stage_game, DeviationAnalysis, EquilibriumReport,
};
use crate::model::{
    stage_outcome, validate_agents, Action, ActionConstants, EpochEconomy, MinerAgent,
    ProtocolState, RewardSchedule,
};
use crate::mutation::{step_protocol, MutationConfig, VolatilityWindow};
use crate::seed::{cell_seed, derive, rng_for, stream};

/// How agents pick their action each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyRule {
    /// Deviate to the best deviant reply against last epoch's profile when
    /// the one-shot gain exceeds the discounted value of continued
    /// cooperation.
    MyopicBestResponse,
    /// Grim trigger: cooperate while patience covers the stage game's
    /// critical discount factor, punish after any deviation.
    TriggerCooperate,
    /// Greedy policy of the single-agent dynamic program, refreshed every
    /// `sample_interval` epochs.
    BellmanPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HashDistribution {
    /// The first agent holds this share; the rest split the remainder
    /// equally.
    Concentration(f64),
    Shares(Vec<f64>),
}

impl HashDistribution {
    pub fn shares(&self, n_agents: usize) -> Result<Vec<f64>> {
        match self {
            HashDistribution::Concentration(g) => {
                if !(*g > 0.0 && *g <= 1.0) {
                    return Err(Error::config(
                        "simulation.hash_distribution.concentration",
                        "must lie in (0,1]",
                    ));
                }
                if n_agents == 1 {
                    return Ok(vec![1.0]);
                }
                if *g >= 1.0 {
                    return Err(Error::config(
                        "simulation.hash_distribution.concentration",
                        "must be below 1 with more than one agent",
                    ));
                }
                let rest = (1.0 - g) / (n_agents - 1) as f64;
                let mut v = vec![rest; n_agents];
                v[0] = *g;
                Ok(v)
            }
            HashDistribution::Shares(v) => {
                if v.len() != n_agents {
                    return Err(Error::config(
                        "simulation.hash_distribution.shares",
                        format!("has {} entries for {n_agents} agents", v.len()),
                    ));
                }
                Ok(v.clone())
            }
        }
    }
}

/// Mining economics used to derive per-epoch operating cost and sunk
/// capital in coin units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    /// USD per kWh.
    pub energy_price_kwh: f64,
    /// Joules per terahash.
    pub efficiency_j_per_th: f64,
    pub block_seconds: f64,
    /// Total network hash rate, TH/s.
    pub network_hashrate_th_s: f64,
    /// USD per coin.
    pub coin_price: f64,
    /// USD of hardware per TH/s.
    pub capital_cost_per_th_s: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            energy_price_kwh: 0.05,
            efficiency_j_per_th: 35.0,
            block_seconds: 600.0,
            network_hashrate_th_s: 2.5e8,
            coin_price: 60_000.0,
            capital_cost_per_th_s: 20.0,
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("energy_price_kwh", self.energy_price_kwh),
            ("efficiency_j_per_th", self.efficiency_j_per_th),
            ("block_seconds", self.block_seconds),
            ("network_hashrate_th_s", self.network_hashrate_th_s),
            ("coin_price", self.coin_price),
            ("capital_cost_per_th_s", self.capital_cost_per_th_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(
                    format!("simulation.calibration.{name}"),
                    "must be nonnegative",
                ));
            }
        }
        if !(self.coin_price > 0.0) {
            return Err(Error::config(
                "simulation.calibration.coin_price",
                "must be positive",
            ));
        }
        Ok(())
    }

    /// Energy cost of the whole network for one block interval, in coins.
    pub fn network_opex(&self) -> f64 {
        let joules = self.network_hashrate_th_s * self.efficiency_j_per_th * self.block_seconds;
        joules / 3.6e6 * self.energy_price_kwh / self.coin_price
    }

    /// Hardware value of the whole network, in coins.
    pub fn network_capital(&self) -> f64 {
        self.network_hashrate_th_s * self.capital_cost_per_th_s / self.coin_price
    }
}

/// Settings of the discretised dynamic program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSettings {
    pub grid_levels: usize,
    pub samples: usize,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            grid_levels: 2,
            samples: 10_000,
            tolerance: 1e-8,
            max_iter: 2_000,
        }
    }
}

impl SolveSettings {
    pub fn validate(&self) -> Result<()> {
        if self.grid_levels < 2 {
            return Err(Error::config(
                "simulation.solve.grid_levels",
                "must be at least 2",
            ));
        }
        if self.samples < 100 {
            return Err(Error::config(
                "simulation.solve.samples",
                "must be at least 100",
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config(
                "simulation.solve.tolerance",
                "must be positive",
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::config(
                "simulation.solve.max_iter",
                "must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub epochs: u64,
    pub n_agents: usize,
    pub hash_distribution: HashDistribution,
    /// Intrinsic time preference shared by all agents. The starting
    /// discount factor is `1 / (1 + beta)`.
    pub beta: f64,
    pub kappa: f64,
    pub mutation: MutationConfig,
    pub discount: DiscountParams,
    pub reward: RewardSchedule,
    pub actions: ActionConstants,
    pub strategy_rule: StrategyRule,
    pub seed: u64,
    pub lottery_mode: bool,
    /// Epochs between equilibrium-churn samples and policy refreshes.
    pub sample_interval: u64,
    /// Number of cohorts in the churn-tracking stage game.
    pub churn_cohorts: usize,
    /// Under the trigger rule, consecutive epochs in which every agent's
    /// patience covers its threshold before punishment is called off.
    /// Zero keeps punishment permanent.
    pub recommit_epochs: u64,
    pub calibration: Calibration,
    pub solve: SolveSettings,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            epochs: 5_000,
            n_agents: 10,
            hash_distribution: HashDistribution::Concentration(0.4),
            beta: 1.0 / 9.0,
            kappa: 1.0,
            mutation: MutationConfig::default(),
            discount: DiscountParams::default(),
            reward: RewardSchedule::default(),
            actions: ActionConstants::default(),
            strategy_rule: StrategyRule::TriggerCooperate,
            seed: 42,
            lottery_mode: false,
            sample_interval: 100,
            churn_cohorts: 3,
            recommit_epochs: 250,
            calibration: Calibration::default(),
            solve: SolveSettings::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("simulation.{field}"), msg));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.n_agents == 0 {
            return bad("n_agents", "must be at least 1");
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad("beta", "must be positive");
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return bad("kappa", "must be nonnegative");
        }
        if self.sample_interval == 0 {
            return bad("sample_interval", "must be at least 1");
        }
        if self.churn_cohorts == 0 {
            return bad("churn_cohorts", "must be at least 1");
        }
        self.mutation.validate()?;
        self.discount.validate()?;
        self.reward
            .validate()
            .map_err(|e| Error::config("simulation.reward", e.to_string()))?;
        self.actions
            .validate()
            .map_err(|e| Error::config("simulation.actions", e.to_string()))?;
        self.calibration.validate()?;
        self.solve.validate()?;
        let shares = self.hash_distribution.shares(self.n_agents)?;
        let total: f64 = shares.iter().sum();
        if shares.iter().any(|&s| !(s > 0.0 && s <= 1.0)) || (total - 1.0).abs() > 1e-9 {
            return bad("hash_distribution", "shares must lie in (0,1] and sum to 1");
        }
        Ok(())
    }

    /// Starting discount factor of every agent.
    pub fn initial_discount(&self) -> f64 {
        volatility_discount(&self.discount, self.beta, 0.0)
    }

    pub fn agents(&self) -> Result<Vec<MinerAgent>> {
        self.validate()?;
        let shares = self.hash_distribution.shares(self.n_agents)?;
        let opex = self.calibration.network_opex();
        let capital = self.calibration.network_capital();
        let agents: Vec<MinerAgent> = shares
            .iter()
            .enumerate()
            .map(|(i, &g)| MinerAgent {
                id: i as u32,
                hash_share: g,
                beta: self.beta,
                kappa: self.kappa,
                discount: self.initial_discount(),
                confidence: 1.0,
                capital_stock: g * capital,
                opex_rate: g * opex,
                strategy: Action::Honest,
            })
            .collect();
        validate_agents(&agents)?;
        Ok(agents)
    }

    /// Per-agent analysis of the starting stage game.
    pub fn initial_analysis(&self) -> Result<DeviationAnalysis> {
        let agents = self.agents()?;
        analyze_deviations(
            &agents,
            &ProtocolState::default(),
            EpochEconomy::expected(&self.reward, 0),
            &self.actions,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub action: Action,
    pub payoff: f64,
    pub discount: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub shock_occurred: bool,
    pub shock_magnitude: f64,
    pub protocol: ProtocolState,
    pub agents: Vec<AgentRecord>,
    pub deviant_fraction: f64,
}

/// Output of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<EpochRecord>,
    /// Equilibrium churn between consecutive samples.
    pub churn: Vec<f64>,
}

impl Trajectory {
    /// Mean deviant fraction over the last half of the epochs.
    pub fn incidence(&self) -> f64 {
        let tail = &self.records[self.records.len() / 2..];
        mean(tail.iter().map(|r| r.deviant_fraction))
    }

    /// Fraction of epochs in which fewer than half the agents deviate.
    pub fn cooperation_index(&self) -> f64 {
        mean(
            self.records
                .iter()
                .map(|r| (r.deviant_fraction < 0.5) as u8 as f64),
        )
    }

    pub fn mean_churn(&self) -> f64 {
        if self.churn.is_empty() {
            0.0
        } else {
            mean(self.churn.iter().copied())
        }
    }

    /// Epoch of the agent's first deviant action.
    pub fn first_deviation(&self, agent: usize) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.agents[agent].action.is_deviant())
            .map(|r| r.epoch)
    }

    /// Per-agent `sum_t (prod_{s<t} delta_s) psi_t payoff_t`.
    pub fn discounted_utilities(&self) -> Vec<f64> {
        let n = self.records.first().map_or(0, |r| r.agents.len());
        (0..n)
            .map(|i| {
                let stream: Vec<UtilityTerm> = self
                    .records
                    .iter()
                    .map(|r| UtilityTerm {
                        payoff: r.agents[i].payoff,
                        delta: r.agents[i].discount,
                        psi: r.agents[i].confidence,
                    })
                    .collect();
                discounted_utility(&stream)
            })
            .collect()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Grim-trigger bookkeeping shared by the trigger and policy rules.
#[derive(Debug, Default)]
struct Punishment {
    active: bool,
    calm: u64,
}

impl Punishment {
    fn after_epoch(&mut self, profile: &[Action], all_patient: bool, recommit: u64) {
        if !self.active {
            if profile.iter().any(|a| a.is_deviant()) {
                self.active = true;
                self.calm = 0;
            }
            return;
        }
        self.calm = if all_patient { self.calm + 1 } else { 0 };
        if recommit > 0 && self.calm >= recommit {
            self.active = false;
            self.calm = 0;
        }
    }
}

struct PolicyState {
    space: DiscreteStateSpace,
    /// Per agent: greedy action per augmented state.
    policies: Vec<Vec<Action>>,
}

/// Runs one simulation. Deterministic in `cfg` (including its seed).
pub fn run_simulation(cfg: &SimConfig) -> Result<Trajectory> {
    let mut agents = cfg.agents()?;
    let n = agents.len();
    let mut state = ProtocolState::default();
    let mut protocol_rng = rng_for(cfg.seed, stream::PROTOCOL);
    let mut market_rng = rng_for(cfg.seed, stream::MARKET);
    let mut window = VolatilityWindow::new(cfg.mutation.volatility_window);

    let mut economy = EpochEconomy::expected(&cfg.reward, 0);
    let mut analysis = analyze_deviations(&agents, &state, economy, &cfg.actions)?;
    let mut myopic_cache: HashMap<Vec<Action>, (Vec<f64>, Vec<Action>)> = HashMap::new();
    let mut punishment = Punishment::default();
    let mut prev_profile = vec![Action::Honest; n];
    let mut lobby_count = 0usize;

    let churn_players = cohorts(&agents, cfg.churn_cohorts);
    let mut last_report: Option<EquilibriumReport> = None;
    let mut churn = Vec::new();
    let mut policy: Option<PolicyState> = None;

    let mut records = Vec::with_capacity(cfg.epochs.min(1 << 24) as usize);
    for t in 0..cfg.epochs {
        let step = step_protocol(&state, &cfg.mutation, lobby_count, t, &mut protocol_rng);
        let moved = step.shock_occurred && step.shock_magnitude > 0.0;
        state = step.state;
        window.push(step.shock_magnitude);
        let sigma2 = window.estimate().sigma2;
        for a in agents.iter_mut() {
            if moved {
                a.discount = update_discount(a.discount, a.kappa, step.shock_magnitude);
            } else {
                let anchor = volatility_discount(&cfg.discount, a.beta, sigma2);
                a.discount = relax_discount(a.discount, anchor, cfg.discount.delta_recovery);
            }
            a.confidence = update_confidence(a.confidence, moved, &cfg.discount);
            if !a.discount.is_finite() || !a.confidence.is_finite() {
                return Err(Error::NonFinite {
                    epoch: t,
                    what: "discount state",
                });
            }
        }

        let expected = EpochEconomy::expected(&cfg.reward, t);
        if moved || expected != economy {
            economy = expected;
            analysis = analyze_deviations(&agents, &state, economy, &cfg.actions)?;
            myopic_cache.clear();
        }
        let patience: Vec<f64> = agents.iter().map(|a| a.discount * a.confidence).collect();
        let patient: Vec<bool> = (0..n)
            .map(|i| patience[i] >= analysis.critical[i].delta)
            .collect();
        let all_patient = patient.iter().all(|&p| p);

        let profile: Vec<Action> = match cfg.strategy_rule {
            StrategyRule::TriggerCooperate => {
                if punishment.active {
                    analysis.best_deviation.clone()
                } else {
                    (0..n)
                        .map(|i| {
                            if patient[i] {
                                Action::Honest
                            } else {
                                analysis.best_deviation[i]
                            }
                        })
                        .collect()
                }
            }
            StrategyRule::MyopicBestResponse => {
                let (gains, replies) = match myopic_cache.get(&prev_profile) {
                    Some(v) => v.clone(),
                    None => {
                        let v =
                            myopic_gains(&agents, &prev_profile, &state, economy, &cfg.actions)?;
                        myopic_cache.insert(prev_profile.clone(), v.clone());
                        v
                    }
                };
                (0..n)
                    .map(|i| {
                        let p = patience[i];
                        let stake = (analysis.cooperative[i] - analysis.punishment[i]).max(0.0);
                        if gains[i] > p / (1.0 - p) * stake {
                            replies[i]
                        } else {
                            Action::Honest
                        }
                    })
                    .collect()
            }
            StrategyRule::BellmanPolicy => {
                if t % cfg.sample_interval == 0 || policy.is_none() {
                    policy = Some(refresh_policies(
                        cfg,
                        policy.take(),
                        &agents,
                        &patience,
                        &analysis,
                        economy,
                    )?);
                }
                let ps = policy.as_ref().expect("policy refreshed above");
                let s = ps.space.nearest(&state);
                let offset = if punishment.active { ps.space.len() } else { 0 };
                ps.policies.iter().map(|p| p[offset + s]).collect()
            }
        };
        if matches!(
            cfg.strategy_rule,
            StrategyRule::TriggerCooperate | StrategyRule::BellmanPolicy
        ) {
            punishment.after_epoch(&profile, all_patient, cfg.recommit_epochs);
        }
        lobby_count = profile.iter().filter(|a| a.is_meta()).count();

        let realized = EpochEconomy {
            subsidy: economy.subsidy,
            fees: cfg.reward.draw_fee(&mut market_rng),
        };
        let mut outcome = stage_outcome(&agents, &profile, &state, realized, &cfg.actions)?;
        if cfg.lottery_mode {
            outcome = outcome.into_lottery(&mut market_rng);
        }
        let payoffs = outcome.payoffs();
        if payoffs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                epoch: t,
                what: "stage payoff",
            });
        }

        if t % cfg.sample_interval == 0 {
            let game =
                miner_stage_game(&churn_players, &Action::ALL, &state, economy, &cfg.actions)?;
            let report = match &last_report {
                Some(prev) => {
                    let r = EquilibriumReport::analyze_after(&game, prev)?;
                    churn.push(r.churn);
                    r
                }
                None => EquilibriumReport::analyze(&game)?,
            };
            last_report = Some(report);
        }

        let deviants = profile.iter().filter(|a| a.is_deviant()).count();
        records.push(EpochRecord {
            epoch: t,
            shock_occurred: step.shock_occurred,
            shock_magnitude: step.shock_magnitude,
            protocol: state,
            agents: (0..n)
                .map(|i| AgentRecord {
                    action: profile[i],
                    payoff: payoffs[i],
                    discount: agents[i].discount,
                    confidence: agents[i].confidence,
                })
                .collect(),
            deviant_fraction: deviants as f64 / n as f64,
        });
        for (a, &act) in agents.iter_mut().zip(&profile) {
            a.strategy = act;
        }
        prev_profile = profile;
    }
    Ok(Trajectory { records, churn })
}

/// One-shot gain of each agent's best deviant reply to `observed`, and
/// that reply.
fn myopic_gains(
    agents: &[MinerAgent],
    observed: &[Action],
    state: &ProtocolState,
    economy: EpochEconomy,
    constants: &ActionConstants,
) -> Result<(Vec<f64>, Vec<Action>)> {
    let n = agents.len();
    let mut gains = Vec::with_capacity(n);
    let mut replies = Vec::with_capacity(n);
    let mut profile = observed.to_vec();
    for i in 0..n {
        profile[i] = Action::Honest;
        let honest = stage_outcome(agents, &profile, state, economy, constants)?.payoff(i);
        let mut best = (Action::SelfishWithhold, f64::NEG_INFINITY);
        for &a in &Action::ALL[1..] {
            profile[i] = a;
            let v = stage_outcome(agents, &profile, state, economy, constants)?.payoff(i);
            if v > best.1 {
                best = (a, v);
            }
        }
        profile[i] = observed[i];
        gains.push(best.1 - honest);
        replies.push(best.0);
    }
    Ok((gains, replies))
}

/// Re-solves every agent's program. The per-state discount factors are
/// scaled by the agent's current patience relative to its calm-rule
/// discount, so shocks and lost confidence make the program less patient.
fn refresh_policies(
    cfg: &SimConfig,
    previous: Option<PolicyState>,
    agents: &[MinerAgent],
    patience: &[f64],
    analysis: &DeviationAnalysis,
    economy: EpochEconomy,
) -> Result<PolicyState> {
    let space = match previous {
        Some(p) => p.space,
        None => build_state_space(
            &cfg.mutation,
            &cfg.discount,
            cfg.beta,
            cfg.solve.grid_levels,
            cfg.solve.samples,
            derive(cfg.seed, &[stream::KERNEL]),
        )?,
    };
    let background = Background::GrimTrigger {
        cooperative: vec![Action::Honest; agents.len()],
        punishment: analysis.best_deviation.clone(),
    };
    let mut policies = Vec::with_capacity(agents.len());
    for (i, a) in agents.iter().enumerate() {
        let mut mdp = miner_mdp(&space, agents, i, &background, economy, &cfg.actions)?;
        let calm = volatility_discount(&cfg.discount, a.beta, 0.0);
        let scale = patience[i] / calm;
        for d in mdp.delta.iter_mut() {
            *d = (*d * scale).clamp(
                crate::discounting::DELTA_MIN,
                1.0 - crate::discounting::DELTA_MIN,
            );
        }
        policies.push(value_iterate(&mdp, cfg.solve.tolerance, cfg.solve.max_iter)?.policy);
    }
    Ok(PolicyState { space, policies })
}

/// Agent `agent`'s program on the configured grid at calm-rule discounting,
/// against a grim-trigger background built from the starting analysis.
pub fn solve_agent(cfg: &SimConfig, agent: usize) -> Result<(DiscreteStateSpace, ValueSolution)> {
    let agents = cfg.agents()?;
    if agent >= agents.len() {
        return Err(Error::config(
            "agent",
            format!("index {agent} out of range for {} agents", agents.len()),
        ));
    }
    let space = build_state_space(
        &cfg.mutation,
        &cfg.discount,
        cfg.beta,
        cfg.solve.grid_levels,
        cfg.solve.samples,
        derive(cfg.seed, &[stream::KERNEL]),
    )?;
    let economy = EpochEconomy::expected(&cfg.reward, 0);
    let analysis = analyze_deviations(&agents, &ProtocolState::default(), economy, &cfg.actions)?;
    let background = Background::GrimTrigger {
        cooperative: vec![Action::Honest; agents.len()],
        punishment: analysis.best_deviation.clone(),
    };
    let mdp = miner_mdp(&space, &agents, agent, &background, economy, &cfg.actions)?;
    let solution = value_iterate(&mdp, cfg.solve.tolerance, cfg.solve.max_iter)?;
    Ok((space, solution))
}

/// Smallest mutability on `grid` at which [`solve_agent`]'s policy at the
/// default protocol state turns deviant.
pub fn solve_abandonment(cfg: &SimConfig, agent: usize, grid: &Axis) -> Result<Option<f64>> {
    grid.validate()?;
    abandonment_volatility(&grid.values(), |m| {
        let mut c = cfg.clone();
        c.mutation.mutability = m;
        let (space, sol) = solve_agent(&c, agent)?;
        Ok(sol.policy[space.nearest(&ProtocolState::default())])
    })
}

/// Inclusive `start:stop:count` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(start: f64, stop: f64, count: usize) -> Result<Self> {
        let axis = Self { start, stop, count };
        axis.validate()?;
        Ok(axis)
    }

    pub fn single(value: f64) -> Self {
        Self {
            start: value,
            stop: value,
            count: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::domain("axis needs at least one point"));
        }
        if !self.start.is_finite() || !self.stop.is_finite() {
            return Err(Error::domain("axis bounds must be finite"));
        }
        if self.count > 1 && !(self.stop > self.start) {
            return Err(Error::domain("axis stop must exceed start"));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        (0..self.count)
            .map(|i| {
                if i == self.count - 1 {
                    self.stop
                } else {
                    self.start + (self.stop - self.start) * i as f64 / (self.count - 1) as f64
                }
            })
            .collect()
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::domain(format!("grid `{s}` is not start:stop:count"));
        match parts.as_slice() {
            [a, b, c] => Axis::new(
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
                c.trim().parse().map_err(|_| bad())?,
            ),
            [a] => Ok(Axis::single(a.trim().parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub eps: Axis,
    pub kappa: Axis,
    pub gamma: Axis,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            eps: Axis {
                start: 0.0,
                stop: 0.3,
                count: 16,
            },
            kappa: Axis {
                start: 0.0,
                stop: 2.0,
                count: 9,
            },
            gamma: Axis {
                start: 0.1,
                stop: 0.9,
                count: 9,
            },
        }
    }
}

impl SweepGrid {
    pub fn cell_count(&self) -> usize {
        self.eps.count * self.kappa.count * self.gamma.count
    }

    /// Cell coordinates in output order: `eps` slowest, `gamma` fastest.
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let (e, k, g) = (self.eps.values(), self.kappa.values(), self.gamma.values());
        let mut out = Vec::with_capacity(self.cell_count());
        for &eps in &e {
            for &kappa in &k {
                for &gamma in &g {
                    out.push((eps, kappa, gamma));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub eps: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub incidence: f64,
    pub cooperation_index: f64,
    pub mean_churn: f64,
    /// Mean first-deviation epoch of agent 0 (the concentrated share);
    /// runs without a deviation count as `epochs`.
    pub first_deviation_gamma_hi: f64,
    /// Same for the remaining agents, averaged over agents.
    pub first_deviation_gamma_lo: f64,
    pub replicates: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: SweepGrid,
    pub cells: Vec<SweepCell>,
}

/// Statistics of one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ReplicateStats {
    incidence: f64,
    cooperation_index: f64,
    mean_churn: f64,
    first_hi: f64,
    first_lo: f64,
}

fn replicate_stats(traj: &Trajectory, epochs: u64) -> ReplicateStats {
    let n = traj.records.first().map_or(0, |r| r.agents.len());
    let first = |i: usize| traj.first_deviation(i).unwrap_or(epochs) as f64;
    let first_hi = first(0);
    let first_lo = if n > 1 {
        (1..n).map(first).sum::<f64>() / (n - 1) as f64
    } else {
        first_hi
    };
    ReplicateStats {
        incidence: traj.incidence(),
        cooperation_index: traj.cooperation_index(),
        mean_churn: traj.mean_churn(),
        first_hi,
        first_lo,
    }
}

/// Configuration of one sweep cell replicate.
pub fn cell_config(
    base: &SimConfig,
    cell_index: usize,
    replicate: u32,
    eps: f64,
    kappa: f64,
    gamma: f64,
) -> SimConfig {
    let mut cfg = base.clone();
    cfg.mutation.mutability = eps;
    cfg.kappa = kappa;
    cfg.hash_distribution = HashDistribution::Concentration(gamma);
    cfg.seed = cell_seed(base.seed, cell_index as u64, replicate as u64);
    cfg
}

/// Runs every cell and replicate on a pool of `jobs` threads. The result
/// does not depend on `jobs`.
pub fn run_sweep(
    base: &SimConfig,
    grid: &SweepGrid,
    replicates: u32,
    jobs: usize,
) -> Result<SweepResult> {
    if replicates == 0 {
        return Err(Error::domain("replicates must be at least 1"));
    }
    grid.eps.validate()?;
    grid.kappa.validate()?;
    grid.gamma.validate()?;
    base.validate()?;
    let cells = grid.cells();
    let reps = replicates as usize;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::domain(format!("thread pool: {e}")))?;
    let stats: Vec<ReplicateStats> = pool.install(|| {
        (0..cells.len() * reps)
            .into_par_iter()
            .map(|job| {
                let (c, r) = (job / reps, (job % reps) as u32);
                let (eps, kappa, gamma) = cells[c];
                let cfg = cell_config(base, c, r, eps, kappa, gamma);
                run_simulation(&cfg)
                    .map(|t| replicate_stats(&t, cfg.epochs))
                    .map_err(|e| Error::Cell {
                        eps,
                        kappa,
                        gamma,
                        replicate: r,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let out = cells
        .iter()
        .zip(stats.chunks(reps))
        .map(|(&(eps, kappa, gamma), chunk)| {
            let avg =
                |f: fn(&ReplicateStats) -> f64| chunk.iter().map(f).sum::<f64>() / reps as f64;
            SweepCell {
                eps,
                kappa,
                gamma,
                incidence: avg(|s| s.incidence),
                cooperation_index: avg(|s| s.cooperation_index),
                mean_churn: avg(|s| s.mean_churn),
                first_deviation_gamma_hi: avg(|s| s.first_hi),
                first_deviation_gamma_lo: avg(|s| s.first_lo),
                replicates,
            }
        })
        .collect();
    Ok(SweepResult {
        grid: *grid,
        cells: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub threshold: Option<f64>,
    pub sharpness: f64,
}

/// Locates the steepest rise of an incidence curve.
///
/// The threshold is the midpoint of the interval with the largest increase,
/// reported only when that increase is positive and at least twice the
/// median absolute interval change. Sharpness is the largest increase
/// divided by the curve's range.
pub fn detect_threshold(curve: &[(f64, f64)]) -> Result<ThresholdEstimate> {
    if curve.len() < 5 {
        return Err(Error::domain("threshold detection needs at least 5 points"));
    }
    if curve.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::domain("curve contains non-finite values"));
    }
    if curve.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::domain(
            "curve must be sorted by strictly increasing mutability",
        ));
    }
    let (lo, hi) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let range = hi - lo;
    if range == 0.0 {
        return Ok(ThresholdEstimate {
            threshold: None,
            sharpness: 0.0,
        });
    }
    let diffs: Vec<f64> = curve.windows(2).map(|w| w[1].1 - w[0].1).collect();
    let (k, max_diff) =
        diffs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, d)| {
                if d > best.1 {
                    (i, d)
                } else {
                    best
                }
            });
    let mut abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let m = abs.len();
    let median = if m % 2 == 1 {
        abs[m / 2]
    } else {
        0.5 * (abs[m / 2 - 1] + abs[m / 2])
    };
    let threshold =
        (max_diff > 0.0 && max_diff >= 2.0 * median).then(|| 0.5 * (curve[k].0 + curve[k + 1].0));
    Ok(ThresholdEstimate {
        threshold,
        sharpness: max_diff.max(0.0) / range,
    })
}

/// Threshold along the `eps` axis for one `(kappa, gamma)` slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceThreshold {
    pub kappa: f64,
    pub gamma: f64,
    pub eps_star: Option<f64>,
    pub sharpness: f64,
}

/// Applies [`detect_threshold`] to every `(kappa, gamma)` slice. Empty when
/// the `eps` axis has fewer than five points.
pub fn slice_thresholds(result: &SweepResult) -> Result<Vec<SliceThreshold>> {
    let g = &result.grid;
    if g.eps.count < 5 {
        return Ok(Vec::new());
    }
    let stride = g.kappa.count * g.gamma.count;
    let mut out = Vec::with_capacity(stride);
    for s in 0..stride {
        let curve: Vec<(f64, f64)> = (0..g.eps.count)
            .map(|e| {
                let c = &result.cells[e * stride + s];
                (c.eps, c.incidence)
            })
            .collect();
        let est = detect_threshold(&curve)?;
        let c = &result.cells[s];
        out.push(SliceThreshold {
            kappa: c.kappa,
            gamma: c.gamma,
            eps_star: est.threshold,
            sharpness: est.sharpness,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_curve_threshold() {
        let curve = [(0.0, 0.0), (0.05, 0.0), (0.1, 0.0), (0.15, 1.0), (0.2, 1.0)];
        let t = detect_threshold(&curve).unwrap();
        assert!((t.threshold.unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(t.sharpness, 1.0);
    }

    #[test]
    fn ramp_and_constant_have_no_threshold() {
        let ramp: Vec<(f64, f64)> = (0..8).map(|i| (i as f64, i as f64 * 0.1)).collect();
        assert_eq!(detect_threshold(&ramp).unwrap().threshold, None);
        let flat: Vec<(f64, f64)> = (0..8).map(|i| (i as f64, 0.3)).collect();
        assert_eq!(
            detect_threshold(&flat).unwrap(),
            ThresholdEstimate {
                threshold: None,
                sharpness: 0.0
            }
        );
        assert!(detect_threshold(&ramp[..4]).is_err());
    }

    #[test]
    fn axis_parsing() {
        let a: Axis = "0:0.3:16".parse().unwrap();
        let v = a.values();
        assert_eq!(v.len(), 16);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[15], 0.3);
        assert!((v[4] - 0.08).abs() < 1e-15);
        assert_eq!("0.4".parse::<Axis>().unwrap().values(), vec![0.4]);
        assert!("0:1".parse::<Axis>().is_err());
        assert!("1:0:3".parse::<Axis>().is_err());
        assert!("a:b:c".parse::<Axis>().is_err());
    }

    #[test]
    fn concentration_shares() {
        let s = HashDistribution::Concentration(0.4).shares(4).unwrap();
        assert_eq!(s[0], 0.4);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(HashDistribution::Concentration(1.2).shares(4).is_err());
        assert!(HashDistribution::Shares(vec![0.5, 0.5]).shares(3).is_err());
    }

    #[test]
    fn calibration_gives_positive_margin() {
        let cfg = SimConfig::default();
        let opex = cfg.calibration.network_opex();
        assert!((opex - 1.2152777777777777).abs() < 1e-12);
        let a = cfg.initial_analysis().unwrap();
        assert!(a.cooperative.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn punishment_recommits_after_calm_run() {
        let mut p = Punishment::default();
        let dev = [Action::SelfishWithhold, Action::Honest];
        p.after_epoch(&dev, false, 2);
        assert!(p.active);
        p.after_epoch(&dev, true, 2);
        assert!(p.active);
        p.after_epoch(&dev, true, 2);
        assert!(!p.active);
        let mut q = Punishment::default();
        q.after_epoch(&dev, true, 0);
        for _ in 0..100 {
            q.after_epoch(&dev, true, 0);
        }
        assert!(q.active);
    }
}

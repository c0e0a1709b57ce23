//! Finite stage games and repeated-game analysis under fixed rules.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    stage_outcome, Action, ActionConstants, EpochEconomy, MinerAgent, ProtocolState,
};

/// Largest number of joint profiles that will be enumerated.
pub const MAX_PROFILES: usize = 1_000_000;

/// Joint action profile, one entry per player.
pub type Profile = Vec<Action>;

/// A normal-form game with a dense payoff tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGame {
    action_sets: Vec<Vec<Action>>,
    /// Row-major over profiles (last player fastest), `n_players` payoffs per row.
    payoffs: Vec<f64>,
}

impl StageGame {
    /// Builds the payoff tensor by evaluating `payoff` on every profile.
    pub fn new<F>(action_sets: Vec<Vec<Action>>, mut payoff: F) -> Result<Self>
    where
        F: FnMut(&[Action]) -> Result<Vec<f64>>,
    {
        if action_sets.is_empty() {
            return Err(Error::domain("a game needs at least one player"));
        }
        for (i, set) in action_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::domain(format!("player {i} has no actions")));
            }
            let distinct: BTreeSet<_> = set.iter().collect();
            if distinct.len() != set.len() {
                return Err(Error::domain(format!("player {i} has repeated actions")));
            }
        }
        let count = profile_count(&action_sets)?;
        let n = action_sets.len();
        let mut payoffs = Vec::with_capacity(count * n);
        let mut idx = vec![0usize; n];
        let mut profile: Profile = action_sets.iter().map(|s| s[0]).collect();
        for _ in 0..count {
            let row = payoff(&profile)?;
            if row.len() != n || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!(
                    "payoff for {profile:?} must be {n} finite values"
                )));
            }
            payoffs.extend_from_slice(&row);
            advance(&mut idx, &mut profile, &action_sets);
        }
        Ok(Self {
            action_sets,
            payoffs,
        })
    }

    pub fn n_players(&self) -> usize {
        self.action_sets.len()
    }

    pub fn action_sets(&self) -> &[Vec<Action>] {
        &self.action_sets
    }

    pub fn profile_count(&self) -> usize {
        self.payoffs.len() / self.n_players()
    }

    fn position(&self, player: usize, a: Action) -> Option<usize> {
        self.action_sets[player].iter().position(|&x| x == a)
    }

    fn row_index(&self, profile: &[Action]) -> Result<usize> {
        if profile.len() != self.n_players() {
            return Err(Error::domain(format!(
                "profile has {} entries for {} players",
                profile.len(),
                self.n_players()
            )));
        }
        let mut row = 0usize;
        for (i, &a) in profile.iter().enumerate() {
            let p = self
                .position(i, a)
                .ok_or_else(|| Error::domain(format!("{a} is not available to player {i}")))?;
            row = row * self.action_sets[i].len() + p;
        }
        Ok(row)
    }

    pub fn payoff(&self, profile: &[Action]) -> Result<&[f64]> {
        let n = self.n_players();
        let row = self.row_index(profile)?;
        Ok(&self.payoffs[row * n..(row + 1) * n])
    }

    /// Iterates over every profile in tensor order.
    pub fn profiles(&self) -> impl Iterator<Item = Profile> + '_ {
        let n = self.n_players();
        let mut idx = vec![0usize; n];
        let mut profile: Profile = self.action_sets.iter().map(|s| s[0]).collect();
        (0..self.profile_count()).map(move |_| {
            let out = profile.clone();
            advance(&mut idx, &mut profile, &self.action_sets);
            out
        })
    }
}

fn profile_count(action_sets: &[Vec<Action>]) -> Result<usize> {
    let mut count: u128 = 1;
    for s in action_sets {
        count = count.saturating_mul(s.len() as u128);
    }
    if count > MAX_PROFILES as u128 {
        return Err(Error::Capacity {
            what: "stage-game profile enumeration",
            needed: count,
            limit: MAX_PROFILES as u128,
        });
    }
    Ok(count as usize)
}

fn advance(idx: &mut [usize], profile: &mut [Action], sets: &[Vec<Action>]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < sets[k].len() {
            profile[k] = sets[k][idx[k]];
            return;
        }
        idx[k] = 0;
        profile[k] = sets[k][0];
    }
}

/// Payoff-maximising actions of `player` when the others play as in
/// `profile` (the player's own entry is ignored). Ordered as in the
/// player's action set.
pub fn best_response(game: &StageGame, player: usize, profile: &[Action]) -> Result<Vec<Action>> {
    if player >= game.n_players() {
        return Err(Error::domain(format!(
            "player {player} out of range for a {}-player game",
            game.n_players()
        )));
    }
    let mut scratch = profile.to_vec();
    let mut best = f64::NEG_INFINITY;
    let mut out = Vec::new();
    for &a in &game.action_sets[player] {
        scratch[player] = a;
        let v = game.payoff(&scratch)?[player];
        if v > best {
            best = v;
            out.clear();
            out.push(a);
        } else if v == best {
            out.push(a);
        }
    }
    Ok(out)
}

/// Every profile from which no player gains by a unilateral deviation.
pub fn pure_nash(game: &StageGame) -> Result<BTreeSet<Profile>> {
    profile_count(&game.action_sets)?;
    let n = game.n_players();
    let mut out = BTreeSet::new();
    for profile in game.profiles() {
        let own = game.payoff(&profile)?.to_vec();
        let mut stable = true;
        let mut scratch = profile.clone();
        'players: for i in 0..n {
            for &a in &game.action_sets[i] {
                if a == profile[i] {
                    continue;
                }
                scratch[i] = a;
                if game.payoff(&scratch)?[i] > own[i] {
                    stable = false;
                    break 'players;
                }
            }
            scratch[i] = profile[i];
        }
        if stable {
            out.insert(profile);
        }
    }
    Ok(out)
}

/// Pure equilibria and best-response correspondence of one stage game.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub action_sets: Vec<Vec<Action>>,
    pub pure_nash: BTreeSet<Profile>,
    /// Per player: opponents' actions (own slot removed) -> best responses.
    pub best_responses: Vec<BTreeMap<Profile, Vec<Action>>>,
    /// Jaccard distance to the previous report in a sequence.
    pub churn: f64,
}

impl EquilibriumReport {
    pub fn analyze(game: &StageGame) -> Result<Self> {
        let n = game.n_players();
        let mut best_responses = vec![BTreeMap::new(); n];
        for profile in game.profiles() {
            for (i, map) in best_responses.iter_mut().enumerate() {
                if profile[i] != game.action_sets[i][0] {
                    continue;
                }
                let mut others = profile.clone();
                others.remove(i);
                map.insert(others, best_response(game, i, &profile)?);
            }
        }
        Ok(Self {
            action_sets: game.action_sets.clone(),
            pure_nash: pure_nash(game)?,
            best_responses,
            churn: 0.0,
        })
    }

    /// Same analysis with `churn` measured against `prev`.
    pub fn analyze_after(game: &StageGame, prev: &EquilibriumReport) -> Result<Self> {
        let mut next = Self::analyze(game)?;
        next.churn = equilibrium_churn(prev, &next)?;
        Ok(next)
    }
}

/// `1 - |A ∩ B| / |A ∪ B|` over the two pure-Nash sets; zero if both are
/// empty.
pub fn equilibrium_churn(prev: &EquilibriumReport, next: &EquilibriumReport) -> Result<f64> {
    if prev.action_sets != next.action_sets {
        return Err(Error::domain(
            "churn needs games with identical action sets",
        ));
    }
    Ok(jaccard_distance(&prev.pure_nash, &next.pure_nash))
}

pub(crate) fn jaccard_distance(a: &BTreeSet<Profile>, b: &BTreeSet<Profile>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    1.0 - inter as f64 / union as f64
}

/// Where a `(C, D, P)` triple sits relative to the grim-trigger constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CooperationRegime {
    /// `D > C > P`: cooperation holds iff `delta >= delta*`.
    Threshold,
    /// No temptation (`D <= C`).
    AlwaysStable,
    /// Punishment does not hurt (`P >= C` while `D > C`).
    NeverStable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalDelta {
    pub delta: f64,
    pub regime: CooperationRegime,
}

/// `delta* = (D - C) / (D - P)`: cooperating forever is worth at least a
/// one-shot deviation followed by permanent punishment iff `delta >= delta*`.
pub fn critical_delta(coop: f64, deviation: f64, punishment: f64) -> CriticalDelta {
    if deviation <= coop {
        CriticalDelta {
            delta: 0.0,
            regime: CooperationRegime::AlwaysStable,
        }
    } else if punishment >= coop {
        CriticalDelta {
            delta: 1.0,
            regime: CooperationRegime::NeverStable,
        }
    } else {
        CriticalDelta {
            delta: (deviation - coop) / (deviation - punishment),
            regime: CooperationRegime::Threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerRule {
    /// Everyone punishes forever after the first deviation.
    GrimTrigger,
    /// Each player punishes next epoch iff someone else deviated this epoch.
    TitForTat,
}

/// A scripted one-shot deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviation {
    pub player: usize,
    pub epoch: usize,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPlay {
    pub rule: TriggerRule,
    pub cooperative: Profile,
    pub punishment: Profile,
    pub deviation: Option<Deviation>,
}

/// Plays the repeated game for `horizon` epochs and returns each player's
/// discounted utility `sum_t delta^t u_t`.
pub fn simulate_trigger(
    game: &StageGame,
    play: &TriggerPlay,
    delta: f64,
    horizon: usize,
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!(
            "delta must lie in (0,1), got {delta}"
        )));
    }
    let n = game.n_players();
    if play.cooperative.len() != n || play.punishment.len() != n {
        return Err(Error::domain(
            "cooperative and punishment profiles need one action per player",
        ));
    }
    if let Some(d) = play.deviation {
        if d.epoch >= horizon {
            return Err(Error::domain(format!(
                "deviation epoch {} is not before horizon {horizon}",
                d.epoch
            )));
        }
        if d.player >= n {
            return Err(Error::domain(format!(
                "deviating player {} out of range",
                d.player
            )));
        }
    }

    let mut utility = vec![0.0; n];
    let mut weight = 1.0;
    let mut triggered = false;
    let mut prev: Option<Profile> = None;
    for t in 0..horizon {
        let mut current: Profile = match play.rule {
            TriggerRule::GrimTrigger => {
                if triggered {
                    play.punishment.clone()
                } else {
                    play.cooperative.clone()
                }
            }
            TriggerRule::TitForTat => (0..n)
                .map(|j| match &prev {
                    Some(p) if (0..n).any(|k| k != j && p[k] != play.cooperative[k]) => {
                        play.punishment[j]
                    }
                    _ => play.cooperative[j],
                })
                .collect(),
        };
        if let Some(d) = play.deviation {
            if d.epoch == t {
                current[d.player] = d.action;
            }
        }
        let u = game.payoff(&current)?;
        for (acc, v) in utility.iter_mut().zip(u) {
            *acc += weight * v;
        }
        weight *= delta;
        if current != play.cooperative {
            triggered = true;
        }
        prev = Some(current);
    }
    Ok(utility)
}

/// Builds the stage game among `agents` where every player chooses from
/// `actions`.
pub fn miner_stage_game(
    agents: &[MinerAgent],
    actions: &[Action],
    state: &ProtocolState,
    economy: EpochEconomy,
    constants: &ActionConstants,
) -> Result<StageGame> {
    let sets = vec![actions.to_vec(); agents.len()];
    StageGame::new(sets, |p| {
        Ok(stage_outcome(agents, p, state, economy, constants)?.payoffs())
    })
}

/// Groups agents (sorted by descending share, ties by id) into `k`
/// contiguous cohorts that act as single players with pooled share and
/// pooled operating cost.
pub fn cohorts(agents: &[MinerAgent], k: usize) -> Vec<MinerAgent> {
    let k = k.clamp(1, agents.len().max(1));
    let mut order: Vec<&MinerAgent> = agents.iter().collect();
    order.sort_by(|a, b| {
        b.hash_share
            .partial_cmp(&a.hash_share)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    let n = order.len();
    (0..k)
        .map(|c| {
            let lo = c * n / k;
            let hi = (c + 1) * n / k;
            let members = &order[lo..hi];
            let first = members[0];
            MinerAgent {
                id: c as u32,
                hash_share: members.iter().map(|a| a.hash_share).sum(),
                opex_rate: members.iter().map(|a| a.opex_rate).sum(),
                capital_stock: members.iter().map(|a| a.capital_stock).sum(),
                ..first.clone()
            }
        })
        .collect()
}

/// Per-agent summary of the cooperative stage game: honest payoff, best
/// unilateral deviation, payoff under mutual punishment and the implied
/// trigger threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationAnalysis {
    pub cooperative: Vec<f64>,
    pub best_deviation: Vec<Action>,
    pub deviation: Vec<f64>,
    /// Payoff when every agent plays its best deviation.
    pub punishment: Vec<f64>,
    pub critical: Vec<CriticalDelta>,
}

impl DeviationAnalysis {
    pub fn punishment_profile(&self) -> &[Action] {
        &self.best_deviation
    }

    /// Threshold of the agent whose cooperation is hardest to sustain.
    pub fn binding_delta(&self) -> f64 {
        self.critical.iter().map(|c| c.delta).fold(0.0, f64::max)
    }
}

pub fn analyze_deviations(
    agents: &[MinerAgent],
    state: &ProtocolState,
    economy: EpochEconomy,
    constants: &ActionConstants,
) -> Result<DeviationAnalysis> {
    let n = agents.len();
    let honest = vec![Action::Honest; n];
    let cooperative = stage_outcome(agents, &honest, state, economy, constants)?.payoffs();
    let mut best_deviation = Vec::with_capacity(n);
    let mut deviation = Vec::with_capacity(n);
    let mut profile = honest.clone();
    for i in 0..n {
        let mut best = (Action::SelfishWithhold, f64::NEG_INFINITY);
        for &a in &Action::ALL[1..] {
            profile[i] = a;
            let v = stage_outcome(agents, &profile, state, economy, constants)?.payoff(i);
            if v > best.1 {
                best = (a, v);
            }
        }
        profile[i] = Action::Honest;
        best_deviation.push(best.0);
        deviation.push(best.1);
    }
    let punishment = stage_outcome(agents, &best_deviation, state, economy, constants)?.payoffs();
    let critical = (0..n)
        .map(|i| critical_delta(cooperative[i], deviation[i], punishment[i]))
        .collect();
    Ok(DeviationAnalysis {
        cooperative,
        best_deviation,
        deviation,
        punishment,
        critical,
    })
}

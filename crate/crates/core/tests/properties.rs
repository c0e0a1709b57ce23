use proptest::prelude::*;

use mutagame_core::bellman::{value_iterate, Choice, Mdp};
use mutagame_core::discounting::{update_discount, volatility_discount, DiscountParams};
use mutagame_core::game::{
    best_response, critical_delta, pure_nash, simulate_trigger, CooperationRegime, Deviation,
    StageGame, TriggerPlay, TriggerRule,
};
use mutagame_core::model::{
    stage_payoffs, Action, ActionConstants, EpochEconomy, MinerAgent, ProtocolState,
};
use mutagame_core::mutation::{step_protocol, MutationConfig};
use mutagame_core::seed::rng_for;

fn agent(id: u32, share: f64, opex: f64) -> MinerAgent {
    MinerAgent {
        id,
        hash_share: share,
        beta: 1.0 / 9.0,
        kappa: 1.0,
        discount: 0.9,
        confidence: 1.0,
        capital_stock: 0.0,
        opex_rate: opex,
        strategy: Action::Honest,
    }
}

fn action() -> impl Strategy<Value = Action> {
    (0..6usize).prop_map(|i| Action::from_index(i).unwrap())
}

fn state() -> impl Strategy<Value = ProtocolState> {
    (0.1..8.0f64, 0.0..1.0f64, 0.0..10.0f64, 0.0..1.0f64).prop_map(|(b, r, f, v)| ProtocolState {
        block_size_limit: b,
        relay_strictness: r,
        fee_threshold: f,
        validation_overhead: v,
        epoch_of_last_shock: 0,
    })
}

proptest! {
    #[test]
    fn payoff_nondecreasing_in_own_share(
        g1 in 0.05..0.9f64,
        dg in 0.0..0.09f64,
        profile in prop::collection::vec(action(), 3),
        st in state(),
    ) {
        let economy = EpochEconomy { subsidy: 6.25, fees: 0.5 };
        let c = ActionConstants::default();
        let payoff0 = |g: f64| {
            let rest = (1.0 - g) / 2.0;
            let agents = [agent(0, g, 0.4), agent(1, rest, 0.4), agent(2, rest, 0.4)];
            stage_payoffs(&agents, &profile, &st, economy, &c).unwrap()[0]
        };
        prop_assert!(payoff0(g1 + dg) >= payoff0(g1) - 1e-12);
    }

    #[test]
    fn honest_rewards_are_conserved(shares in prop::collection::vec(0.01..1.0f64, 1..8), st in state()) {
        let total: f64 = shares.iter().sum();
        let agents: Vec<MinerAgent> = shares
            .iter()
            .enumerate()
            .map(|(i, s)| agent(i as u32, s / total, 0.0))
            .collect();
        let economy = EpochEconomy { subsidy: 3.125, fees: 0.8 };
        let honest = vec![Action::Honest; agents.len()];
        let paid: f64 = stage_payoffs(&agents, &honest, &st, economy, &ActionConstants::default())
            .unwrap()
            .iter()
            .sum();
        let expected = economy.subsidy + economy.fees * (1.0 - st.relay_strictness);
        prop_assert!((paid - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn mutation_stays_in_range_and_is_deterministic(
        st in state(),
        mutability in 0.0..0.3f64,
        lobby in 0usize..10,
        seed in any::<u64>(),
    ) {
        let cfg = MutationConfig { mutability, shock_rate: 2.0, ..MutationConfig::default() };
        let run = || {
            let mut rng = rng_for(seed, 1);
            let mut s = st;
            let mut out = Vec::new();
            for t in 0..50 {
                s = step_protocol(&s, &cfg, lobby, t, &mut rng).state;
                out.push(s);
            }
            out
        };
        let a = run();
        for s in &a {
            prop_assert!(s.validate().is_ok(), "{s:?}");
        }
        prop_assert_eq!(a, run());
    }

    #[test]
    fn lobbying_is_inert_without_bias(st in state(), seed in any::<u64>(), lobby in 1usize..20) {
        let cfg = MutationConfig { lobby_bias_strength: 0.0, shock_rate: 1.0, ..MutationConfig::default() };
        let mut quiet = rng_for(seed, 1);
        let mut loud = rng_for(seed, 1);
        let (mut a, mut b) = (st, st);
        for t in 0..50 {
            let x = step_protocol(&a, &cfg, 0, t, &mut quiet);
            let y = step_protocol(&b, &cfg, lobby, t, &mut loud);
            prop_assert_eq!(x, y);
            a = x.state;
            b = y.state;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn volatility_discount_strictly_decreasing(
        beta in 1e-3..2.0f64,
        s in 0.0..10.0f64,
        ds in 1e-6..10.0f64,
        lin in 0.0..20.0f64,
        quad in 0.0..50.0f64,
    ) {
        prop_assume!(lin > 0.0 || quad > 0.0);
        let p = DiscountParams { phi_linear: lin, phi_quad: quad, ..DiscountParams::default() };
        let lo = volatility_discount(&p, beta, s);
        let hi = volatility_discount(&p, beta, s + ds);
        prop_assert!(hi < lo, "{hi} !< {lo}");
        prop_assert!(lo > 0.0 && lo < 1.0);
    }

    #[test]
    fn update_discount_nonincreasing_in_shock(
        delta in 1e-6..(1.0 - 1e-6),
        kappa in 0.0..5.0f64,
        e in 0.0..2.0f64,
        de in 0.0..2.0f64,
    ) {
        let a = update_discount(delta, kappa, e);
        let b = update_discount(delta, kappa, e + de);
        prop_assert!(b <= a);
        prop_assert!(b > 0.0 && b < 1.0);
    }
}

fn triple() -> impl Strategy<Value = (f64, f64, f64)> {
    (-10.0..10.0f64, 0.1..10.0f64, 0.1..10.0f64)
        .prop_map(|(p, cp, dc)| (p + cp, p + cp + dc, p))
        .prop_filter("threshold away from the edges", |&(c, d, p)| {
            let star = (d - c) / (d - p);
            (0.02..=0.98).contains(&star)
        })
}

/// Two symmetric players; Honest cooperates, EmptyBlock defects.
fn symmetric_game(c: f64, d: f64, p: f64) -> StageGame {
    use Action::{EmptyBlock as Dv, Honest as Co};
    StageGame::new(vec![vec![Co, Dv], vec![Co, Dv]], |pr| {
        Ok(match (pr[0], pr[1]) {
            (Co, Co) => vec![c, c],
            (Dv, Co) => vec![d, p - 1.0],
            (Co, Dv) => vec![p - 1.0, d],
            _ => vec![p, p],
        })
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn critical_delta_separates_profitable_deviation((c, d, p) in triple()) {
        let star = critical_delta(c, d, p);
        prop_assert_eq!(star.regime, CooperationRegime::Threshold);
        let game = symmetric_game(c, d, p);
        let play = |dev: bool| TriggerPlay {
            rule: TriggerRule::GrimTrigger,
            cooperative: vec![Action::Honest; 2],
            punishment: vec![Action::EmptyBlock; 2],
            deviation: dev.then_some(Deviation { player: 0, epoch: 0, action: Action::EmptyBlock }),
        };
        let gain = |delta: f64| {
            simulate_trigger(&game, &play(true), delta, 10_000).unwrap()[0]
                - simulate_trigger(&game, &play(false), delta, 10_000).unwrap()[0]
        };
        prop_assert!(gain(star.delta - 0.01) > 1e-6);
        prop_assert!(gain(star.delta + 0.01) < -1e-6);
    }

    #[test]
    fn equilibria_are_mutual_best_responses_and_translation_invariant(
        payoffs in prop::collection::vec(-5i32..5, 3 * 27),
        player in 0usize..3,
        shift in -100.0..100.0f64,
    ) {
        let sets = vec![vec![Action::Honest, Action::FeeSnipe, Action::Exit]; 3];
        let index = |p: &[Action]| {
            p.iter().fold(0, |acc, a| acc * 3 + sets[0].iter().position(|x| x == a).unwrap())
        };
        let base = StageGame::new(sets.clone(), |p| {
            let k = index(p) * 3;
            Ok(payoffs[k..k + 3].iter().map(|&v| v as f64).collect())
        }).unwrap();
        let shifted = StageGame::new(sets.clone(), |p| {
            let k = index(p) * 3;
            let mut u: Vec<f64> = payoffs[k..k + 3].iter().map(|&v| v as f64).collect();
            u[player] += shift;
            Ok(u)
        }).unwrap();
        let ne = pure_nash(&base).unwrap();
        for profile in &ne {
            for i in 0..3 {
                prop_assert!(best_response(&base, i, profile).unwrap().contains(&profile[i]));
            }
        }
        prop_assert_eq!(&ne, &pure_nash(&shifted).unwrap());
        for profile in base.profiles() {
            for i in 0..3 {
                prop_assert_eq!(
                    best_response(&base, i, &profile).unwrap(),
                    best_response(&shifted, i, &profile).unwrap()
                );
            }
        }
    }
}

/// Random sparse MDP over `n` states with up to three actions each.
fn mdp(n: usize) -> impl Strategy<Value = Mdp> {
    let row = prop::collection::vec((0..n, 0.01..1.0f64), 1..4).prop_map(move |raw| {
        let total: f64 = raw.iter().map(|r| r.1).sum();
        let mut next: Vec<(usize, f64)> = Vec::new();
        for (j, w) in raw {
            match next.iter_mut().find(|e| e.0 == j) {
                Some(e) => e.1 += w / total,
                None => next.push((j, w / total)),
            }
        }
        next.sort_by_key(|e| e.0);
        next
    });
    let choice = (0..6usize, 0.0..10.0f64, row).prop_map(|(a, reward, next)| Choice {
        action: Action::from_index(a).unwrap(),
        reward,
        next,
    });
    (
        prop::collection::vec(0.05..0.95f64, n),
        prop::collection::vec(prop::collection::vec(choice, 1..4), n),
    )
        .prop_map(|(delta, choices)| Mdp { delta, choices })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn value_iteration_contracts_to_a_fixed_point(m in mdp(6)) {
        let sol = value_iterate(&m, 1e-10, 5_000).unwrap();
        for w in sol.residuals.windows(2).skip(1) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{:?}", sol.residuals);
        }
        let (again, _) = m.apply(&sol.values);
        for (a, b) in again.iter().zip(&sol.values) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for (s, cs) in m.choices.iter().enumerate() {
            let q = |c: &Choice| c.reward + m.delta[s] * c.next.iter().map(|&(j, p)| p * sol.values[j]).sum::<f64>();
            let chosen = cs
                .iter()
                .filter(|c| c.action == sol.policy[s])
                .map(q)
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(chosen >= again[s] - 1e-9);
        }
    }

    #[test]
    fn more_patience_never_lowers_values(m in mdp(5), bump in prop::collection::vec(0.0..0.04f64, 5)) {
        let low = value_iterate(&m, 1e-10, 5_000).unwrap();
        let mut patient = m.clone();
        for (d, b) in patient.delta.iter_mut().zip(&bump) {
            *d += b;
        }
        let high = value_iterate(&patient, 1e-10, 5_000).unwrap();
        for (h, l) in high.values.iter().zip(&low.values) {
            prop_assert!(*h >= *l - 1e-8);
        }
    }
}

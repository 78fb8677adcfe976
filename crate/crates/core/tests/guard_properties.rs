use guardad_core::guard::{
    check_violation, resolve_conflicts, GuardConfig, GuardMode, GuardSession, StrategyNote,
};
use guardad_core::policy::{Policy, PolicyError, PolicyRequest};
use guardad_core::rules::{default_catalog, SafetyState};
use guardad_core::scene::{
    Action, ActionDistribution, ActionSet, Entity, EntityKind, MotionTrend, Observation, Region,
    SignKind, SignalState,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Emits seeded random distributions and counts how often it was asked.
struct Noisy {
    rng: ChaCha8Rng,
    calls: usize,
}

impl Policy for Noisy {
    fn decide(&mut self, _: &PolicyRequest) -> Result<ActionDistribution, PolicyError> {
        self.calls += 1;
        let mut scores = [0.0; Action::COUNT];
        for s in &mut scores {
            *s = self.rng.gen_range(0.0..1.0);
        }
        Ok(ActionDistribution::from_scores(scores))
    }
}

fn random_frames(rng: &mut ChaCha8Rng, len: u64) -> Vec<Observation> {
    let hazards = [
        Entity::participant(
            "ped",
            EntityKind::Pedestrian,
            Region::FrontCenter,
            MotionTrend::Crossing,
        ),
        Entity::participant(
            "bike",
            EntityKind::Bicycle,
            Region::FrontCenter,
            MotionTrend::Approaching,
        ),
        Entity::participant(
            "car",
            EntityKind::Vehicle,
            Region::Left,
            MotionTrend::Approaching,
        ),
        Entity::participant(
            "truck",
            EntityKind::Vehicle,
            Region::Right,
            MotionTrend::Approaching,
        ),
        Entity::traffic_light("light", Region::FrontCenter, SignalState::Red),
        Entity::traffic_sign("sign", Region::FrontRight, SignKind::Yield),
    ];
    (0..len)
        .map(|t| {
            let mut entities = vec![Entity::ego()];
            for h in &hazards {
                if rng.gen_bool(0.3) {
                    entities.push(h.clone());
                }
            }
            Observation::new(t, entities).unwrap()
        })
        .collect()
}

fn any_mode() -> impl Strategy<Value = GuardMode> {
    prop::sample::select(GuardMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn session_invariants(seed in any::<u64>(), mode in any_mode(), n in 1usize..6, retries in 0usize..3) {
        let cat = default_catalog();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = random_frames(&mut rng, 12);
        let config = GuardConfig { n, max_retries: retries, mode, ..GuardConfig::default() };
        let mut session = GuardSession::new(config, cat).unwrap();
        let mut policy = Noisy { rng: ChaCha8Rng::seed_from_u64(seed ^ 1), calls: 0 };
        for end in 1..=frames.len() {
            let before = policy.calls;
            let r = session.step(&frames[..end], &mut policy).unwrap();
            let calls = policy.calls - before;
            prop_assert!(calls >= 1 && calls <= 1 + retries);
            prop_assert!(r.retries_used <= retries);

            // Minimal intervention.
            if !r.delta {
                prop_assert_eq!(r.final_action, r.base_action);
                prop_assert_eq!(r.strategy_note, StrategyNote::Accepted);
                prop_assert!(r.prompt.is_none());
                prop_assert_eq!(calls, 1);
            }
            // The refined state never loses instantaneous constraints.
            prop_assert!(r.z_now.active.is_subset(&r.z_refined.active));

            let resolved = resolve_conflicts(&r.z_refined, cat);
            let check = check_violation(r.base_action, &resolved, cat);
            prop_assert_eq!(check.delta, r.delta);
            if r.delta {
                prop_assert!(r.prompt.as_ref().is_some_and(|p| !p.is_empty()));
                let final_ok = check.effective_allowed.contains(r.final_action);
                match mode {
                    GuardMode::Monitor => prop_assert_eq!(r.final_action, r.base_action),
                    GuardMode::ForcedFallback => prop_assert_eq!(r.final_action, Action::Stop),
                    _ => prop_assert!(final_ok, "{:?} not allowed by {:?}", r.final_action, resolved),
                }
            }
            prop_assert!(session.window().len() <= n);
        }
    }

    #[test]
    fn resolution_is_satisfiable_and_minimal(mask in 1u32..32) {
        let cat = default_catalog();
        let ids: Vec<&str> = cat.constraints().iter().map(|c| c.id.as_str()).collect();
        let chosen = ids.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c);
        let state = SafetyState::with(3, chosen);
        let resolved = resolve_conflicts(&state, cat);
        prop_assert!(resolved.active.is_subset(&state.active));
        prop_assert!(!cat.allowed_intersection(&resolved.active).is_empty());
        if !cat.allowed_intersection(&state.active).is_empty() {
            prop_assert_eq!(resolved, state);
        }
    }

    #[test]
    fn argmax_within_respects_the_set(scores in prop::array::uniform8(-5.0f64..5.0), bits in 0u8..=255) {
        let dist = ActionDistribution::from_scores(scores);
        let allowed: ActionSet = Action::ALL.iter().copied().filter(|a| bits & (1 << a.index()) != 0).collect();
        match dist.argmax_within(allowed) {
            None => prop_assert!(allowed.is_empty()),
            Some(a) => {
                prop_assert!(allowed.contains(a));
                for b in allowed.iter() {
                    prop_assert!(dist.score(b) <= dist.score(a));
                    if dist.score(b) == dist.score(a) {
                        prop_assert!(a.index() <= b.index());
                    }
                }
            }
        }
    }
}

#[test]
fn random_actions_in_random_scenes_are_checked_per_constraint() {
    let cat = default_catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let ids: Vec<&str> = cat
            .constraints()
            .iter()
            .map(|c| c.id.as_str())
            .filter(|_| rng.gen_bool(0.4))
            .collect();
        let state = SafetyState::with(0, ids.iter().copied());
        let action = *Action::ALL.choose(&mut rng).unwrap();
        let r = check_violation(action, &state, cat);
        let mut expected: Vec<String> = ids
            .iter()
            .filter(|id| !cat.constraint(id).unwrap().allowed.contains(action))
            .map(|s| s.to_string())
            .collect();
        expected.sort();
        assert_eq!(r.violated, expected);
        assert_eq!(r.delta, !expected.is_empty());
    }
}

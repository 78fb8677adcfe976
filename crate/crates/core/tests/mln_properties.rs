mod common;

use std::collections::BTreeSet;

use common::{
    oracle_map, oracle_marginals, oracle_potential, random_instance, Shape, ACCEPTANCE_SHAPE,
};
use guardad_core::mln::{
    brute_force_map, enumerate_distribution, enumerated_marginals, induce_state, potential, Window,
};
use guardad_core::rules::SafetyState;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn map_matches_exhaustive_oracle(seed in any::<u64>()) {
        let inst = random_instance(seed, &ACCEPTANCE_SHAPE);
        let window = inst.window();
        let induced = induce_state(&window, &inst.z_now, &inst.catalog, inst.theta);
        prop_assert_eq!(&induced.refined.active, &oracle_map(&inst));
        let brute = brute_force_map(&window, &inst.z_now, &inst.catalog, inst.theta).unwrap();
        prop_assert_eq!(&induced.refined, &brute);
        prop_assert_eq!(induced.refined.t, inst.z_now.t);
    }

    #[test]
    fn marginals_match_enumeration(seed in any::<u64>()) {
        let inst = random_instance(seed, &ACCEPTANCE_SHAPE);
        let window = inst.window();
        let induced = induce_state(&window, &inst.z_now, &inst.catalog, inst.theta);
        let oracle = oracle_marginals(&inst);
        let library = enumerated_marginals(&window, &inst.z_now, &inst.catalog, inst.theta).unwrap();
        for (c, p) in &oracle {
            prop_assert!((induced.probabilities[c] - p).abs() < 1e-9, "{c}: {} vs {p}", induced.probabilities[c]);
            prop_assert!((library[c] - p).abs() < 1e-9);
        }
    }

    #[test]
    fn distribution_is_normalized_over_supersets(seed in any::<u64>()) {
        let inst = random_instance(seed, &Shape { max_constraints: 8, ..ACCEPTANCE_SHAPE });
        let window = inst.window();
        let dist = enumerate_distribution(&window, &inst.z_now, &inst.catalog, inst.theta).unwrap();
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let distinct: BTreeSet<_> = dist.iter().map(|(s, _)| s.active.clone()).collect();
        prop_assert_eq!(distinct.len(), dist.len());
        for (s, p) in &dist {
            prop_assert!(inst.z_now.active.is_subset(&s.active));
            prop_assert!(*p >= 0.0);
        }
    }

    #[test]
    fn potential_matches_reference(seed in any::<u64>(), pick in any::<u64>()) {
        let inst = random_instance(seed, &ACCEPTANCE_SHAPE);
        let window = inst.window();
        let cands = common::oracle_candidates(&inst);
        let mut candidate = inst.z_now.clone();
        for (i, c) in cands.iter().enumerate() {
            if pick & (1 << (i % 64)) != 0 {
                candidate.active.insert(c.clone());
            }
        }
        let got = potential(&window, &inst.z_now, &candidate, &inst.catalog, inst.theta).unwrap();
        let expected = oracle_potential(
            inst.catalog.temporal_rules(),
            &inst.visible_history(),
            &inst.z_now.active,
            &candidate.active,
            inst.theta,
        );
        prop_assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn refinement_only_adds(seed in any::<u64>()) {
        let inst = random_instance(seed, &ACCEPTANCE_SHAPE);
        let induced = induce_state(&inst.window(), &inst.z_now, &inst.catalog, inst.theta);
        prop_assert!(inst.z_now.active.is_subset(&induced.refined.active));
        let heads: BTreeSet<_> = inst.catalog.temporal_rules().iter().map(|r| r.head.clone()).collect();
        for added in induced.refined.active.difference(&inst.z_now.active) {
            prop_assert!(heads.contains(added));
        }
        // Every fired rule has its head in the refined state.
        for id in &induced.fired {
            let rule = inst.catalog.temporal_rules().iter().find(|r| &r.id == id).unwrap();
            prop_assert!(induced.refined.contains(&rule.head));
        }
    }

    #[test]
    fn states_older_than_the_window_are_ignored(seed in any::<u64>(), extra in 5usize..12) {
        let inst = random_instance(seed, &Shape { extra_history: extra, ..ACCEPTANCE_SHAPE });
        let full = inst.window();
        let skip = inst.history.len().saturating_sub(inst.order);
        let trimmed = Window::from_history(inst.order, inst.history[skip..].iter().cloned()).unwrap();
        let a = induce_state(&full, &inst.z_now, &inst.catalog, inst.theta);
        let b = induce_state(&trimmed, &inst.z_now, &inst.catalog, inst.theta);
        prop_assert_eq!(a.refined, b.refined);
        prop_assert_eq!(a.fired, b.fired);
        prop_assert_eq!(a.probabilities, b.probabilities);
    }

    #[test]
    fn raising_theta_never_adds(seed in any::<u64>(), bump in 0.0f64..3.0) {
        let inst = random_instance(seed, &ACCEPTANCE_SHAPE);
        let w = inst.window();
        let low = induce_state(&w, &inst.z_now, &inst.catalog, inst.theta);
        let high = induce_state(&w, &inst.z_now, &inst.catalog, inst.theta + bump);
        prop_assert!(high.refined.active.is_subset(&low.refined.active));
    }

    #[test]
    fn window_keeps_newest_order_states(order in 1usize..8, len in 0usize..20) {
        let states: Vec<SafetyState> = (0..len as u64).map(SafetyState::empty).collect();
        let w = Window::from_history(order, states).unwrap();
        prop_assert_eq!(w.len(), order.min(len));
        let ts: Vec<u64> = w.states().map(|s| s.t).collect();
        let expected: Vec<u64> = (len.saturating_sub(order) as u64..len as u64).collect();
        prop_assert_eq!(ts, expected);
    }
}

#[test]
fn non_contiguous_history_rejected() {
    let err = Window::from_history(3, [SafetyState::empty(1), SafetyState::empty(3)]).unwrap_err();
    assert_eq!(
        err,
        guardad_core::mln::MlnError::NonContiguous { last: 1, got: 3 }
    );
}

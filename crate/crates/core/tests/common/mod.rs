//! Random instance generation and a from-scratch reference implementation of
//! the temporal potential, kept independent of the library's own evaluator.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use guardad_core::mln::{BodyAtom, TemporalRule, Window};
use guardad_core::rules::{Constraint, RuleCatalog, SafetyState};
use guardad_core::scene::{Action, ActionSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub catalog: RuleCatalog,
    pub order: usize,
    /// Past states, oldest first, ending at step `now - 1`.
    pub history: Vec<SafetyState>,
    pub z_now: SafetyState,
    pub theta: f64,
}

impl Instance {
    pub fn window(&self) -> Window {
        Window::from_history(self.order, self.history.iter().cloned()).unwrap()
    }

    /// The states a correct order-`n` model may look at, oldest first.
    pub fn visible_history(&self) -> Vec<BTreeSet<String>> {
        let skip = self.history.len().saturating_sub(self.order);
        self.history[skip..]
            .iter()
            .map(|s| s.active.clone())
            .collect()
    }
}

pub struct Shape {
    pub max_constraints: usize,
    pub max_rules: usize,
    pub max_order: usize,
    pub extra_history: usize,
}

pub const ACCEPTANCE_SHAPE: Shape = Shape {
    max_constraints: 12,
    max_rules: 20,
    max_order: 6,
    extra_history: 0,
};

fn random_allowed(rng: &mut ChaCha8Rng) -> ActionSet {
    loop {
        let set: ActionSet = Action::ALL
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.5))
            .collect();
        if !set.is_empty() {
            return set;
        }
    }
}

fn random_subset(rng: &mut ChaCha8Rng, ids: &[String], p: f64) -> BTreeSet<String> {
    ids.iter().filter(|_| rng.gen_bool(p)).cloned().collect()
}

pub fn random_instance(seed: u64, shape: &Shape) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=shape.max_constraints);
    let ids: Vec<String> = (0..m).map(|i| format!("C{i:02}")).collect();
    let constraints = ids
        .iter()
        .map(|id| Constraint {
            id: id.clone(),
            allowed: random_allowed(&mut rng),
            severity: rng.gen_range(1..=5),
            says: format!("Obey {id}."),
        })
        .collect();

    let order = rng.gen_range(1..=shape.max_order);
    let rule_count = rng.gen_range(0..=shape.max_rules);
    let rules = (0..rule_count)
        .map(|i| {
            let atoms = rng.gen_range(1..=3);
            let body = (0..atoms)
                .map(|_| {
                    let constraint = ids.choose(&mut rng).unwrap().clone();
                    if rng.gen_bool(0.7) {
                        BodyAtom::AtOffset {
                            offset: rng.gen_range(1..=order),
                            constraint,
                            positive: rng.gen_bool(0.75),
                        }
                    } else {
                        let last = rng.gen_range(1..=order);
                        BodyAtom::CountAtLeast {
                            constraint,
                            min: rng.gen_range(1..=last),
                            last,
                        }
                    }
                })
                .collect();
            TemporalRule {
                id: format!("T{i:02}"),
                weight: rng.gen_range(-3.0..=3.0),
                head: ids.choose(&mut rng).unwrap().clone(),
                body,
                because: None,
            }
        })
        .collect();
    let catalog = RuleCatalog::new(Vec::new(), constraints, Vec::new(), rules).unwrap();

    let history_len = rng.gen_range(0..=order) + shape.extra_history;
    let start = 100u64;
    let history: Vec<SafetyState> = (0..history_len)
        .map(|i| SafetyState {
            t: start + i as u64,
            active: random_subset(&mut rng, &ids, 0.5),
        })
        .collect();
    let z_now = SafetyState {
        t: start + history_len as u64,
        active: random_subset(&mut rng, &ids, 0.25),
    };
    Instance {
        catalog,
        order,
        history,
        z_now,
        theta: 1.0,
    }
}

/// Body evaluation written directly from the rule semantics. `past` is
/// oldest first; offset 1 is its last element.
pub fn oracle_body(rule: &TemporalRule, past: &[BTreeSet<String>]) -> bool {
    rule.body.iter().all(|atom| match atom {
        BodyAtom::AtOffset {
            offset,
            constraint,
            positive,
        } => {
            if *offset == 0 || *offset > past.len() {
                return false;
            }
            past[past.len() - offset].contains(constraint) == *positive
        }
        BodyAtom::CountAtLeast {
            constraint,
            min,
            last,
        } => {
            let from = past.len().saturating_sub(*last);
            past[from..]
                .iter()
                .filter(|s| s.contains(constraint))
                .count()
                >= *min
        }
    })
}

/// `sum_k w_k f_k(candidate) - theta * |candidate \ z_now|`.
pub fn oracle_potential(
    rules: &[TemporalRule],
    past: &[BTreeSet<String>],
    z_now: &BTreeSet<String>,
    candidate: &BTreeSet<String>,
    theta: f64,
) -> f64 {
    let evidence: f64 = rules
        .iter()
        .filter(|r| oracle_body(r, past) && candidate.contains(&r.head))
        .map(|r| r.weight)
        .sum();
    evidence - theta * candidate.difference(z_now).count() as f64
}

pub fn oracle_candidates(inst: &Instance) -> Vec<String> {
    inst.catalog
        .temporal_rules()
        .iter()
        .map(|r| r.head.clone())
        .filter(|h| !inst.z_now.active.contains(h))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn superset(z_now: &BTreeSet<String>, candidates: &[String], mask: usize) -> BTreeSet<String> {
    let mut s = z_now.clone();
    for (i, c) in candidates.iter().enumerate() {
        if mask & (1 << i) != 0 {
            s.insert(c.clone());
        }
    }
    s
}

/// Exhaustive maximizer. Ties go to the larger set.
pub fn oracle_map(inst: &Instance) -> BTreeSet<String> {
    let past = inst.visible_history();
    let cands = oracle_candidates(inst);
    let rules = inst.catalog.temporal_rules();
    let mut best: Option<(f64, usize, BTreeSet<String>)> = None;
    for mask in 0..(1usize << cands.len()) {
        let s = superset(&inst.z_now.active, &cands, mask);
        let psi = oracle_potential(rules, &past, &inst.z_now.active, &s, inst.theta);
        let size = s.len();
        let better = match &best {
            None => true,
            Some((bp, bs, _)) => psi > *bp || (psi == *bp && size > *bs),
        };
        if better {
            best = Some((psi, size, s));
        }
    }
    best.unwrap().2
}

/// Exact marginals of each candidate under `P(S) ∝ exp(Ψ(S))`.
pub fn oracle_marginals(inst: &Instance) -> BTreeMap<String, f64> {
    let past = inst.visible_history();
    let cands = oracle_candidates(inst);
    let rules = inst.catalog.temporal_rules();
    let psis: Vec<f64> = (0..(1usize << cands.len()))
        .map(|mask| {
            let s = superset(&inst.z_now.active, &cands, mask);
            oracle_potential(rules, &past, &inst.z_now.active, &s, inst.theta)
        })
        .collect();
    let max = psis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = psis.iter().map(|p| (p - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    cands
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mass: f64 = weights
                .iter()
                .enumerate()
                .filter(|(mask, _)| mask & (1 << i) != 0)
                .map(|(_, w)| w)
                .sum();
            (c.clone(), mass / total)
        })
        .collect()
}

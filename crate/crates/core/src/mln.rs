//! Temporal refinement of the safety state by an n-th order Markov logic model.
//!
//! Weighted temporal rules look back over the last `n` instantaneous states and
//! support a head constraint at the current step. A rule contributes its weight
//! when its body holds on the window and its head is in the candidate state;
//! each constraint added beyond the current state pays the inclusion bias
//! `theta`. Because every rule touches a single head, the MAP state factorizes
//! per head: a constraint joins iff its accumulated weight reaches `theta`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::{RuleCatalog, SafetyState};

/// Upper bound on the number of candidate additions for exact enumeration.
pub const MAX_ENUMERATION_CANDIDATES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlnError {
    #[error("candidate state does not contain the current state")]
    CandidateNotSuperset,
    #[error(
        "{0} candidate constraints exceed the enumeration bound of {MAX_ENUMERATION_CANDIDATES}"
    )]
    TooManyCandidates(usize),
    #[error("window step {got} does not follow step {last}")]
    NonContiguous { last: u64, got: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BodyAtom {
    /// Constraint (in)active exactly `offset` steps back (offset 1 = previous step).
    AtOffset {
        offset: usize,
        constraint: String,
        positive: bool,
    },
    /// Constraint active in at least `min` of the last `last` states.
    CountAtLeast {
        constraint: String,
        min: usize,
        last: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRule {
    pub id: String,
    pub weight: f64,
    pub head: String,
    pub body: Vec<BodyAtom>,
    /// Cause phrase used when the head is verbalized.
    pub because: Option<String>,
}

/// The last `order` states before the current step, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    order: usize,
    states: VecDeque<SafetyState>,
}

impl Window {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "window order must be at least 1");
        Window {
            order,
            states: VecDeque::with_capacity(order),
        }
    }

    /// Keeps only the newest `order` states of `history` (oldest first).
    pub fn from_history<I>(order: usize, history: I) -> Result<Self, MlnError>
    where
        I: IntoIterator<Item = SafetyState>,
    {
        let mut w = Window::new(order);
        for s in history {
            w.push(s)?;
        }
        Ok(w)
    }

    /// Appends the newest state, evicting the oldest once `order` is reached.
    pub fn push(&mut self, state: SafetyState) -> Result<(), MlnError> {
        if let Some(last) = self.states.back() {
            if state.t != last.t + 1 {
                return Err(MlnError::NonContiguous {
                    last: last.t,
                    got: state.t,
                });
            }
        }
        if self.states.len() == self.order {
            self.states.pop_front();
        }
        self.states.push_back(state);
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State `offset` steps back; `None` beyond the available history.
    pub fn back(&self, offset: usize) -> Option<&SafetyState> {
        if offset == 0 || offset > self.states.len() {
            None
        } else {
            self.states.get(self.states.len() - offset)
        }
    }

    pub fn states(&self) -> impl Iterator<Item = &SafetyState> {
        self.states.iter()
    }
}

fn atom_holds(atom: &BodyAtom, window: &Window) -> bool {
    match atom {
        BodyAtom::AtOffset {
            offset,
            constraint,
            positive,
        } => window
            .back(*offset)
            .is_some_and(|s| s.contains(constraint) == *positive),
        BodyAtom::CountAtLeast {
            constraint,
            min,
            last,
        } => {
            let span = (*last).min(window.len());
            let count = (1..=span)
                .filter_map(|o| window.back(o))
                .filter(|s| s.contains(constraint))
                .count();
            count >= *min
        }
    }
}

/// Whether every body atom of `rule` holds on `window`.
pub fn body_holds(rule: &TemporalRule, window: &Window) -> bool {
    rule.body.iter().all(|a| atom_holds(a, window))
}

/// Number of satisfied groundings (0 or 1): body holds and head is in `candidate`.
pub fn feature_count(rule: &TemporalRule, window: &Window, candidate: &SafetyState) -> u32 {
    u32::from(body_holds(rule, window) && candidate.contains(&rule.head))
}

/// Log-linear potential of `candidate` given the window and the current state.
pub fn potential(
    window: &Window,
    z_now: &SafetyState,
    candidate: &SafetyState,
    catalog: &RuleCatalog,
    theta: f64,
) -> Result<f64, MlnError> {
    if !z_now.active.is_subset(&candidate.active) {
        return Err(MlnError::CandidateNotSuperset);
    }
    let evidence: f64 = catalog
        .temporal_rules()
        .iter()
        .map(|r| r.weight * f64::from(feature_count(r, window, candidate)))
        .sum();
    let added = candidate.active.difference(&z_now.active).count();
    Ok(evidence - theta * added as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionResult {
    pub refined: SafetyState,
    /// Accumulated weight of satisfied rule bodies per head constraint.
    pub scores: BTreeMap<String, f64>,
    /// Marginal inclusion probability per head constraint (1 for current ones).
    pub probabilities: BTreeMap<String, f64>,
    /// Temporal rules whose body held and whose head is in the refined state.
    pub fired: Vec<String>,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// MAP refinement of `z_now` given the window.
pub fn induce_state(
    window: &Window,
    z_now: &SafetyState,
    catalog: &RuleCatalog,
    theta: f64,
) -> InductionResult {
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    let mut satisfied = Vec::with_capacity(catalog.temporal_rules().len());
    for rule in catalog.temporal_rules() {
        let holds = body_holds(rule, window);
        satisfied.push(holds);
        let entry = scores.entry(rule.head.clone()).or_insert(0.0);
        if holds {
            *entry += rule.weight;
        }
    }

    let mut refined = z_now.clone();
    let mut probabilities = BTreeMap::new();
    for (head, &score) in &scores {
        if z_now.contains(head) {
            probabilities.insert(head.clone(), 1.0);
        } else {
            probabilities.insert(head.clone(), logistic(score - theta));
            if score >= theta {
                refined.active.insert(head.clone());
            }
        }
    }

    let fired = catalog
        .temporal_rules()
        .iter()
        .zip(satisfied)
        .filter(|(r, holds)| *holds && refined.contains(&r.head))
        .map(|(r, _)| r.id.clone())
        .collect();

    InductionResult {
        refined,
        scores,
        probabilities,
        fired,
    }
}

/// Heads of temporal rules that are not already active, sorted by id.
pub fn candidate_additions(z_now: &SafetyState, catalog: &RuleCatalog) -> Vec<String> {
    catalog
        .temporal_rules()
        .iter()
        .map(|r| &r.head)
        .filter(|h| !z_now.contains(h))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn checked_candidates(z_now: &SafetyState, catalog: &RuleCatalog) -> Result<Vec<String>, MlnError> {
    let candidates = candidate_additions(z_now, catalog);
    if candidates.len() > MAX_ENUMERATION_CANDIDATES {
        Err(MlnError::TooManyCandidates(candidates.len()))
    } else {
        Ok(candidates)
    }
}

fn subset_state(z_now: &SafetyState, candidates: &[String], mask: u32) -> SafetyState {
    let mut s = z_now.clone();
    for (i, c) in candidates.iter().enumerate() {
        if mask & (1 << i) != 0 {
            s.active.insert(c.clone());
        }
    }
    s
}

/// Potential of every candidate superset, indexed by inclusion mask over
/// `candidates`. Evaluates the full rule sum per subset.
fn subset_potentials(
    window: &Window,
    z_now: &SafetyState,
    candidates: &[String],
    catalog: &RuleCatalog,
    theta: f64,
) -> Vec<f64> {
    // Per rule: None if its body fails, Some(None) if its head is always
    // present, Some(Some(bit)) if it depends on one candidate.
    let rules: Vec<(f64, Option<Option<usize>>)> = catalog
        .temporal_rules()
        .iter()
        .map(|r| {
            let head = if !body_holds(r, window) {
                None
            } else if z_now.contains(&r.head) {
                Some(None)
            } else {
                Some(candidates.iter().position(|c| *c == r.head))
            };
            (r.weight, head)
        })
        .collect();
    (0..1u32 << candidates.len())
        .map(|mask| {
            let evidence: f64 = rules
                .iter()
                .map(|(w, head)| match head {
                    Some(None) => *w,
                    Some(Some(bit)) if mask & (1 << bit) != 0 => *w,
                    _ => 0.0,
                })
                .sum();
            evidence - theta * f64::from(mask.count_ones())
        })
        .collect()
}

/// Exact normalized distribution over all candidate supersets of `z_now`.
pub fn enumerate_distribution(
    window: &Window,
    z_now: &SafetyState,
    catalog: &RuleCatalog,
    theta: f64,
) -> Result<Vec<(SafetyState, f64)>, MlnError> {
    let candidates = checked_candidates(z_now, catalog)?;
    let potentials = subset_potentials(window, z_now, &candidates, catalog, theta);
    let max = potentials.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = potentials.iter().map(|p| (p - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(weights
        .into_iter()
        .enumerate()
        .map(|(mask, w)| (subset_state(z_now, &candidates, mask as u32), w / z))
        .collect())
}

/// Marginal inclusion probability of each candidate under the exact distribution.
pub fn enumerated_marginals(
    window: &Window,
    z_now: &SafetyState,
    catalog: &RuleCatalog,
    theta: f64,
) -> Result<BTreeMap<String, f64>, MlnError> {
    let candidates = checked_candidates(z_now, catalog)?;
    let dist = enumerate_distribution(window, z_now, catalog, theta)?;
    Ok(candidates
        .into_iter()
        .map(|c| {
            let p = dist
                .iter()
                .filter(|(s, _)| s.contains(&c))
                .map(|(_, p)| p)
                .sum();
            (c, p)
        })
        .collect())
}

/// Exhaustive argmax of the potential. Ties prefer the larger set, then the
/// lexicographically smaller id list.
pub fn brute_force_map(
    window: &Window,
    z_now: &SafetyState,
    catalog: &RuleCatalog,
    theta: f64,
) -> Result<SafetyState, MlnError> {
    let candidates = checked_candidates(z_now, catalog)?;
    let potentials = subset_potentials(window, z_now, &candidates, catalog, theta);
    let ids = |mask: u32| -> Vec<&String> {
        candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, c)| c)
            .collect()
    };
    let mut best = 0u32;
    for mask in 1..potentials.len() as u32 {
        let (p, bp) = (potentials[mask as usize], potentials[best as usize]);
        let better = p > bp
            || (p == bp
                && (mask.count_ones() > best.count_ones()
                    || (mask.count_ones() == best.count_ones() && ids(mask) < ids(best))));
        if better {
            best = mask;
        }
    }
    Ok(subset_state(z_now, &candidates, best))
}

//! Rule catalog (predicates, constraints, Horn rules, temporal rules) and
//! instantiation of the per-step safety state.

mod dsl;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mln::{BodyAtom, TemporalRule};
use crate::predicates::{GroundAtom, PredicateCategory, PredicateDef, Selector};
use crate::scene::ActionSet;

pub use dsl::parse_catalog;

/// The catalog shipped with the engine.
pub const DEFAULT_CATALOG_TEXT: &str = include_str!("../../rules/default.gsl");

pub fn default_catalog() -> &'static RuleCatalog {
    static CATALOG: OnceLock<RuleCatalog> = OnceLock::new();
    CATALOG.get_or_init(|| parse_catalog(DEFAULT_CATALOG_TEXT).expect("shipped catalog is valid"))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("parse error at {line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("`{referenced_by}` references unknown {kind} `{name}`")]
    UnknownReference {
        kind: &'static str,
        name: String,
        referenced_by: String,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("constraint `{0}` has an empty allowed set")]
    EmptyAllowedSet(String),
    #[error("invalid catalog entry `{id}`: {reason}")]
    Invalid { id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    pub id: String,
    pub allowed: ActionSet,
    /// 1 (lowest) to 5 (highest); decides which constraint yields under conflict.
    pub severity: u8,
    pub says: String,
}

/// `antecedent => consequent`. Target predicates in the antecedent share one
/// entity variable; action and environment predicates bind to their own entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HornRule {
    pub id: String,
    pub antecedent: Vec<String>,
    pub consequent: String,
    /// Cause phrase prepended to the consequent's verbalization.
    pub because: Option<String>,
}

/// Set of active constraint ids at one step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SafetyState {
    pub t: u64,
    pub active: BTreeSet<String>,
}

impl SafetyState {
    pub fn empty(t: u64) -> Self {
        SafetyState {
            t,
            active: BTreeSet::new(),
        }
    }

    pub fn with<I, S>(t: u64, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        SafetyState {
            t,
            active: ids.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.active.contains(id)
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }
}

impl fmt::Display for SafetyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, id) in self.active.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str(id)?;
        }
        f.write_str("}")
    }
}

/// Result of Horn activation: the instantaneous state and the rules that fired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Activation {
    pub state: SafetyState,
    pub fired: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct CompiledHorn {
    free: Vec<String>,
    bound: Vec<String>,
}

/// A validated rule catalog. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleCatalog {
    predicates: Vec<PredicateDef>,
    constraints: Vec<Constraint>,
    horn_rules: Vec<HornRule>,
    temporal_rules: Vec<TemporalRule>,
    predicate_index: HashMap<String, usize>,
    constraint_index: HashMap<String, usize>,
    compiled: Vec<CompiledHorn>,
}

impl RuleCatalog {
    pub fn new(
        predicates: Vec<PredicateDef>,
        constraints: Vec<Constraint>,
        horn_rules: Vec<HornRule>,
        temporal_rules: Vec<TemporalRule>,
    ) -> Result<Self, CatalogError> {
        let mut ids = HashSet::new();
        let mut predicate_index = HashMap::new();
        for (i, p) in predicates.iter().enumerate() {
            if !ids.insert(p.name.clone()) {
                return Err(CatalogError::DuplicateId(p.name.clone()));
            }
            validate_selector(p)?;
            predicate_index.insert(p.name.clone(), i);
        }
        let mut constraint_index = HashMap::new();
        for (i, c) in constraints.iter().enumerate() {
            if !ids.insert(c.id.clone()) {
                return Err(CatalogError::DuplicateId(c.id.clone()));
            }
            if c.allowed.is_empty() {
                return Err(CatalogError::EmptyAllowedSet(c.id.clone()));
            }
            if !(1..=5).contains(&c.severity) {
                return Err(CatalogError::Invalid {
                    id: c.id.clone(),
                    reason: format!("severity {} outside 1..=5", c.severity),
                });
            }
            constraint_index.insert(c.id.clone(), i);
        }
        let mut compiled = Vec::with_capacity(horn_rules.len());
        for r in &horn_rules {
            if !ids.insert(r.id.clone()) {
                return Err(CatalogError::DuplicateId(r.id.clone()));
            }
            if r.antecedent.is_empty() {
                return Err(CatalogError::Invalid {
                    id: r.id.clone(),
                    reason: "empty antecedent".into(),
                });
            }
            let mut free = Vec::new();
            let mut bound = Vec::new();
            for name in &r.antecedent {
                let Some(&idx) = predicate_index.get(name) else {
                    return Err(CatalogError::UnknownReference {
                        kind: "predicate",
                        name: name.clone(),
                        referenced_by: r.id.clone(),
                    });
                };
                if predicates[idx].category().binds_own_entity() {
                    free.push(name.clone());
                } else {
                    bound.push(name.clone());
                }
            }
            if !constraint_index.contains_key(&r.consequent) {
                return Err(CatalogError::UnknownReference {
                    kind: "constraint",
                    name: r.consequent.clone(),
                    referenced_by: r.id.clone(),
                });
            }
            compiled.push(CompiledHorn { free, bound });
        }
        for r in &temporal_rules {
            if !ids.insert(r.id.clone()) {
                return Err(CatalogError::DuplicateId(r.id.clone()));
            }
            validate_temporal(r, &constraint_index)?;
        }
        Ok(RuleCatalog {
            predicates,
            constraints,
            horn_rules,
            temporal_rules,
            predicate_index,
            constraint_index,
            compiled,
        })
    }

    pub fn predicates(&self) -> &[PredicateDef] {
        &self.predicates
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn horn_rules(&self) -> &[HornRule] {
        &self.horn_rules
    }

    pub fn temporal_rules(&self) -> &[TemporalRule] {
        &self.temporal_rules
    }

    pub fn predicate(&self, name: &str) -> Option<&PredicateDef> {
        self.predicate_index.get(name).map(|&i| &self.predicates[i])
    }

    pub fn constraint(&self, id: &str) -> Option<&Constraint> {
        self.constraint_index.get(id).map(|&i| &self.constraints[i])
    }

    /// Cause phrase of a Horn or temporal rule, if it has one.
    pub fn rule_cause(&self, rule_id: &str) -> Option<(&str, &str)> {
        if let Some(r) = self.horn_rules.iter().find(|r| r.id == rule_id) {
            return r.because.as_deref().map(|b| (r.consequent.as_str(), b));
        }
        self.temporal_rules
            .iter()
            .find(|r| r.id == rule_id)
            .and_then(|r| r.because.as_deref().map(|b| (r.head.as_str(), b)))
    }

    /// Copy restricted to predicates of the given categories. Horn rules that
    /// reference a dropped predicate are dropped with it.
    pub fn restricted_to(&self, keep: &[PredicateCategory]) -> RuleCatalog {
        let predicates: Vec<_> = self
            .predicates
            .iter()
            .filter(|p| keep.contains(&p.category()))
            .cloned()
            .collect();
        let kept: HashSet<&str> = predicates.iter().map(|p| p.name.as_str()).collect();
        let horn_rules = self
            .horn_rules
            .iter()
            .filter(|r| r.antecedent.iter().all(|a| kept.contains(a.as_str())))
            .cloned()
            .collect();
        RuleCatalog::new(
            predicates,
            self.constraints.clone(),
            horn_rules,
            self.temporal_rules.clone(),
        )
        .expect("restriction of a valid catalog is valid")
    }

    /// Intersection of the allowed sets of the given constraints (all actions for none).
    pub fn allowed_intersection<'a, I>(&self, ids: I) -> ActionSet
    where
        I: IntoIterator<Item = &'a String>,
    {
        ids.into_iter()
            .filter_map(|id| self.constraint(id))
            .fold(ActionSet::ALL, |acc, c| acc.intersect(c.allowed))
    }
}

fn validate_selector(p: &PredicateDef) -> Result<(), CatalogError> {
    use crate::scene::EntityKind::*;
    let bad = |reason: &str| {
        Err(CatalogError::Invalid {
            id: p.name.clone(),
            reason: reason.to_string(),
        })
    };
    match p.selector {
        Selector::Action(_) => Ok(()),
        Selector::Environment {
            kind, signal, sign, ..
        } => match kind {
            TrafficLight if sign.is_none() => Ok(()),
            TrafficSign if signal.is_none() => Ok(()),
            TrafficLight | TrafficSign => bad("signal applies to lights, sign to signs"),
            _ => bad("environment predicates test only traffic lights and signs"),
        },
        Selector::TargetExists { kind, .. } | Selector::TargetMotion { kind, .. } => match kind {
            Ego | TrafficLight | TrafficSign => bad("target predicates test traffic participants"),
            _ => Ok(()),
        },
    }
}

fn validate_temporal(
    r: &TemporalRule,
    constraints: &HashMap<String, usize>,
) -> Result<(), CatalogError> {
    let bad = |reason: String| {
        Err(CatalogError::Invalid {
            id: r.id.clone(),
            reason,
        })
    };
    if !r.weight.is_finite() {
        return bad("weight must be finite".into());
    }
    if r.body.is_empty() {
        return bad("empty body".into());
    }
    let unknown = |name: &str| CatalogError::UnknownReference {
        kind: "constraint",
        name: name.to_string(),
        referenced_by: r.id.clone(),
    };
    if !constraints.contains_key(&r.head) {
        return Err(unknown(&r.head));
    }
    for atom in &r.body {
        match atom {
            BodyAtom::AtOffset {
                offset, constraint, ..
            } => {
                if !constraints.contains_key(constraint) {
                    return Err(unknown(constraint));
                }
                if *offset == 0 {
                    return bad("offsets must reach back at least one step".into());
                }
            }
            BodyAtom::CountAtLeast {
                constraint,
                min,
                last,
            } => {
                if !constraints.contains_key(constraint) {
                    return Err(unknown(constraint));
                }
                if *min == 0 || *last == 0 || min > last {
                    return bad(format!("count bounds need 1 <= {min} <= {last}"));
                }
            }
        }
    }
    Ok(())
}

/// Instantaneous safety state for step `t`: every constraint whose Horn rule
/// antecedent holds on some entity binding.
pub fn instantiate_constraints(
    atoms: &BTreeSet<GroundAtom>,
    catalog: &RuleCatalog,
    t: u64,
) -> SafetyState {
    activate(atoms, catalog, t).state
}

/// Like [`instantiate_constraints`] but also reports which rules fired.
pub fn activate(atoms: &BTreeSet<GroundAtom>, catalog: &RuleCatalog, t: u64) -> Activation {
    let mut holders: HashMap<&str, Vec<&str>> = HashMap::new();
    for atom in atoms {
        holders
            .entry(atom.predicate.as_str())
            .or_default()
            .push(atom.entity_id.as_str());
    }
    let holds_on =
        |pred: &str, entity: &str| holders.get(pred).is_some_and(|ents| ents.contains(&entity));

    let mut state = SafetyState::empty(t);
    let mut fired = Vec::new();
    for (rule, compiled) in catalog.horn_rules.iter().zip(&catalog.compiled) {
        if !compiled
            .free
            .iter()
            .all(|p| holders.contains_key(p.as_str()))
        {
            continue;
        }
        let satisfied = match compiled.bound.split_first() {
            None => true,
            Some((first, rest)) => holders.get(first.as_str()).is_some_and(|candidates| {
                candidates
                    .iter()
                    .any(|e| rest.iter().all(|p| holds_on(p, e)))
            }),
        };
        if satisfied {
            state.active.insert(rule.consequent.clone());
            fired.push(rule.id.clone());
        }
    }
    Activation { state, fired }
}

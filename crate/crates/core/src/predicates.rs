//! Safety predicates and their grounding over a single observation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rules::RuleCatalog;
use crate::scene::{
    Action, Entity, EntityKind, MotionTrend, Observation, Region, SignKind, SignalState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredicateCategory {
    /// Intended ego driving status, read from the proposed action.
    Action,
    /// Traffic lights and signs.
    Environment,
    TargetExistence,
    TargetMotion,
}

impl PredicateCategory {
    /// Action and environment atoms bind to their own entity rather than the
    /// shared participant variable of a Horn rule.
    pub fn binds_own_entity(self) -> bool {
        matches!(
            self,
            PredicateCategory::Action | PredicateCategory::Environment
        )
    }
}

/// What a predicate tests on an entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    Action(Action),
    Environment {
        kind: EntityKind,
        signal: Option<SignalState>,
        sign: Option<SignKind>,
        region: Option<Region>,
    },
    TargetExists {
        region: Region,
        kind: EntityKind,
    },
    TargetMotion {
        region: Region,
        kind: EntityKind,
        trend: MotionTrend,
    },
}

impl Selector {
    pub fn category(&self) -> PredicateCategory {
        match self {
            Selector::Action(_) => PredicateCategory::Action,
            Selector::Environment { .. } => PredicateCategory::Environment,
            Selector::TargetExists { .. } => PredicateCategory::TargetExistence,
            Selector::TargetMotion { .. } => PredicateCategory::TargetMotion,
        }
    }

    /// Tests a non-ego entity. Action selectors never match entities.
    pub fn matches_entity(&self, entity: &Entity) -> bool {
        match *self {
            Selector::Action(_) => false,
            Selector::Environment {
                kind,
                signal,
                sign,
                region,
            } => {
                entity.kind == kind
                    && signal.is_none_or(|s| entity.signal == s)
                    && sign.is_none_or(|s| entity.sign == Some(s))
                    && region.is_none_or(|r| entity.region == Some(r))
            }
            Selector::TargetExists { region, kind } => {
                entity.kind == kind && entity.region == Some(region)
            }
            Selector::TargetMotion {
                region,
                kind,
                trend,
            } => entity.kind == kind && entity.region == Some(region) && entity.motion == trend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateDef {
    pub name: String,
    pub selector: Selector,
}

impl PredicateDef {
    pub fn new(name: impl Into<String>, selector: Selector) -> Self {
        PredicateDef {
            name: name.into(),
            selector,
        }
    }

    pub fn category(&self) -> PredicateCategory {
        self.selector.category()
    }
}

/// A predicate applied to one entity at one step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroundAtom {
    pub predicate: String,
    pub entity_id: String,
    pub t: u64,
}

impl fmt::Display for GroundAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})@{}", self.predicate, self.entity_id, self.t)
    }
}

/// Ids of the entities instantiated in this frame: every visible entity,
/// plus the ego vehicle regardless of its flag.
pub fn ground_entities(obs: &Observation) -> BTreeSet<String> {
    obs.entities
        .iter()
        .enumerate()
        .filter(|(i, e)| *i == 0 || e.kind == EntityKind::Ego || e.visible)
        .map(|(_, e)| e.id.clone())
        .collect()
}

/// All true ground atoms of `catalog`'s predicates on `obs`, with action
/// atoms taken from the proposed action.
pub fn evaluate_predicates(
    obs: &Observation,
    proposed: Action,
    catalog: &RuleCatalog,
) -> BTreeSet<GroundAtom> {
    let ego_id = obs.ego().id.as_str();
    let mut atoms = BTreeSet::new();
    for def in catalog.predicates() {
        match def.selector {
            Selector::Action(a) => {
                if a == proposed {
                    atoms.insert(GroundAtom {
                        predicate: def.name.clone(),
                        entity_id: ego_id.to_string(),
                        t: obs.t,
                    });
                }
            }
            ref selector => {
                for e in obs.entities.iter().skip(1).filter(|e| e.visible) {
                    if selector.matches_entity(e) {
                        atoms.insert(GroundAtom {
                            predicate: def.name.clone(),
                            entity_id: e.id.clone(),
                            t: obs.t,
                        });
                    }
                }
            }
        }
    }
    atoms
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::default_catalog;
    use crate::scene::{Entity, SignalState};

    fn names(atoms: &BTreeSet<GroundAtom>) -> Vec<(String, String)> {
        atoms
            .iter()
            .map(|a| (a.predicate.clone(), a.entity_id.clone()))
            .collect()
    }

    #[test]
    fn ground_entities_filters_invisible_but_keeps_ego() {
        let obs = Observation::new(
            0,
            vec![
                Entity::ego().with_visible(false),
                Entity::participant(
                    "p1",
                    EntityKind::Pedestrian,
                    Region::Left,
                    MotionTrend::Crossing,
                )
                .with_visible(false),
                Entity::participant(
                    "v1",
                    EntityKind::Vehicle,
                    Region::Right,
                    MotionTrend::Receding,
                ),
            ],
        )
        .unwrap();
        let ids: Vec<_> = ground_entities(&obs).into_iter().collect();
        assert_eq!(ids, vec!["ego".to_string(), "v1".to_string()]);
    }

    #[test]
    fn approaching_bicycle_grounds_motion_predicate() {
        let catalog = default_catalog();
        let obs = Observation::new(
            4,
            vec![
                Entity::ego(),
                Entity::participant(
                    "e_bic",
                    EntityKind::Bicycle,
                    Region::FrontCenter,
                    MotionTrend::Approaching,
                ),
            ],
        )
        .unwrap();
        let atoms = evaluate_predicates(&obs, Action::KeepSpeed, catalog);
        assert!(atoms.contains(&GroundAtom {
            predicate: "Front_Center_Bicycle_Approach".into(),
            entity_id: "e_bic".into(),
            t: 4,
        }));
        assert!(atoms
            .iter()
            .any(|a| a.predicate == "Front_Center_Region_Bicycle_Exists"));
    }

    #[test]
    fn red_light_grounds_environment_predicate() {
        let catalog = default_catalog();
        let obs = Observation::new(
            0,
            vec![
                Entity::ego(),
                Entity::traffic_light("e_light", Region::FrontCenter, SignalState::Red),
            ],
        )
        .unwrap();
        let atoms = evaluate_predicates(&obs, Action::KeepSpeed, catalog);
        assert_eq!(
            names(&atoms),
            vec![
                ("KeepSpeed".to_string(), "ego".to_string()),
                ("Solid_Red_Light".to_string(), "e_light".to_string()),
            ]
        );
    }

    #[test]
    fn empty_scene_yields_only_action_atom() {
        let catalog = default_catalog();
        let obs = Observation::new(2, vec![Entity::ego()]).unwrap();
        let atoms = evaluate_predicates(&obs, Action::Decelerate, catalog);
        assert_eq!(
            names(&atoms),
            vec![("Decelerate".to_string(), "ego".to_string())]
        );
    }

    #[test]
    fn invisible_entities_produce_no_atoms() {
        let catalog = default_catalog();
        let obs = Observation::new(
            0,
            vec![
                Entity::ego(),
                Entity::participant(
                    "p",
                    EntityKind::Pedestrian,
                    Region::FrontCenter,
                    MotionTrend::Crossing,
                )
                .with_visible(false),
            ],
        )
        .unwrap();
        let atoms = evaluate_predicates(&obs, Action::Stop, catalog);
        assert!(atoms.iter().all(|a| a.entity_id == "ego"));
    }
}

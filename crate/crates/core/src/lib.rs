//! Runtime safeguard for driving decision policies.
//!
//! Scenes are grounded into predicate atoms, Horn rules map atoms to safety
//! constraints, and a temporal Markov logic layer refines the constraint set
//! from recent history. The guard checks each proposed action and revises
//! unsafe ones by re-prompting the policy or by constrained selection.

pub mod guard;
pub mod mln;
pub mod policy;
pub mod predicates;
pub mod rules;
pub mod scene;
pub mod sim;

pub use guard::{
    check_violation, guard_step, resolve_conflicts, verbalize, GuardConfig, GuardError, GuardMode,
    GuardSession, StepRecord, StrategyNote, ViolationReport,
};
pub use mln::{induce_state, potential, BodyAtom, InductionResult, MlnError, TemporalRule, Window};
pub use policy::{Policy, PolicyError, PolicyRequest, PolicySpec};
pub use predicates::{evaluate_predicates, GroundAtom, PredicateCategory, PredicateDef, Selector};
pub use rules::{
    activate, default_catalog, instantiate_constraints, parse_catalog, CatalogError, Constraint,
    HornRule, RuleCatalog, SafetyState,
};
pub use scene::{Action, ActionDistribution, ActionSet, Entity, EntityKind, Observation, Region};
pub use sim::{
    compute_metrics, generate_scenarios, run_episode, run_suite, EpisodeOutcome, EpisodeTrace,
    FailureType, MetricsReport, Scenario, ScenarioParams, SimError, Template,
};

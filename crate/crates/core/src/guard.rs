//! Decision-time safeguard: violation check, conflict resolution, prompt
//! verbalization and the bounded revise-and-re-query loop.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mln::{induce_state, Window};
use crate::policy::{Policy, PolicyError, PolicyRequest};
use crate::predicates::{evaluate_predicates, PredicateCategory};
use crate::rules::{activate, RuleCatalog, SafetyState};
use crate::scene::{Action, ActionDistribution, ActionSet, Observation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuardError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("nothing to verbalize: violation set is empty")]
    EmptyViolationSet,
    #[error("guard step needs at least one observation")]
    EmptyHistory,
    #[error("invalid guard config: {0}")]
    Config(String),
}

/// Revision strategy and logic ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuardMode {
    /// Temporal induction, prompt-driven re-query, constrained selection if still unsafe.
    Full,
    /// Only ego-action and traffic-rule predicates; no temporal induction.
    PredicateStatic,
    /// Only ego-action and participant predicates; no temporal induction.
    PredicateTargets,
    /// Replace any violating action by the configured fallback.
    ForcedFallback,
    /// Best-scoring action of the base distribution among the allowed ones.
    ConstrainedSelect,
    /// Evaluate and record the safety state but never change the action.
    Monitor,
}

impl GuardMode {
    pub const ALL: [GuardMode; 6] = [
        GuardMode::Full,
        GuardMode::PredicateStatic,
        GuardMode::PredicateTargets,
        GuardMode::ForcedFallback,
        GuardMode::ConstrainedSelect,
        GuardMode::Monitor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GuardMode::Full => "full",
            GuardMode::PredicateStatic => "predicate-static",
            GuardMode::PredicateTargets => "predicate-targets",
            GuardMode::ForcedFallback => "forced-fallback",
            GuardMode::ConstrainedSelect => "constrained-select",
            GuardMode::Monitor => "monitor",
        }
    }

    fn predicate_filter(self) -> Option<&'static [PredicateCategory]> {
        match self {
            GuardMode::PredicateStatic => {
                Some(&[PredicateCategory::Action, PredicateCategory::Environment])
            }
            GuardMode::PredicateTargets => Some(&[
                PredicateCategory::Action,
                PredicateCategory::TargetExistence,
                PredicateCategory::TargetMotion,
            ]),
            _ => None,
        }
    }

    fn uses_temporal_induction(self) -> bool {
        self.predicate_filter().is_none()
    }
}

impl fmt::Display for GuardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuardMode {
    type Err = GuardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GuardMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| GuardError::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    /// Markov order: number of past states consulted.
    pub n: usize,
    /// Observation history length handed to the policy (k past frames + current).
    pub k: usize,
    pub theta: f64,
    pub max_retries: usize,
    pub mode: GuardMode,
    pub fallback_action: Action,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            n: 4,
            k: 2,
            theta: 1.0,
            max_retries: 1,
            mode: GuardMode::Full,
            fallback_action: Action::Stop,
        }
    }
}

impl GuardConfig {
    pub fn with_mode(mut self, mode: GuardMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), GuardError> {
        if self.n == 0 {
            return Err(GuardError::Config("n must be at least 1".into()));
        }
        if !self.theta.is_finite() {
            return Err(GuardError::Config("theta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub delta: bool,
    pub violated: Vec<String>,
    pub effective_allowed: ActionSet,
}

/// Tests `action` against every constraint in `state`.
pub fn check_violation(
    action: Action,
    state: &SafetyState,
    catalog: &RuleCatalog,
) -> ViolationReport {
    let mut violated = Vec::new();
    let mut effective_allowed = ActionSet::ALL;
    for id in &state.active {
        if let Some(c) = catalog.constraint(id) {
            effective_allowed = effective_allowed.intersect(c.allowed);
            if !c.allowed.contains(action) {
                violated.push(id.clone());
            }
        }
    }
    ViolationReport {
        delta: !violated.is_empty(),
        violated,
        effective_allowed,
    }
}

/// Drops the least severe constraints (ties: lexicographically smallest id
/// first) until the allowed sets intersect.
pub fn resolve_conflicts(state: &SafetyState, catalog: &RuleCatalog) -> SafetyState {
    if !catalog.allowed_intersection(&state.active).is_empty() {
        return state.clone();
    }
    let mut order: Vec<(u8, &String)> = state
        .active
        .iter()
        .map(|id| (catalog.constraint(id).map_or(0, |c| c.severity), id))
        .collect();
    order.sort();
    let mut kept: BTreeSet<String> = state.active.clone();
    for (_, id) in order {
        if kept.len() == 1 || !catalog.allowed_intersection(&kept).is_empty() {
            break;
        }
        kept.remove(id);
    }
    SafetyState {
        t: state.t,
        active: kept,
    }
}

/// Renders violated constraints as a prompt: for each constraint (most severe
/// first, then by id) the cause phrases of the rules that activated it,
/// followed by its own text. Horn causes take precedence over temporal ones.
pub fn verbalize(
    violated: &[String],
    fired_rules: &[String],
    catalog: &RuleCatalog,
) -> Result<String, GuardError> {
    if violated.is_empty() {
        return Err(GuardError::EmptyViolationSet);
    }
    let mut constraints: Vec<_> = violated
        .iter()
        .filter_map(|id| catalog.constraint(id))
        .collect();
    constraints.sort_by(|a, b| b.severity.cmp(&a.severity).then_with(|| a.id.cmp(&b.id)));
    constraints.dedup_by(|a, b| a.id == b.id);

    let horn_ids: BTreeSet<&str> = catalog.horn_rules().iter().map(|r| r.id.as_str()).collect();
    let mut parts: Vec<&str> = Vec::new();
    for c in constraints {
        let causes = |horn: bool| -> Vec<&str> {
            fired_rules
                .iter()
                .filter(|r| horn_ids.contains(r.as_str()) == horn)
                .filter_map(|r| catalog.rule_cause(r))
                .filter(|(head, _)| *head == c.id)
                .map(|(_, text)| text)
                .collect()
        };
        let mut chosen = causes(true);
        if chosen.is_empty() {
            chosen = causes(false);
        }
        for text in chosen {
            if !parts.contains(&text) {
                parts.push(text);
            }
        }
        parts.push(&c.says);
    }
    Ok(parts.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyNote {
    Accepted,
    RevisedByPrompt,
    ConstrainedFallback,
    ForcedFallback,
}

impl fmt::Display for StrategyNote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyNote::Accepted => "Accepted",
            StrategyNote::RevisedByPrompt => "RevisedByPrompt",
            StrategyNote::ConstrainedFallback => "ConstrainedFallback",
            StrategyNote::ForcedFallback => "ForcedFallback",
        })
    }
}

/// Everything the guard decided at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub z_now: SafetyState,
    pub z_refined: SafetyState,
    pub fired_rules: Vec<String>,
    pub base_action: Action,
    pub delta: bool,
    #[serde(default)]
    pub violated: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub retries_used: usize,
    pub final_action: Action,
    pub strategy_note: StrategyNote,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("step record serializes")
    }

    /// Human-readable rendering used by `explain`.
    pub fn explain(&self) -> String {
        let mut out = String::new();
        let fired = if self.fired_rules.is_empty() {
            "-".to_string()
        } else {
            self.fired_rules.join(", ")
        };
        out.push_str(&format!("step {}\n", self.t));
        out.push_str(&format!("  instantaneous state: {}\n", self.z_now));
        out.push_str(&format!("  refined state:       {}\n", self.z_refined));
        out.push_str(&format!("  fired rules:         {fired}\n"));
        out.push_str(&format!("  base action:         {}\n", self.base_action));
        out.push_str(&format!(
            "  violation:           {}\n",
            u8::from(self.delta)
        ));
        if !self.violated.is_empty() {
            out.push_str(&format!(
                "  violated:            {}\n",
                self.violated.join(", ")
            ));
        }
        if let Some(p) = &self.prompt {
            out.push_str(&format!("  prompt:              {p}\n"));
        }
        out.push_str(&format!("  retries used:        {}\n", self.retries_used));
        out.push_str(&format!("  final action:        {}\n", self.final_action));
        out.push_str(&format!("  strategy:            {}\n", self.strategy_note));
        out
    }
}

/// One guarded policy session: configuration, catalogs and the temporal window.
pub struct GuardSession<'c> {
    config: GuardConfig,
    catalog: &'c RuleCatalog,
    grounding: Option<RuleCatalog>,
    window: Window,
}

impl<'c> GuardSession<'c> {
    pub fn new(config: GuardConfig, catalog: &'c RuleCatalog) -> Result<Self, GuardError> {
        config.validate()?;
        let grounding = config
            .mode
            .predicate_filter()
            .map(|keep| catalog.restricted_to(keep));
        let window = Window::new(config.n);
        Ok(GuardSession {
            config,
            catalog,
            grounding,
            window,
        })
    }

    /// Resumes a session from an existing window.
    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    pub fn config(&self) -> &GuardConfig {
        &self.config
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn into_window(self) -> Window {
        self.window
    }

    /// Runs the full pipeline for the newest observation in `history`.
    pub fn step(
        &mut self,
        history: &[Observation],
        policy: &mut dyn Policy,
    ) -> Result<StepRecord, GuardError> {
        let newest = history.last().ok_or(GuardError::EmptyHistory)?;
        let t = newest.t;
        let keep = (self.config.k + 1).min(history.len());
        let request = PolicyRequest::new(history[history.len() - keep..].to_vec());

        let base_dist = policy.decide(&request)?;
        let base_action = base_dist.argmax();

        let grounding = self.grounding.as_ref().unwrap_or(self.catalog);
        let atoms = evaluate_predicates(newest, base_action, grounding);
        let activation = activate(&atoms, grounding, t);
        let z_now = activation.state;
        let mut fired_rules = activation.fired;

        if self.window.back(1).is_some_and(|s| s.t + 1 != t) {
            self.window = Window::new(self.config.n);
        }
        let z_refined = if self.config.mode.uses_temporal_induction() {
            let induced = induce_state(&self.window, &z_now, self.catalog, self.config.theta);
            fired_rules.extend(induced.fired);
            induced.refined
        } else {
            z_now.clone()
        };
        self.window
            .push(z_now.clone())
            .expect("window reset on gaps");

        let resolved = resolve_conflicts(&z_refined, self.catalog);
        let report = check_violation(base_action, &resolved, self.catalog);

        let mut record = StepRecord {
            t,
            z_now,
            z_refined,
            fired_rules,
            base_action,
            delta: report.delta,
            violated: report.violated.clone(),
            prompt: None,
            retries_used: 0,
            final_action: base_action,
            strategy_note: StrategyNote::Accepted,
        };
        if !report.delta {
            return Ok(record);
        }
        let prompt = verbalize(&report.violated, &record.fired_rules, self.catalog)?;
        record.prompt = Some(prompt.clone());
        if self.config.mode == GuardMode::Monitor {
            return Ok(record);
        }
        let allowed = report.effective_allowed;

        match self.config.mode {
            GuardMode::ForcedFallback => {
                record.final_action = self.config.fallback_action;
                record.strategy_note = StrategyNote::ForcedFallback;
            }
            GuardMode::ConstrainedSelect => {
                record.final_action = constrained_select(&base_dist, allowed, &self.config);
                record.strategy_note = StrategyNote::ConstrainedFallback;
            }
            _ => {
                let revised = request.with_prompt(prompt);
                let mut latest = base_dist;
                for attempt in 1..=self.config.max_retries {
                    latest = policy.decide(&revised)?;
                    record.retries_used = attempt;
                    let candidate = latest.argmax();
                    if allowed.contains(candidate) {
                        record.final_action = candidate;
                        record.strategy_note = StrategyNote::RevisedByPrompt;
                        return Ok(record);
                    }
                }
                record.final_action = constrained_select(&latest, allowed, &self.config);
                record.strategy_note = StrategyNote::ConstrainedFallback;
            }
        }
        Ok(record)
    }
}

fn constrained_select(
    dist: &ActionDistribution,
    allowed: ActionSet,
    config: &GuardConfig,
) -> Action {
    dist.argmax_within(allowed)
        .unwrap_or(config.fallback_action)
}

/// Single-step form of [`GuardSession::step`]: returns the final action, the
/// step record and the advanced window.
pub fn guard_step(
    history: &[Observation],
    policy: &mut dyn Policy,
    window: Window,
    config: &GuardConfig,
    catalog: &RuleCatalog,
) -> Result<(Action, StepRecord, Window), GuardError> {
    let mut session = GuardSession::new(config.clone(), catalog)?.with_window(window);
    let record = session.step(history, policy)?;
    Ok((record.final_action, record, session.into_window()))
}

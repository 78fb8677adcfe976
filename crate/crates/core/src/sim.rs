//! Seeded scenario generation, closed-loop guarded episodes, the accident
//! oracle, failure taxonomy and suite metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guard::{GuardConfig, GuardError, GuardSession, StepRecord};
use crate::policy::{HazardWindow, PolicySpec, ScriptedTrack};
use crate::predicates::PredicateCategory;
use crate::rules::RuleCatalog;
use crate::scene::{
    Action, ActionSet, DistanceBand, Entity, EntityKind, MotionTrend, Observation, Region,
    SignalState,
};

/// Reaction window in steps (2.5 s at the 1 Hz frame cadence, rounded up).
pub const DEFAULT_REACTION_STEPS: u64 = 3;
/// Look-back used to detect abrupt participant changes before a collision.
pub const DEFAULT_ABRUPT_STEPS: u64 = 3;

const INSTRUCTION: &str = "Follow the current lane toward the destination.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid scenario {id}: {reason}")]
    InvalidScenario { id: String, reason: String },
    #[error("episode had no accident")]
    NoAccident,
    #[error("no outcomes to aggregate")]
    EmptyInput,
    #[error(transparent)]
    Guard(#[from] GuardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    SuddenPedestrianCrossing,
    ApproachingCyclist,
    RedLightIntersection,
    VehicleCutIn,
    ClearRoad,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::SuddenPedestrianCrossing,
        Template::ApproachingCyclist,
        Template::RedLightIntersection,
        Template::VehicleCutIn,
        Template::ClearRoad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Template::SuddenPedestrianCrossing => "SuddenPedestrianCrossing",
            Template::ApproachingCyclist => "ApproachingCyclist",
            Template::RedLightIntersection => "RedLightIntersection",
            Template::VehicleCutIn => "VehicleCutIn",
            Template::ClearRoad => "ClearRoad",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Template::SuddenPedestrianCrossing => "pedestrian",
            Template::ApproachingCyclist => "cyclist",
            Template::RedLightIntersection => "redlight",
            Template::VehicleCutIn => "cutin",
            Template::ClearRoad => "clear",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Template {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| SimError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HazardKind {
    Crossing,
    Approach,
    RuleSignal,
    CutIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hazard {
    pub onset: u64,
    pub collision: u64,
    pub safe_set: ActionSet,
    pub trigger_entity: String,
    pub kind: HazardKind,
    /// What the ego would do if it ignored the hazard.
    pub nominal_action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub template: Template,
    pub seed: u64,
    pub steps: Vec<Observation>,
    pub reference_actions: Vec<Action>,
    pub hazards: Vec<Hazard>,
    pub perception_dropout: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: String| SimError::InvalidScenario {
            id: self.id.clone(),
            reason,
        };
        if self.steps.is_empty() {
            return Err(bad("no steps".into()));
        }
        if self.reference_actions.len() != self.steps.len() {
            return Err(bad(format!(
                "{} reference actions for {} steps",
                self.reference_actions.len(),
                self.steps.len()
            )));
        }
        for (i, obs) in self.steps.iter().enumerate() {
            if obs.t != i as u64 {
                return Err(bad(format!("step {i} has t={}", obs.t)));
            }
            obs.validate().map_err(|e| bad(e.to_string()))?;
        }
        for h in &self.hazards {
            if h.onset > h.collision || h.collision >= self.steps.len() as u64 {
                return Err(bad(format!(
                    "hazard window {}..{} outside the episode",
                    h.onset, h.collision
                )));
            }
            if h.safe_set.is_empty() {
                return Err(bad("empty safe set".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.perception_dropout) {
            return Err(bad("perception_dropout outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let scenario: Scenario =
            serde_json::from_str(text).map_err(|e| SimError::InvalidScenario {
                id: "?".into(),
                reason: e.to_string(),
            })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn track(&self) -> ScriptedTrack {
        ScriptedTrack {
            reference: self
                .reference_actions
                .iter()
                .enumerate()
                .map(|(t, a)| (t as u64, *a))
                .collect::<HashMap<_, _>>(),
            hazard_windows: self
                .hazards
                .iter()
                .map(|h| HazardWindow {
                    onset: h.onset,
                    collision: h.collision,
                    nominal: h.nominal_action,
                })
                .collect(),
            scenario_seed: self.seed,
        }
    }

    fn in_hazard_window(&self, t: u64) -> bool {
        self.hazards
            .iter()
            .any(|h| h.onset <= t && t <= h.collision)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    /// Onset-to-collision gap for the pedestrian template.
    pub pedestrian_gap: u64,
    /// The pedestrian is seen for two steps and then occluded until collision.
    pub flicker: bool,
    pub dropout: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            pedestrian_gap: 2,
            flicker: false,
            dropout: 0.0,
        }
    }
}

impl ScenarioParams {
    /// The occluded-pedestrian variant: visible for two steps, then hidden for
    /// the last four steps up to and including the collision.
    pub fn flicker() -> Self {
        ScenarioParams {
            pedestrian_gap: 5,
            flicker: true,
            dropout: 0.0,
        }
    }
}

/// Deterministic scenarios for one template.
pub fn generate_scenarios(
    template: Template,
    count: usize,
    seed: u64,
    params: &ScenarioParams,
) -> Result<Vec<Scenario>, SimError> {
    let template_index = Template::ALL.iter().position(|t| *t == template).unwrap() as u64;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    master.set_stream(template_index + 1);
    (0..count)
        .map(|i| {
            let scenario_seed: u64 = master.gen();
            let id = format!("{}-{seed}-{i:03}", template.slug());
            let scenario = build_scenario(template, id, scenario_seed, params);
            scenario.validate()?;
            Ok(scenario)
        })
        .collect()
}

/// Every template, `per_template` scenarios each, in template order.
pub fn standard_suite(per_template: usize, seed: u64, params: &ScenarioParams) -> Vec<Scenario> {
    Template::ALL
        .into_iter()
        .flat_map(|t| {
            generate_scenarios(t, per_template, seed, params).expect("templates are valid")
        })
        .collect()
}

struct Builder {
    frames: Vec<Vec<Entity>>,
    reference: Vec<Action>,
}

impl Builder {
    fn new(seed: u64, len: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frames = vec![vec![Entity::ego()]; len as usize];
        // Background traffic that never satisfies a shipped rule.
        let background = [
            Entity::participant(
                "bg_rear",
                EntityKind::Vehicle,
                Region::RearCenter,
                MotionTrend::Approaching,
            ),
            Entity::participant(
                "bg_parked",
                EntityKind::Vehicle,
                Region::Right,
                MotionTrend::Stationary,
            ),
            Entity::participant(
                "bg_left",
                EntityKind::Vehicle,
                Region::Left,
                MotionTrend::Receding,
            ),
            Entity::participant(
                "bg_walker",
                EntityKind::Pedestrian,
                Region::RearRight,
                MotionTrend::Receding,
            ),
        ];
        for entity in background {
            if rng.gen_bool(0.5) {
                for frame in &mut frames {
                    frame.push(entity.clone());
                }
            }
        }
        Builder {
            frames,
            reference: vec![Action::KeepSpeed; len as usize],
        }
    }

    fn place(&mut self, t: u64, entity: Entity) {
        self.frames[t as usize].push(entity);
    }

    fn finish(
        self,
        template: Template,
        id: String,
        seed: u64,
        hazards: Vec<Hazard>,
        dropout: f64,
    ) -> Scenario {
        let steps = self
            .frames
            .into_iter()
            .enumerate()
            .map(|(t, mut entities)| {
                entities[1..].sort_by(|a, b| a.id.cmp(&b.id));
                Observation {
                    t: t as u64,
                    instruction: Some(INSTRUCTION.to_string()),
                    entities,
                }
            })
            .collect();
        Scenario {
            id,
            template,
            seed,
            steps,
            reference_actions: self.reference,
            hazards,
            perception_dropout: dropout,
        }
    }
}

fn stop_or_decel() -> ActionSet {
    [Action::Stop, Action::Decelerate].into_iter().collect()
}

fn band_for(remaining: u64) -> DistanceBand {
    match remaining {
        0..=1 => DistanceBand::Near,
        2..=4 => DistanceBand::Mid,
        _ => DistanceBand::Far,
    }
}

fn build_scenario(template: Template, id: String, seed: u64, params: &ScenarioParams) -> Scenario {
    let mut shape = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_a210);
    let hazard = |onset, collision, trigger: &str, kind| Hazard {
        onset,
        collision,
        safe_set: stop_or_decel(),
        trigger_entity: trigger.to_string(),
        kind,
        nominal_action: Action::KeepSpeed,
    };
    match template {
        Template::ClearRoad => {
            let len = shape.gen_range(8..=12);
            Builder::new(seed, len).finish(template, id, seed, Vec::new(), params.dropout)
        }
        Template::ApproachingCyclist => {
            let onset = shape.gen_range(2..=4);
            let collision = onset + shape.gen_range(5..=10);
            let mut b = Builder::new(seed, collision + 1);
            for t in onset..=collision {
                b.place(
                    t,
                    Entity::participant(
                        "cyclist",
                        EntityKind::Bicycle,
                        Region::FrontCenter,
                        MotionTrend::Approaching,
                    )
                    .with_distance(band_for(collision - t)),
                );
                b.reference[t as usize] = Action::Decelerate;
            }
            let h = hazard(onset, collision, "cyclist", HazardKind::Approach);
            b.finish(template, id, seed, vec![h], params.dropout)
        }
        Template::RedLightIntersection => {
            let onset = shape.gen_range(2..=4);
            let collision = onset + shape.gen_range(3..=6);
            let mut b = Builder::new(seed, collision + 1);
            for t in 0..=collision {
                let signal = if t < onset {
                    SignalState::Green
                } else {
                    SignalState::Red
                };
                b.place(
                    t,
                    Entity::traffic_light("signal", Region::FrontCenter, signal)
                        .with_distance(band_for(collision - t)),
                );
                if t >= onset {
                    b.reference[t as usize] = if t == collision {
                        Action::Stop
                    } else {
                        Action::Decelerate
                    };
                }
            }
            let h = hazard(onset, collision, "signal", HazardKind::RuleSignal);
            b.finish(template, id, seed, vec![h], params.dropout)
        }
        Template::SuddenPedestrianCrossing => {
            let onset = shape.gen_range(3..=6);
            let collision = onset + params.pedestrian_gap;
            let mut b = Builder::new(seed, collision + 1);
            for t in onset..=collision {
                let region = if t == onset {
                    Region::FrontRight
                } else {
                    Region::FrontCenter
                };
                let visible = !params.flicker || t < onset + 2;
                b.place(
                    t,
                    Entity::participant(
                        "pedestrian",
                        EntityKind::Pedestrian,
                        region,
                        MotionTrend::Crossing,
                    )
                    .with_distance(band_for(collision - t))
                    .with_visible(visible),
                );
                b.reference[t as usize] = Action::Stop;
            }
            let h = hazard(onset, collision, "pedestrian", HazardKind::Crossing);
            b.finish(template, id, seed, vec![h], params.dropout)
        }
        Template::VehicleCutIn => {
            let appear = shape.gen_range(1..=3);
            let onset = appear + shape.gen_range(2..=4);
            let collision = onset + 3;
            let mut b = Builder::new(seed, collision + 1);
            for t in appear..=collision {
                let (region, motion) = if t < onset {
                    (Region::FrontLeft, MotionTrend::Approaching)
                } else if t + 1 < collision {
                    (Region::FrontLeft, MotionTrend::Crossing)
                } else {
                    (Region::FrontCenter, MotionTrend::Crossing)
                };
                b.place(
                    t,
                    Entity::participant("cutter", EntityKind::Vehicle, region, motion)
                        .with_distance(band_for(collision - t)),
                );
                if t >= onset {
                    b.reference[t as usize] = Action::Decelerate;
                }
            }
            let h = hazard(onset, collision, "cutter", HazardKind::CutIn);
            b.finish(template, id, seed, vec![h], params.dropout)
        }
    }
}

/// Perceived frames after seeded per-entity dropout, plus the dropped
/// `(t, entity)` pairs.
pub fn apply_dropout(scenario: &Scenario) -> (Vec<Observation>, Vec<(u64, String)>) {
    let mut dropped = Vec::new();
    if scenario.perception_dropout <= 0.0 {
        return (scenario.steps.clone(), dropped);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(0xd809);
    let frames = scenario
        .steps
        .iter()
        .map(|obs| {
            let mut obs = obs.clone();
            for e in obs.entities.iter_mut().skip(1) {
                if rng.gen::<f64>() < scenario.perception_dropout && e.visible {
                    e.visible = false;
                    dropped.push((obs.t, e.id.clone()));
                }
            }
            obs
        })
        .collect();
    (frames, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub scenario_id: String,
    pub steps: Vec<StepRecord>,
    #[serde(default)]
    pub dropped: Vec<(u64, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureType {
    /// Ego decision error.
    EDE,
    /// Rule violation.
    RV,
    /// Reactive participant: abrupt appearance or motion change.
    RP,
    /// Other, e.g. grounding faults and policy errors.
    OT,
}

impl FailureType {
    pub const ALL: [FailureType; 4] = [
        FailureType::EDE,
        FailureType::RV,
        FailureType::RP,
        FailureType::OT,
    ];
}

impl fmt::Display for FailureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardOutcome {
    pub collision: u64,
    pub avoided: bool,
    /// A Horn-activated constraint restricting the ego to the safe set was
    /// present inside the reaction window.
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub scenario_id: String,
    pub template: Template,
    pub steps: usize,
    pub accident: bool,
    pub accident_step: Option<u64>,
    pub interventions: usize,
    pub false_interventions: usize,
    pub task_matches: usize,
    pub failure_type: Option<FailureType>,
    pub hazards: Vec<HazardOutcome>,
}

/// Per-hazard accident flags: a hazard is avoided iff some final action in
/// `[t_c - r, t_c]` lies in its safe set.
pub fn accident_oracle(trace: &EpisodeTrace, scenario: &Scenario, r: u64) -> Vec<bool> {
    scenario
        .hazards
        .iter()
        .map(|h| {
            let from = h.collision.saturating_sub(r);
            !trace
                .steps
                .iter()
                .any(|s| s.t >= from && s.t <= h.collision && h.safe_set.contains(s.final_action))
        })
        .collect()
}

fn hazard_covered(trace: &EpisodeTrace, hazard: &Hazard, catalog: &RuleCatalog, r: u64) -> bool {
    let from = hazard.collision.saturating_sub(r);
    trace
        .steps
        .iter()
        .filter(|s| s.t >= from && s.t <= hazard.collision)
        .any(|s| {
            s.z_now.active.iter().any(|id| {
                catalog
                    .constraint(id)
                    .is_some_and(|c| c.allowed.is_subset(hazard.safe_set))
            })
        })
}

fn first_failed_hazard<'s>(
    trace: &EpisodeTrace,
    scenario: &'s Scenario,
    r: u64,
) -> Option<&'s Hazard> {
    scenario
        .hazards
        .iter()
        .zip(accident_oracle(trace, scenario, r))
        .filter(|(_, failed)| *failed)
        .map(|(h, _)| h)
        .min_by_key(|h| h.collision)
}

/// Whether the Horn rule with `rule_id` depends on a traffic-rule signal.
fn is_rule_signal_rule(rule_id: &str, catalog: &RuleCatalog) -> bool {
    catalog
        .horn_rules()
        .iter()
        .find(|r| r.id == rule_id)
        .is_some_and(|r| {
            r.antecedent.iter().any(|p| {
                catalog
                    .predicate(p)
                    .is_some_and(|d| d.category() == PredicateCategory::Environment)
            })
        })
}

/// Assigns exactly one failure type to an accident episode.
pub fn classify_failure(
    trace: &EpisodeTrace,
    scenario: &Scenario,
    catalog: &RuleCatalog,
    r: u64,
    q: u64,
) -> Result<FailureType, SimError> {
    if trace.policy_error.is_some() {
        return Ok(FailureType::OT);
    }
    let hazard = first_failed_hazard(trace, scenario, r).ok_or(SimError::NoAccident)?;
    let window_start = hazard.collision.saturating_sub(r);
    let grounding_fault = trace.dropped.iter().any(|(t, id)| {
        *id == hazard.trigger_entity && *t >= window_start && *t <= hazard.collision
    });
    if grounding_fault {
        return Ok(FailureType::OT);
    }

    if let Some(step) = trace.steps.iter().find(|s| s.t == hazard.collision) {
        let violated_signal_rule = step.fired_rules.iter().any(|rule| {
            is_rule_signal_rule(rule, catalog)
                && catalog
                    .rule_cause(rule)
                    .and_then(|(head, _)| catalog.constraint(head))
                    .is_some_and(|c| !c.allowed.contains(step.final_action))
        });
        if violated_signal_rule {
            return Ok(FailureType::RV);
        }
    }

    // Ground-truth appearance or motion change of the trigger within q steps.
    let mut previous: Option<MotionTrend> = None;
    let mut abrupt_at = Vec::new();
    for obs in scenario.steps.iter().take(hazard.collision as usize + 1) {
        let current = obs
            .entity(&hazard.trigger_entity)
            .filter(|e| e.visible)
            .map(|e| e.motion);
        match (previous, current) {
            (None, Some(_)) => abrupt_at.push(obs.t),
            (Some(a), Some(b)) if a != b => abrupt_at.push(obs.t),
            _ => {}
        }
        if current.is_some() {
            previous = current;
        }
    }
    let q_start = hazard.collision.saturating_sub(q);
    if abrupt_at
        .iter()
        .any(|t| *t >= q_start && *t <= hazard.collision)
    {
        return Ok(FailureType::RP);
    }
    Ok(FailureType::EDE)
}

/// Runs one closed-loop episode. Policy failures end the episode and are
/// recorded as an OT accident; only configuration errors are returned.
pub fn run_episode(
    scenario: &Scenario,
    policy_spec: &PolicySpec,
    config: &GuardConfig,
    catalog: &RuleCatalog,
) -> Result<(EpisodeTrace, EpisodeOutcome), SimError> {
    scenario.validate()?;
    let mut session = GuardSession::new(config.clone(), catalog)?;
    let (frames, dropped) = apply_dropout(scenario);
    let mut trace = EpisodeTrace {
        scenario_id: scenario.id.clone(),
        steps: Vec::with_capacity(frames.len()),
        dropped,
        policy_error: None,
    };

    match policy_spec.instantiate(scenario.track()) {
        Err(e) => trace.policy_error = Some(e.to_string()),
        Ok(mut policy) => {
            for end in 1..=frames.len() {
                match session.step(&frames[..end], policy.as_mut()) {
                    Ok(record) => trace.steps.push(record),
                    Err(GuardError::Policy(e)) => {
                        trace.policy_error = Some(e.to_string());
                        break;
                    }
                    Err(other) => return Err(other.into()),
                }
            }
        }
    }

    let outcome = score_episode(
        &trace,
        scenario,
        catalog,
        DEFAULT_REACTION_STEPS,
        DEFAULT_ABRUPT_STEPS,
    );
    Ok((trace, outcome))
}

/// Derives the outcome of a finished trace.
pub fn score_episode(
    trace: &EpisodeTrace,
    scenario: &Scenario,
    catalog: &RuleCatalog,
    r: u64,
    q: u64,
) -> EpisodeOutcome {
    let failed = accident_oracle(trace, scenario, r);
    let hazards: Vec<HazardOutcome> = scenario
        .hazards
        .iter()
        .zip(&failed)
        .map(|(h, failed)| HazardOutcome {
            collision: h.collision,
            avoided: !failed,
            covered: hazard_covered(trace, h, catalog, r),
        })
        .collect();
    let accident = trace.policy_error.is_some() || failed.iter().any(|f| *f);
    let accident_step = if !accident {
        None
    } else if trace.policy_error.is_some() {
        Some(trace.steps.len() as u64)
    } else {
        first_failed_hazard(trace, scenario, r).map(|h| h.collision)
    };
    let failure_type = if accident {
        Some(classify_failure(trace, scenario, catalog, r, q).expect("accident episodes classify"))
    } else {
        None
    };
    EpisodeOutcome {
        scenario_id: scenario.id.clone(),
        template: scenario.template,
        steps: scenario.steps.len(),
        accident,
        accident_step,
        interventions: trace.steps.iter().filter(|s| s.delta).count(),
        false_interventions: trace
            .steps
            .iter()
            .filter(|s| s.delta && !scenario.in_hazard_window(s.t))
            .count(),
        task_matches: trace
            .steps
            .iter()
            .filter(|s| scenario.reference_actions.get(s.t as usize) == Some(&s.final_action))
            .count(),
        failure_type,
        hazards,
    }
}

/// Runs independent episodes in parallel; results keep the input order.
pub fn run_suite(
    scenarios: &[Scenario],
    policy_spec: &PolicySpec,
    config: &GuardConfig,
    catalog: &RuleCatalog,
) -> Result<Vec<(EpisodeTrace, EpisodeOutcome)>, SimError> {
    scenarios
        .par_iter()
        .map(|s| run_episode(s, policy_spec, config, catalog))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub accidents: usize,
    pub accident_rate: f64,
    pub intervention_rate: f64,
    pub false_intervention_rate: f64,
    pub task_score: f64,
    pub failure_counts: BTreeMap<FailureType, usize>,
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "episodes",
    "accidents",
    "accident_rate",
    "intervention_rate",
    "false_intervention_rate",
    "task_score",
    "EDE",
    "RV",
    "RP",
    "OT",
    "steps",
];

impl MetricsReport {
    /// Tab-separated header, optionally prefixed by configuration columns.
    pub fn tsv_header(prefix: &[&str]) -> String {
        prefix
            .iter()
            .chain(METRICS_COLUMNS[..10].iter())
            .copied()
            .collect::<Vec<_>>()
            .join("\t")
    }

    pub fn tsv_row(&self, prefix: &[String]) -> String {
        let mut cells: Vec<String> = prefix.to_vec();
        cells.push(self.episodes.to_string());
        cells.push(self.accidents.to_string());
        for v in [
            self.accident_rate,
            self.intervention_rate,
            self.false_intervention_rate,
            self.task_score,
        ] {
            cells.push(format!("{v:.6}"));
        }
        for f in FailureType::ALL {
            cells.push(
                self.failure_counts
                    .get(&f)
                    .copied()
                    .unwrap_or(0)
                    .to_string(),
            );
        }
        cells.join("\t")
    }
}

pub fn compute_metrics(outcomes: &[EpisodeOutcome]) -> Result<MetricsReport, SimError> {
    if outcomes.is_empty() {
        return Err(SimError::EmptyInput);
    }
    let episodes = outcomes.len();
    let accidents = outcomes.iter().filter(|o| o.accident).count();
    let total_steps: usize = outcomes.iter().map(|o| o.steps).sum();
    let per_step = |n: usize| {
        if total_steps == 0 {
            0.0
        } else {
            n as f64 / total_steps as f64
        }
    };
    let mut failure_counts: BTreeMap<FailureType, usize> =
        FailureType::ALL.into_iter().map(|f| (f, 0)).collect();
    for f in outcomes.iter().filter_map(|o| o.failure_type) {
        *failure_counts.entry(f).or_default() += 1;
    }
    let task_score = outcomes
        .iter()
        .map(|o| {
            if o.steps == 0 {
                0.0
            } else {
                o.task_matches as f64 / o.steps as f64
            }
        })
        .sum::<f64>()
        / episodes as f64;
    Ok(MetricsReport {
        episodes,
        accidents,
        accident_rate: accidents as f64 / episodes as f64,
        intervention_rate: per_step(outcomes.iter().map(|o| o.interventions).sum()),
        false_intervention_rate: per_step(outcomes.iter().map(|o| o.false_interventions).sum()),
        task_score,
        failure_counts,
    })
}

/// Trailing line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub outcome: EpisodeOutcome,
    #[serde(default)]
    pub dropped: Vec<(u64, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_error: Option<String>,
}

/// JSONL: one step record per line, then the footer.
pub fn trace_to_jsonl(trace: &EpisodeTrace, outcome: &EpisodeOutcome) -> String {
    let mut out = String::new();
    for step in &trace.steps {
        out.push_str(&step.to_json_line());
        out.push('\n');
    }
    let footer = TraceFooter {
        outcome: outcome.clone(),
        dropped: trace.dropped.clone(),
        policy_error: trace.policy_error.clone(),
    };
    out.push_str(&serde_json::to_string(&footer).expect("footer serializes"));
    out.push('\n');
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

pub fn trace_from_jsonl(text: &str) -> Result<(EpisodeTrace, EpisodeOutcome), TraceParseError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    let Some(((footer_line, footer_text), step_lines)) = lines.split_last() else {
        return Err(TraceParseError {
            line: 0,
            message: "empty trace".into(),
        });
    };
    let footer: TraceFooter = serde_json::from_str(footer_text).map_err(|e| TraceParseError {
        line: *footer_line,
        message: format!("expected outcome footer: {e}"),
    })?;
    let steps = step_lines
        .iter()
        .map(|(n, l)| {
            serde_json::from_str::<StepRecord>(l).map_err(|e| TraceParseError {
                line: *n,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let trace = EpisodeTrace {
        scenario_id: footer.outcome.scenario_id.clone(),
        steps,
        dropped: footer.dropped,
        policy_error: footer.policy_error,
    };
    Ok((trace, footer.outcome))
}

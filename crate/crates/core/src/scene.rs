//! Symbolic scene model: entities, observations, actions and action
//! distributions, plus the line-oriented frame format.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SceneError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate entity id `{0}`")]
    DuplicateEntityId(String),
    #[error("observation has no ego entity in first position")]
    NoEgo,
}

/// Declares a closed enum whose textual tokens are exactly its variant names.
macro_rules! token_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => stringify!($variant)),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = SceneError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $(stringify!($variant) => Ok($name::$variant),)+
                    other => Err(SceneError::Schema(format!(
                        "unknown {} token `{}`",
                        stringify!($name),
                        other
                    ))),
                }
            }
        }
    };
}

token_enum!(EntityKind {
    Ego,
    Vehicle,
    Pedestrian,
    Bicycle,
    Motorcycle,
    TrafficLight,
    TrafficSign,
    Other,
});

token_enum!(
    /// Egocentric 8-cell grid around the ego vehicle.
    Region {
        FrontLeft,
        FrontCenter,
        FrontRight,
        Left,
        Right,
        RearLeft,
        RearCenter,
        RearRight,
    }
);

token_enum!(MotionTrend {
    Approaching,
    Receding,
    Crossing,
    Stationary,
    Unknown,
});

token_enum!(SignalState {
    Red,
    Yellow,
    Green,
    None,
});

token_enum!(
    /// Sign type carried by `TrafficSign` entities.
    SignKind {
        Stop,
        Yield,
    }
);

token_enum!(DistanceBand { Near, Mid, Far });

token_enum!(
    /// The closed action space. Declaration order is the argmax tie-break order.
    Action {
        Stop,
        Decelerate,
        KeepSpeed,
        Accelerate,
        TurnLeft,
        TurnRight,
        LaneChangeLeft,
        LaneChangeRight,
    }
);

#[allow(clippy::derivable_impls)] // token_enum! does not take variant attributes
impl Default for DistanceBand {
    fn default() -> Self {
        DistanceBand::Mid
    }
}

#[allow(clippy::derivable_impls)]
impl Default for SignalState {
    fn default() -> Self {
        SignalState::None
    }
}

impl Action {
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Region {
    /// Regions ahead of the ego vehicle.
    pub fn is_front(self) -> bool {
        matches!(
            self,
            Region::FrontLeft | Region::FrontCenter | Region::FrontRight
        )
    }
}

impl EntityKind {
    pub fn is_static_signal(self) -> bool {
        matches!(self, EntityKind::TrafficLight | EntityKind::TrafficSign)
    }
}

/// A subset of the action space, stored as a bitmask in declaration order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct ActionSet(u8);

impl ActionSet {
    pub const EMPTY: ActionSet = ActionSet(0);
    pub const ALL: ActionSet = ActionSet(0xff);

    pub fn single(action: Action) -> Self {
        ActionSet(1 << action.index())
    }

    pub fn contains(self, action: Action) -> bool {
        self.0 & (1 << action.index()) != 0
    }

    pub fn insert(&mut self, action: Action) {
        self.0 |= 1 << action.index();
    }

    pub fn intersect(self, other: ActionSet) -> ActionSet {
        ActionSet(self.0 & other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: ActionSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::ALL
            .iter()
            .copied()
            .filter(move |a| self.contains(*a))
    }
}

impl FromIterator<Action> for ActionSet {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        let mut set = ActionSet::EMPTY;
        for a in iter {
            set.insert(a);
        }
        set
    }
}

impl fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, a) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str(a.as_str())?;
        }
        f.write_str("}")
    }
}

impl Serialize for ActionSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ActionSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let actions = Vec::<Action>::deserialize(deserializer)?;
        Ok(actions.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub kind: EntityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    pub motion: MotionTrend,
    #[serde(default, skip_serializing_if = "is_no_signal")]
    pub signal: SignalState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign: Option<SignKind>,
    #[serde(default)]
    pub distance_band: DistanceBand,
    #[serde(default = "default_visible")]
    pub visible: bool,
}

fn is_no_signal(s: &SignalState) -> bool {
    *s == SignalState::None
}

fn default_visible() -> bool {
    true
}

impl Entity {
    pub fn ego() -> Self {
        Entity {
            id: "ego".to_string(),
            kind: EntityKind::Ego,
            region: None,
            motion: MotionTrend::Unknown,
            signal: SignalState::None,
            sign: None,
            distance_band: DistanceBand::Near,
            visible: true,
        }
    }

    pub fn participant(id: &str, kind: EntityKind, region: Region, motion: MotionTrend) -> Self {
        Entity {
            id: id.to_string(),
            kind,
            region: Some(region),
            motion,
            signal: SignalState::None,
            sign: None,
            distance_band: DistanceBand::Mid,
            visible: true,
        }
    }

    pub fn traffic_light(id: &str, region: Region, signal: SignalState) -> Self {
        Entity {
            id: id.to_string(),
            kind: EntityKind::TrafficLight,
            region: Some(region),
            motion: MotionTrend::Stationary,
            signal,
            sign: None,
            distance_band: DistanceBand::Mid,
            visible: true,
        }
    }

    pub fn traffic_sign(id: &str, region: Region, sign: SignKind) -> Self {
        Entity {
            id: id.to_string(),
            kind: EntityKind::TrafficSign,
            region: Some(region),
            motion: MotionTrend::Stationary,
            signal: SignalState::None,
            sign: Some(sign),
            distance_band: DistanceBand::Mid,
            visible: true,
        }
    }

    pub fn with_distance(mut self, band: DistanceBand) -> Self {
        self.distance_band = band;
        self
    }

    pub fn with_visible(mut self, visible: bool) -> Self {
        self.visible = visible;
        self
    }

    fn validate(&self) -> Result<(), SceneError> {
        if self.id.is_empty() {
            return Err(SceneError::Schema("entity id must be non-empty".into()));
        }
        match (self.kind, self.region) {
            (EntityKind::Ego, Some(_)) => {
                return Err(SceneError::Schema(
                    "ego entity must not carry a region".into(),
                ))
            }
            (kind, None) if kind != EntityKind::Ego => {
                return Err(SceneError::Schema(format!(
                    "entity `{}` is missing its region",
                    self.id
                )))
            }
            _ => {}
        }
        if self.kind.is_static_signal() && self.motion != MotionTrend::Stationary {
            return Err(SceneError::Schema(format!(
                "entity `{}`: traffic lights and signs must be Stationary",
                self.id
            )));
        }
        if self.signal != SignalState::None && self.kind != EntityKind::TrafficLight {
            return Err(SceneError::Schema(format!(
                "entity `{}`: only traffic lights carry a signal",
                self.id
            )));
        }
        if self.sign.is_some() && self.kind != EntityKind::TrafficSign {
            return Err(SceneError::Schema(format!(
                "entity `{}`: only traffic signs carry a sign type",
                self.id
            )));
        }
        Ok(())
    }
}

/// One symbolic frame. `entities[0]` is always the ego vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub entities: Vec<Entity>,
}

impl Observation {
    pub fn new(t: u64, entities: Vec<Entity>) -> Result<Self, SceneError> {
        let obs = Observation {
            t,
            instruction: None,
            entities,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        match self.entities.first() {
            Some(e) if e.kind == EntityKind::Ego => {}
            _ => return Err(SceneError::NoEgo),
        }
        let mut seen = HashSet::with_capacity(self.entities.len());
        for (i, e) in self.entities.iter().enumerate() {
            if i > 0 && e.kind == EntityKind::Ego {
                return Err(SceneError::Schema("more than one ego entity".into()));
            }
            e.validate()?;
            if !seen.insert(e.id.as_str()) {
                return Err(SceneError::DuplicateEntityId(e.id.clone()));
            }
        }
        Ok(())
    }

    pub fn ego(&self) -> &Entity {
        &self.entities[0]
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("observation serializes")
    }
}

/// Parses one frame record.
pub fn parse_observation(record: &str) -> Result<Observation, SceneError> {
    let obs: Observation =
        serde_json::from_str(record).map_err(|e| SceneError::Schema(e.to_string()))?;
    obs.validate()?;
    Ok(obs)
}

/// Parses a newline-delimited trace of frames; blank lines are skipped.
/// Frame indices must strictly increase.
pub fn parse_trace(text: &str) -> Result<Vec<Observation>, SceneError> {
    let mut frames: Vec<Observation> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let obs = parse_observation(line)?;
        if let Some(prev) = frames.last() {
            if obs.t <= prev.t {
                return Err(SceneError::Schema(format!(
                    "frame index {} does not follow {}",
                    obs.t, prev.t
                )));
            }
        }
        frames.push(obs);
    }
    Ok(frames)
}

/// Scores over the full action space.
#[derive(Clone, Copy, PartialEq, Default)]
pub struct ActionDistribution {
    scores: [f64; Action::COUNT],
}

impl ActionDistribution {
    pub fn uniform(score: f64) -> Self {
        ActionDistribution {
            scores: [score; Action::COUNT],
        }
    }

    /// All mass on one action.
    pub fn one_hot(action: Action) -> Self {
        let mut d = Self::uniform(0.0);
        d.set(action, 1.0);
        d
    }

    pub fn from_scores(scores: [f64; Action::COUNT]) -> Self {
        ActionDistribution { scores }
    }

    pub fn score(&self, action: Action) -> f64 {
        self.scores[action.index()]
    }

    pub fn set(&mut self, action: Action, score: f64) {
        self.scores[action.index()] = score;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Action, f64)> + '_ {
        Action::ALL
            .iter()
            .map(move |a| (*a, self.scores[a.index()]))
    }

    /// Highest-scoring action; ties go to the earliest declared action.
    pub fn argmax(&self) -> Action {
        argmax_action(self)
    }

    /// Highest-scoring action within `allowed`, or `None` if `allowed` is empty.
    pub fn argmax_within(&self, allowed: ActionSet) -> Option<Action> {
        let mut best: Option<(Action, f64)> = None;
        for a in allowed.iter() {
            let s = sanitize(self.score(a));
            match best {
                Some((_, bs)) if s <= bs => {}
                _ => best = Some((a, s)),
            }
        }
        best.map(|(a, _)| a)
    }
}

fn sanitize(score: f64) -> f64 {
    if score.is_nan() {
        f64::NEG_INFINITY
    } else {
        score
    }
}

pub fn argmax_action(dist: &ActionDistribution) -> Action {
    dist.argmax_within(ActionSet::ALL)
        .expect("full action set is non-empty")
}

impl fmt::Debug for ActionDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.iter()).finish()
    }
}

impl Serialize for ActionDistribution {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(Action::COUNT))?;
        for (a, s) in self.iter() {
            map.serialize_entry(a.as_str(), &s)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ActionDistribution {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DistVisitor;

        impl<'de> Visitor<'de> for DistVisitor {
            type Value = ActionDistribution;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map scoring all eight actions")
            }

            fn visit_map<M: MapAccess<'de>>(self, mut map: M) -> Result<Self::Value, M::Error> {
                let mut scores = [f64::NAN; Action::COUNT];
                let mut seen = ActionSet::EMPTY;
                while let Some((key, value)) = map.next_entry::<String, f64>()? {
                    let action: Action = key.parse().map_err(de::Error::custom)?;
                    if seen.contains(action) {
                        return Err(de::Error::custom(format!("duplicate score for {action}")));
                    }
                    seen.insert(action);
                    scores[action.index()] = value;
                }
                if let Some(missing) = Action::ALL.iter().find(|a| !seen.contains(**a)) {
                    return Err(de::Error::custom(format!("missing score for {missing}")));
                }
                Ok(ActionDistribution { scores })
            }
        }

        deserializer.deserialize_map(DistVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BIKE_FRAME: &str = r#"{"t":3,"entities":[{"id":"ego","kind":"Ego","motion":"Unknown"},{"id":"bic","kind":"Bicycle","region":"FrontCenter","motion":"Approaching"}]}"#;

    #[test]
    fn parses_ego_and_bicycle() {
        let obs = parse_observation(BIKE_FRAME).unwrap();
        assert_eq!(obs.entities.len(), 2);
        assert_eq!(obs.t, 3);
        let bic = obs.entity("bic").unwrap();
        assert_eq!(bic.region, Some(Region::FrontCenter));
        assert_eq!(bic.distance_band, DistanceBand::Mid);
        assert!(bic.visible);
        assert_eq!(parse_observation(&obs.to_json_line()).unwrap(), obs);
    }

    #[test]
    fn rejects_duplicate_ids() {
        let frame = r#"{"t":0,"entities":[{"id":"ego","kind":"Ego","motion":"Unknown"},
            {"id":"p1","kind":"Pedestrian","region":"Left","motion":"Crossing"},
            {"id":"p1","kind":"Pedestrian","region":"Right","motion":"Crossing"}]}"#;
        assert_eq!(
            parse_observation(frame),
            Err(SceneError::DuplicateEntityId("p1".into()))
        );
    }

    #[test]
    fn rejects_missing_ego() {
        let frame = r#"{"t":0,"entities":[{"id":"p1","kind":"Pedestrian","region":"Left","motion":"Crossing"}]}"#;
        assert_eq!(parse_observation(frame), Err(SceneError::NoEgo));
        assert_eq!(
            parse_observation(r#"{"t":0,"entities":[]}"#),
            Err(SceneError::NoEgo)
        );
    }

    #[test]
    fn rejects_unknown_tokens_and_missing_fields() {
        let bad_kind = r#"{"t":0,"entities":[{"id":"ego","kind":"Ego","motion":"Unknown"},{"id":"x","kind":"Tram","region":"Left","motion":"Crossing"}]}"#;
        assert!(matches!(
            parse_observation(bad_kind),
            Err(SceneError::Schema(_))
        ));
        let no_motion = r#"{"t":0,"entities":[{"id":"ego","kind":"Ego"}]}"#;
        assert!(matches!(
            parse_observation(no_motion),
            Err(SceneError::Schema(_))
        ));
        let no_region = r#"{"t":0,"entities":[{"id":"ego","kind":"Ego","motion":"Unknown"},{"id":"x","kind":"Vehicle","motion":"Crossing"}]}"#;
        assert!(matches!(
            parse_observation(no_region),
            Err(SceneError::Schema(_))
        ));
    }

    #[test]
    fn enforces_signal_invariants() {
        let moving_light = r#"{"t":0,"entities":[{"id":"ego","kind":"Ego","motion":"Unknown"},{"id":"l","kind":"TrafficLight","region":"FrontCenter","motion":"Approaching","signal":"Red"}]}"#;
        assert!(matches!(
            parse_observation(moving_light),
            Err(SceneError::Schema(_))
        ));
        let signal_on_car = r#"{"t":0,"entities":[{"id":"ego","kind":"Ego","motion":"Unknown"},{"id":"c","kind":"Vehicle","region":"FrontCenter","motion":"Approaching","signal":"Red"}]}"#;
        assert!(matches!(
            parse_observation(signal_on_car),
            Err(SceneError::Schema(_))
        ));
    }

    #[test]
    fn trace_requires_increasing_steps() {
        let a = r#"{"t":1,"entities":[{"id":"ego","kind":"Ego","motion":"Unknown"}]}"#;
        let b = r#"{"t":1,"entities":[{"id":"ego","kind":"Ego","motion":"Unknown"}]}"#;
        assert_eq!(parse_trace(&format!("{a}\n\n")).unwrap().len(), 1);
        assert!(parse_trace(&format!("{a}\n{b}\n")).is_err());
    }

    #[test]
    fn argmax_all_zero_is_stop() {
        assert_eq!(
            argmax_action(&ActionDistribution::uniform(0.0)),
            Action::Stop
        );
    }

    #[test]
    fn argmax_unique_max() {
        let mut d = ActionDistribution::uniform(0.1);
        d.set(Action::Decelerate, 0.9);
        assert_eq!(argmax_action(&d), Action::Decelerate);
    }

    #[test]
    fn argmax_tie_follows_declaration_order() {
        let mut d = ActionDistribution::uniform(0.0);
        d.set(Action::Stop, 0.5);
        d.set(Action::Decelerate, 0.5);
        // Oracle: first action in declaration order attaining the maximum.
        let max = Action::ALL
            .iter()
            .map(|a| d.score(*a))
            .fold(f64::MIN, f64::max);
        let expected = *Action::ALL.iter().find(|a| d.score(**a) == max).unwrap();
        assert_eq!(expected, Action::Stop);
        assert_eq!(argmax_action(&d), expected);
    }

    #[test]
    fn argmax_within_restricts() {
        let mut d = ActionDistribution::uniform(0.0);
        d.set(Action::KeepSpeed, 1.0);
        d.set(Action::Decelerate, 0.5);
        let allowed: ActionSet = [Action::Stop, Action::Decelerate].into_iter().collect();
        assert_eq!(d.argmax_within(allowed), Some(Action::Decelerate));
        assert_eq!(d.argmax_within(ActionSet::EMPTY), None);
    }

    #[test]
    fn nan_scores_never_win() {
        let mut d = ActionDistribution::uniform(0.0);
        d.set(Action::Stop, f64::NAN);
        assert_eq!(argmax_action(&d), Action::Decelerate);
    }

    #[test]
    fn distribution_json_requires_all_actions() {
        let d = ActionDistribution::one_hot(Action::TurnLeft);
        let json = serde_json::to_string(&d).unwrap();
        let back: ActionDistribution = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        let partial = r#"{"Stop":1.0,"Decelerate":0.0}"#;
        assert!(serde_json::from_str::<ActionDistribution>(partial).is_err());
    }
}

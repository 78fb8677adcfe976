//! Decision policies standing in for the driving model: scripted reference
//! policies and an adapter for external processes speaking the line protocol.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Action, ActionDistribution, Observation};

pub const PROTOCOL_VERSION: &str = "1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("external policy did not answer within {0:?}")]
    Timeout(Duration),
    #[error("unsupported protocol version `{0}`")]
    VersionMismatch(String),
    #[error("failed to launch external policy: {0}")]
    Launch(String),
    #[error("external policy i/o failure: {0}")]
    Io(String),
    #[error("no reference action for step {0}")]
    UnknownStep(u64),
    #[error("invalid policy spec: {0}")]
    Spec(String),
}

/// Observation history (oldest first) plus an optional prompt suffix for the
/// newest frame's instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRequest {
    pub history: Vec<Observation>,
    pub prompt_suffix: Option<String>,
}

impl PolicyRequest {
    pub fn new(history: Vec<Observation>) -> Self {
        assert!(
            !history.is_empty(),
            "policy request needs at least one frame"
        );
        PolicyRequest {
            history,
            prompt_suffix: None,
        }
    }

    pub fn with_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.prompt_suffix = Some(prompt.into());
        self
    }

    pub fn newest(&self) -> &Observation {
        self.history.last().expect("non-empty history")
    }

    /// History with the prompt appended to the newest instruction.
    pub fn augmented_history(&self) -> Vec<Observation> {
        let mut history = self.history.clone();
        if let (Some(suffix), Some(newest)) = (&self.prompt_suffix, history.last_mut()) {
            newest.instruction = Some(match newest.instruction.take() {
                Some(text) if !text.is_empty() => format!("{text} {suffix}"),
                _ => suffix.clone(),
            });
        }
        history
    }
}

pub trait Policy: Send {
    fn decide(&mut self, request: &PolicyRequest) -> Result<ActionDistribution, PolicyError>;
}

/// Step-indexed script a scripted policy follows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedTrack {
    pub reference: HashMap<u64, Action>,
    pub hazard_windows: Vec<HazardWindow>,
    pub scenario_seed: u64,
}

/// Steps `onset..=collision` during which a blind policy keeps `nominal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HazardWindow {
    pub onset: u64,
    pub collision: u64,
    pub nominal: Action,
}

impl ScriptedTrack {
    fn reference_at(&self, t: u64) -> Result<Action, PolicyError> {
        self.reference
            .get(&t)
            .copied()
            .ok_or(PolicyError::UnknownStep(t))
    }

    fn hazard_at(&self, t: u64) -> Option<&HazardWindow> {
        self.hazard_windows
            .iter()
            .find(|h| h.onset <= t && t <= h.collision)
    }
}

/// Always emits the scenario's reference action.
pub struct OraclePolicy {
    track: ScriptedTrack,
}

impl OraclePolicy {
    pub fn new(track: ScriptedTrack) -> Self {
        OraclePolicy { track }
    }
}

impl Policy for OraclePolicy {
    fn decide(&mut self, request: &PolicyRequest) -> Result<ActionDistribution, PolicyError> {
        let reference = self.track.reference_at(request.newest().t)?;
        Ok(ActionDistribution::one_hot(reference))
    }
}

const BLIND_STREAM: u64 = 0;
const COMPLY_STREAM: u64 = 1;

/// Reference policy with two failure knobs: hazard blindness and imperfect
/// prompt compliance. Draws are keyed by (policy seed, scenario seed, step,
/// attempt), so replays are exact.
pub struct FaultyPolicy {
    track: ScriptedTrack,
    blind_rate: f64,
    prompt_compliance: f64,
    seed: u64,
    prompted_queries: HashMap<u64, u64>,
}

impl FaultyPolicy {
    pub fn new(track: ScriptedTrack, blind_rate: f64, prompt_compliance: f64, seed: u64) -> Self {
        FaultyPolicy {
            track,
            blind_rate,
            prompt_compliance,
            seed,
            prompted_queries: HashMap::new(),
        }
    }

    fn draw(&self, stream: u64, t: u64) -> f64 {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.track.scenario_seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(t) * 16);
        rng.gen::<f64>()
    }

    /// Whether the policy ignores the hazard at step `t`.
    pub fn is_blind_at(&self, t: u64) -> bool {
        self.track.hazard_at(t).is_some() && self.draw(BLIND_STREAM, t) < self.blind_rate
    }
}

impl Policy for FaultyPolicy {
    fn decide(&mut self, request: &PolicyRequest) -> Result<ActionDistribution, PolicyError> {
        let t = request.newest().t;
        let reference = self.track.reference_at(t)?;
        let mut chosen = match self.track.hazard_at(t) {
            Some(h) if self.is_blind_at(t) => h.nominal,
            _ => reference,
        };
        if request.prompt_suffix.is_some() {
            let attempt = self.prompted_queries.entry(t).or_insert(0);
            *attempt += 1;
            let attempt = *attempt;
            if self.draw(COMPLY_STREAM + attempt, t) < self.prompt_compliance {
                chosen = reference;
            }
        }
        let mut dist = ActionDistribution::uniform(0.0);
        if chosen != reference {
            dist.set(reference, 0.5);
        }
        dist.set(chosen, 1.0);
        Ok(dist)
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum WireRequest<'a> {
    Hello {
        version: &'a str,
    },
    Decide {
        history: &'a [Observation],
        #[serde(skip_serializing_if = "Option::is_none")]
        prompt_suffix: Option<&'a str>,
    },
    Shutdown,
}

#[derive(Deserialize)]
#[serde(tag = "type")]
enum WireReply {
    #[serde(rename = "hello")]
    Hello { version: String },
    #[serde(rename = "decision")]
    Decision { scores: ActionDistribution },
    #[serde(rename = "error")]
    Error { reason: String },
}

/// A child process speaking protocol v1 over its standard streams.
pub struct ExternalPolicy {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    version: String,
}

impl ExternalPolicy {
    /// Launches `command` through the shell and performs the hello exchange.
    pub fn launch(command: &str, timeout: Duration) -> Result<Self, PolicyError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PolicyError::Launch(e.to_string()))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut policy = ExternalPolicy {
            child,
            stdin,
            lines: rx,
            timeout,
            version: String::new(),
        };
        match policy.exchange(&WireRequest::Hello {
            version: PROTOCOL_VERSION,
        })? {
            WireReply::Hello { version } if version == PROTOCOL_VERSION => {
                policy.version = version;
                Ok(policy)
            }
            WireReply::Hello { version } => Err(PolicyError::VersionMismatch(version)),
            WireReply::Error { reason } => Err(PolicyError::Protocol(reason)),
            WireReply::Decision { .. } => Err(PolicyError::Protocol(
                "expected hello reply, got decision".into(),
            )),
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    fn send(&mut self, request: &WireRequest<'_>) -> Result<(), PolicyError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| PolicyError::Io("stdin closed".into()))?;
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| PolicyError::Io(e.to_string()))
    }

    fn exchange(&mut self, request: &WireRequest<'_>) -> Result<WireReply, PolicyError> {
        self.send(request)?;
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(PolicyError::Io(e.to_string())),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(PolicyError::Timeout(self.timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(PolicyError::Protocol(
                    "external policy closed its output".into(),
                ))
            }
        };
        serde_json::from_str(&line)
            .map_err(|e| PolicyError::Protocol(format!("malformed reply `{line}`: {e}")))
    }

    /// Sends shutdown and waits for the child to exit.
    pub fn shutdown(mut self) -> Result<(), PolicyError> {
        self.close()
    }

    fn close(&mut self) -> Result<(), PolicyError> {
        if self.stdin.is_none() {
            return Ok(());
        }
        let sent = self.send(&WireRequest::Shutdown);
        self.stdin = None;
        let deadline = std::time::Instant::now() + self.timeout;
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) if status.success() => return sent,
                Ok(Some(status)) => {
                    return Err(PolicyError::Protocol(format!(
                        "external policy exited with {status}"
                    )))
                }
                Ok(None) if std::time::Instant::now() >= deadline => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return Err(PolicyError::Timeout(self.timeout));
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(PolicyError::Io(e.to_string())),
            }
        }
    }
}

impl Policy for ExternalPolicy {
    fn decide(&mut self, request: &PolicyRequest) -> Result<ActionDistribution, PolicyError> {
        match self.exchange(&WireRequest::Decide {
            history: &request.history,
            prompt_suffix: request.prompt_suffix.as_deref(),
        })? {
            WireReply::Decision { scores } => Ok(scores),
            WireReply::Error { reason } => Err(PolicyError::Protocol(reason)),
            WireReply::Hello { .. } => Err(PolicyError::Protocol(
                "expected decision reply, got hello".into(),
            )),
        }
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        if self.stdin.is_some() && self.close().is_err() {
            let _ = self.child.kill();
        }
        let _ = self.child.try_wait();
    }
}

/// Launches `command`, negotiates the protocol, shuts the child down and
/// returns the agreed version.
pub fn external_handshake(command: &str) -> Result<String, PolicyError> {
    let policy = ExternalPolicy::launch(command, DEFAULT_TIMEOUT)?;
    let version = policy.version().to_string();
    policy.shutdown()?;
    Ok(version)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyVariant {
    Oracle,
    Faulty,
    External,
}

/// Which policy to run, in the `name:key=val,...` mini-syntax:
/// `oracle`, `faulty:blind=0.7,comply=0.9,seed=3`, `external:<shell command>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub variant: PolicyVariant,
    pub blind_rate: f64,
    pub prompt_compliance: f64,
    pub command: Option<String>,
    pub seed: u64,
}

impl PolicySpec {
    pub fn oracle() -> Self {
        PolicySpec {
            variant: PolicyVariant::Oracle,
            blind_rate: 0.0,
            prompt_compliance: 1.0,
            command: None,
            seed: 0,
        }
    }

    pub fn faulty(blind_rate: f64, prompt_compliance: f64, seed: u64) -> Self {
        PolicySpec {
            variant: PolicyVariant::Faulty,
            blind_rate,
            prompt_compliance,
            command: None,
            seed,
        }
    }

    pub fn external(command: impl Into<String>) -> Self {
        PolicySpec {
            variant: PolicyVariant::External,
            blind_rate: 0.0,
            prompt_compliance: 0.0,
            command: Some(command.into()),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (name, rate) in [
            ("blind", self.blind_rate),
            ("comply", self.prompt_compliance),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(PolicyError::Spec(format!(
                    "{name} rate {rate} outside [0, 1]"
                )));
            }
        }
        if self.variant == PolicyVariant::External
            && self.command.as_deref().is_none_or(|c| c.trim().is_empty())
        {
            return Err(PolicyError::Spec("external policy needs a command".into()));
        }
        Ok(())
    }

    pub fn instantiate(&self, track: ScriptedTrack) -> Result<Box<dyn Policy>, PolicyError> {
        self.validate()?;
        Ok(match self.variant {
            PolicyVariant::Oracle => Box::new(OraclePolicy::new(track)),
            PolicyVariant::Faulty => Box::new(FaultyPolicy::new(
                track,
                self.blind_rate,
                self.prompt_compliance,
                self.seed,
            )),
            PolicyVariant::External => Box::new(ExternalPolicy::launch(
                self.command.as_deref().unwrap_or_default(),
                DEFAULT_TIMEOUT,
            )?),
        })
    }
}

impl FromStr for PolicySpec {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n.trim(), Some(r)),
            None => (s.trim(), None),
        };
        let spec = match name {
            "oracle" => {
                let mut spec = PolicySpec::oracle();
                for (k, v) in key_values(rest)? {
                    match k {
                        "seed" => spec.seed = parse_num(k, v)?,
                        _ => return Err(PolicyError::Spec(format!("oracle takes no `{k}`"))),
                    }
                }
                spec
            }
            "faulty" => {
                let mut spec = PolicySpec::faulty(0.0, 1.0, 0);
                for (k, v) in key_values(rest)? {
                    match k {
                        "blind" | "blind_rate" => spec.blind_rate = parse_num(k, v)?,
                        "comply" | "prompt_compliance" => spec.prompt_compliance = parse_num(k, v)?,
                        "seed" => spec.seed = parse_num(k, v)?,
                        _ => return Err(PolicyError::Spec(format!("faulty takes no `{k}`"))),
                    }
                }
                spec
            }
            "external" => PolicySpec::external(rest.unwrap_or_default().trim()),
            other => return Err(PolicyError::Spec(format!("unknown policy `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn key_values(rest: Option<&str>) -> Result<Vec<(&str, &str)>, PolicyError> {
    let Some(rest) = rest.filter(|r| !r.trim().is_empty()) else {
        return Ok(Vec::new());
    };
    rest.split(',')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| PolicyError::Spec(format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, PolicyError> {
    value
        .parse()
        .map_err(|_| PolicyError::Spec(format!("invalid value `{value}` for `{key}`")))
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            PolicyVariant::Oracle => write!(f, "oracle:seed={}", self.seed),
            PolicyVariant::Faulty => write!(
                f,
                "faulty:blind={},comply={},seed={}",
                self.blind_rate, self.prompt_compliance, self.seed
            ),
            PolicyVariant::External => {
                write!(
                    f,
                    "external:{}",
                    self.command.as_deref().unwrap_or_default()
                )
            }
        }
    }
}

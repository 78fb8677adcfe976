//! Rule-following stub speaking the line-delimited policy protocol on stdio.
//!
//! Replies with Decelerate on top whenever the prompt suffix asks to stop or
//! decelerate, and KeepSpeed otherwise. Malformed input gets an error reply
//! and the loop continues.
//!
//! Flags for exercising the engine's error paths:
//! `--announce-version V` answers hello with version `V`;
//! `--stall-after N` stops answering after `N` decide requests.

use std::io::{self, BufRead, Write};

use guardad_core::policy::PROTOCOL_VERSION;
use guardad_core::scene::{Action, ActionDistribution, Observation};
use serde_json::{json, Value};

struct Options {
    version: String,
    stall_after: Option<usize>,
}

fn parse_args() -> Result<Options, String> {
    let mut opts = Options {
        version: PROTOCOL_VERSION.to_string(),
        stall_after: None,
    };
    let mut args = std::env::args().skip(1);
    while let Some(flag) = args.next() {
        let value = args.next().ok_or_else(|| format!("{flag} needs a value"))?;
        match flag.as_str() {
            "--announce-version" => opts.version = value,
            "--stall-after" => {
                opts.stall_after = Some(value.parse().map_err(|_| format!("bad count `{value}`"))?)
            }
            _ => return Err(format!("unknown flag `{flag}`")),
        }
    }
    Ok(opts)
}

fn wants_slowdown(prompt: &str) -> bool {
    let p = prompt.to_ascii_lowercase();
    p.contains("stop") || p.contains("decelerate")
}

fn decision(prompt: Option<&str>) -> Value {
    let mut dist = ActionDistribution::uniform(0.05);
    if prompt.is_some_and(wants_slowdown) {
        dist.set(Action::Decelerate, 0.9);
        dist.set(Action::Stop, 0.6);
    } else {
        dist.set(Action::KeepSpeed, 0.9);
    }
    json!({ "type": "decision", "scores": dist })
}

fn error(reason: impl Into<String>) -> Value {
    json!({ "type": "error", "reason": reason.into() })
}

fn main() {
    let opts = match parse_args() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("guardad-stub-policy: {e}");
            std::process::exit(1);
        }
    };
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    let mut greeted = false;
    let mut decided = 0usize;

    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Err(e) => error(format!("malformed json: {e}")),
            Ok(msg) => match msg.get("type").and_then(Value::as_str) {
                Some("hello") => {
                    greeted = true;
                    json!({ "type": "hello", "version": opts.version })
                }
                Some("shutdown") => break,
                Some("decide") if !greeted => error("decide before hello"),
                Some("decide") => {
                    let history = msg
                        .get("history")
                        .cloned()
                        .map(serde_json::from_value::<Vec<Observation>>);
                    match history {
                        Some(Ok(h)) if !h.is_empty() => {
                            decided += 1;
                            if opts.stall_after.is_some_and(|n| decided > n) {
                                continue;
                            }
                            decision(msg.get("prompt_suffix").and_then(Value::as_str))
                        }
                        Some(Ok(_)) => error("empty history"),
                        Some(Err(e)) => error(format!("bad history: {e}")),
                        None => error("missing history"),
                    }
                }
                Some(other) => error(format!("unknown message type `{other}`")),
                None => error("missing message type"),
            },
        };
        if writeln!(stdout, "{reply}")
            .and_then(|_| stdout.flush())
            .is_err()
        {
            break;
        }
    }
}

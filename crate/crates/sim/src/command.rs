//! Operator and script actions applied to a running simulation.

use serde::{Deserialize, Serialize};
use vmc_core::environment::SceneEvent;

/// One action on the running system. Scenario scripts and the command stream
/// share this vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    /// Plug `child`'s root into the leaf slot `parent` (`RPN1.1`).
    Attach { parent: String, child: String },
    /// Unplug whatever hangs from the leaf slot `parent`.
    Detach { parent: String },
    SceneEvent { event: SceneEvent },
    /// Stops a module process abruptly; its wires go idle.
    Kill { module: String },
    /// Boots a killed module again from its last snapshot.
    Restart { module: String },
    Pause,
    Resume,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Attach { .. } => "attach",
            Command::Detach { .. } => "detach",
            Command::SceneEvent { .. } => "scene_event",
            Command::Kill { .. } => "kill",
            Command::Restart { .. } => "restart",
            Command::Pause => "pause",
            Command::Resume => "resume",
        }
    }
}

/// Why a command was refused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct Rejection {
    pub code: String,
    pub message: String,
}

impl Rejection {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Rejection { code: code.into(), message: message.into() }
    }
}

/// Reply to one command on the command stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Rejection>,
}

impl Ack {
    pub fn from_result(id: Option<u64>, op: Option<&str>, result: Result<(), Rejection>) -> Self {
        let op = op.map(str::to_string);
        match result {
            Ok(()) => Ack { id, ok: true, op, error: None },
            Err(e) => Ack { id, ok: false, op, error: Some(e) },
        }
    }
}

/// A command line as sent on the wire: the command plus an optional id echoed in the ack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(flatten)]
    pub command: Command,
}

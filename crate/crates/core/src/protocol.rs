//! Client-facing wire protocol: newline-delimited JSON messages and a
//! conformance checker for server streams.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::LabelMap;
use crate::clock::ClockMode;
use crate::conversation::TurnId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SlotId {
    A,
    B,
}

impl SlotId {
    pub fn other(self) -> SlotId {
        match self {
            SlotId::A => SlotId::B,
            SlotId::B => SlotId::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            SlotId::A => 0,
            SlotId::B => 1,
        }
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlotId::A => "A",
            SlotId::B => "B",
        })
    }
}

/// Labelled time span of the client's audio stream, used to key VAD
/// segments when the session runs against the scripted backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpan {
    pub utterance: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockSessionConfig {
    #[serde(default)]
    pub labels: LabelMap,
    #[serde(default)]
    pub utterances: Vec<UtteranceSpan>,
}

/// Per-session settings a client may pass in `hello`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HelloConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<ClockMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSessionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        #[serde(default)]
        config: HelloConfig,
    },
    /// 16-bit little-endian mono PCM, base64 encoded.
    AudioChunk {
        pcm: String,
        sample_rate: u32,
    },
    TextQuery {
        text: String,
    },
    Bye,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Listening,
    Classifying,
    Generating,
    Suppressed,
    Interrupted,
    Swap,
}

/// Output channel hint: spoken queries expect speech (synthesized by the
/// client), typed queries expect text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputChannel {
    Speech,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    StateEvent {
        state: SessionState,
        /// Answer turn that starts (`generating`) or is frozen (`interrupted`).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        turn_id: Option<TurnId>,
        /// Slot holding the generator role after a `swap`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        generator: Option<SlotId>,
        /// How the client should present the answer that starts (`generating`).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel: Option<OutputChannel>,
    },
    AnswerToken {
        text: String,
        turn_id: TurnId,
    },
    AnswerDone {
        turn_id: TurnId,
    },
    Error {
        code: String,
        message: String,
    },
}

impl ServerMessage {
    pub fn state(state: SessionState) -> Self {
        ServerMessage::StateEvent {
            state,
            turn_id: None,
            generator: None,
            channel: None,
        }
    }

    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code: code.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StreamViolation {
    #[error("token for turn {got} while turn {open} is open")]
    Interleaved { open: TurnId, got: TurnId },
    #[error("token for closed turn {0}")]
    TokenAfterClose(TurnId),
    #[error("answer_done for closed turn {0}")]
    DoubleClose(TurnId),
    #[error("answer turn {got} not after {last}")]
    NonMonotone { last: TurnId, got: TurnId },
}

/// Checks that answer tokens of a turn arrive contiguously, from its first
/// token up to its `answer_done` or `interrupted` event, and that answer
/// turn ids only grow.
#[derive(Debug, Default)]
pub struct StreamChecker {
    open: Option<TurnId>,
    closed: BTreeSet<TurnId>,
    last_seen: Option<TurnId>,
}

impl StreamChecker {
    pub fn new() -> Self {
        Self::default()
    }

    fn enter(&mut self, turn_id: TurnId) -> Result<(), StreamViolation> {
        if self.closed.contains(&turn_id) {
            return Err(StreamViolation::TokenAfterClose(turn_id));
        }
        match self.last_seen {
            Some(last) if turn_id < last => {
                return Err(StreamViolation::NonMonotone { last, got: turn_id })
            }
            _ => self.last_seen = Some(turn_id),
        }
        Ok(())
    }

    fn close(&mut self, turn_id: TurnId) {
        self.closed.insert(turn_id);
        if self.open == Some(turn_id) {
            self.open = None;
        }
    }

    pub fn observe(&mut self, msg: &ServerMessage) -> Result<(), StreamViolation> {
        match msg {
            ServerMessage::AnswerToken { turn_id, .. } => {
                if let Some(open) = self.open {
                    if open != *turn_id {
                        return Err(StreamViolation::Interleaved {
                            open,
                            got: *turn_id,
                        });
                    }
                    return Ok(());
                }
                self.enter(*turn_id)?;
                self.open = Some(*turn_id);
            }
            ServerMessage::AnswerDone { turn_id } => {
                if self.closed.contains(turn_id) {
                    return Err(StreamViolation::DoubleClose(*turn_id));
                }
                self.enter(*turn_id)?;
                self.close(*turn_id);
            }
            ServerMessage::StateEvent {
                state: SessionState::Interrupted,
                turn_id: Some(turn_id),
                ..
            } => self.close(*turn_id),
            _ => {}
        }
        Ok(())
    }

    pub fn check_stream<'a>(
        messages: impl IntoIterator<Item = &'a ServerMessage>,
    ) -> Result<(), StreamViolation> {
        let mut checker = Self::new();
        messages.into_iter().try_for_each(|m| checker.observe(m))
    }
}

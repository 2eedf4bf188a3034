//! Inference backends: the classify-then-generate contract, a deterministic
//! scripted mock, a remote adapter and a validating wrapper.
//!
//! Backends are polled. The session asks each backend for its next deadline,
//! advances time, and pulls one event at a time. This keeps virtual-clock
//! runs deterministic and lets the same code drive a wall-clock session.

mod checker;
mod mock;
mod remote;
pub mod wire;

pub use checker::{EventOrderChecker, OrderViolation, Validated};
pub use mock::{answer_pieces, LabelMap, MockBackend, MockLabel, WILDCARD_LABEL};
pub use remote::RemoteBackend;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::SimTime;
use crate::conversation::{ConversationHistory, Modality, StateToken};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub String);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RequestId {
    fn from(s: &str) -> Self {
        RequestId(s.to_string())
    }
}

/// Shared cancellation flag. Setting it more than once has no further effect.
#[derive(Debug, Clone, Default)]
pub struct CancelHandle(Arc<AtomicBool>);

impl CancelHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// The user input a request asks the backend to classify and answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    /// Key identifying the utterance (label lookup for scripted backends).
    pub utterance: String,
    pub content: Vec<String>,
    pub modalities: BTreeSet<Modality>,
    /// Set when the input type is already known (typed text, or audio already
    /// classified by an earlier request); the backend must echo it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_token: Option<StateToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<AudioAttachment>,
}

/// Raw utterance audio forwarded to backends that need it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioAttachment {
    pub sample_rate: u32,
    /// 16-bit little-endian mono PCM, base64 encoded.
    pub pcm: String,
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub request_id: RequestId,
    pub history: ConversationHistory,
    pub query: Query,
    pub cancel_handle: CancelHandle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendEvent {
    Classified(StateToken),
    Token(String),
    Done,
    Cancelled,
    Failed(String),
}

impl BackendEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            BackendEvent::Done | BackendEvent::Cancelled | BackendEvent::Failed(_)
        )
    }
}

/// A model slot. At most one request is live at a time; a request that was
/// cancelled must deliver its terminal before any event of the next request.
pub trait Backend: Send {
    fn submit(&mut self, request: GenerationRequest, now: SimTime);

    /// Earliest time at which `poll` may yield an event, if anything is pending.
    fn next_deadline(&self) -> Option<SimTime>;

    /// Returns at most one event that is due at `now`.
    fn poll(&mut self, now: SimTime) -> Option<(RequestId, BackendEvent)>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn submit(&mut self, request: GenerationRequest, now: SimTime) {
        (**self).submit(request, now)
    }

    fn next_deadline(&self) -> Option<SimTime> {
        (**self).next_deadline()
    }

    fn poll(&mut self, now: SimTime) -> Option<(RequestId, BackendEvent)> {
        (**self).poll(now)
    }
}

//! Newline-delimited JSON frames exchanged with a remote model server.
//!
//! The server answers requests strictly in submission order, so its frames
//! carry no request id.

use serde::{Deserialize, Serialize};

use super::{BackendEvent, Query, RequestId};
use crate::conversation::StateToken;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientFrame {
    Submit {
        request_id: RequestId,
        /// Rendered conversation history.
        prompt: String,
        query: Query,
    },
    Cancel {
        request_id: RequestId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    StateToken {
        value: StateToken,
    },
    Token {
        text: String,
    },
    Done,
    Cancelled,
    Failed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl From<ServerFrame> for BackendEvent {
    fn from(frame: ServerFrame) -> Self {
        match frame {
            ServerFrame::StateToken { value } => BackendEvent::Classified(value),
            ServerFrame::Token { text } => BackendEvent::Token(text),
            ServerFrame::Done => BackendEvent::Done,
            ServerFrame::Cancelled => BackendEvent::Cancelled,
            ServerFrame::Failed { reason } => {
                BackendEvent::Failed(reason.unwrap_or_else(|| "remote".into()))
            }
        }
    }
}

impl From<&BackendEvent> for ServerFrame {
    fn from(event: &BackendEvent) -> Self {
        match event {
            BackendEvent::Classified(value) => ServerFrame::StateToken { value: *value },
            BackendEvent::Token(text) => ServerFrame::Token { text: text.clone() },
            BackendEvent::Done => ServerFrame::Done,
            BackendEvent::Cancelled => ServerFrame::Cancelled,
            BackendEvent::Failed(reason) => ServerFrame::Failed {
                reason: Some(reason.clone()),
            },
        }
    }
}

//! Conversation domain types: state tokens, turns, history and system prompts.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker appended to the rendering of an answer that was cut off by a newer query.
pub const INTERRUPTED_MARKER: &str = "[interrupted]";

pub type TurnId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConversationError {
    #[error("unknown state token {0:?}")]
    UnknownStateToken(String),
    #[error("turn id {got} is not greater than the last turn id {last}")]
    NonMonotoneTurnId { last: TurnId, got: TurnId },
    #[error("malformed turn {turn_id}: {reason}")]
    MalformedTurn {
        turn_id: TurnId,
        reason: &'static str,
    },
    #[error("image and video cannot both be present in one turn")]
    ConflictingVisualModalities,
    #[error("modality set is empty")]
    EmptyModalities,
    #[error("history invariant violated: {0}")]
    Invariant(String),
}

/// Classification prefix emitted by the model for every user input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateToken {
    /// `<1>`: spoken query that expects an answer.
    QueryAudio,
    /// `<2>`: audio that is not addressed to the assistant; acts as an end-of-sequence.
    NoisyAudio,
    /// `<3>`: typed query.
    QueryText,
}

impl StateToken {
    pub const ALL: [StateToken; 3] = [
        StateToken::QueryAudio,
        StateToken::NoisyAudio,
        StateToken::QueryText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StateToken::QueryAudio => "<1>",
            StateToken::NoisyAudio => "<2>",
            StateToken::QueryText => "<3>",
        }
    }

    /// Whether this token calls for an answer.
    pub fn is_query(self) -> bool {
        !matches!(self, StateToken::NoisyAudio)
    }
}

impl fmt::Display for StateToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StateToken {
    type Err = ConversationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "<1>" => Ok(StateToken::QueryAudio),
            "<2>" => Ok(StateToken::NoisyAudio),
            "<3>" => Ok(StateToken::QueryText),
            other => Err(ConversationError::UnknownStateToken(other.to_string())),
        }
    }
}

impl Serialize for StateToken {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StateToken {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Video,
    Audio,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_id: TurnId,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_token: Option<StateToken>,
    /// Opaque token pieces as produced by a backend; rendering concatenates them.
    pub content: Vec<String>,
    pub modalities: BTreeSet<Modality>,
    pub completed: bool,
    /// Seconds since session start.
    pub wall_time: f64,
}

impl Turn {
    pub fn user(
        turn_id: TurnId,
        state_token: StateToken,
        content: Vec<String>,
        modalities: BTreeSet<Modality>,
        wall_time: f64,
    ) -> Self {
        Self {
            turn_id,
            source: Source::User,
            state_token: Some(state_token),
            content,
            modalities,
            completed: true,
            wall_time,
        }
    }

    pub fn assistant(
        turn_id: TurnId,
        content: Vec<String>,
        completed: bool,
        wall_time: f64,
    ) -> Self {
        Self {
            turn_id,
            source: Source::Assistant,
            state_token: None,
            content,
            modalities: BTreeSet::from([Modality::Text]),
            completed,
            wall_time,
        }
    }

    pub fn text(&self) -> String {
        self.content.concat()
    }

    pub fn validate(&self) -> Result<(), ConversationError> {
        let malformed = |reason| ConversationError::MalformedTurn {
            turn_id: self.turn_id,
            reason,
        };
        match self.source {
            Source::User if self.state_token.is_none() => {
                return Err(malformed("user turn without state token"))
            }
            Source::User if !self.completed => {
                return Err(malformed("user turn marked incomplete"))
            }
            Source::Assistant if self.state_token.is_some() => {
                return Err(malformed("assistant turn with state token"))
            }
            _ => {}
        }
        if self.modalities.contains(&Modality::Image) && self.modalities.contains(&Modality::Video)
        {
            return Err(ConversationError::ConflictingVisualModalities);
        }
        Ok(())
    }
}

/// Ordered turns plus the system prompt they are rendered under.
///
/// Values are treated as immutable: every operation returns a new history.
/// At most one turn may be incomplete, and only the latest assistant turn.
/// When a newer answer lands, an older incomplete answer is sealed: it is
/// marked completed and its content keeps an explicit `[interrupted]` piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationHistory {
    pub turns: Vec<Turn>,
    pub system_prompt: String,
}

impl ConversationHistory {
    pub fn new(system_prompt: impl Into<String>) -> Self {
        Self {
            turns: Vec::new(),
            system_prompt: system_prompt.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn last_turn_id(&self) -> Option<TurnId> {
        self.turns.last().map(|t| t.turn_id)
    }

    pub fn incomplete_turn(&self) -> Option<&Turn> {
        self.turns.iter().find(|t| !t.completed)
    }

    pub fn append_turn(&self, turn: Turn) -> Result<Self, ConversationError> {
        turn.validate()?;
        if let Some(last) = self.last_turn_id() {
            if turn.turn_id <= last {
                return Err(ConversationError::NonMonotoneTurnId {
                    last,
                    got: turn.turn_id,
                });
            }
        }
        let mut next = self.clone();
        if turn.source == Source::Assistant {
            next.seal_incomplete();
        }
        next.turns.push(turn);
        Ok(next)
    }

    /// Records the partial output of an interrupted answer as an incomplete
    /// assistant turn. An empty partial leaves the history unchanged.
    pub fn consolidate(
        &self,
        turn_id: TurnId,
        interrupted_partial: &[String],
        wall_time: f64,
    ) -> Result<Self, ConversationError> {
        if interrupted_partial.is_empty() {
            return Ok(self.clone());
        }
        let turn = Turn::assistant(turn_id, interrupted_partial.to_vec(), false, wall_time);
        self.append_turn(turn)
    }

    fn seal_incomplete(&mut self) {
        for turn in self.turns.iter_mut().filter(|t| !t.completed) {
            turn.content.push(format!(" {INTERRUPTED_MARKER}"));
            turn.completed = true;
        }
    }

    /// Renders the history as a plain-text prompt for a backend.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("System: ");
        out.push_str(&self.system_prompt);
        out.push('\n');
        for turn in &self.turns {
            match (turn.source, turn.state_token) {
                (Source::User, Some(token)) => {
                    out.push_str("User ");
                    out.push_str(token.as_str());
                    out.push_str(": ");
                }
                _ => out.push_str("Assistant: "),
            }
            out.push_str(&turn.text());
            if !turn.completed {
                out.push(' ');
                out.push_str(INTERRUPTED_MARKER);
            }
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConversationError> {
        let mut last: Option<TurnId> = None;
        for turn in &self.turns {
            turn.validate()?;
            if let Some(prev) = last {
                if turn.turn_id <= prev {
                    return Err(ConversationError::NonMonotoneTurnId {
                        last: prev,
                        got: turn.turn_id,
                    });
                }
            }
            last = Some(turn.turn_id);
        }
        let incomplete: Vec<_> = self.turns.iter().filter(|t| !t.completed).collect();
        if incomplete.len() > 1 {
            return Err(ConversationError::Invariant(format!(
                "{} incomplete turns",
                incomplete.len()
            )));
        }
        if let Some(turn) = incomplete.first() {
            let latest_assistant = self
                .turns
                .iter()
                .rev()
                .find(|t| t.source == Source::Assistant)
                .map(|t| t.turn_id);
            if latest_assistant != Some(turn.turn_id) {
                return Err(ConversationError::Invariant(format!(
                    "incomplete turn {} is not the latest assistant turn",
                    turn.turn_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    ImageData,
    VideoData,
    TextData,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    pub modality_key: PromptKind,
    pub body: &'static str,
}

const IMAGE_PROMPT: &str = "You are an AI robot and your name is VITA.\n\
You are a multimodal large language model developed by the open-source community. Your aim is to be helpful, honest, and harmless.\n\
You support the ability to communicate fluently and answer user questions in multiple languages of the user's choice.\n\
If the user corrects the wrong answer you generated, you will apologize and discuss the correct answer with the user.\n\
You must answer the question strictly according to the content of the image given by the user, and it is strictly forbidden to answer the question without the content of the image. Please note that you are seeing the image, not the video.";

// "You aim" (not "Your aim") is how the video prompt reads in the original table.
const VIDEO_PROMPT: &str = "You are an AI robot and your name is VITA.\n\
You are a multimodal large language model developed by the open-source community. You aim to be helpful, honest, and harmless.\n\
You support the ability to communicate fluently and answer user questions in multiple languages of the user's choice.\n\
If the user corrects the wrong answer you generated, you will apologize and discuss the correct answer with the user.\n\
You must answer the question strictly according to the content of the video given by the user, and it is strictly forbidden to answer the question without the content of the video. Please note that you are seeing the video, not the image.";

const TEXT_PROMPT: &str = "You are an AI robot and your name is VITA.\n\
You are a multimodal large language model developed by the open-source community. Your aim is to be helpful, honest, and harmless.\n\
You support the ability to communicate fluently and answer user questions in multiple languages of the user's choice.\n\
If the user corrects the wrong answer you generated, you will apologize and discuss the correct answer with the user.";

impl PromptTemplate {
    pub fn for_kind(kind: PromptKind) -> Self {
        let body = match kind {
            PromptKind::ImageData => IMAGE_PROMPT,
            PromptKind::VideoData => VIDEO_PROMPT,
            PromptKind::TextData => TEXT_PROMPT,
        };
        Self {
            modality_key: kind,
            body,
        }
    }
}

/// Picks the system prompt for a query. Only Image/Video membership matters.
pub fn select_system_prompt(
    modalities: &BTreeSet<Modality>,
) -> Result<PromptTemplate, ConversationError> {
    if modalities.is_empty() {
        return Err(ConversationError::EmptyModalities);
    }
    let kind = match (
        modalities.contains(&Modality::Image),
        modalities.contains(&Modality::Video),
    ) {
        (true, true) => return Err(ConversationError::ConflictingVisualModalities),
        (true, false) => PromptKind::ImageData,
        (false, true) => PromptKind::VideoData,
        (false, false) => PromptKind::TextData,
    };
    Ok(PromptTemplate::for_kind(kind))
}

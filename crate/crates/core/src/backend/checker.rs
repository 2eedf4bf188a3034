use std::collections::HashMap;

use thiserror::Error;

use super::{Backend, BackendEvent, GenerationRequest, RequestId};
use crate::clock::SimTime;
use crate::conversation::StateToken;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum OrderViolation {
    #[error("token before state token")]
    TokenBeforeStateToken,
    #[error("done before state token")]
    DoneBeforeStateToken,
    #[error("duplicate state token")]
    DuplicateStateToken,
    #[error("token after noise verdict")]
    TokenAfterNoise,
    #[error("event after terminal")]
    EventAfterTerminal,
    #[error("double terminal")]
    DoubleTerminal,
    #[error("stream ended without terminal")]
    MissingTerminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Submitted,
    Classified(StateToken),
    Terminated,
}

/// Tracks per-request event order: one state token first, then tokens, then
/// exactly one terminal. `Cancelled` and `Failed` may also end a request that
/// was never classified.
#[derive(Debug, Default)]
pub struct EventOrderChecker {
    stages: HashMap<RequestId, Stage>,
}

impl EventOrderChecker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, id: &RequestId, event: &BackendEvent) -> Result<(), OrderViolation> {
        let stage = self.stages.entry(id.clone()).or_insert(Stage::Submitted);
        let next = match (*stage, event) {
            (Stage::Terminated, e) if e.is_terminal() => Err(OrderViolation::DoubleTerminal),
            (Stage::Terminated, _) => Err(OrderViolation::EventAfterTerminal),
            (Stage::Submitted, BackendEvent::Classified(t)) => Ok(Stage::Classified(*t)),
            (Stage::Classified(_), BackendEvent::Classified(_)) => {
                Err(OrderViolation::DuplicateStateToken)
            }
            (Stage::Submitted, BackendEvent::Token(_)) => {
                Err(OrderViolation::TokenBeforeStateToken)
            }
            (Stage::Classified(StateToken::NoisyAudio), BackendEvent::Token(_)) => {
                Err(OrderViolation::TokenAfterNoise)
            }
            (Stage::Classified(t), BackendEvent::Token(_)) => Ok(Stage::Classified(t)),
            (Stage::Submitted, BackendEvent::Done) => Err(OrderViolation::DoneBeforeStateToken),
            (_, BackendEvent::Done | BackendEvent::Cancelled | BackendEvent::Failed(_)) => {
                Ok(Stage::Terminated)
            }
        };
        match next {
            Ok(s) => {
                *stage = s;
                Ok(())
            }
            Err(v) => {
                *stage = Stage::Terminated;
                Err(v)
            }
        }
    }

    pub fn is_terminated(&self, id: &RequestId) -> bool {
        self.stages.get(id) == Some(&Stage::Terminated)
    }

    /// Checks a complete single-request stream.
    pub fn check_stream(events: &[BackendEvent]) -> Result<(), OrderViolation> {
        let mut checker = Self::new();
        let id = RequestId::from("stream");
        for event in events {
            checker.observe(&id, event)?;
        }
        if checker.is_terminated(&id) {
            Ok(())
        } else {
            Err(OrderViolation::MissingTerminal)
        }
    }
}

/// Runs a backend through the order checker. A violating request is ended
/// with `Failed("protocol: ...")` and its later events are dropped, so every
/// request observed through this wrapper has exactly one terminal.
pub struct Validated<B> {
    inner: B,
    checker: EventOrderChecker,
    violations: u64,
}

impl<B: Backend> Validated<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            checker: EventOrderChecker::new(),
            violations: 0,
        }
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for Validated<B> {
    fn submit(&mut self, request: GenerationRequest, now: SimTime) {
        self.inner.submit(request, now)
    }

    fn next_deadline(&self) -> Option<SimTime> {
        self.inner.next_deadline()
    }

    fn poll(&mut self, now: SimTime) -> Option<(RequestId, BackendEvent)> {
        loop {
            let (id, event) = self.inner.poll(now)?;
            let already_done = self.checker.is_terminated(&id);
            match self.checker.observe(&id, &event) {
                Ok(()) => return Some((id, event)),
                Err(violation) => {
                    self.violations += 1;
                    tracing::warn!(request = %id, %violation, "backend protocol violation");
                    if !already_done {
                        return Some((id, BackendEvent::Failed(format!("protocol: {violation}"))));
                    }
                }
            }
        }
    }
}

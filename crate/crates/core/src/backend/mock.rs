use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendEvent, CancelHandle, GenerationRequest, RequestId};
use crate::clock::SimTime;
use crate::conversation::StateToken;

/// Label used for any utterance without its own entry.
pub const WILDCARD_LABEL: &str = "*";

fn default_rate() -> f64 {
    10.0
}

/// Scripted outcome for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockLabel {
    pub state_token: StateToken,
    #[serde(default)]
    pub answer: String,
    #[serde(default = "default_rate")]
    pub tokens_per_second: f64,
}

impl MockLabel {
    pub fn query(answer: impl Into<String>, tokens_per_second: f64) -> Self {
        Self {
            state_token: StateToken::QueryAudio,
            answer: answer.into(),
            tokens_per_second,
        }
    }

    pub fn noise() -> Self {
        Self {
            state_token: StateToken::NoisyAudio,
            answer: String::new(),
            tokens_per_second: default_rate(),
        }
    }
}

pub type LabelMap = BTreeMap<String, MockLabel>;

/// Splits an answer into whitespace-delimited pieces, keeping the separating
/// space on every piece after the first so that concatenation restores it.
pub fn answer_pieces(answer: &str) -> Vec<String> {
    answer
        .split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            if i == 0 {
                w.to_string()
            } else {
                format!(" {w}")
            }
        })
        .collect()
}

struct Script {
    request_id: RequestId,
    cancel: CancelHandle,
    steps: VecDeque<(SimTime, BackendEvent)>,
}

/// Deterministic stand-in for a trained model.
///
/// The verdict comes from the label map (or the request's known state token),
/// delivered `classify_latency` after submission. Answer pieces follow at the
/// label's token rate and `Done` lands with the last piece. A cancelled
/// request ends with `Cancelled` at its next scheduled step, so at most one
/// token interval passes between the cancel signal and the terminal.
pub struct MockBackend {
    labels: Arc<LabelMap>,
    classify_latency: Duration,
    scripts: VecDeque<Script>,
}

impl MockBackend {
    pub fn new(labels: Arc<LabelMap>, classify_latency: Duration) -> Self {
        Self {
            labels,
            classify_latency,
            scripts: VecDeque::new(),
        }
    }

    fn label_for(&self, key: &str) -> Option<&MockLabel> {
        self.labels
            .get(key)
            .or_else(|| self.labels.get(WILDCARD_LABEL))
    }

    fn script(
        &self,
        request: &GenerationRequest,
        now: SimTime,
    ) -> VecDeque<(SimTime, BackendEvent)> {
        let mut steps = VecDeque::new();
        let Some(label) = self.label_for(&request.query.utterance) else {
            steps.push_back((now, BackendEvent::Failed("unlabeled".into())));
            return steps;
        };
        let (verdict, start) = match request.query.state_token {
            Some(known) => (known, now),
            None => (label.state_token, now + self.classify_latency),
        };
        steps.push_back((start, BackendEvent::Classified(verdict)));
        if verdict == StateToken::NoisyAudio {
            steps.push_back((start, BackendEvent::Done));
            return steps;
        }
        let interval_us = if label.tokens_per_second > 0.0 {
            (1e6 / label.tokens_per_second).round() as u64
        } else {
            0
        };
        let mut at = start;
        for piece in answer_pieces(&label.answer) {
            at = at + Duration::from_micros(interval_us);
            steps.push_back((at, BackendEvent::Token(piece)));
        }
        steps.push_back((at, BackendEvent::Done));
        steps
    }
}

impl Backend for MockBackend {
    fn submit(&mut self, request: GenerationRequest, now: SimTime) {
        let steps = self.script(&request, now);
        self.scripts.push_back(Script {
            request_id: request.request_id,
            cancel: request.cancel_handle,
            steps,
        });
    }

    fn next_deadline(&self) -> Option<SimTime> {
        self.scripts
            .front()
            .and_then(|s| s.steps.front())
            .map(|(t, _)| *t)
    }

    fn poll(&mut self, now: SimTime) -> Option<(RequestId, BackendEvent)> {
        let script = self.scripts.front_mut()?;
        let (due, _) = script.steps.front()?;
        if *due > now {
            return None;
        }
        let event = if script.cancel.is_cancelled() {
            BackendEvent::Cancelled
        } else {
            script.steps.pop_front().expect("peeked").1
        };
        let id = script.request_id.clone();
        if event.is_terminal() {
            self.scripts.pop_front();
        }
        Some((id, event))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{EventOrderChecker, Query};
    use crate::conversation::{ConversationHistory, Modality};
    use std::collections::BTreeSet;

    fn labels() -> Arc<LabelMap> {
        Arc::new(LabelMap::from([
            ("u1".to_string(), MockLabel::query("A B C", 10.0)),
            ("u2".to_string(), MockLabel::noise()),
            ("hi".to_string(), MockLabel::query("hi", 10.0)),
            (
                "long".to_string(),
                MockLabel::query("1 2 3 4 5 6 7 8 9 10", 10.0),
            ),
        ]))
    }

    fn request(id: &str, utterance: &str) -> GenerationRequest {
        GenerationRequest {
            request_id: RequestId::from(id),
            history: ConversationHistory::new("sys"),
            query: Query {
                utterance: utterance.into(),
                content: vec![],
                modalities: BTreeSet::from([Modality::Audio]),
                state_token: None,
                audio: None,
            },
            cancel_handle: CancelHandle::new(),
        }
    }

    fn drain(backend: &mut MockBackend) -> Vec<(SimTime, BackendEvent)> {
        let mut out = Vec::new();
        while let Some(t) = backend.next_deadline() {
            let (_, ev) = backend.poll(t).expect("due event");
            out.push((t, ev));
        }
        out
    }

    #[test]
    fn piece_splitting() {
        assert_eq!(answer_pieces("A B  C"), vec!["A", " B", " C"]);
        assert!(answer_pieces("   ").is_empty());
    }

    #[test]
    fn scripted_answer_timing() {
        let mut backend = MockBackend::new(labels(), Duration::ZERO);
        backend.submit(request("r1", "u1"), SimTime::ZERO);
        let events = drain(&mut backend);
        let ms = |t: SimTime| t.as_micros() / 1000;
        assert_eq!(
            events[0],
            (
                SimTime::ZERO,
                BackendEvent::Classified(StateToken::QueryAudio)
            )
        );
        assert_eq!(
            events[1..4]
                .iter()
                .map(|(t, e)| (ms(*t), e.clone()))
                .collect::<Vec<_>>(),
            vec![
                (100, BackendEvent::Token("A".into())),
                (200, BackendEvent::Token(" B".into())),
                (300, BackendEvent::Token(" C".into())),
            ]
        );
        assert_eq!(events[4].1, BackendEvent::Done);
        let stream: Vec<_> = events.into_iter().map(|(_, e)| e).collect();
        EventOrderChecker::check_stream(&stream).unwrap();
    }

    #[test]
    fn noise_terminates_immediately() {
        let mut backend = MockBackend::new(labels(), Duration::from_millis(50));
        backend.submit(request("r1", "u2"), SimTime::ZERO);
        let events: Vec<_> = drain(&mut backend).into_iter().map(|(_, e)| e).collect();
        assert_eq!(
            events,
            vec![
                BackendEvent::Classified(StateToken::NoisyAudio),
                BackendEvent::Done
            ]
        );
    }

    #[test]
    fn single_piece_answer() {
        let mut backend = MockBackend::new(labels(), Duration::ZERO);
        backend.submit(request("r1", "hi"), SimTime::ZERO);
        let events: Vec<_> = drain(&mut backend).into_iter().map(|(_, e)| e).collect();
        assert_eq!(
            events,
            vec![
                BackendEvent::Classified(StateToken::QueryAudio),
                BackendEvent::Token("hi".into()),
                BackendEvent::Done
            ]
        );
    }

    #[test]
    fn cancel_after_third_token() {
        let mut backend = MockBackend::new(labels(), Duration::ZERO);
        let req = request("r1", "long");
        let cancel = req.cancel_handle.clone();
        backend.submit(req, SimTime::ZERO);
        let mut tokens = 0;
        let mut events = Vec::new();
        while let Some(t) = backend.next_deadline() {
            let (_, ev) = backend.poll(t).unwrap();
            if matches!(ev, BackendEvent::Token(_)) {
                tokens += 1;
                if tokens == 3 {
                    cancel.cancel();
                    cancel.cancel();
                }
            }
            events.push((t, ev));
        }
        let token_count = events
            .iter()
            .filter(|(_, e)| matches!(e, BackendEvent::Token(_)))
            .count();
        assert_eq!(token_count, 3);
        let (t, last) = events.last().unwrap();
        assert_eq!(*last, BackendEvent::Cancelled);
        // terminal lands one token interval after the third token
        assert_eq!(t.as_micros(), 400_000);
        assert_eq!(events.iter().filter(|(_, e)| e.is_terminal()).count(), 1);
    }

    #[test]
    fn unlabeled_fails() {
        let mut backend = MockBackend::new(labels(), Duration::ZERO);
        backend.submit(request("r1", "nope"), SimTime::ZERO);
        let events: Vec<_> = drain(&mut backend).into_iter().map(|(_, e)| e).collect();
        assert_eq!(events, vec![BackendEvent::Failed("unlabeled".into())]);
    }

    #[test]
    fn known_state_token_is_echoed() {
        let mut backend = MockBackend::new(labels(), Duration::from_millis(80));
        let mut req = request("r1", "u1");
        req.query.state_token = Some(StateToken::QueryText);
        backend.submit(req, SimTime::from_micros(5));
        let events = drain(&mut backend);
        assert_eq!(
            events[0],
            (
                SimTime::from_micros(5),
                BackendEvent::Classified(StateToken::QueryText)
            )
        );
    }

    #[test]
    fn replay_equality() {
        let run = || {
            let mut backend = MockBackend::new(labels(), Duration::from_millis(30));
            backend.submit(request("r1", "u1"), SimTime::from_micros(1000));
            let events = drain(&mut backend);
            serde_json::to_string(&events).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cancelled_request_finishes_before_next() {
        let mut backend = MockBackend::new(labels(), Duration::ZERO);
        let first = request("r1", "long");
        let cancel = first.cancel_handle.clone();
        backend.submit(first, SimTime::ZERO);
        let _ = backend.poll(SimTime::ZERO); // classified
        cancel.cancel();
        backend.submit(request("r2", "hi"), SimTime::ZERO);
        let ids: Vec<_> = std::iter::from_fn(|| {
            let t = backend.next_deadline()?;
            backend.poll(t)
        })
        .collect();
        assert_eq!(ids[0], (RequestId::from("r1"), BackendEvent::Cancelled));
        assert!(ids[1..].iter().all(|(id, _)| id.0 == "r2"));
    }
}

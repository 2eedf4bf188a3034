//! The two-slot duplex scheduler.
//!
//! A pure state machine: it consumes [`SchedulerEvent`]s in order and returns
//! the backend submissions and client notifications each one causes. Every
//! transition produces a [`TraceRecord`].
//!
//! Incoming utterances are classified on the Monitor slot while the Generator
//! keeps streaming. Only a query verdict disturbs the running answer: the
//! Generator is cancelled, its partial output is folded into the history and
//! the slots swap roles. Noise is dropped without a client-visible gap.

use std::collections::VecDeque;
use std::sync::Arc;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    AudioAttachment, BackendEvent, CancelHandle, GenerationRequest, Query, RequestId,
};
use crate::clock::SimTime;
use crate::conversation::{
    select_system_prompt, ConversationHistory, Modality, Source, StateToken, Turn, TurnId,
};
use crate::pcm::encode_s16le;
use crate::protocol::{OutputChannel, ServerMessage, SessionState, SlotId};
use crate::vad::AudioSegment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Pending inputs held while a classification is outstanding. Overflow
    /// drops the oldest.
    pub queue_cap: usize,
    /// Forward utterance PCM with each request (needed by real model servers).
    pub attach_audio: bool,
    pub sample_rate: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            queue_cap: 4,
            attach_audio: false,
            sample_rate: 16_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotRole {
    Generator,
    Monitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    AwaitingClassification,
    Generating,
    /// Waiting for a fresh request rendered from the consolidated history.
    Consolidating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotState {
    pub slot_id: SlotId,
    pub role: SlotRole,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_request: Option<RequestId>,
}

#[derive(Debug, Clone)]
pub enum SchedulerEvent {
    SpeechStarted,
    UtteranceReady(AudioSegment),
    TextQuery(String),
    Backend {
        slot: SlotId,
        request_id: RequestId,
        event: BackendEvent,
    },
    ClientDisconnect,
}

/// Trace-friendly view of an event (audio samples omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventSummary {
    SpeechStarted,
    Utterance {
        segment_id: u64,
        utterance: String,
        start: f64,
        end: f64,
    },
    Text {
        text: String,
    },
    Backend {
        slot: SlotId,
        request_id: RequestId,
        event: BackendEvent,
    },
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    Enqueue {
        item: String,
    },
    Drop {
        item: String,
    },
    Submit {
        slot: SlotId,
        request_id: RequestId,
        utterance: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state_token: Option<StateToken>,
    },
    Cancel {
        slot: SlotId,
        request_id: RequestId,
    },
    Consolidate {
        turn_id: TurnId,
        pieces: usize,
    },
    Swap {
        generator: SlotId,
    },
    Commit {
        turn_id: TurnId,
        source: Source,
    },
    Drained {
        slot: SlotId,
        request_id: RequestId,
    },
    Ignored {
        reason: String,
    },
    Fault {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    /// Microseconds since session start.
    pub time: u64,
    pub event: EventSummary,
    pub slots_before: [SlotState; 2],
    pub slots_after: [SlotState; 2],
    #[serde(default)]
    pub notifications: Vec<ServerMessage>,
    #[serde(default)]
    pub effects: Vec<Effect>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerStats {
    /// Answers started (each query that reached generation).
    pub answered: u64,
    /// Answers that streamed to `Done`.
    pub completed: u64,
    pub suppressed: u64,
    pub interrupts: u64,
    pub swaps: u64,
    pub dropped: u64,
    pub faults: u64,
    pub answered_turn_ids: Vec<TurnId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("scheduler invariant violated: {0}")]
pub struct SchedulerError(pub String);

/// Output of one transition.
#[derive(Debug)]
pub struct Transition {
    pub record: TraceRecord,
    pub submits: Vec<(SlotId, GenerationRequest)>,
}

#[derive(Debug, Clone)]
enum WorkItem {
    Utterance {
        segment_id: u64,
        key: String,
        pcm: Option<Arc<[f32]>>,
    },
    Text(String),
}

impl WorkItem {
    fn key(&self) -> &str {
        match self {
            WorkItem::Utterance { key, .. } => key,
            WorkItem::Text(text) => text,
        }
    }

    fn describe(&self) -> String {
        match self {
            WorkItem::Utterance {
                segment_id, key, ..
            } => format!("utterance {segment_id} ({key})"),
            WorkItem::Text(text) => format!("text {text:?}"),
        }
    }

    fn content(&self) -> Vec<String> {
        match self {
            WorkItem::Utterance { key, .. } => vec![format!("<audio:{key}>")],
            WorkItem::Text(text) => vec![text.clone()],
        }
    }

    fn modality(&self) -> Modality {
        match self {
            WorkItem::Utterance { .. } => Modality::Audio,
            WorkItem::Text(_) => Modality::Text,
        }
    }
}

#[derive(Debug)]
struct Job {
    request_id: RequestId,
    cancel: CancelHandle,
    item: WorkItem,
    expected: Option<StateToken>,
    history_len_at_submit: usize,
    user_turn: Option<TurnId>,
    answer_turn: Option<TurnId>,
    partial: Vec<String>,
}

#[derive(Debug)]
struct Slot {
    id: SlotId,
    role: SlotRole,
    phase: Phase,
    job: Option<Job>,
    /// Cancelled or finished-early request whose terminal is still due.
    draining: Option<RequestId>,
    /// Submission held back until `draining` clears.
    deferred: Option<GenerationRequest>,
}

impl Slot {
    fn new(id: SlotId, role: SlotRole) -> Self {
        Self {
            id,
            role,
            phase: Phase::Idle,
            job: None,
            draining: None,
            deferred: None,
        }
    }

    fn state(&self) -> SlotState {
        SlotState {
            slot_id: self.id,
            role: self.role,
            phase: self.phase,
            active_request: self.job.as_ref().map(|j| j.request_id.clone()),
        }
    }
}

struct Ctx {
    now: SimTime,
    notifications: Vec<ServerMessage>,
    effects: Vec<Effect>,
    submits: Vec<(SlotId, GenerationRequest)>,
}

impl Ctx {
    fn notify(&mut self, msg: ServerMessage) {
        self.notifications.push(msg);
    }

    fn effect(&mut self, effect: Effect) {
        self.effects.push(effect);
    }
}

pub struct Scheduler {
    config: SchedulerConfig,
    history: ConversationHistory,
    slots: [Slot; 2],
    queue: VecDeque<WorkItem>,
    next_turn: TurnId,
    next_request: u64,
    seq: u64,
    stats: SchedulerStats,
    closed: bool,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        let prompt = select_system_prompt(&[Modality::Audio, Modality::Text].into())
            .expect("audio/text prompt");
        Self {
            config,
            history: ConversationHistory::new(prompt.body),
            slots: [
                Slot::new(SlotId::A, SlotRole::Generator),
                Slot::new(SlotId::B, SlotRole::Monitor),
            ],
            queue: VecDeque::new(),
            next_turn: 1,
            next_request: 1,
            seq: 0,
            stats: SchedulerStats::default(),
            closed: false,
        }
    }

    pub fn history(&self) -> &ConversationHistory {
        &self.history
    }

    pub fn stats(&self) -> &SchedulerStats {
        &self.stats
    }

    pub fn slot_states(&self) -> [SlotState; 2] {
        [self.slots[0].state(), self.slots[1].state()]
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Nothing queued, both slots idle and no terminal outstanding.
    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
            && self
                .slots
                .iter()
                .all(|s| s.phase == Phase::Idle && s.draining.is_none() && s.deferred.is_none())
    }

    pub fn handle(&mut self, event: SchedulerEvent, now: SimTime) -> Transition {
        let slots_before = self.slot_states();
        let summary = summarize(&event);
        let mut ctx = Ctx {
            now,
            notifications: Vec::new(),
            effects: Vec::new(),
            submits: Vec::new(),
        };
        match event {
            SchedulerEvent::SpeechStarted => {
                if !self.closed {
                    ctx.notify(ServerMessage::state(SessionState::Listening));
                }
            }
            SchedulerEvent::UtteranceReady(segment) => {
                let key = segment
                    .tag
                    .clone()
                    .unwrap_or_else(|| format!("seg{}", segment.segment_id));
                let pcm = self
                    .config
                    .attach_audio
                    .then(|| Arc::from(segment.pcm.as_slice()));
                self.enqueue(
                    WorkItem::Utterance {
                        segment_id: segment.segment_id,
                        key,
                        pcm,
                    },
                    &mut ctx,
                );
            }
            SchedulerEvent::TextQuery(text) => {
                if text.trim().is_empty() {
                    ctx.notify(ServerMessage::error("empty_text", "text query is empty"));
                } else {
                    self.enqueue(WorkItem::Text(text), &mut ctx);
                }
            }
            SchedulerEvent::Backend {
                slot,
                request_id,
                event,
            } => self.on_backend(slot, request_id, event, &mut ctx),
            SchedulerEvent::ClientDisconnect => self.disconnect(&mut ctx),
        }
        self.dispatch(&mut ctx);
        let record = TraceRecord {
            seq: self.seq,
            time: now.as_micros(),
            event: summary,
            slots_before,
            slots_after: self.slot_states(),
            notifications: ctx.notifications,
            effects: ctx.effects,
        };
        self.seq += 1;
        Transition {
            record,
            submits: ctx.submits,
        }
    }

    /// Structural invariants that must hold between transitions.
    pub fn check_invariants(&self) -> Result<(), SchedulerError> {
        let fail = |m: String| Err(SchedulerError(m));
        let generators = self
            .slots
            .iter()
            .filter(|s| s.role == SlotRole::Generator)
            .count();
        if generators != 1 {
            return fail(format!("{generators} generator slots"));
        }
        let generating = self
            .slots
            .iter()
            .filter(|s| s.phase == Phase::Generating)
            .count();
        if generating > 1 {
            return fail("two generating slots".into());
        }
        for slot in &self.slots {
            if slot.role == SlotRole::Monitor
                && matches!(slot.phase, Phase::Generating | Phase::Consolidating)
            {
                return fail(format!("monitor {} in {:?}", slot.id, slot.phase));
            }
            if (slot.phase == Phase::Idle) != slot.job.is_none() {
                return fail(format!("slot {} job/phase mismatch", slot.id));
            }
            if slot.deferred.is_some() && slot.draining.is_none() {
                return fail(format!("slot {} deferred without drain", slot.id));
            }
        }
        let classifying = self
            .slots
            .iter()
            .filter(|s| {
                matches!(
                    s.phase,
                    Phase::AwaitingClassification | Phase::Consolidating
                )
            })
            .count();
        if classifying > 1 {
            return fail("two outstanding classifications".into());
        }
        if self.queue.len() > self.config.queue_cap.max(1) {
            return fail("queue over capacity".into());
        }
        self.history
            .validate()
            .map_err(|e| SchedulerError(e.to_string()))
    }

    fn generator(&self) -> usize {
        self.slots
            .iter()
            .position(|s| s.role == SlotRole::Generator)
            .expect("one generator")
    }

    fn alloc_turn(&mut self) -> TurnId {
        let id = self.next_turn;
        self.next_turn += 1;
        id
    }

    fn enqueue(&mut self, item: WorkItem, ctx: &mut Ctx) {
        if self.closed {
            ctx.effect(Effect::Ignored {
                reason: "session closed".into(),
            });
            return;
        }
        while self.queue.len() >= self.config.queue_cap.max(1) {
            let dropped = self.queue.pop_front().expect("non-empty");
            self.stats.dropped += 1;
            tracing::debug!(item = %dropped.describe(), "input queue overflow");
            ctx.effect(Effect::Drop {
                item: dropped.describe(),
            });
        }
        ctx.effect(Effect::Enqueue {
            item: item.describe(),
        });
        self.queue.push_back(item);
    }

    fn dispatch(&mut self, ctx: &mut Ctx) {
        if self.closed || self.queue.is_empty() {
            return;
        }
        let busy = self.slots.iter().any(|s| {
            matches!(
                s.phase,
                Phase::AwaitingClassification | Phase::Consolidating
            )
        });
        if busy {
            return;
        }
        let gen = self.generator();
        let generating = self.slots[gen].phase == Phase::Generating;
        let target = if generating { 1 - gen } else { gen };
        if self.slots[target].draining.is_some() {
            return;
        }
        let item = self.queue.pop_front().expect("non-empty");
        match item {
            WorkItem::Utterance { .. } => {
                ctx.notify(ServerMessage::state(SessionState::Classifying));
                self.submit(target, item, None, None, ctx);
            }
            WorkItem::Text(_) => {
                if generating {
                    self.interrupt(gen, ctx);
                }
                let Some(user_turn) = self.commit_user(&item, StateToken::QueryText, ctx) else {
                    return;
                };
                self.submit(
                    target,
                    item,
                    Some(StateToken::QueryText),
                    Some(user_turn),
                    ctx,
                );
            }
        }
    }

    fn build_request(&mut self, item: &WorkItem, known: Option<StateToken>) -> GenerationRequest {
        let request_id = RequestId(format!("r{}", self.next_request));
        self.next_request += 1;
        let audio = match item {
            WorkItem::Utterance { pcm: Some(pcm), .. } => Some(AudioAttachment {
                sample_rate: self.config.sample_rate,
                pcm: base64::engine::general_purpose::STANDARD.encode(encode_s16le(pcm)),
            }),
            _ => None,
        };
        GenerationRequest {
            request_id,
            history: self.history.clone(),
            query: Query {
                utterance: item.key().to_string(),
                content: item.content(),
                modalities: [item.modality()].into(),
                state_token: known,
                audio,
            },
            cancel_handle: CancelHandle::new(),
        }
    }

    fn submit(
        &mut self,
        slot: usize,
        item: WorkItem,
        known: Option<StateToken>,
        user_turn: Option<TurnId>,
        ctx: &mut Ctx,
    ) {
        let request = self.build_request(&item, known);
        ctx.effect(Effect::Submit {
            slot: self.slots[slot].id,
            request_id: request.request_id.clone(),
            utterance: request.query.utterance.clone(),
            state_token: known,
        });
        let s = &mut self.slots[slot];
        s.job = Some(Job {
            request_id: request.request_id.clone(),
            cancel: request.cancel_handle.clone(),
            item,
            expected: known,
            history_len_at_submit: self.history.len(),
            user_turn,
            answer_turn: None,
            partial: Vec::new(),
        });
        s.phase = Phase::AwaitingClassification;
        ctx.submits.push((s.id, request));
    }

    fn on_backend(&mut self, slot_id: SlotId, id: RequestId, event: BackendEvent, ctx: &mut Ctx) {
        let slot = slot_id.index();
        if self.slots[slot].draining.as_ref() == Some(&id) {
            if event.is_terminal() {
                self.finish_drain(slot, ctx);
            } else {
                ctx.effect(Effect::Ignored {
                    reason: format!("{id} is draining"),
                });
            }
            return;
        }
        if self.slots[slot].job.as_ref().map(|j| &j.request_id) != Some(&id) {
            ctx.effect(Effect::Ignored {
                reason: format!("{id} is not active on {slot_id}"),
            });
            return;
        }
        let phase = self.slots[slot].phase;
        match (phase, event) {
            (
                Phase::AwaitingClassification | Phase::Consolidating,
                BackendEvent::Classified(token),
            ) => self.on_verdict(slot, token, ctx),
            (Phase::Generating, BackendEvent::Token(text)) => {
                let job = self.slots[slot].job.as_mut().expect("active job");
                let turn_id = job.answer_turn.expect("generating job has a turn");
                job.partial.push(text.clone());
                ctx.notify(ServerMessage::AnswerToken { text, turn_id });
            }
            (Phase::Generating, BackendEvent::Done) => self.complete(slot, ctx),
            (_, BackendEvent::Failed(reason)) => {
                self.on_failure(slot, "backend_failed", reason, ctx)
            }
            (_, BackendEvent::Cancelled) => self.on_failure(
                slot,
                "backend_cancelled",
                "cancelled by backend".into(),
                ctx,
            ),
            (phase, event) => {
                self.fault(slot, format!("{event:?} on {slot_id} while {phase:?}"), ctx)
            }
        }
    }

    fn finish_drain(&mut self, slot: usize, ctx: &mut Ctx) {
        let s = &mut self.slots[slot];
        let id = s.draining.take().expect("draining");
        ctx.effect(Effect::Drained {
            slot: s.id,
            request_id: id,
        });
        if let Some(request) = s.deferred.take() {
            ctx.effect(Effect::Submit {
                slot: s.id,
                request_id: request.request_id.clone(),
                utterance: request.query.utterance.clone(),
                state_token: request.query.state_token,
            });
            ctx.submits.push((s.id, request));
        }
    }

    fn on_verdict(&mut self, slot: usize, token: StateToken, ctx: &mut Ctx) {
        let expected = self.slots[slot].job.as_ref().and_then(|j| j.expected);
        if let Some(expected) = expected {
            if expected != token {
                return self.fault(
                    slot,
                    format!("expected {expected}, backend said {token}"),
                    ctx,
                );
            }
        }
        if token == StateToken::NoisyAudio {
            self.stats.suppressed += 1;
            let s = &mut self.slots[slot];
            let job = s.job.take().expect("active job");
            s.draining = Some(job.request_id);
            s.phase = Phase::Idle;
            ctx.notify(ServerMessage::state(SessionState::Suppressed));
            return;
        }

        let other = 1 - slot;
        if self.slots[other].phase == Phase::Generating {
            self.interrupt(other, ctx);
        } else if self.slots[slot].role == SlotRole::Monitor {
            self.swap(slot, ctx);
        }

        let job = self.slots[slot].job.as_ref().expect("active job");
        let changed = self.history.len() != job.history_len_at_submit;
        let item = job.item.clone();
        let user_turn = match job.user_turn {
            Some(t) => t,
            None => match self.commit_user(&item, token, ctx) {
                Some(t) => t,
                None => return,
            },
        };
        self.slots[slot].job.as_mut().expect("active job").user_turn = Some(user_turn);

        if changed {
            // The verdict was reached against an older history; answer from
            // a request rendered with the consolidated one.
            let mut request = self.build_request(&item, Some(token));
            request.history = self.history.clone();
            let s = &mut self.slots[slot];
            let old = s.job.take().expect("active job");
            old.cancel.cancel();
            ctx.effect(Effect::Cancel {
                slot: s.id,
                request_id: old.request_id.clone(),
            });
            s.draining = Some(old.request_id);
            s.job = Some(Job {
                request_id: request.request_id.clone(),
                cancel: request.cancel_handle.clone(),
                item,
                expected: Some(token),
                history_len_at_submit: self.history.len(),
                user_turn: Some(user_turn),
                answer_turn: None,
                partial: Vec::new(),
            });
            s.deferred = Some(request);
            s.phase = Phase::Consolidating;
        } else {
            self.start_generation(slot, ctx);
        }
    }

    fn start_generation(&mut self, slot: usize, ctx: &mut Ctx) {
        let turn_id = self.alloc_turn();
        let s = &mut self.slots[slot];
        s.phase = Phase::Generating;
        let job = s.job.as_mut().expect("active job");
        job.answer_turn = Some(turn_id);
        let channel = match job.item {
            WorkItem::Utterance { .. } => OutputChannel::Speech,
            WorkItem::Text(_) => OutputChannel::Text,
        };
        self.stats.answered += 1;
        self.stats.answered_turn_ids.push(turn_id);
        ctx.notify(ServerMessage::StateEvent {
            state: SessionState::Generating,
            turn_id: Some(turn_id),
            generator: None,
            channel: Some(channel),
        });
    }

    /// Cancels the generating slot, folds its partial answer into the history
    /// and hands the generator role to the other slot.
    fn interrupt(&mut self, gen: usize, ctx: &mut Ctx) {
        let s = &mut self.slots[gen];
        let job = s.job.take().expect("generating job");
        job.cancel.cancel();
        ctx.effect(Effect::Cancel {
            slot: s.id,
            request_id: job.request_id.clone(),
        });
        s.draining = Some(job.request_id);
        s.phase = Phase::Idle;
        let turn_id = job.answer_turn.expect("generating job has a turn");
        self.consolidate(turn_id, &job.partial, ctx);
        ctx.notify(ServerMessage::StateEvent {
            state: SessionState::Interrupted,
            turn_id: Some(turn_id),
            generator: None,
            channel: None,
        });
        self.stats.interrupts += 1;
        self.swap(1 - gen, ctx);
    }

    fn swap(&mut self, new_generator: usize, ctx: &mut Ctx) {
        self.slots[new_generator].role = SlotRole::Generator;
        self.slots[1 - new_generator].role = SlotRole::Monitor;
        self.stats.swaps += 1;
        let generator = self.slots[new_generator].id;
        ctx.effect(Effect::Swap { generator });
        ctx.notify(ServerMessage::StateEvent {
            state: SessionState::Swap,
            turn_id: None,
            generator: Some(generator),
            channel: None,
        });
    }

    fn consolidate(&mut self, turn_id: TurnId, partial: &[String], ctx: &mut Ctx) {
        match self
            .history
            .consolidate(turn_id, partial, ctx.now.as_secs_f64())
        {
            Ok(next) => {
                self.history = next;
                ctx.effect(Effect::Consolidate {
                    turn_id,
                    pieces: partial.len(),
                });
            }
            Err(e) => self.record_fault(format!("consolidate: {e}"), ctx),
        }
    }

    fn commit_user(&mut self, item: &WorkItem, token: StateToken, ctx: &mut Ctx) -> Option<TurnId> {
        let turn_id = self.alloc_turn();
        let turn = Turn::user(
            turn_id,
            token,
            item.content(),
            [item.modality()].into(),
            ctx.now.as_secs_f64(),
        );
        self.commit(turn, ctx).then_some(turn_id)
    }

    fn commit(&mut self, turn: Turn, ctx: &mut Ctx) -> bool {
        let (turn_id, source) = (turn.turn_id, turn.source);
        match self.history.append_turn(turn) {
            Ok(next) => {
                self.history = next;
                ctx.effect(Effect::Commit { turn_id, source });
                true
            }
            Err(e) => {
                self.record_fault(format!("commit: {e}"), ctx);
                false
            }
        }
    }

    fn complete(&mut self, slot: usize, ctx: &mut Ctx) {
        let s = &mut self.slots[slot];
        let job = s.job.take().expect("generating job");
        s.phase = Phase::Idle;
        let turn_id = job.answer_turn.expect("generating job has a turn");
        let turn = Turn::assistant(turn_id, job.partial, true, ctx.now.as_secs_f64());
        if self.commit(turn, ctx) {
            self.stats.completed += 1;
        }
        ctx.notify(ServerMessage::AnswerDone { turn_id });
    }

    fn on_failure(&mut self, slot: usize, code: &str, reason: String, ctx: &mut Ctx) {
        let s = &mut self.slots[slot];
        let job = s.job.take().expect("active job");
        let was_generating = s.phase == Phase::Generating;
        s.phase = Phase::Idle;
        tracing::warn!(slot = %s.id, request = %job.request_id, %reason, "backend request failed");
        ctx.notify(ServerMessage::error(code, reason));
        if was_generating {
            let turn_id = job.answer_turn.expect("generating job has a turn");
            self.consolidate(turn_id, &job.partial, ctx);
            ctx.notify(ServerMessage::AnswerDone { turn_id });
        }
    }

    fn record_fault(&mut self, message: String, ctx: &mut Ctx) {
        self.stats.faults += 1;
        tracing::error!(%message, "session fault");
        ctx.notify(ServerMessage::error("protocol_violation", message.clone()));
        ctx.effect(Effect::Fault { message });
    }

    /// Protocol violation on `slot`: its request is abandoned.
    fn fault(&mut self, slot: usize, message: String, ctx: &mut Ctx) {
        self.record_fault(message, ctx);
        let s = &mut self.slots[slot];
        let Some(job) = s.job.take() else {
            return;
        };
        let was_generating = s.phase == Phase::Generating;
        s.phase = Phase::Idle;
        job.cancel.cancel();
        ctx.effect(Effect::Cancel {
            slot: s.id,
            request_id: job.request_id.clone(),
        });
        s.draining = Some(job.request_id);
        if was_generating {
            let turn_id = job.answer_turn.expect("generating job has a turn");
            self.consolidate(turn_id, &job.partial, ctx);
            ctx.notify(ServerMessage::AnswerDone { turn_id });
        }
    }

    fn disconnect(&mut self, ctx: &mut Ctx) {
        if self.closed {
            return;
        }
        self.closed = true;
        for s in &mut self.slots {
            if let Some(job) = s.job.take() {
                job.cancel.cancel();
                ctx.effect(Effect::Cancel {
                    slot: s.id,
                    request_id: job.request_id.clone(),
                });
                if s.draining.is_none() {
                    s.draining = Some(job.request_id);
                }
            }
            s.deferred = None;
            s.phase = Phase::Idle;
        }
        for item in self.queue.drain(..) {
            ctx.effect(Effect::Drop {
                item: item.describe(),
            });
        }
    }
}

fn summarize(event: &SchedulerEvent) -> EventSummary {
    match event {
        SchedulerEvent::SpeechStarted => EventSummary::SpeechStarted,
        SchedulerEvent::UtteranceReady(seg) => EventSummary::Utterance {
            segment_id: seg.segment_id,
            utterance: seg
                .tag
                .clone()
                .unwrap_or_else(|| format!("seg{}", seg.segment_id)),
            start: seg.start_time,
            end: seg.end_time,
        },
        SchedulerEvent::TextQuery(text) => EventSummary::Text { text: text.clone() },
        SchedulerEvent::Backend {
            slot,
            request_id,
            event,
        } => EventSummary::Backend {
            slot: *slot,
            request_id: request_id.clone(),
            event: event.clone(),
        },
        SchedulerEvent::ClientDisconnect => EventSummary::Disconnect,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Harness {
        sched: Scheduler,
        submits: Vec<(SlotId, GenerationRequest)>,
        records: Vec<TraceRecord>,
        t: u64,
    }

    impl Harness {
        fn new() -> Self {
            Self {
                sched: Scheduler::new(SchedulerConfig::default()),
                submits: Vec::new(),
                records: Vec::new(),
                t: 0,
            }
        }

        fn feed(&mut self, event: SchedulerEvent) -> TraceRecord {
            self.t += 1000;
            let tr = self.sched.handle(event, SimTime::from_micros(self.t));
            self.sched.check_invariants().unwrap();
            self.submits.extend(tr.submits);
            self.records.push(tr.record.clone());
            tr.record
        }

        fn utterance(&mut self, id: u64, key: &str) -> TraceRecord {
            self.feed(SchedulerEvent::UtteranceReady(AudioSegment {
                segment_id: id,
                pcm: vec![0.0; 16],
                start_time: 0.0,
                end_time: 0.5,
                tag: Some(key.into()),
            }))
        }

        fn backend(&mut self, slot: SlotId, request: &str, event: BackendEvent) -> TraceRecord {
            self.feed(SchedulerEvent::Backend {
                slot,
                request_id: RequestId::from(request),
                event,
            })
        }

        fn last_submit(&self) -> (SlotId, String) {
            let (slot, req) = self.submits.last().unwrap();
            (*slot, req.request_id.0.clone())
        }

        fn phases(&self) -> [(SlotRole, Phase); 2] {
            let s = self.sched.slot_states();
            [(s[0].role, s[0].phase), (s[1].role, s[1].phase)]
        }

        /// Query on the idle generator: answer turn 2 streams on A.
        fn generating_on_a(&mut self) {
            self.utterance(1, "u1");
            self.backend(
                SlotId::A,
                "r1",
                BackendEvent::Classified(StateToken::QueryAudio),
            );
            assert_eq!(self.phases()[0], (SlotRole::Generator, Phase::Generating));
        }
    }

    fn tokens(record: &TraceRecord) -> Vec<(String, TurnId)> {
        record
            .notifications
            .iter()
            .filter_map(|n| match n {
                ServerMessage::AnswerToken { text, turn_id } => Some((text.clone(), *turn_id)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn idle_segment_goes_to_classification() {
        let mut h = Harness::new();
        let rec = h.utterance(1, "u1");
        assert_eq!(h.last_submit(), (SlotId::A, "r1".into()));
        assert_eq!(h.phases()[0].1, Phase::AwaitingClassification);
        assert_eq!(
            rec.notifications,
            vec![ServerMessage::state(SessionState::Classifying)]
        );
        assert!(h.submits[0].1.query.state_token.is_none());
    }

    #[test]
    fn segment_during_generation_runs_on_monitor() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.utterance(2, "u2");
        assert_eq!(h.last_submit(), (SlotId::B, "r2".into()));
        assert_eq!(
            h.phases(),
            [
                (SlotRole::Generator, Phase::Generating),
                (SlotRole::Monitor, Phase::AwaitingClassification)
            ]
        );
        let rec = h.backend(SlotId::A, "r1", BackendEvent::Token("x".into()));
        assert_eq!(tokens(&rec), vec![("x".to_string(), 2)]);
    }

    #[test]
    fn back_to_back_segments_queue_fifo() {
        let mut h = Harness::new();
        h.utterance(1, "u1");
        h.utterance(2, "u2");
        assert_eq!(h.submits.len(), 1);
        assert_eq!(h.sched.queue_len(), 1);
        h.backend(
            SlotId::A,
            "r1",
            BackendEvent::Classified(StateToken::NoisyAudio),
        );
        // the noise request still owes its terminal, so A cannot take u2 yet
        assert_eq!(h.submits.len(), 1);
        h.backend(SlotId::A, "r1", BackendEvent::Done);
        assert_eq!(h.last_submit(), (SlotId::A, "r2".into()));
        assert_eq!(h.submits[1].1.query.utterance, "u2");
    }

    #[test]
    fn noise_during_generation_is_suppressed() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.backend(SlotId::A, "r1", BackendEvent::Token("A".into()));
        h.utterance(2, "n1");
        let rec = h.backend(
            SlotId::B,
            "r2",
            BackendEvent::Classified(StateToken::NoisyAudio),
        );
        assert_eq!(
            rec.notifications,
            vec![ServerMessage::state(SessionState::Suppressed)]
        );
        h.backend(SlotId::B, "r2", BackendEvent::Done);
        let rec = h.backend(SlotId::A, "r1", BackendEvent::Token(" B".into()));
        assert_eq!(tokens(&rec), vec![(" B".to_string(), 2)]);
        assert_eq!(h.sched.stats().suppressed, 1);
        assert_eq!(h.sched.stats().interrupts, 0);
        assert_eq!(h.phases()[0], (SlotRole::Generator, Phase::Generating));
        assert_eq!(h.sched.history().len(), 1);
    }

    #[test]
    fn query_during_generation_interrupts_and_swaps() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.backend(SlotId::A, "r1", BackendEvent::Token("A".into()));
        h.utterance(2, "u2");
        let rec = h.backend(
            SlotId::B,
            "r2",
            BackendEvent::Classified(StateToken::QueryAudio),
        );
        let kinds: Vec<&str> = rec
            .effects
            .iter()
            .map(|e| match e {
                Effect::Cancel { .. } => "cancel",
                Effect::Consolidate { .. } => "consolidate",
                Effect::Swap { .. } => "swap",
                Effect::Commit { .. } => "commit",
                _ => "other",
            })
            .collect();
        assert_eq!(kinds, ["cancel", "consolidate", "swap", "commit", "cancel"]);
        assert_eq!(
            h.phases(),
            [
                (SlotRole::Monitor, Phase::Idle),
                (SlotRole::Generator, Phase::Consolidating)
            ]
        );
        // stale token from the cancelled answer never reaches the client
        let rec = h.backend(SlotId::A, "r1", BackendEvent::Token(" B".into()));
        assert!(tokens(&rec).is_empty());
        h.backend(SlotId::A, "r1", BackendEvent::Cancelled);
        // B's classification request drains, then the re-rendered one goes out
        let rec = h.backend(SlotId::B, "r2", BackendEvent::Cancelled);
        assert_eq!(h.last_submit(), (SlotId::B, "r3".into()));
        assert!(matches!(rec.effects.last(), Some(Effect::Submit { .. })));
        let rerender = &h.submits.last().unwrap().1;
        assert_eq!(rerender.query.state_token, Some(StateToken::QueryAudio));
        let rendered = rerender.history.render();
        assert!(
            rendered.contains("Assistant: A [interrupted]"),
            "{rendered}"
        );
        assert!(rendered.contains("User <1>: <audio:u2>"));
        h.backend(
            SlotId::B,
            "r3",
            BackendEvent::Classified(StateToken::QueryAudio),
        );
        let rec = h.backend(SlotId::B, "r3", BackendEvent::Token("C".into()));
        assert_eq!(tokens(&rec), vec![("C".to_string(), 4)]);
        h.backend(SlotId::B, "r3", BackendEvent::Done);
        let stats = h.sched.stats();
        assert_eq!(
            (
                stats.answered,
                stats.interrupts,
                stats.swaps,
                stats.completed
            ),
            (2, 1, 1, 1)
        );
        assert_eq!(stats.answered_turn_ids, vec![2, 4]);
        let history = h.sched.history();
        assert_eq!(history.turns[1].content, vec!["A", " [interrupted]"]);
        assert!(history.turns[1].completed);
    }

    #[test]
    fn interrupt_before_any_token_needs_no_rerender() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.utterance(2, "u2");
        h.backend(
            SlotId::B,
            "r2",
            BackendEvent::Classified(StateToken::QueryAudio),
        );
        assert_eq!(h.phases()[1], (SlotRole::Generator, Phase::Generating));
        let rec = h.backend(SlotId::B, "r2", BackendEvent::Token("Z".into()));
        assert_eq!(tokens(&rec), vec![("Z".to_string(), 4)]);
    }

    #[test]
    fn query_while_idle_streams_without_swap() {
        let mut h = Harness::new();
        h.utterance(1, "u1");
        let rec = h.backend(
            SlotId::A,
            "r1",
            BackendEvent::Classified(StateToken::QueryAudio),
        );
        assert!(!rec.effects.iter().any(|e| matches!(e, Effect::Swap { .. })));
        assert_eq!(h.sched.stats().swaps, 0);
        let rec = h.backend(SlotId::A, "r1", BackendEvent::Token("hi".into()));
        assert_eq!(tokens(&rec), vec![("hi".to_string(), 2)]);
    }

    #[test]
    fn text_query_while_idle_is_preclassified() {
        let mut h = Harness::new();
        h.feed(SchedulerEvent::TextQuery("what time is it".into()));
        let (slot, _) = h.last_submit();
        assert_eq!(slot, SlotId::A);
        let req = &h.submits[0].1;
        assert_eq!(req.query.state_token, Some(StateToken::QueryText));
        assert_eq!(
            req.history.render().lines().last().unwrap(),
            "User <3>: what time is it"
        );
        let rec = h.backend(
            SlotId::A,
            "r1",
            BackendEvent::Classified(StateToken::QueryText),
        );
        assert_eq!(h.phases()[0].1, Phase::Generating);
        assert_eq!(h.sched.stats().answered_turn_ids, vec![2]);
        assert!(rec.notifications.contains(&ServerMessage::StateEvent {
            state: SessionState::Generating,
            turn_id: Some(2),
            generator: None,
            channel: Some(OutputChannel::Text),
        }));
    }

    #[test]
    fn text_query_during_generation_interrupts() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.backend(SlotId::A, "r1", BackendEvent::Token("A".into()));
        let rec = h.feed(SchedulerEvent::TextQuery("stop".into()));
        assert!(rec.notifications.contains(&ServerMessage::StateEvent {
            state: SessionState::Interrupted,
            turn_id: Some(2),
            generator: None,
            channel: None,
        }));
        assert_eq!(h.last_submit(), (SlotId::B, "r2".into()));
        assert_eq!(
            h.phases(),
            [
                (SlotRole::Monitor, Phase::Idle),
                (SlotRole::Generator, Phase::AwaitingClassification)
            ]
        );
        h.backend(
            SlotId::B,
            "r2",
            BackendEvent::Classified(StateToken::QueryText),
        );
        assert_eq!(h.phases()[1].1, Phase::Generating);
        assert_eq!(h.sched.stats().interrupts, 1);
    }

    #[test]
    fn empty_text_is_rejected() {
        let mut h = Harness::new();
        let before = h.sched.slot_states();
        let rec = h.feed(SchedulerEvent::TextQuery("  ".into()));
        assert!(
            matches!(&rec.notifications[..], [ServerMessage::Error { code, .. }] if code == "empty_text")
        );
        assert_eq!(h.sched.slot_states(), before);
        assert!(h.submits.is_empty());
        assert!(h.sched.history().is_empty());
    }

    #[test]
    fn completion_commits_answer() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.backend(SlotId::A, "r1", BackendEvent::Token("A".into()));
        let rec = h.backend(SlotId::A, "r1", BackendEvent::Done);
        assert_eq!(
            rec.notifications,
            vec![ServerMessage::AnswerDone { turn_id: 2 }]
        );
        assert!(h.sched.is_quiescent());
        let last = h.sched.history().turns.last().unwrap();
        assert_eq!(
            (last.turn_id, last.completed, last.text()),
            (2, true, "A".to_string())
        );
    }

    #[test]
    fn completion_dispatches_queued_segment() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.utterance(2, "n1");
        h.backend(
            SlotId::B,
            "r2",
            BackendEvent::Classified(StateToken::NoisyAudio),
        );
        // B still owes its terminal, so the next segment waits
        h.utterance(3, "u3");
        assert_eq!(h.submits.len(), 2);
        h.backend(SlotId::A, "r1", BackendEvent::Done);
        assert_eq!(h.last_submit(), (SlotId::A, "r3".into()));
    }

    #[test]
    fn done_after_cancelled_is_ignored() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.utterance(2, "u2");
        h.backend(
            SlotId::B,
            "r2",
            BackendEvent::Classified(StateToken::QueryAudio),
        );
        h.backend(SlotId::A, "r1", BackendEvent::Cancelled);
        let rec = h.backend(SlotId::A, "r1", BackendEvent::Done);
        assert!(rec.notifications.is_empty());
        assert!(matches!(rec.effects[..], [Effect::Ignored { .. }]));
        assert_eq!(h.sched.stats().faults, 0);
    }

    #[test]
    fn classification_on_wrong_phase_faults() {
        let mut h = Harness::new();
        h.generating_on_a();
        let rec = h.backend(
            SlotId::A,
            "r1",
            BackendEvent::Classified(StateToken::QueryAudio),
        );
        assert_eq!(h.sched.stats().faults, 1);
        assert!(rec.notifications.iter().any(
            |n| matches!(n, ServerMessage::Error { code, .. } if code == "protocol_violation")
        ));
        assert!(rec
            .notifications
            .contains(&ServerMessage::AnswerDone { turn_id: 2 }));
        assert_eq!(h.phases()[0].1, Phase::Idle);
    }

    #[test]
    fn mismatched_echo_faults() {
        let mut h = Harness::new();
        h.feed(SchedulerEvent::TextQuery("hello".into()));
        h.backend(
            SlotId::A,
            "r1",
            BackendEvent::Classified(StateToken::NoisyAudio),
        );
        assert_eq!(h.sched.stats().faults, 1);
        assert_eq!(h.sched.stats().suppressed, 0);
    }

    #[test]
    fn queue_overflow_drops_oldest() {
        let mut h = Harness::new();
        for i in 1..=6 {
            h.utterance(i, &format!("u{i}"));
        }
        // one in flight, cap 4 queued, oldest queued (u2) dropped
        assert_eq!(h.sched.stats().dropped, 1);
        assert_eq!(h.sched.queue_len(), 4);
        let dropped: Vec<_> = h
            .records
            .iter()
            .flat_map(|r| &r.effects)
            .filter_map(|e| match e {
                Effect::Drop { item } => Some(item.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(dropped, vec!["utterance 2 (u2)"]);
    }

    #[test]
    fn failure_during_generation_closes_turn() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.backend(SlotId::A, "r1", BackendEvent::Token("par".into()));
        let rec = h.backend(SlotId::A, "r1", BackendEvent::Failed("oom".into()));
        assert!(
            matches!(&rec.notifications[0], ServerMessage::Error { code, message } if code == "backend_failed" && message == "oom")
        );
        assert_eq!(
            rec.notifications[1],
            ServerMessage::AnswerDone { turn_id: 2 }
        );
        assert!(h.sched.history().incomplete_turn().is_some());
        assert!(h.sched.is_quiescent());
    }

    #[test]
    fn generation_finishing_during_classification_swaps_without_interrupt() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.utterance(2, "u2");
        h.backend(SlotId::A, "r1", BackendEvent::Token("A".into()));
        h.backend(SlotId::A, "r1", BackendEvent::Done);
        h.backend(
            SlotId::B,
            "r2",
            BackendEvent::Classified(StateToken::QueryAudio),
        );
        let stats = h.sched.stats();
        assert_eq!((stats.interrupts, stats.swaps), (0, 1));
        // history gained the finished answer, so B answers from a fresh render
        assert_eq!(h.phases()[1], (SlotRole::Generator, Phase::Consolidating));
    }

    #[test]
    fn disconnect_cancels_everything() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.utterance(2, "u2");
        h.utterance(3, "u3");
        let rec = h.feed(SchedulerEvent::ClientDisconnect);
        assert!(h.sched.is_closed());
        assert_eq!(
            rec.effects
                .iter()
                .filter(|e| matches!(e, Effect::Cancel { .. }))
                .count(),
            2
        );
        assert!(h
            .submits
            .iter()
            .all(|(_, r)| r.cancel_handle.is_cancelled()));
        h.backend(SlotId::A, "r1", BackendEvent::Cancelled);
        h.backend(SlotId::B, "r2", BackendEvent::Cancelled);
        assert!(h.sched.is_quiescent());
    }

    #[test]
    fn replaying_inputs_reproduces_trace() {
        let mut h = Harness::new();
        h.generating_on_a();
        h.backend(SlotId::A, "r1", BackendEvent::Token("A".into()));
        h.utterance(2, "n");
        h.backend(
            SlotId::B,
            "r2",
            BackendEvent::Classified(StateToken::NoisyAudio),
        );
        h.backend(SlotId::B, "r2", BackendEvent::Done);
        h.feed(SchedulerEvent::TextQuery("t".into()));

        let mut replay = Scheduler::new(SchedulerConfig::default());
        for rec in &h.records {
            let event = match &rec.event {
                EventSummary::Utterance {
                    segment_id,
                    utterance,
                    start,
                    end,
                } => SchedulerEvent::UtteranceReady(AudioSegment {
                    segment_id: *segment_id,
                    pcm: vec![],
                    start_time: *start,
                    end_time: *end,
                    tag: Some(utterance.clone()),
                }),
                EventSummary::Text { text } => SchedulerEvent::TextQuery(text.clone()),
                EventSummary::Backend {
                    slot,
                    request_id,
                    event,
                } => SchedulerEvent::Backend {
                    slot: *slot,
                    request_id: request_id.clone(),
                    event: event.clone(),
                },
                EventSummary::SpeechStarted => SchedulerEvent::SpeechStarted,
                EventSummary::Disconnect => SchedulerEvent::ClientDisconnect,
            };
            let again = replay.handle(event, SimTime::from_micros(rec.time)).record;
            assert_eq!(
                serde_json::to_string(&again).unwrap(),
                serde_json::to_string(rec).unwrap()
            );
        }
    }
}

//! One client session: VAD, scheduler, two backend slots and a clock.
//!
//! The same driver serves live connections and offline scenarios. Under the
//! virtual clock, time is paced by the audio itself: each VAD event fires at
//! the end of the frame that produced it and backend events are delivered at
//! their scheduled deadlines in between.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use base64::Engine as _;
use thiserror::Error;

use crate::backend::{Backend, LabelMap, MockBackend, RemoteBackend, Validated};
use crate::clock::{Clock, ClockMode, SimTime};
use crate::config::{BackendConfig, BackendMode, EngineConfig};
use crate::pcm::{decode_s16le, PcmError};
use crate::protocol::{ClientMessage, HelloConfig, ServerMessage, SlotId, UtteranceSpan};
use crate::scheduler::{Scheduler, SchedulerConfig, SchedulerEvent, SchedulerStats, TraceRecord};
use crate::vad::{AudioSegment, VadConfig, VadError, VadEvent, VadEventKind, VadStream};

/// Upper bound on backend events delivered while draining a finished session.
const DRAIN_STEP_LIMIT: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("audio payload is not valid base64")]
    Base64(#[from] base64::DecodeError),
    #[error(transparent)]
    Pcm(#[from] PcmError),
    #[error("sample rate {got} does not match the session's {expected}")]
    SampleRate { expected: u32, got: u32 },
    #[error(transparent)]
    Vad(#[from] VadError),
    #[error("hello may only be sent once, first")]
    UnexpectedHello,
    #[error("session already closed")]
    Closed,
}

impl SessionError {
    /// Error code sent to the client.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::Base64(_) | SessionError::Pcm(_) => "bad_audio",
            SessionError::SampleRate { .. } => "sample_rate_mismatch",
            SessionError::Vad(_) => "bad_config",
            SessionError::UnexpectedHello => "unexpected_hello",
            SessionError::Closed => "closed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionSettings {
    pub sample_rate: u32,
    pub clock: ClockMode,
    pub vad: VadConfig,
    pub scheduler: SchedulerConfig,
    pub backend: BackendConfig,
    /// Labelled stream spans used to key VAD segments.
    pub utterances: Vec<UtteranceSpan>,
    /// Keep every trace record in memory (offline runs and tests).
    pub keep_trace: bool,
}

impl SessionSettings {
    pub fn from_config(config: &EngineConfig) -> Self {
        let mut scheduler = config.scheduler.clone();
        scheduler.sample_rate = config.gateway.sample_rate;
        scheduler.attach_audio |= config.backend.mode == BackendMode::Remote;
        Self {
            sample_rate: config.gateway.sample_rate,
            clock: config.gateway.clock,
            vad: config.vad,
            scheduler,
            backend: config.backend.clone(),
            utterances: Vec::new(),
            keep_trace: false,
        }
    }

    pub fn apply_hello(&mut self, hello: &HelloConfig) {
        if let Some(rate) = hello.sample_rate {
            self.sample_rate = rate;
            self.scheduler.sample_rate = rate;
        }
        if let Some(clock) = hello.clock {
            self.clock = clock;
        }
        if let Some(mock) = &hello.mock {
            self.backend
                .labels
                .extend(mock.labels.iter().map(|(k, v)| (k.clone(), v.clone())));
            self.utterances = mock.utterances.clone();
        }
    }

    fn build_backend(&self, labels: &Arc<LabelMap>) -> Box<dyn Backend> {
        match self.backend.mode {
            BackendMode::Mock => Box::new(MockBackend::new(
                labels.clone(),
                self.backend.classify_latency(),
            )),
            BackendMode::Remote => Box::new(RemoteBackend::new(
                self.backend.endpoint.clone().unwrap_or_default(),
                self.backend.timeout(),
            )),
        }
    }
}

impl Default for SessionSettings {
    fn default() -> Self {
        let mut settings = Self::from_config(&EngineConfig::default());
        settings.clock = ClockMode::Virtual;
        settings
    }
}

/// Tags a segment with the labelled span it overlaps most.
fn tag_segment(spans: &[UtteranceSpan], start: f64, end: f64) -> Option<String> {
    spans
        .iter()
        .map(|s| (s.end.min(end) - s.start.max(start), s))
        .filter(|(overlap, _)| *overlap > 0.0)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, s)| s.utterance.clone())
}

pub struct Session {
    settings: SessionSettings,
    vad: VadStream,
    scheduler: Scheduler,
    backends: [Validated<Box<dyn Backend>>; 2],
    clock: Clock,
    samples_fed: u64,
    outbox: VecDeque<ServerMessage>,
    trace: Vec<TraceRecord>,
    trace_sink: Option<Box<dyn Write + Send>>,
    invariant_violations: u64,
}

impl Session {
    pub fn new(settings: SessionSettings) -> Result<Self, SessionError> {
        let labels = Arc::new(settings.backend.labels.clone());
        let backends = [
            settings.build_backend(&labels),
            settings.build_backend(&labels),
        ];
        Self::with_backends(settings, backends)
    }

    pub fn with_backends(
        settings: SessionSettings,
        backends: [Box<dyn Backend>; 2],
    ) -> Result<Self, SessionError> {
        let vad = VadStream::energy(settings.vad, settings.sample_rate)?;
        let [a, b] = backends;
        Ok(Self {
            scheduler: Scheduler::new(settings.scheduler.clone()),
            backends: [Validated::new(a), Validated::new(b)],
            clock: Clock::new(settings.clock),
            vad,
            settings,
            samples_fed: 0,
            outbox: VecDeque::new(),
            trace: Vec::new(),
            trace_sink: None,
            invariant_violations: 0,
        })
    }

    /// Streams trace records as JSON lines.
    pub fn set_trace_sink(&mut self, sink: Box<dyn Write + Send>) {
        self.trace_sink = Some(sink);
    }

    pub fn settings(&self) -> &SessionSettings {
        &self.settings
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn stats(&self) -> &SchedulerStats {
        self.scheduler.stats()
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Backend events rejected by the order checkers.
    pub fn backend_violations(&self) -> u64 {
        self.backends.iter().map(|b| b.violations()).sum()
    }

    /// Transitions after which the scheduler's structural invariants failed.
    pub fn invariant_violations(&self) -> u64 {
        self.invariant_violations
    }

    pub fn is_closed(&self) -> bool {
        self.scheduler.is_closed()
    }

    pub fn take_outbox(&mut self) -> Vec<ServerMessage> {
        self.outbox.drain(..).collect()
    }

    /// Position of the audio stream.
    pub fn stream_time(&self) -> SimTime {
        SimTime::from_micros(self.samples_fed * 1_000_000 / self.settings.sample_rate as u64)
    }

    /// Handles everything but `hello`, which selects the settings a session is
    /// built with.
    pub fn handle_client(&mut self, msg: ClientMessage) -> Result<(), SessionError> {
        if self.is_closed() {
            return Err(SessionError::Closed);
        }
        match msg {
            ClientMessage::Hello { .. } => Err(SessionError::UnexpectedHello),
            ClientMessage::AudioChunk { pcm, sample_rate } => {
                if sample_rate != self.settings.sample_rate {
                    return Err(SessionError::SampleRate {
                        expected: self.settings.sample_rate,
                        got: sample_rate,
                    });
                }
                let bytes = base64::engine::general_purpose::STANDARD.decode(pcm)?;
                let samples = decode_s16le(&bytes)?;
                self.push_audio(&samples);
                Ok(())
            }
            ClientMessage::TextQuery { text } => {
                self.pump();
                let now = self.event_time();
                self.apply(SchedulerEvent::TextQuery(text), now);
                Ok(())
            }
            ClientMessage::Bye => {
                self.close();
                Ok(())
            }
        }
    }

    /// Feeds samples to the VAD frame by frame so each event is handled at
    /// the stream position where it was detected.
    pub fn push_audio(&mut self, samples: &[f32]) {
        let frame = self.vad.frame_len() as u64;
        let mut rest = samples;
        while !rest.is_empty() {
            let room = (frame - self.samples_fed % frame) as usize;
            let (head, tail) = rest.split_at(room.min(rest.len()));
            let events = self.vad.process_chunk(head);
            self.samples_fed += head.len() as u64;
            rest = tail;
            if !events.is_empty() {
                self.catch_up();
                self.handle_vad(events);
            }
        }
        self.catch_up();
    }

    fn event_time(&self) -> SimTime {
        match self.clock.mode() {
            ClockMode::Virtual => self.stream_time().max(self.clock.now()),
            ClockMode::Real => self.clock.now(),
        }
    }

    /// Brings backends up to the current stream position (virtual) or wall
    /// time (real).
    fn catch_up(&mut self) {
        match self.clock.mode() {
            ClockMode::Virtual => self.run_until(self.stream_time()),
            ClockMode::Real => self.pump(),
        }
    }

    fn handle_vad(&mut self, events: Vec<VadEvent>) {
        for event in events {
            let now = self.event_time();
            match event.kind {
                VadEventKind::SpeechStart => self.apply(SchedulerEvent::SpeechStarted, now),
                VadEventKind::SpeechEnd(mut segment) => {
                    segment.tag = tag_segment(
                        &self.settings.utterances,
                        segment.start_time,
                        segment.end_time,
                    );
                    self.apply(SchedulerEvent::UtteranceReady(segment), now);
                }
            }
        }
    }

    /// Earliest pending backend event as (slot, time); slot A wins ties.
    pub fn next_deadline(&self) -> Option<SimTime> {
        self.next_backend().map(|(_, t)| t)
    }

    fn next_backend(&self) -> Option<(usize, SimTime)> {
        (0..2)
            .filter_map(|i| self.backends[i].next_deadline().map(|t| (i, t)))
            .min_by_key(|&(i, t)| (t, i))
    }

    /// Delivers every backend event due up to `t`, advancing the virtual clock.
    pub fn run_until(&mut self, t: SimTime) {
        while let Some((slot, due)) = self.next_backend() {
            if due > t {
                break;
            }
            self.clock.advance_to(due);
            self.poll_slot(slot, self.clock.now());
        }
        self.clock.advance_to(t);
    }

    /// Delivers every backend event due at the current clock reading.
    pub fn pump(&mut self) {
        let now = self.clock.now();
        loop {
            let mut progressed = false;
            for slot in 0..2 {
                if self.backends[slot]
                    .next_deadline()
                    .is_some_and(|d| d <= now)
                {
                    progressed |= self.poll_slot(slot, now);
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn poll_slot(&mut self, slot: usize, now: SimTime) -> bool {
        match self.backends[slot].poll(now) {
            Some((request_id, event)) => {
                let slot = if slot == 0 { SlotId::A } else { SlotId::B };
                self.apply(
                    SchedulerEvent::Backend {
                        slot,
                        request_id,
                        event,
                    },
                    now,
                );
                true
            }
            None => false,
        }
    }

    fn apply(&mut self, event: SchedulerEvent, now: SimTime) {
        let transition = self.scheduler.handle(event, now);
        if let Err(e) = self.scheduler.check_invariants() {
            tracing::error!(error = %e, seq = transition.record.seq, "scheduler invariant broken");
            self.invariant_violations += 1;
        }
        for (slot, request) in transition.submits {
            self.backends[slot.index()].submit(request, now);
        }
        let record = transition.record;
        self.outbox.extend(record.notifications.iter().cloned());
        if let Some(sink) = self.trace_sink.as_mut() {
            let line = serde_json::to_string(&record).expect("trace record serializes");
            if let Err(e) = writeln!(sink, "{line}") {
                tracing::warn!(error = %e, "trace write failed; tracing disabled");
                self.trace_sink = None;
            }
        }
        if self.settings.keep_trace {
            self.trace.push(record);
        }
    }

    /// Under the virtual clock, runs until nothing is pending.
    pub fn settle(&mut self) {
        if self.clock.mode() != ClockMode::Virtual {
            return;
        }
        for _ in 0..DRAIN_STEP_LIMIT {
            match self.next_backend() {
                Some((_, due)) => self.run_until(due),
                None => break,
            }
        }
    }

    /// End of stream: flushes the VAD, lets the conversation finish under the
    /// virtual clock, then cancels whatever is still running.
    pub fn close(&mut self) {
        if self.is_closed() {
            return;
        }
        let events = self.vad.finish();
        self.catch_up();
        self.handle_vad(events);
        self.settle();
        let now = self.event_time();
        self.apply(SchedulerEvent::ClientDisconnect, now);
        self.settle();
        if let Some(sink) = self.trace_sink.as_mut() {
            let _ = sink.flush();
        }
    }

    /// Feeds a labelled segment straight to the scheduler, bypassing the VAD.
    pub fn inject_segment(&mut self, segment: AudioSegment) {
        let now = self.event_time();
        self.apply(SchedulerEvent::UtteranceReady(segment), now);
    }
}

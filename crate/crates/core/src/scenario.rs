//! Scripted sessions: a timeline of spoken queries, noise and typed text is
//! turned into the exact client message stream a live client would send, run
//! through a fresh [`Session`] and checked against expectations.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{LabelMap, MockLabel, WILDCARD_LABEL};
use crate::clock::ClockMode;
use crate::conversation::{StateToken, TurnId};
use crate::pcm::{decode_s16le, encode_s16le, sine, PcmError};
use crate::protocol::{
    ClientMessage, HelloConfig, MockSessionConfig, ServerMessage, UtteranceSpan,
};
use crate::scheduler::TraceRecord;
use crate::session::{Session, SessionError, SessionSettings};
use crate::vad::VadConfig;

/// Audio is streamed in chunks of this length.
pub const CHUNK_S: f64 = 0.1;
/// Silence appended after the last timeline entry so the VAD can close.
pub const TRAILING_SILENCE_S: f64 = 1.0;
const TONE_HZ: f64 = 440.0;
const TONE_AMPLITUDE: f32 = 0.3;
const DEFAULT_TONE_S: f64 = 0.6;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("audio file {path}: {source}")]
    Audio { path: PathBuf, source: PcmError },
    #[error(transparent)]
    Session(#[from] SessionError),
}

fn default_sample_rate() -> u32 {
    16_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    /// A spoken query: raw 16-bit mono PCM from `file`, or a tone placeholder.
    Audio {
        utterance: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tone_s: Option<f64>,
    },
    /// Background speech; labelled `<2>` automatically.
    Noise {
        utterance: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tone_s: Option<f64>,
    },
    Text {
        text: String,
        /// Scripted reply; registers a label keyed by the text.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        answer: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens_per_second: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub at: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppressed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interrupts: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered_turn_ids: Option<Vec<TurnId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    pub timeline: Vec<TimelineEntry>,
    #[serde(default)]
    pub labels: LabelMap,
    #[serde(default)]
    pub expectations: Expectations,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vad: Option<VadConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classify_latency_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub answered: u64,
    pub completed: u64,
    pub suppressed: u64,
    pub interrupts: u64,
    pub swaps: u64,
    pub dropped: u64,
    pub faults: u64,
    pub backend_violations: u64,
    pub invariant_violations: u64,
    pub answered_turn_ids: Vec<TurnId>,
    /// One line per unmet expectation: `field: expected X, observed Y`.
    pub failures: Vec<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub trace: Vec<TraceRecord>,
    pub messages: Vec<ServerMessage>,
}

/// Client messages for a scenario plus the timing needed to replay them live.
#[derive(Debug, Clone)]
pub struct ClientScript {
    /// `(stream time in seconds, message)`; `hello` first, `bye` last.
    pub messages: Vec<(f64, ClientMessage)>,
    pub clock: ClockMode,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if self.sample_rate == 0 {
            return invalid("sample_rate must be positive".into());
        }
        if self.timeline.windows(2).any(|w| w[1].at < w[0].at) {
            return invalid("timeline is not sorted by `at`".into());
        }
        if let Some(entry) = self
            .timeline
            .iter()
            .find(|e| !(e.at >= 0.0 && e.at.is_finite()))
        {
            return invalid(format!("bad time {}", entry.at));
        }
        let labels = self.effective_labels();
        for entry in &self.timeline {
            let key = match &entry.action {
                Action::Audio {
                    utterance, tone_s, ..
                }
                | Action::Noise {
                    utterance, tone_s, ..
                } => {
                    if tone_s.is_some_and(|d| d.is_nan() || d <= 0.0) {
                        return invalid(format!("{utterance}: tone_s must be positive"));
                    }
                    utterance
                }
                Action::Text { text, .. } => text,
            };
            if !labels.contains_key(key) && !labels.contains_key(WILDCARD_LABEL) {
                return invalid(format!("no label for {key:?}"));
            }
        }
        Ok(())
    }

    /// Declared labels plus the implicit ones for noise and scripted text.
    pub fn effective_labels(&self) -> LabelMap {
        let mut labels = self.labels.clone();
        for entry in &self.timeline {
            match &entry.action {
                Action::Noise { utterance, .. } => {
                    labels.insert(utterance.clone(), MockLabel::noise());
                }
                Action::Text {
                    text,
                    answer: Some(answer),
                    tokens_per_second,
                } => {
                    let mut label =
                        MockLabel::query(answer.clone(), tokens_per_second.unwrap_or(10.0));
                    label.state_token = StateToken::QueryText;
                    labels.insert(text.clone(), label);
                }
                _ => {}
            }
        }
        labels
    }

    fn load_audio(&self, file: &Path, base_dir: &Path) -> Result<Vec<f32>, ScenarioError> {
        let path = base_dir.join(file);
        let bytes = std::fs::read(&path).map_err(|source| ScenarioError::Io {
            path: path.clone(),
            source,
        })?;
        decode_s16le(&bytes).map_err(|source| ScenarioError::Audio { path, source })
    }

    /// Renders the timeline into the audio stream and message sequence a live
    /// client would send. Audio files resolve against `base_dir`.
    pub fn client_script(&self, base_dir: &Path) -> Result<ClientScript, ScenarioError> {
        let sr = self.sample_rate as f64;
        let mut spans = Vec::new();
        let mut bursts = Vec::new();
        let mut texts = Vec::new();
        for entry in &self.timeline {
            match &entry.action {
                Action::Audio {
                    utterance,
                    file,
                    tone_s,
                }
                | Action::Noise {
                    utterance,
                    file,
                    tone_s,
                } => {
                    let pcm = match file {
                        Some(file) => self.load_audio(file, base_dir)?,
                        None => sine(
                            TONE_HZ,
                            tone_s.unwrap_or(DEFAULT_TONE_S),
                            self.sample_rate,
                            TONE_AMPLITUDE,
                        ),
                    };
                    let start = (entry.at * sr).round() as usize;
                    spans.push(UtteranceSpan {
                        utterance: utterance.clone(),
                        start: entry.at,
                        end: (start + pcm.len()) as f64 / sr,
                    });
                    bursts.push((start, pcm));
                }
                Action::Text { text, .. } => {
                    texts.push(((entry.at * sr).round() as usize, text.clone()))
                }
            }
        }
        let audio_end = bursts.iter().map(|(s, p)| s + p.len()).max().unwrap_or(0);
        let text_end = texts.iter().map(|(s, _)| *s).max().unwrap_or(0);
        let total = audio_end.max(text_end) + (TRAILING_SILENCE_S * sr).round() as usize;
        let mut stream = vec![0.0f32; total];
        for (start, pcm) in &bursts {
            for (dst, src) in stream[*start..].iter_mut().zip(pcm) {
                *dst = (*dst + src).clamp(-1.0, 1.0);
            }
        }

        let mut messages = vec![(
            0.0,
            ClientMessage::Hello {
                config: HelloConfig {
                    sample_rate: Some(self.sample_rate),
                    clock: Some(self.clock),
                    mock: Some(MockSessionConfig {
                        labels: self.effective_labels(),
                        utterances: spans,
                    }),
                },
            },
        )];
        let chunk = ((CHUNK_S * sr).round() as usize).max(1);
        let mut pos = 0;
        let mut pending_texts = texts.into_iter().peekable();
        while pos < total {
            while let Some((_, text)) = pending_texts.next_if(|(at, _)| *at <= pos) {
                messages.push((pos as f64 / sr, ClientMessage::TextQuery { text }));
            }
            let mut end = (pos + chunk).min(total);
            if let Some((at, _)) = pending_texts.peek() {
                end = end.min(*at).max(pos + 1);
            }
            let pcm =
                base64::engine::general_purpose::STANDARD.encode(encode_s16le(&stream[pos..end]));
            messages.push((
                pos as f64 / sr,
                ClientMessage::AudioChunk {
                    pcm,
                    sample_rate: self.sample_rate,
                },
            ));
            pos = end;
        }
        for (_, text) in pending_texts {
            messages.push((total as f64 / sr, ClientMessage::TextQuery { text }));
        }
        messages.push((total as f64 / sr, ClientMessage::Bye));
        Ok(ClientScript {
            messages,
            clock: self.clock,
        })
    }

    /// Session settings for this scenario on top of `base`.
    pub fn settings(&self, base: &SessionSettings) -> SessionSettings {
        let mut settings = base.clone();
        if let Some(vad) = self.vad {
            settings.vad = vad;
        }
        if let Some(ms) = self.classify_latency_ms {
            settings.backend.classify_latency_ms = ms;
        }
        settings
    }

    pub fn evaluate(&self, report: &mut ScenarioReport) {
        let e = &self.expectations;
        let mut check = |field: &str, expected: Option<u64>, observed: u64| {
            if let Some(expected) = expected {
                if expected != observed {
                    report
                        .failures
                        .push(format!("{field}: expected {expected}, observed {observed}"));
                }
            }
        };
        check("answered", e.answered, report.answered);
        check("completed", e.completed, report.completed);
        check("suppressed", e.suppressed, report.suppressed);
        check("interrupts", e.interrupts, report.interrupts);
        check("invariant_violations", Some(0), report.invariant_violations);
        if let Some(ids) = &e.answered_turn_ids {
            if *ids != report.answered_turn_ids {
                report.failures.push(format!(
                    "answered_turn_ids: expected {ids:?}, observed {:?}",
                    report.answered_turn_ids
                ));
            }
        }
    }
}

/// Options for [`run_scenario`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub base_dir: PathBuf,
    /// Force the virtual clock regardless of the scenario's setting.
    pub force_virtual: bool,
    pub trace_path: Option<PathBuf>,
}

/// Builds a session from a script's `hello` and settings.
pub fn session_for(base: &SessionSettings, hello: &HelloConfig) -> Result<Session, SessionError> {
    let mut settings = base.clone();
    settings.apply_hello(hello);
    Session::new(settings)
}

pub fn run_scenario(
    scenario: &Scenario,
    base: &SessionSettings,
    options: &RunOptions,
) -> Result<ScenarioOutcome, ScenarioError> {
    let mut script = scenario.client_script(&options.base_dir)?;
    if options.force_virtual {
        script.clock = ClockMode::Virtual;
    }
    let mut settings = scenario.settings(base);
    settings.keep_trace = true;
    let mut messages = script.messages.into_iter();
    let hello = match messages.next() {
        Some((_, ClientMessage::Hello { mut config })) => {
            config.clock = Some(script.clock);
            config
        }
        _ => unreachable!("scripts start with hello"),
    };
    let mut session = session_for(&settings, &hello)?;
    if let Some(path) = &options.trace_path {
        let file = std::fs::File::create(path).map_err(|source| ScenarioError::Io {
            path: path.clone(),
            source,
        })?;
        session.set_trace_sink(Box::new(std::io::BufWriter::new(file)));
    }
    let started = Instant::now();
    let mut out = Vec::new();
    for (at, msg) in messages {
        if script.clock == ClockMode::Real {
            pace_until(
                &mut session,
                started + Duration::from_secs_f64(at),
                &mut out,
            );
            if matches!(msg, ClientMessage::Bye) {
                settle_real(&mut session, &mut out);
            }
        }
        session.handle_client(msg)?;
        out.extend(session.take_outbox());
    }
    let stats = session.stats().clone();
    let mut report = ScenarioReport {
        name: scenario.name.clone(),
        answered: stats.answered,
        completed: stats.completed,
        suppressed: stats.suppressed,
        interrupts: stats.interrupts,
        swaps: stats.swaps,
        dropped: stats.dropped,
        faults: stats.faults,
        backend_violations: session.backend_violations(),
        invariant_violations: session.invariant_violations(),
        answered_turn_ids: stats.answered_turn_ids,
        failures: Vec::new(),
    };
    scenario.evaluate(&mut report);
    Ok(ScenarioOutcome {
        report,
        trace: session.trace().to_vec(),
        messages: out,
    })
}

fn pace_until(session: &mut Session, deadline: Instant, out: &mut Vec<ServerMessage>) {
    loop {
        session.pump();
        out.extend(session.take_outbox());
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        std::thread::sleep((deadline - now).min(Duration::from_millis(5)));
    }
}

/// Waits (bounded) for outstanding answers before a real-clock run ends.
fn settle_real(session: &mut Session, out: &mut Vec<ServerMessage>) {
    let limit = Instant::now() + Duration::from_secs(30);
    while !session.scheduler().is_quiescent() && Instant::now() < limit {
        pace_until(session, Instant::now() + Duration::from_millis(5), out);
    }
}

//! Streaming voice-activity detection and utterance segmentation.
//!
//! Audio is cut into fixed frames. A [`FrameClassifier`] scores each frame;
//! scores of 0.5 or more count as speech. An utterance opens on the first
//! speech frame and closes after `hangover_frames` consecutive non-speech
//! frames. Utterances whose voiced span is shorter than `min_utterance_ms`
//! never surface: `SpeechStart` is only announced once the voiced span
//! reaches that length, so start and end events always pair up.
//!
//! Framing depends only on the cumulative sample count, so any chunking of
//! the same stream yields the same events.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VadError {
    #[error("invalid VAD configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    pub frame_ms: u32,
    pub energy_threshold_db: f64,
    pub hangover_frames: u32,
    pub min_utterance_ms: u32,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 30,
            energy_threshold_db: -40.0,
            hangover_frames: 10,
            min_utterance_ms: 200,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), VadError> {
        if self.frame_ms == 0 {
            return Err(VadError::Config("frame_ms must be positive"));
        }
        if self.min_utterance_ms < self.frame_ms {
            return Err(VadError::Config("min_utterance_ms must be >= frame_ms"));
        }
        if !self.energy_threshold_db.is_finite() {
            return Err(VadError::Config("energy_threshold_db must be finite"));
        }
        Ok(())
    }
}

/// Scores one frame with a speech probability in [0, 1].
pub trait FrameClassifier: Send {
    fn classify_frame(&mut self, frame: &[f32]) -> f32;
}

/// Mean-square energy of a frame in dB relative to full scale (1.0).
pub fn frame_energy_db(frame: &[f32]) -> f64 {
    if frame.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mean_square =
        frame.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / frame.len() as f64;
    10.0 * mean_square.log10()
}

/// Reference detector: 1.0 when frame energy reaches the threshold (inclusive).
#[derive(Debug, Clone, Copy)]
pub struct EnergyDetector {
    pub threshold_db: f64,
}

impl FrameClassifier for EnergyDetector {
    fn classify_frame(&mut self, frame: &[f32]) -> f32 {
        if frame_energy_db(frame) >= self.threshold_db {
            1.0
        } else {
            0.0
        }
    }
}

impl<F: FnMut(&[f32]) -> f32 + Send> FrameClassifier for F {
    fn classify_frame(&mut self, frame: &[f32]) -> f32 {
        self(frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSegment {
    pub segment_id: u64,
    pub pcm: Vec<f32>,
    /// Seconds from stream start.
    pub start_time: f64,
    pub end_time: f64,
    /// Utterance key used to look up scripted labels, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl AudioSegment {
    pub fn duration(&self) -> f64 {
        self.end_time - self.start_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VadEventKind {
    SpeechStart,
    SpeechEnd(AudioSegment),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadEvent {
    pub kind: VadEventKind,
    pub time: f64,
}

#[derive(Debug)]
enum Activity {
    Silence,
    Speech {
        start_frame: u64,
        voiced_frames: u64,
        silent_run: u32,
        pcm: Vec<f32>,
        announced: bool,
    },
}

/// Per-stream detector state.
pub struct VadStream<D: FrameClassifier = EnergyDetector> {
    config: VadConfig,
    detector: D,
    sample_rate: u32,
    frame_len: usize,
    pending: Vec<f32>,
    frames_seen: u64,
    activity: Activity,
    next_segment_id: u64,
}

impl VadStream<EnergyDetector> {
    pub fn energy(config: VadConfig, sample_rate: u32) -> Result<Self, VadError> {
        let detector = EnergyDetector {
            threshold_db: config.energy_threshold_db,
        };
        Self::new(config, sample_rate, detector)
    }
}

impl<D: FrameClassifier> VadStream<D> {
    pub fn new(config: VadConfig, sample_rate: u32, detector: D) -> Result<Self, VadError> {
        config.validate()?;
        let frame_len = (sample_rate as u64 * config.frame_ms as u64 / 1000) as usize;
        if frame_len == 0 {
            return Err(VadError::Config("frame shorter than one sample"));
        }
        Ok(Self {
            config,
            detector,
            sample_rate,
            frame_len,
            pending: Vec::with_capacity(frame_len),
            frames_seen: 0,
            activity: Activity::Silence,
            next_segment_id: 1,
        })
    }

    pub fn config(&self) -> &VadConfig {
        &self.config
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn is_in_speech(&self) -> bool {
        matches!(
            self.activity,
            Activity::Speech {
                announced: true,
                ..
            }
        )
    }

    fn frame_time(&self, frame: u64) -> f64 {
        (frame * self.frame_len as u64) as f64 / self.sample_rate as f64
    }

    fn long_enough(&self, voiced_frames: u64) -> bool {
        voiced_frames * self.frame_len as u64 * 1000
            >= self.config.min_utterance_ms as u64 * self.sample_rate as u64
    }

    pub fn process_chunk(&mut self, chunk: &[f32]) -> Vec<VadEvent> {
        let mut events = Vec::new();
        let mut rest = chunk;
        while !rest.is_empty() {
            let need = self.frame_len - self.pending.len();
            let take = need.min(rest.len());
            self.pending.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
            if self.pending.len() == self.frame_len {
                let frame = std::mem::take(&mut self.pending);
                self.step_frame(&frame, &mut events);
                self.pending = frame;
                self.pending.clear();
            }
        }
        events
    }

    /// Closes any open utterance at end of stream. A trailing partial frame is dropped.
    pub fn finish(&mut self) -> Vec<VadEvent> {
        let mut events = Vec::new();
        self.pending.clear();
        self.close(&mut events);
        events
    }

    fn step_frame(&mut self, frame: &[f32], events: &mut Vec<VadEvent>) {
        let index = self.frames_seen;
        self.frames_seen += 1;
        let is_speech = self.detector.classify_frame(frame) >= 0.5;
        let hangover = self.config.hangover_frames;

        enum Next {
            Stay,
            Announce,
            Close,
        }
        let next = match &mut self.activity {
            Activity::Silence if is_speech => {
                self.activity = Activity::Speech {
                    start_frame: index,
                    voiced_frames: 1,
                    silent_run: 0,
                    pcm: frame.to_vec(),
                    announced: false,
                };
                Next::Announce
            }
            Activity::Silence => Next::Stay,
            Activity::Speech {
                voiced_frames,
                silent_run,
                pcm,
                ..
            } => {
                if is_speech {
                    // silence inside the hangover window becomes part of the utterance
                    *voiced_frames += *silent_run as u64 + 1;
                    *silent_run = 0;
                    pcm.extend_from_slice(frame);
                    Next::Announce
                } else if hangover == 0 {
                    Next::Close
                } else {
                    *silent_run += 1;
                    pcm.extend_from_slice(frame);
                    if *silent_run >= hangover {
                        Next::Close
                    } else {
                        Next::Stay
                    }
                }
            }
        };
        match next {
            Next::Stay => {}
            Next::Announce => self.maybe_announce(events),
            Next::Close => self.close(events),
        }
    }

    fn maybe_announce(&mut self, events: &mut Vec<VadEvent>) {
        let (start, voiced, already) = match &self.activity {
            Activity::Speech {
                start_frame,
                voiced_frames,
                announced,
                ..
            } => (*start_frame, *voiced_frames, *announced),
            Activity::Silence => return,
        };
        if !already && self.long_enough(voiced) {
            if let Activity::Speech { announced, .. } = &mut self.activity {
                *announced = true;
            }
            events.push(VadEvent {
                kind: VadEventKind::SpeechStart,
                time: self.frame_time(start),
            });
        }
    }

    fn close(&mut self, events: &mut Vec<VadEvent>) {
        let activity = std::mem::replace(&mut self.activity, Activity::Silence);
        if let Activity::Speech {
            start_frame,
            pcm,
            announced: true,
            ..
        } = activity
        {
            let frames = (pcm.len() / self.frame_len) as u64;
            let start_time = self.frame_time(start_frame);
            let end_time = self.frame_time(start_frame + frames);
            let segment_id = self.next_segment_id;
            self.next_segment_id += 1;
            events.push(VadEvent {
                kind: VadEventKind::SpeechEnd(AudioSegment {
                    segment_id,
                    pcm,
                    start_time,
                    end_time,
                    tag: None,
                }),
                time: end_time,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcm::sine;
    use proptest::prelude::*;

    const SR: u32 = 16_000;

    fn silence(secs: f64) -> Vec<f32> {
        vec![0.0; (secs * SR as f64).round() as usize]
    }

    fn run(stream: &mut VadStream, pcm: &[f32]) -> Vec<VadEvent> {
        let mut events = stream.process_chunk(pcm);
        events.extend(stream.finish());
        events
    }

    #[test]
    fn silence_yields_nothing() {
        let mut vad = VadStream::energy(VadConfig::default(), SR).unwrap();
        assert!(run(&mut vad, &silence(1.0)).is_empty());
    }

    #[test]
    fn tone_burst_segment_boundaries() {
        // 300 ms full-scale tone between 500 ms of silence on each side.
        // 30 ms frames = 480 samples. The tone covers samples [8000, 12800),
        // so frames 16 (partially) through 26 (partially) are above threshold:
        // 11 voiced frames, then 10 hangover frames, closing at frame 37.
        let mut pcm = silence(0.5);
        pcm.extend(sine(440.0, 0.3, SR, 1.0));
        pcm.extend(silence(0.5));
        let mut vad = VadStream::energy(VadConfig::default(), SR).unwrap();
        let events = run(&mut vad, &pcm);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].kind, VadEventKind::SpeechStart);
        assert!((events[0].time - 16.0 * 0.03).abs() < 1e-9);
        let VadEventKind::SpeechEnd(seg) = &events[1].kind else {
            panic!("expected SpeechEnd");
        };
        assert!((seg.start_time - 0.48).abs() < 1e-9);
        assert!((seg.end_time - 37.0 * 0.03).abs() < 1e-9);
        assert_eq!(seg.pcm.len(), 21 * 480);
        let expected = 0.3 + 10.0 * 0.03;
        assert!((seg.duration() - expected).abs() <= 2.0 * 0.03 + 1e-9);
    }

    #[test]
    fn short_blip_is_discarded() {
        let mut pcm = silence(0.5);
        pcm.extend(sine(440.0, 0.1, SR, 1.0));
        pcm.extend(silence(0.8));
        let mut vad = VadStream::energy(VadConfig::default(), SR).unwrap();
        assert!(run(&mut vad, &pcm).is_empty());
    }

    #[test]
    fn classify_frame_edges() {
        let mut det = EnergyDetector {
            threshold_db: -40.0,
        };
        assert_eq!(det.classify_frame(&[0.0; 480]), 0.0);
        assert_eq!(det.classify_frame(&[1.0; 480]), 1.0);
        assert_eq!(det.classify_frame(&[-1.0; 480]), 1.0);
        // a constant 0.5 frame sits exactly on a threshold of 10*log10(0.25)
        let mut det = EnergyDetector {
            threshold_db: 10.0 * 0.25f64.log10(),
        };
        assert_eq!(frame_energy_db(&[0.5; 480]), det.threshold_db);
        assert_eq!(det.classify_frame(&[0.5; 480]), 1.0);
        assert_eq!(det.classify_frame(&[0.4999; 480]), 0.0);
    }

    #[test]
    fn soft_scores_threshold_at_half() {
        let mut pcm = silence(0.3);
        pcm.extend(vec![0.3; 8000]);
        pcm.extend(silence(0.6));
        let soft = |frame: &[f32]| if frame[0] > 0.0 { 0.5 } else { 0.49 };
        let mut vad = VadStream::new(VadConfig::default(), SR, soft).unwrap();
        let mut events = vad.process_chunk(&pcm);
        events.extend(vad.finish());
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn config_validation() {
        let bad = VadConfig {
            min_utterance_ms: 10,
            ..VadConfig::default()
        };
        assert!(VadStream::energy(bad, SR).is_err());
        let bad = VadConfig {
            frame_ms: 0,
            ..VadConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_hangover_closes_on_first_silent_frame() {
        let config = VadConfig {
            hangover_frames: 0,
            ..VadConfig::default()
        };
        let mut pcm = silence(0.3);
        pcm.extend(vec![0.5; 480 * 10]);
        pcm.extend(silence(0.3));
        let mut vad = VadStream::energy(config, SR).unwrap();
        let events = vad.process_chunk(&pcm);
        let VadEventKind::SpeechEnd(seg) = &events[1].kind else {
            panic!()
        };
        assert_eq!(seg.pcm.len(), 480 * 10);
    }

    fn signal() -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec((any::<bool>(), 1usize..40), 1..12).prop_map(|runs| {
            runs.into_iter()
                .flat_map(|(loud, frames)| {
                    let amp = if loud { 0.4 } else { 0.0 };
                    (0..frames * 160).map(move |i| if i % 2 == 0 { amp } else { -amp })
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn events_alternate_and_segments_are_long_enough(pcm in signal()) {
            let config = VadConfig::default();
            let mut vad = VadStream::energy(config, SR).unwrap();
            let events = run(&mut vad, &pcm);
            let mut open = false;
            for ev in &events {
                match &ev.kind {
                    VadEventKind::SpeechStart => { prop_assert!(!open); open = true; }
                    VadEventKind::SpeechEnd(seg) => {
                        prop_assert!(open);
                        open = false;
                        prop_assert!(seg.end_time > seg.start_time);
                        prop_assert!(seg.duration() * 1000.0 + 1e-6 >= config.min_utterance_ms as f64);
                    }
                }
            }
            prop_assert!(!open);
        }

        #[test]
        fn chunking_does_not_change_events(
            pcm in signal(),
            cuts in proptest::collection::vec(0usize..4000, 0..20),
        ) {
            let mut whole = VadStream::energy(VadConfig::default(), SR).unwrap();
            let expected = run(&mut whole, &pcm);
            let mut chunked = VadStream::energy(VadConfig::default(), SR).unwrap();
            let mut events = Vec::new();
            let mut rest = &pcm[..];
            for cut in cuts {
                let n = cut.min(rest.len());
                events.extend(chunked.process_chunk(&rest[..n]));
                rest = &rest[n..];
            }
            events.extend(chunked.process_chunk(rest));
            events.extend(chunked.finish());
            prop_assert_eq!(events, expected);
        }
    }
}

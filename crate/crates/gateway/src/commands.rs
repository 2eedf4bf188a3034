//! Offline subcommands: scenario simulation, packing, noise sampling and
//! token budgeting.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use duplex_core::config::EngineConfig;
use duplex_core::media::{
    audio_token_count, mel_features, plan_image_tiles, plan_video_frames, MelConfig,
};
use duplex_core::packer::{pack, sample_noise_corpus, Sample};
use duplex_core::pcm::decode_s16le;
use duplex_core::scenario::{run_scenario, RunOptions, Scenario, ScenarioReport};
use duplex_core::session::SessionSettings;
use serde::Serialize;

pub fn load_config(path: Option<&Path>) -> anyhow::Result<EngineConfig> {
    match path {
        Some(path) => Ok(EngineConfig::load(path)?),
        None => Ok(EngineConfig::default()),
    }
}

/// Runs a scenario file and returns its report.
pub fn simulate(
    scenario_path: &Path,
    config: &EngineConfig,
    trace: Option<PathBuf>,
    virtual_clock: bool,
) -> anyhow::Result<ScenarioReport> {
    let scenario = Scenario::load(scenario_path)?;
    let base_dir = scenario_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let options = RunOptions {
        base_dir,
        force_virtual: virtual_clock,
        trace_path: trace,
    };
    let outcome = run_scenario(&scenario, &SessionSettings::from_config(config), &options)?;
    Ok(outcome.report)
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let file =
        std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| l.map_err(Into::into))
        .collect()
}

fn write_json_lines<T: Serialize>(items: &[T], out: &mut dyn Write) -> anyhow::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines manifest of samples and writes one packed bin per line.
pub fn pack_manifest(input: &Path, cap: u64, out: &mut dyn Write) -> anyhow::Result<usize> {
    let samples = read_lines(input)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str::<Sample>(line)
                .with_context(|| format!("{}:{}: bad sample", input.display(), i + 1))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let bins = pack(&samples, cap)?;
    write_json_lines(&bins, out)?;
    Ok(bins.len())
}

#[derive(Debug, Serialize)]
struct NoiseEntry {
    text: String,
    /// Filled in once the sentence has been synthesized to speech.
    audio_path: Option<String>,
}

/// Samples `k` noise sentences from `answers` (one per line) matching the
/// word-length profile of `positives` (one question per line).
pub fn sample_noise(
    answers: &Path,
    positives: &Path,
    k: usize,
    seed: u64,
    out: &mut dyn Write,
) -> anyhow::Result<usize> {
    let answers = read_lines(answers)?;
    let lengths: Vec<usize> = read_lines(positives)?
        .iter()
        .map(|q| q.split_whitespace().count())
        .collect();
    let picked = sample_noise_corpus(&answers, &lengths, k, seed)?;
    let entries: Vec<NoiseEntry> = picked
        .into_iter()
        .map(|text| NoiseEntry {
            text,
            audio_path: None,
        })
        .collect();
    write_json_lines(&entries, out)?;
    Ok(entries.len())
}

#[derive(Debug, Clone)]
pub enum TokenizeRequest {
    Audio {
        duration: f64,
    },
    Video {
        duration: f64,
    },
    Image {
        width: u32,
        height: u32,
        max_tiles: u32,
    },
    Mel {
        input: PathBuf,
        sample_rate: u32,
    },
}

pub fn tokenize(request: &TokenizeRequest) -> anyhow::Result<serde_json::Value> {
    use serde_json::json;
    Ok(match request {
        TokenizeRequest::Audio { duration } => json!({
            "duration": duration,
            "tokens": audio_token_count(*duration)?,
        }),
        TokenizeRequest::Video { duration } => {
            let plan = plan_video_frames(*duration)?;
            let per_frame = duplex_core::media::plan_video_frame_tile().token_count;
            json!({
                "duration": duration,
                "frame_count": plan.frame_count,
                "timestamps": plan.timestamps,
                "tokens": per_frame * plan.frame_count as u64,
            })
        }
        TokenizeRequest::Image {
            width,
            height,
            max_tiles,
        } => serde_json::to_value(plan_image_tiles(*width, *height, *max_tiles)?)?,
        TokenizeRequest::Mel { input, sample_rate } => {
            let bytes =
                std::fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
            let pcm = decode_s16le(&bytes)?;
            if *sample_rate == 0 {
                bail!("sample rate must be positive");
            }
            let mel = mel_features(&pcm, *sample_rate, &MelConfig::default())?;
            json!({
                "frames": mel.num_frames(),
                "bins": mel.frames.first().map_or(0, Vec::len),
                "frame_hop": mel.frame_hop,
                "audio_tokens": audio_token_count(pcm.len() as f64 / *sample_rate as f64).unwrap_or(0),
            })
        }
    })
}

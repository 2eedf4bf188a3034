//! Media-to-token budget arithmetic for video, images and audio.

mod audio;
mod image;
mod mel;
mod video;

pub use audio::{audio_frame_count, audio_token_count, AUDIO_DOWNSAMPLE, AUDIO_HOP_S};
pub use image::{
    plan_image_tiles, plan_video_frame_tile, TilePlan, DEFAULT_MAX_TILES, TOKENS_PER_TILE,
};
pub use mel::{mel_features, mel_filter_centers, MelConfig, MelSpectrogram};
pub use video::{plan_video_frames, FramePlan, MAX_VIDEO_FRAMES, MIN_VIDEO_FRAMES};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MediaError {
    #[error("duration must be positive and finite, got {0}")]
    NonPositiveDuration(f64),
    #[error("duration must be non-negative and finite, got {0}")]
    NegativeDuration(f64),
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("max_tiles must be at least 1")]
    NoTiles,
    #[error("invalid mel configuration: {0}")]
    MelConfig(&'static str),
}

use serde::{Deserialize, Serialize};

use super::MediaError;

pub const MIN_VIDEO_FRAMES: u32 = 4;
pub const MAX_VIDEO_FRAMES: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frame_count: u32,
    /// Sample instants in seconds, midpoint of each of `frame_count` equal spans.
    pub timestamps: Vec<f64>,
}

/// Frame sampling: short clips get 4 frames, clips of 4 to 16 s get one frame
/// per whole second, longer clips 16 frames. Frames sit at span midpoints.
pub fn plan_video_frames(duration: f64) -> Result<FramePlan, MediaError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(MediaError::NonPositiveDuration(duration));
    }
    let frame_count = if duration < MIN_VIDEO_FRAMES as f64 {
        MIN_VIDEO_FRAMES
    } else if duration <= MAX_VIDEO_FRAMES as f64 {
        duration.floor() as u32
    } else {
        MAX_VIDEO_FRAMES
    };
    let span = duration / frame_count as f64;
    let timestamps = (0..frame_count).map(|i| (i as f64 + 0.5) * span).collect();
    Ok(FramePlan {
        frame_count,
        timestamps,
    })
}

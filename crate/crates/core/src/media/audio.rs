use super::MediaError;

/// Mel frame hop of the audio front end.
pub const AUDIO_HOP_S: f64 = 0.010;
/// Total temporal reduction between mel frames and audio tokens.
pub const AUDIO_DOWNSAMPLE: u64 = 8;

const HOP_US: u64 = 10_000;

fn duration_us(duration: f64) -> Result<u64, MediaError> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(MediaError::NegativeDuration(duration));
    }
    Ok((duration * 1e6).round() as u64)
}

/// Mel frames for `duration` seconds at the 10 ms hop, resolved to the microsecond.
pub fn audio_frame_count(duration: f64) -> Result<u64, MediaError> {
    Ok(duration_us(duration)?.div_ceil(HOP_US))
}

/// Audio tokens for `duration` seconds: 12.5 per second, rounded up at frame level.
pub fn audio_token_count(duration: f64) -> Result<u64, MediaError> {
    Ok(audio_frame_count(duration)?.div_ceil(AUDIO_DOWNSAMPLE))
}

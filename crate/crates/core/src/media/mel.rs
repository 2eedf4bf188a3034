use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::MediaError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub num_bins: usize,
    pub energy_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            window_s: 0.025,
            hop_s: 0.010,
            num_bins: 80,
            energy_floor: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    /// `[num_frames][num_mel_bins]` natural-log mel energies.
    pub frames: Vec<Vec<f64>>,
    pub frame_hop: f64,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Per-bin mean over frames.
    pub fn mean_per_bin(&self) -> Vec<f64> {
        let Some(first) = self.frames.first() else {
            return Vec::new();
        };
        let mut acc = vec![0.0; first.len()];
        for frame in &self.frames {
            for (a, v) in acc.iter_mut().zip(frame) {
                *a += v;
            }
        }
        let n = self.frames.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge frequencies of the triangular filters: `num_bins + 2` points evenly
/// spaced on the mel scale over `[0, sample_rate / 2]`.
fn mel_edges(num_bins: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..num_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (num_bins + 1) as f64))
        .collect()
}

/// Center frequency in Hz of each mel filter.
pub fn mel_filter_centers(num_bins: usize, sample_rate: u32) -> Vec<f64> {
    let edges = mel_edges(num_bins, sample_rate);
    edges[1..=num_bins].to_vec()
}

fn filterbank(num_bins: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let edges = mel_edges(num_bins, sample_rate);
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..num_bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=n_fft / 2)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

/// Log mel filter-bank energies: zero-padded centered frames, periodic Hann
/// window, power spectrum, triangular mel filters, natural log with a floor.
///
/// Produces `ceil(len / hop)` frames; frame `t` is centered on sample `t * hop`.
pub fn mel_features(
    pcm: &[f32],
    sample_rate: u32,
    config: &MelConfig,
) -> Result<MelSpectrogram, MediaError> {
    if sample_rate == 0 {
        return Err(MediaError::MelConfig("sample_rate must be positive"));
    }
    if !(config.hop_s > 0.0 && config.window_s >= config.hop_s) {
        return Err(MediaError::MelConfig("need window_s >= hop_s > 0"));
    }
    if config.num_bins == 0 {
        return Err(MediaError::MelConfig("num_bins must be positive"));
    }
    if config.energy_floor.is_nan() || config.energy_floor <= 0.0 {
        return Err(MediaError::MelConfig("energy_floor must be positive"));
    }
    let hop = ((config.hop_s * sample_rate as f64).round() as usize).max(1);
    let win = ((config.window_s * sample_rate as f64).round() as usize).max(hop);
    let n_fft = win.next_power_of_two();
    let num_frames = pcm.len().div_ceil(hop);

    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
        .collect();
    let filters = filterbank(config.num_bins, n_fft, sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let floor_log = config.energy_floor.ln();

    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut frames = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let start = (t * hop) as isize - (win / 2) as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let sample = if i < win {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < pcm.len() {
                    pcm[idx as usize] as f64 * window[i]
                } else {
                    0.0
                }
            } else {
                0.0
            };
            *slot = Complex::new(sample, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = filters
            .iter()
            .map(|filter| {
                let energy: f64 = filter.iter().map(|&(k, w)| w * power[k]).sum();
                if energy > config.energy_floor {
                    energy.ln()
                } else {
                    floor_log
                }
            })
            .collect();
        frames.push(row);
    }

    Ok(MelSpectrogram {
        frames,
        frame_hop: hop as f64 / sample_rate as f64,
        sample_rate,
    })
}

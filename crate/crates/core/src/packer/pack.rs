use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::{audio_token_count, MediaError, TilePlan};

pub const DEFAULT_CONTEXT_CAP: u64 = 6000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackError {
    #[error("sample {sample_id} costs {cost} tokens, above the context cap of {cap}")]
    OverCap {
        sample_id: String,
        cost: u64,
        cap: u64,
    },
    #[error("sample {sample_id}: {source}")]
    Media {
        sample_id: String,
        #[source]
        source: MediaError,
    },
    #[error("sample {0} has zero token cost")]
    Empty(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModalityProfile {
    #[serde(default)]
    pub text_tokens: u64,
    #[serde(default)]
    pub image_plans: Vec<TilePlan>,
    #[serde(default)]
    pub audio_seconds: Vec<f64>,
    #[serde(default)]
    pub is_video: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub modality_profile: ModalityProfile,
    #[serde(default)]
    pub payload_ref: String,
}

impl Sample {
    pub fn token_cost(&self) -> Result<u64, PackError> {
        let profile = &self.modality_profile;
        let mut cost = profile.text_tokens;
        cost += profile
            .image_plans
            .iter()
            .map(|p| p.token_count)
            .sum::<u64>();
        for &secs in &profile.audio_seconds {
            cost += audio_token_count(secs).map_err(|source| PackError::Media {
                sample_id: self.sample_id.clone(),
                source,
            })?;
        }
        if cost == 0 {
            return Err(PackError::Empty(self.sample_id.clone()));
        }
        Ok(cost)
    }

    pub fn is_video(&self) -> bool {
        self.modality_profile.is_video
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBin {
    pub bin_id: u64,
    pub members: Vec<Sample>,
    pub total_tokens: u64,
}

/// First-fit concatenation in arrival order.
///
/// Each non-video sample joins the earliest open bin with room for it; a new
/// bin opens otherwise. Videos are never concatenated and each occupy their
/// own bin regardless of the cap. Bins are numbered in order of creation.
pub fn pack(samples: &[Sample], context_cap: u64) -> Result<Vec<PackedBin>, PackError> {
    let mut bins: Vec<PackedBin> = Vec::new();
    for sample in samples {
        let cost = sample.token_cost()?;
        if sample.is_video() {
            bins.push(PackedBin {
                bin_id: bins.len() as u64,
                members: vec![sample.clone()],
                total_tokens: cost,
            });
            continue;
        }
        if cost > context_cap {
            return Err(PackError::OverCap {
                sample_id: sample.sample_id.clone(),
                cost,
                cap: context_cap,
            });
        }
        let open = bins
            .iter_mut()
            .find(|bin| !bin.members[0].is_video() && bin.total_tokens + cost <= context_cap);
        match open {
            Some(bin) => {
                bin.members.push(sample.clone());
                bin.total_tokens += cost;
            }
            None => bins.push(PackedBin {
                bin_id: bins.len() as u64,
                members: vec![sample.clone()],
                total_tokens: cost,
            }),
        }
    }
    Ok(bins)
}

//! Offline training-data preparation: context packing and noise-corpus sampling.

mod noise;
mod pack;

pub use noise::{length_bucket, sample_noise_corpus, target_allocation, NoiseError, BUCKET_WIDTH};
pub use pack::{pack, ModalityProfile, PackError, PackedBin, Sample, DEFAULT_CONTEXT_CAP};

//! 16-bit little-endian mono PCM helpers. Samples are normalized to [-1, 1).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PcmError {
    #[error("PCM payload has odd byte count {0}")]
    OddLength(usize),
}

pub fn decode_s16le(bytes: &[u8]) -> Result<Vec<f32>, PcmError> {
    if !bytes.len().is_multiple_of(2) {
        return Err(PcmError::OddLength(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect())
}

pub fn encode_s16le(samples: &[f32]) -> Vec<u8> {
    samples
        .iter()
        .flat_map(|&s| {
            let v = (s * 32768.0)
                .round()
                .clamp(i16::MIN as f32, i16::MAX as f32) as i16;
            v.to_le_bytes()
        })
        .collect()
}

/// A sine tone, used for synthetic utterances in scenarios and tests.
pub fn sine(freq_hz: f64, seconds: f64, sample_rate: u32, amplitude: f32) -> Vec<f32> {
    let n = (seconds * sample_rate as f64).round() as usize;
    (0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * freq_hz * i as f64 / sample_rate as f64;
            amplitude * phase.sin() as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn odd_length_is_rejected() {
        assert_eq!(decode_s16le(&[1, 2, 3]), Err(PcmError::OddLength(3)));
        assert_eq!(decode_s16le(&[]).unwrap(), Vec::<f32>::new());
    }

    #[test]
    fn known_values() {
        assert_eq!(
            decode_s16le(&[0x00, 0x80, 0xff, 0x7f]).unwrap(),
            vec![-1.0, 32767.0 / 32768.0]
        );
    }

    proptest! {
        #[test]
        fn integer_samples_survive(raw in proptest::collection::vec(any::<i16>(), 0..256)) {
            let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
            let samples = decode_s16le(&bytes).unwrap();
            prop_assert_eq!(encode_s16le(&samples), bytes);
        }
    }
}

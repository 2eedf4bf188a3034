use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Sentence lengths are grouped into buckets of this many words.
pub const BUCKET_WIDTH: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NoiseError {
    #[error("no answer sentences to sample from")]
    NoAnswers,
    #[error("no positive lengths to match")]
    NoPositives,
    #[error("length bucket [{lo},{hi}] needs {needed} sentences but only {available} are available (short by {})", needed - available)]
    Shortfall {
        lo: usize,
        hi: usize,
        needed: usize,
        available: usize,
    },
}

pub fn length_bucket(words: usize) -> usize {
    words / BUCKET_WIDTH
}

fn word_count(sentence: &str) -> usize {
    sentence.split_whitespace().count()
}

/// Splits `k` across length buckets in proportion to the positive-length
/// histogram, using largest-remainder rounding (ties go to the shorter bucket).
pub fn target_allocation(positive_lengths: &[usize], k: usize) -> BTreeMap<usize, usize> {
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for &len in positive_lengths {
        *hist.entry(length_bucket(len)).or_default() += 1;
    }
    let total = positive_lengths.len();
    if total == 0 {
        return BTreeMap::new();
    }
    let mut quotas: BTreeMap<usize, usize> = BTreeMap::new();
    let mut remainders: Vec<(usize, usize)> = Vec::with_capacity(hist.len());
    let mut assigned = 0;
    for (&bucket, &count) in &hist {
        let exact = k * count;
        quotas.insert(bucket, exact / total);
        assigned += exact / total;
        remainders.push((exact % total, bucket));
    }
    // largest remainder first; on ties the smaller bucket wins
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, bucket) in remainders.iter().take(k - assigned) {
        *quotas.get_mut(&bucket).expect("bucket present") += 1;
    }
    quotas
}

/// Draws `k` distinct answer sentences whose word-length histogram matches
/// the positive question-length histogram. Deterministic for a given seed.
pub fn sample_noise_corpus(
    answer_sentences: &[String],
    positive_lengths: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<String>, NoiseError> {
    if answer_sentences.is_empty() {
        return Err(NoiseError::NoAnswers);
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if positive_lengths.is_empty() {
        return Err(NoiseError::NoPositives);
    }
    let mut by_bucket: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, sentence) in answer_sentences.iter().enumerate() {
        by_bucket
            .entry(length_bucket(word_count(sentence)))
            .or_default()
            .push(idx);
    }

    let quotas = target_allocation(positive_lengths, k);
    for (&bucket, &needed) in &quotas {
        let available = by_bucket.get(&bucket).map_or(0, Vec::len);
        if available < needed {
            return Err(NoiseError::Shortfall {
                lo: bucket * BUCKET_WIDTH,
                hi: bucket * BUCKET_WIDTH + BUCKET_WIDTH - 1,
                needed,
                available,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for (bucket, &needed) in &quotas {
        if needed == 0 {
            continue;
        }
        let pool = &by_bucket[bucket];
        picked.extend(pool.choose_multiple(&mut rng, needed).copied());
    }
    picked.shuffle(&mut rng);
    Ok(picked
        .into_iter()
        .map(|i| answer_sentences[i].clone())
        .collect())
}

//! Training samples, the bundled text corpus and model-input framing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BOS;

use super::tokenizer::byte_tokenize;

/// Public-domain prose used for language-model smoke runs.
pub const BUILTIN_CORPUS: &str = include_str!("../../data/corpus.txt");

/// One training or evaluation sequence, starting with BOS. Meta tokens are
/// not stored; [`frame`] prepends them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// `(start, len)` of the span to be recalled, if any.
    pub answer: Option<(usize, usize)>,
}

/// `n` random windows of `seq_len` tokens (BOS included) from `text`.
pub fn corpus_samples(text: &[u8], n: usize, seq_len: usize, seed: u64) -> Result<Vec<Sample>> {
    if seq_len < 2 || text.len() < seq_len - 1 {
        return Err(Error::Infeasible(format!(
            "corpus of {} bytes cannot fill sequences of {seq_len}",
            text.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = byte_tokenize(text);
    let span = seq_len - 1;
    Ok((0..n)
        .map(|_| {
            let s = rng.random_range(0..=ids.len() - span);
            let mut tokens = Vec::with_capacity(seq_len);
            tokens.push(BOS);
            tokens.extend_from_slice(&ids[s..s + span]);
            Sample {
                tokens,
                answer: None,
            }
        })
        .collect())
}

/// Model input, next-token targets and per-target loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Framed {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f32>,
}

/// Prepends `meta` and shifts for next-token prediction. Targets that are
/// meta ids or the BOS get weight 0, answer tokens get `answer_weight`,
/// everything else 1.
pub fn frame(meta: &[usize], sample: &Sample, answer_weight: f32) -> Result<Framed> {
    if sample.tokens.len() < 2 {
        return Err(Error::Contract("a sample needs at least two tokens".into()));
    }
    let m = meta.len();
    let full: Vec<usize> = meta.iter().chain(&sample.tokens).copied().collect();
    let n = full.len() - 1;
    let mut weights = vec![1.0f32; n];
    // target j is full[j + 1]; the first m targets are meta ids and BOS
    for w in weights.iter_mut().take(m) {
        *w = 0.0;
    }
    if let Some((start, len)) = sample.answer {
        if start == 0 || start + len > sample.tokens.len() {
            return Err(Error::Contract(format!("answer span {start}+{len} out of range")));
        }
        for w in &mut weights[m + start - 1..m + start - 1 + len] {
            *w = answer_weight;
        }
    }
    Ok(Framed {
        input: full[..n].to_vec(),
        targets: full[1..].to_vec(),
        weights,
    })
}

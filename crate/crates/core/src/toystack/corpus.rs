//! Pretraining text for the toy LM.
//!
//! The corpus mixes sequence shapes over the synthetic grammar:
//! transcription-style (`prompt, rendered sentence, sentence`),
//! translation-style (`prompt, rendered sentence, reversed mapped
//! sentence`), and plain sentences. The rendered block either repeats each
//! token a random number of times (covering the high frame rates the
//! adapters emit) or subsamples the sentence (covering length adapters that
//! pack several tokens into one vector and leave the decoder to reconstruct
//! the rest from context).

use crate::datasynth::{sample_sentence_with, translate_ids};
use crate::toystack::vocab::{build_prompt, PromptSpec, Vocab, BOS, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

/// Repeat-rate means for the stretched rendering; they bracket the frame
/// rates the adapters produce (about 8 per token down to 1).
const STRETCH_MEANS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
/// Keep-one-in-k strides for the subsampled rendering, matching the
/// compression factors of the fixed-ratio length adapters.
const SUBSAMPLE_STRIDES: [usize; 2] = [2, 4];
const MAX_REPEATS: usize = 16;

pub fn make_lm_corpus(
    vocab: &Vocab,
    sentence_len_range: (usize, usize),
    n_sequences: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(n_sequences);
    let asr_prompt = build_prompt(&PromptSpec::asr("en"), vocab).expect("asr prompt");
    let st_prompt = build_prompt(&PromptSpec::st("en", "de"), vocab).expect("st prompt");
    for i in 0..n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let sentence = sample_sentence_with(vocab.n_source(), sentence_len_range, &mut rng);
        let kind: f64 = rng.random();
        let mut seq = vec![BOS];
        if kind < 0.45 {
            seq.extend_from_slice(&asr_prompt);
            push_rendered(&mut seq, &sentence, vocab, &mut rng);
            seq.extend(sentence.iter().map(|&k| vocab.source_id(k)));
        } else if kind < 0.9 {
            seq.extend_from_slice(&st_prompt);
            push_rendered(&mut seq, &sentence, vocab, &mut rng);
            seq.extend(translate_ids(&sentence).iter().map(|&k| vocab.target_id(k)));
        } else if kind < 0.95 {
            seq.extend(sentence.iter().map(|&k| vocab.source_id(k)));
        } else {
            seq.extend(translate_ids(&sentence).iter().map(|&k| vocab.target_id(k)));
        }
        seq.push(EOS);
        out.push(seq);
    }
    out
}

/// Renders the audio-block stand-in: stretched four fifths of the time,
/// subsampled otherwise.
fn push_rendered(seq: &mut Vec<usize>, sentence: &[usize], vocab: &Vocab, rng: &mut ChaCha8Rng) {
    if rng.random::<f64>() < 0.8 {
        let mean = STRETCH_MEANS[rng.random_range(0..STRETCH_MEANS.len())];
        let poisson = (mean > 1.0).then(|| Poisson::new(mean - 1.0).expect("positive mean"));
        for &tok in sentence {
            let extra = poisson
                .as_ref()
                .map(|p| (p.sample(rng) as usize).min(MAX_REPEATS - 1))
                .unwrap_or(0);
            for _ in 0..=extra {
                seq.push(vocab.source_id(tok));
            }
        }
    } else {
        let stride = SUBSAMPLE_STRIDES[rng.random_range(0..SUBSAMPLE_STRIDES.len())];
        let offset = rng.random_range(0..stride.min(sentence.len()));
        let mut pushed = false;
        for (pos, &tok) in sentence.iter().enumerate() {
            if pos % stride == offset {
                seq.push(vocab.source_id(tok));
                pushed = true;
            }
        }
        if !pushed {
            seq.push(vocab.source_id(sentence[0]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_well_formed() {
        let vocab = Vocab::build(8);
        let a = make_lm_corpus(&vocab, (2, 5), 50, 7);
        let b = make_lm_corpus(&vocab, (2, 5), 50, 7);
        assert_eq!(a, b);
        for seq in &a {
            assert_eq!(seq[0], BOS);
            assert_eq!(*seq.last().unwrap(), EOS);
            assert!(seq.len() >= 3);
            assert!(seq.iter().all(|&t| t < vocab.len()));
        }
        // the mixture contains transcription-style sequences (with ?)
        let q = vocab.id("?").unwrap();
        assert!(a.iter().any(|s| s.contains(&q)));
        assert!(a.iter().any(|s| !s.contains(&q)));
    }
}

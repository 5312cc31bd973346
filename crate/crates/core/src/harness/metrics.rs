//! Corpus metrics: word error rate and corpus BLEU.

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Word-level Levenshtein distance (unit costs) via the rolling-row dynamic
/// program.
pub fn edit_distance(reference: &[&str], hypothesis: &[&str]) -> usize {
    if reference.is_empty() {
        return hypothesis.len();
    }
    if hypothesis.is_empty() {
        return reference.len();
    }
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut curr = vec![0usize; m + 1];
    for (i, r) in reference.iter().enumerate() {
        curr[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            let del = prev[j + 1] + 1;
            let ins = curr[j] + 1;
            curr[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// Corpus WER: total word edits over total reference words.
pub fn wer(refs: &[String], hyps: &[String]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Data("empty reference corpus".into()));
    }
    if refs.len() != hyps.len() {
        return Err(Error::Shape(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut edits = 0usize;
    let mut ref_words = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let rt: Vec<&str> = r.split_whitespace().collect();
        let ht: Vec<&str> = h.split_whitespace().collect();
        edits += edit_distance(&rt, &ht);
        ref_words += rt.len();
    }
    if ref_words == 0 {
        return Err(Error::Data("reference corpus has no words".into()));
    }
    Ok(edits as f64 / ref_words as f64)
}

fn ngram_counts<'a>(words: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for window in words.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU: geometric mean of clipped n-gram precisions (n = 1..4) times
/// the brevity penalty, scaled to 0..100. Orders with no candidate n-grams
/// anywhere in the corpus are excluded from the mean, so very short corpora
/// still score.
pub fn bleu(refs: &[String], hyps: &[String]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Data("empty reference corpus".into()));
    }
    if refs.len() != hyps.len() {
        return Err(Error::Shape(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut ref_len = 0usize;
    let mut hyp_len = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let rt: Vec<&str> = r.split_whitespace().collect();
        let ht: Vec<&str> = h.split_whitespace().collect();
        ref_len += rt.len();
        hyp_len += ht.len();
        for n in 1..=4 {
            let rc = ngram_counts(&rt, n);
            let hc = ngram_counts(&ht, n);
            for (gram, count) in &hc {
                totals[n - 1] += count;
                if let Some(&rcount) = rc.get(gram) {
                    matches[n - 1] += (*count).min(rcount);
                }
            }
        }
    }
    if hyp_len == 0 {
        eprintln!("warning: empty hypothesis corpus scores BLEU 0");
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        orders += 1;
        if matches[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * precision * bp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identical_corpora_score_zero_wer() {
        let refs = s(&["the cat sat", "a b"]);
        assert_eq!(wer(&refs, &refs.clone()).unwrap(), 0.0);
    }

    #[test]
    fn one_deletion_out_of_three_words() {
        let refs = s(&["the cat sat"]);
        let hyps = s(&["the sat"]);
        assert!((wer(&refs, &hyps).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_corpus_is_an_error() {
        assert!(wer(&[], &[]).is_err());
    }

    #[test]
    fn wer_matches_independent_dp_oracle_on_random_pairs() {
        // full-matrix oracle, written separately from the rolling-row version
        fn oracle(a: &[&str], b: &[&str]) -> usize {
            let (n, m) = (a.len(), b.len());
            let mut d = vec![vec![0usize; m + 1]; n + 1];
            for (i, row) in d.iter_mut().enumerate() {
                row[0] = i;
            }
            for j in 0..=m {
                d[0][j] = j;
            }
            for i in 1..=n {
                for j in 1..=m {
                    let cost = usize::from(a[i - 1] != b[j - 1]);
                    d[i][j] = (d[i - 1][j - 1] + cost)
                        .min(d[i - 1][j] + 1)
                        .min(d[i][j - 1] + 1);
                }
            }
            d[n][m]
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let words = ["a", "b", "c", "d", "e"];
        for _ in 0..500 {
            let la = rng.random_range(0..10);
            let lb = rng.random_range(0..10);
            let a: Vec<&str> = (0..la).map(|_| words[rng.random_range(0..5)]).collect();
            let b: Vec<&str> = (0..lb).map(|_| words[rng.random_range(0..5)]).collect();
            assert_eq!(edit_distance(&a, &b), oracle(&a, &b));
        }
    }

    #[test]
    fn identical_corpora_score_bleu_100() {
        let refs = s(&["the quick brown fox jumps", "over the lazy dog today"]);
        assert!((bleu(&refs, &refs.clone()).unwrap() - 100.0).abs() < 1e-9);
        // short sentences with no 4-grams still reach 100 when identical
        let short = s(&["the cat"]);
        assert!((bleu(&short, &short.clone()).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_overlap_scores_zero() {
        let refs = s(&["aa bb cc dd ee"]);
        let hyps = s(&["xx yy zz ww vv"]);
        assert_eq!(bleu(&refs, &hyps).unwrap(), 0.0);
    }

    #[test]
    fn hand_checked_bleu_with_brevity_penalty() {
        // ref "a b c d", hyp "a b c": p1=3/3, p2=2/2, p3=1/1, no 4-grams in
        // the hypothesis; BP = exp(1 - 4/3)
        let refs = s(&["a b c d"]);
        let hyps = s(&["a b c"]);
        let expect = 100.0 * (1.0f64).powf(1.0) * (1.0 - 4.0 / 3.0f64).exp();
        assert!((bleu(&refs, &hyps).unwrap() - expect).abs() < 1e-9);

        // single-word edge case
        let refs = s(&["a"]);
        let hyps = s(&["a"]);
        assert!((bleu(&refs, &hyps).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_hypotheses_score_zero_with_warning() {
        let refs = s(&["a b"]);
        let hyps = s(&[""]);
        assert_eq!(bleu(&refs, &hyps).unwrap(), 0.0);
    }
}

//! Paired bootstrap resampling over sentences for system comparison.

use crate::error::{Error, Result};
use crate::harness::metrics::{bleu, wer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Wer,
    Bleu,
}

impl Metric {
    fn score(&self, refs: &[String], hyps: &[String]) -> Result<f64> {
        match self {
            Metric::Wer => wer(refs, hyps),
            Metric::Bleu => bleu(refs, hyps),
        }
    }

    /// True when `a` is strictly better than `b` under this metric.
    fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Metric::Wer => a < b,
            Metric::Bleu => a > b,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wer" => Ok(Metric::Wer),
            "bleu" => Ok(Metric::Bleu),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Paired bootstrap: resample sentence indices with replacement and count
/// how often the corpus-level winner fails to win. Ties observed on the full
/// corpus report p = 1 (no significance by construction).
pub fn bootstrap_significance(
    refs: &[String],
    hyps_a: &[String],
    hyps_b: &[String],
    metric: Metric,
    n_resamples: usize,
    seed: u64,
) -> Result<f64> {
    if n_resamples < 100 {
        return Err(Error::Config(format!(
            "at least 100 resamples required, got {n_resamples}"
        )));
    }
    if refs.is_empty() || refs.len() != hyps_a.len() || refs.len() != hyps_b.len() {
        return Err(Error::Shape(format!(
            "corpora must be aligned and nonempty: {} refs, {} / {} hyps",
            refs.len(),
            hyps_a.len(),
            hyps_b.len()
        )));
    }
    let full_a = metric.score(refs, hyps_a)?;
    let full_b = metric.score(refs, hyps_b)?;
    let a_wins_overall = metric.better(full_a, full_b);
    let b_wins_overall = metric.better(full_b, full_a);
    if !a_wins_overall && !b_wins_overall {
        return Ok(1.0);
    }
    let n = refs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut winner_losses = 0usize;
    for _ in 0..n_resamples {
        let mut r = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            r.push(refs[i].clone());
            a.push(hyps_a[i].clone());
            b.push(hyps_b[i].clone());
        }
        let sa = metric.score(&r, &a)?;
        let sb = metric.score(&r, &b)?;
        let winner_won = if a_wins_overall {
            metric.better(sa, sb)
        } else {
            metric.better(sb, sa)
        };
        if !winner_won {
            winner_losses += 1;
        }
    }
    Ok(winner_losses as f64 / n_resamples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize, f: impl Fn(usize) -> String) -> Vec<String> {
        (0..n).map(f).collect()
    }

    #[test]
    fn identical_systems_are_never_significant() {
        let refs = corpus(50, |i| format!("w{} w{} w{}", i % 5, (i + 1) % 5, (i + 2) % 5));
        let hyps = refs.clone();
        let p = bootstrap_significance(&refs, &hyps, &hyps.clone(), Metric::Wer, 1000, 7).unwrap();
        assert!(p >= 0.05);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn dominant_system_is_significant_on_fifty_sentences() {
        let refs = corpus(50, |i| format!("w{} w{} w{}", i % 5, (i + 1) % 5, (i + 2) % 5));
        let perfect = refs.clone();
        let wrong = corpus(50, |_| "x x x".to_string());
        let p =
            bootstrap_significance(&refs, &perfect, &wrong, Metric::Wer, 1000, 7).unwrap();
        assert!(p < 0.05, "p = {p}");
        let p =
            bootstrap_significance(&refs, &perfect, &wrong, Metric::Bleu, 1000, 7).unwrap();
        assert!(p < 0.05, "p = {p}");
    }

    #[test]
    fn p_value_is_deterministic_under_fixed_seed() {
        let refs = corpus(30, |i| format!("w{} w{}", i % 4, (i + 1) % 4));
        let a = corpus(30, |i| {
            if i % 3 == 0 {
                "x x".to_string()
            } else {
                refs[i].clone()
            }
        });
        let b = corpus(30, |i| {
            if i % 2 == 0 {
                "x x".to_string()
            } else {
                refs[i].clone()
            }
        });
        let p1 = bootstrap_significance(&refs, &a, &b, Metric::Wer, 500, 11).unwrap();
        let p2 = bootstrap_significance(&refs, &a, &b, Metric::Wer, 500, 11).unwrap();
        assert_eq!(p1, p2);
        let p3 = bootstrap_significance(&refs, &a, &b, Metric::Wer, 500, 12).unwrap();
        // different seed may differ, but stays a probability
        assert!((0.0..=1.0).contains(&p3));
    }

    #[test]
    fn too_few_resamples_is_an_error() {
        let refs = corpus(10, |i| format!("w{i}"));
        assert!(
            bootstrap_significance(&refs, &refs.clone(), &refs.clone(), Metric::Wer, 99, 0)
                .is_err()
        );
    }
}

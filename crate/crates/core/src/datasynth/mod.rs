//! Synthetic paired speech-feature/text corpus generation.
//!
//! Each source token owns a prototype feature vector; an utterance emits a
//! stochastic number of noisy prototype frames per token. Translations map
//! tokens into a disjoint target vocabulary with the word order reversed, so
//! the toy translation task has a non-monotonic alignment.

pub mod fseq;

pub use fseq::{read_fseq, write_fseq};

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use std::path::{Path, PathBuf};

/// Nominal seconds of signal per token; at 50 Hz this yields a mean of 8
/// frames per token and at 6.25 Hz exactly 1.
pub const SECONDS_PER_TOKEN: f64 = 0.16;

pub fn frames_per_token_for_rate(rate_hz: f64) -> f64 {
    (rate_hz * SECONDS_PER_TOKEN).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub sentence_len_range: (usize, usize),
    pub frames_per_token_mean: f64,
    pub noise_std: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn desk(rate_hz: f64, seed: u64) -> Self {
        Self {
            vocab_size: 16,
            sentence_len_range: (2, 5),
            frames_per_token_mean: frames_per_token_for_rate(rate_hz),
            noise_std: 0.05,
            feature_dim: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sentence_len_range;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!("bad sentence length range {lo}..{hi}")));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if self.vocab_size < 1 || self.feature_dim < 1 {
            return Err(Error::Config("vocab_size and feature_dim must be >= 1".into()));
        }
        if self.frames_per_token_mean < 1.0 {
            return Err(Error::Config("frames_per_token_mean must be >= 1".into()));
        }
        Ok(())
    }
}

/// Token prototype vectors, sampled once per corpus seed on the f32 grid.
pub fn prototypes(spec: &SynthSpec) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX); // keep prototypes off the per-sample streams
    let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
    Array2::from_shape_fn((spec.vocab_size, spec.feature_dim), |_| {
        (normal.sample(&mut rng) as f32) as f64
    })
}

/// Sentence sampler: first token uniform, then a cyclic random walk with
/// steps +1/+2/+3 at probabilities 0.6/0.3/0.1. The structure makes the toy
/// language learnable by a small LM while keeping every token reachable.
pub fn sample_sentence_with(
    vocab_size: usize,
    len_range: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let (lo, hi) = len_range;
    let len = rng.random_range(lo..=hi);
    let mut out = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..vocab_size);
    out.push(cur);
    for _ in 1..len {
        let r: f64 = rng.random();
        let step = if r < 0.6 {
            1
        } else if r < 0.9 {
            2
        } else {
            3
        };
        cur = (cur + step) % vocab_size;
        out.push(cur);
    }
    out
}

pub fn sample_sentence(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    sample_sentence_with(spec.vocab_size, spec.sentence_len_range, rng)
}

/// Deterministic token-wise mapping into the disjoint target vocabulary with
/// the word order reversed.
pub fn translate_ids(source: &[usize]) -> Vec<usize> {
    source.iter().rev().cloned().collect()
}

pub fn source_word(k: usize) -> String {
    format!("w{k}")
}

pub fn target_word(k: usize) -> String {
    format!("W{k}'")
}

pub fn source_text(ids: &[usize]) -> String {
    ids.iter().map(|&k| source_word(k)).collect::<Vec<_>>().join(" ")
}

pub fn target_text(ids: &[usize]) -> String {
    ids.iter().map(|&k| target_word(k)).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub features: Array2<f64>,
    pub transcript: String,
    pub translation: String,
    pub tokens: Vec<usize>,
    pub frames_per_token: Vec<usize>,
}

/// Generates sample `index`. Fully determined by `(spec.seed, index)`.
pub fn synth_sample(spec: &SynthSpec, rate_hz: f64, index: u64) -> Result<SynthSample> {
    spec.validate()?;
    if rate_hz <= 0.0 {
        return Err(Error::Config("rate must be positive".into()));
    }
    let protos = prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let tokens = sample_sentence(spec, &mut rng);
    let extra_mean = spec.frames_per_token_mean - 1.0;
    let poisson = if extra_mean > 0.0 {
        Some(Poisson::new(extra_mean).expect("positive mean"))
    } else {
        None
    };
    let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
    let mut frames_per_token = Vec::with_capacity(tokens.len());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &tok in &tokens {
        let extra = poisson
            .as_ref()
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0);
        let n_frames = 1 + extra;
        frames_per_token.push(n_frames);
        for _ in 0..n_frames {
            let row: Vec<f64> = (0..spec.feature_dim)
                .map(|d| {
                    let noise = normal.sample(&mut rng) * spec.noise_std;
                    ((protos[[tok, d]] + noise) as f32) as f64
                })
                .collect();
            rows.push(row);
        }
    }
    let t = rows.len();
    let mut features = Array2::zeros((t, spec.feature_dim));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    let translation_ids = translate_ids(&tokens);
    Ok(SynthSample {
        features,
        transcript: source_text(&tokens),
        translation: target_text(&translation_ids),
        tokens,
        frames_per_token,
    })
}

// ---------------------------------------------------------------------------
// Manifest and dataset building
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub transcript: String,
    pub translation: String,
    pub source_lang: String,
    pub target_lang: String,
    pub duration_seconds: f64,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub dir: PathBuf,
}

fn fnv64(x: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in x.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic 90/5/5 split: indices ranked by hash, the first 5% of the
/// ranking is dev, the next 5% test, the rest train. Dev and test always get
/// at least one item when three or more exist.
pub fn split_assignment(n: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (fnv64(i as u64), i));
    let n_dev = if n >= 3 { (n / 20).max(1) } else { 0 };
    let n_test = if n >= 3 { (n / 20).max(1) } else { 0 };
    let mut splits = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_dev {
            Split::Dev
        } else if rank < n_dev + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    splits
}

impl Manifest {
    pub fn items(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("# path\ttranscript\ttranslation\tsource_lang\ttarget_lang\tduration_seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.transcript,
                r.translation,
                r.source_lang,
                r.target_lang,
                r.duration_seconds
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest, verifying referenced files exist and durations are
    /// positive. Lines starting with `#` are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let dir = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 6 tab-separated columns, got {}",
                    path.display(),
                    lineno + 1,
                    cols.len()
                )));
            }
            let duration: f64 = cols[5].parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{}: bad duration `{}`",
                    path.display(),
                    lineno + 1,
                    cols[5]
                ))
            })?;
            if duration <= 0.0 {
                return Err(Error::Data(format!(
                    "{}:{}: non-positive duration",
                    path.display(),
                    lineno + 1
                )));
            }
            let rel = PathBuf::from(cols[0]);
            let full = dir.join(&rel);
            if !full.exists() {
                return Err(Error::Data(format!(
                    "{}:{}: missing feature file {}",
                    path.display(),
                    lineno + 1,
                    full.display()
                )));
            }
            raw.push((rel, cols[1].to_string(), cols[2].to_string(), cols[3].to_string(), cols[4].to_string(), duration));
        }
        let splits = split_assignment(raw.len());
        let records = raw
            .into_iter()
            .zip(splits)
            .map(
                |((path, transcript, translation, source_lang, target_lang, duration), split)| {
                    ManifestRecord {
                        path,
                        transcript,
                        translation,
                        source_lang,
                        target_lang,
                        duration_seconds: duration,
                        split,
                    }
                },
            )
            .collect();
        Ok(Manifest { records, dir })
    }

    pub fn feature_path(&self, record: &ManifestRecord) -> PathBuf {
        self.dir.join(&record.path)
    }
}

/// Writes `n_items` samples as FSEQ files plus `manifest.tsv` under
/// `out_dir`. Errors if a manifest already exists unless `overwrite`.
pub fn build_dataset(
    spec: &SynthSpec,
    n_items: usize,
    rate_hz: f64,
    out_dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<Manifest> {
    spec.validate()?;
    if n_items == 0 {
        return Err(Error::Config("n_items must be >= 1".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join("manifest.tsv");
    if manifest_path.exists() && !overwrite {
        return Err(Error::Data(format!(
            "{} already exists (pass overwrite to replace)",
            manifest_path.display()
        )));
    }
    let splits = split_assignment(n_items);
    let mut records = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let sample = synth_sample(spec, rate_hz, i as u64)?;
        let rel = PathBuf::from(format!("feat_{i:05}.fseq"));
        write_fseq(out_dir.join(&rel), &sample.features, rate_hz)?;
        records.push(ManifestRecord {
            path: rel,
            transcript: sample.transcript,
            translation: sample.translation,
            source_lang: "en".to_string(),
            target_lang: "de".to_string(),
            duration_seconds: sample.features.nrows() as f64 / rate_hz,
            split: splits[i],
        });
    }
    let manifest = Manifest {
        records,
        dir: out_dir.to_path_buf(),
    };
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

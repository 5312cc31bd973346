//! Greedy decoding of the test split plus per-run metric and compression
//! accounting.

use crate::adapters::{adapter_from_meta, Adapter};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::harness::metrics::{bleu, wer};
use crate::datasynth::{read_fseq, Manifest, Split};
use crate::numkernel::store::ParamStore;
use crate::toystack::{
    build_prompt, greedy_generate_ordered, load_toy_lm, load_toy_sfm, sfm_encode, PromptSpec,
    SfmPreset, Task, ToyLM, ToySFM,
};
use std::path::Path;

/// Per-configuration evaluation record.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub adapter_kind: crate::adapters::AdapterKind,
    pub sfm_preset: SfmPreset,
    pub task: Task,
    pub wer: Option<f64>,
    pub bleu: Option<f64>,
    pub mean_compression_ratio: f64,
    pub out_rate_hz: f64,
    pub trainable_params: usize,
    pub ref_tokens_per_second: f64,
    pub refs: Vec<String>,
    pub hyps: Vec<String>,
    /// Paired-bootstrap p-value against the Base adapter of the same preset.
    pub p_vs_baseline: Option<f64>,
    pub untrained_wer: Option<f64>,
    pub notes: Vec<String>,
}

/// Loads a run checkpoint and evaluates its test split.
pub fn evaluate(checkpoint: &Path, manifest_path: &Path, task: Task) -> Result<RunReport> {
    let mut store = ParamStore::load(checkpoint)?;
    let lm = load_toy_lm(&mut store)?;
    let sfm = load_toy_sfm(&mut store, "sfm")?;
    let meta = store.values("meta.adapter")?.clone();
    let adapter = adapter_from_meta(&meta, "adapter")?;
    let audio_first = store
        .values("meta.join")
        .map(|m| m[[0, 0]] != 0.0)
        .unwrap_or(false);
    let manifest = Manifest::load(manifest_path)?;
    evaluate_with_order(&store, &lm, &sfm, &adapter, &manifest, task, audio_first)
}

/// Evaluation over an in-memory store (used for untrained baselines and by
/// the grid right after training).
pub fn evaluate_core(
    store: &ParamStore,
    lm: &ToyLM,
    sfm: &ToySFM,
    adapter: &Adapter,
    manifest: &Manifest,
    task: Task,
) -> Result<RunReport> {
    evaluate_with_order(store, lm, sfm, adapter, manifest, task, false)
}

/// As [`evaluate_core`] with an explicit prompt/audio join order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_order(
    store: &ParamStore,
    lm: &ToyLM,
    sfm: &ToySFM,
    adapter: &Adapter,
    manifest: &Manifest,
    task: Task,
    audio_first: bool,
) -> Result<RunReport> {
    let records: Vec<_> = manifest.items(Split::Test).collect();
    if records.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let mut refs = Vec::with_capacity(records.len());
    let mut hyps = Vec::with_capacity(records.len());
    let mut total_in = 0usize;
    let mut total_out = 0usize;
    let mut total_ref_tokens = 0usize;
    let mut total_duration = 0.0;
    let mut notes = Vec::new();
    let max_ref_len = records
        .iter()
        .map(|r| r.transcript.split_whitespace().count().max(
            r.translation.split_whitespace().count(),
        ))
        .max()
        .unwrap_or(4);
    let max_gen = (2 * max_ref_len).max(8);
    for record in &records {
        let (feats, rate) = read_fseq(manifest.feature_path(record))?;
        if rate != sfm.frame_rate_hz() {
            return Err(Error::Config(format!(
                "{}: feature rate {rate} does not match preset {} (task/manifest mismatch)",
                record.path.display(),
                sfm.preset
            )));
        }
        let raw = FeatureSequence::single(feats, rate)?;
        let encoded = sfm_encode(sfm, store, &raw)?;
        total_in += encoded.lengths()[0];
        let reference = match task {
            Task::Asr => record.transcript.clone(),
            Task::St => record.translation.clone(),
        };
        total_ref_tokens += reference.split_whitespace().count();
        total_duration += record.duration_seconds;
        let prompt_spec = match task {
            Task::Asr => PromptSpec::asr(&record.source_lang),
            Task::St => PromptSpec::st(&record.source_lang, &record.target_lang),
        };
        let prompt = build_prompt(&prompt_spec, &lm.vocab)?;
        let hyp = match adapter.forward(store, &encoded, None) {
            Ok(out) => {
                total_out += out.out_lengths[0];
                let audio = out.features.item_owned(0);
                // generation budget proportional to the (compressed) audio
                // length, under the corpus-level cap
                let budget = max_gen.min(2 * out.out_lengths[0] + 2);
                let ids =
                    greedy_generate_ordered(lm, store, &prompt, &audio, budget, audio_first)?;
                lm.vocab.detokenize(&ids)
            }
            Err(Error::Data(msg)) if msg.contains("empty sequence") => {
                notes.push(format!("{}: {msg}", record.path.display()));
                String::new()
            }
            Err(e) => return Err(e),
        };
        refs.push(reference);
        hyps.push(hyp);
    }
    if total_out == 0 {
        return Err(Error::Data(
            "adapter emitted no output vectors on the whole test split".into(),
        ));
    }
    let ratio = total_in as f64 / total_out as f64;
    let out_rate = sfm.frame_rate_hz() * total_out as f64 / total_in as f64;
    let (wer_val, bleu_val) = match task {
        Task::Asr => (Some(wer(&refs, &hyps)?), None),
        Task::St => (None, Some(bleu(&refs, &hyps)?)),
    };
    Ok(RunReport {
        adapter_kind: adapter.kind,
        sfm_preset: sfm.preset,
        task,
        wer: wer_val,
        bleu: bleu_val,
        mean_compression_ratio: ratio,
        out_rate_hz: out_rate,
        trainable_params: store.count_params("adapter", true),
        ref_tokens_per_second: total_ref_tokens as f64 / total_duration,
        refs,
        hyps,
        p_vs_baseline: None,
        untrained_wer: None,
        notes,
    })
}

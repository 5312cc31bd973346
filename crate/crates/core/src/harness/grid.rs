//! Grid runner over {encoder preset x adapter kind} with per-cell training,
//! untrained baselines, significance against the Base adapter, and table
//! emission.

use crate::adapters::AdapterKind;
use crate::error::{Error, Result};
use crate::harness::bootstrap::{bootstrap_significance, Metric};
use crate::harness::config::RunConfig;
use crate::harness::evaluate::{evaluate, evaluate_with_order, RunReport};
use crate::harness::report::emit_report;
use crate::harness::train::{prepare_run, train_prepared};
use crate::datasynth::Manifest;
use crate::toystack::{SfmPreset, Task};
use std::path::PathBuf;

pub const THREADS_ENV: &str = "ADAPTER_FORGE_THREADS";

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub base: RunConfig,
    pub adapters: Vec<AdapterKind>,
    pub presets: Vec<SfmPreset>,
    /// Manifest per preset.
    pub manifests: Vec<(SfmPreset, PathBuf)>,
    pub out_dir: PathBuf,
    pub bootstrap_resamples: usize,
}

impl GridSpec {
    fn manifest_for(&self, preset: SfmPreset) -> Result<&PathBuf> {
        self.manifests
            .iter()
            .find(|(p, _)| *p == preset)
            .map(|(_, path)| path)
            .ok_or_else(|| Error::Config(format!("no manifest configured for {preset}")))
    }
}

/// Worker cap: the `ADAPTER_FORGE_THREADS` variable, else the machine's
/// available parallelism.
pub fn grid_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn run_cell(spec: &GridSpec, kind: AdapterKind, preset: SfmPreset) -> Result<RunReport> {
    let mut cfg = spec.base.clone();
    cfg.adapter_kind = kind;
    cfg.sfm_preset = preset;
    cfg.manifest = spec.manifest_for(preset)?.clone();
    cfg.out_dir = spec.out_dir.join(cfg.cell_name());
    let manifest = Manifest::load(&cfg.manifest)?;

    let mut prepared = prepare_run(&cfg)?;
    let untrained = evaluate_with_order(
        &prepared.store,
        &prepared.lm,
        &prepared.sfm,
        &prepared.adapter,
        &manifest,
        cfg.task,
        cfg.audio_first,
    )?;
    let outcome = train_prepared(&mut prepared, &cfg)?;
    let mut report = evaluate(&outcome.checkpoint, &cfg.manifest, cfg.task)?;
    report.untrained_wer = untrained.wer;
    Ok(report)
}

fn failure_report(kind: AdapterKind, preset: SfmPreset, task: Task, err: &Error) -> RunReport {
    RunReport {
        adapter_kind: kind,
        sfm_preset: preset,
        task,
        wer: None,
        bleu: None,
        mean_compression_ratio: f64::NAN,
        out_rate_hz: f64::NAN,
        trainable_params: 0,
        ref_tokens_per_second: f64::NAN,
        refs: vec![],
        hyps: vec![],
        p_vs_baseline: None,
        untrained_wer: None,
        notes: vec![format!("run failed: {err}")],
    }
}

/// Runs every (preset, adapter) combination with the shared seed, attaches
/// bootstrap significance against each preset's Base cell, and writes the
/// compression and metric tables. Failed cells are recorded and the grid
/// continues.
pub fn grid_run(spec: &GridSpec) -> Result<Vec<RunReport>> {
    if spec.adapters.is_empty() || spec.presets.is_empty() {
        return Err(Error::Config("grid needs at least one adapter and preset".into()));
    }
    let cells: Vec<(SfmPreset, AdapterKind)> = spec
        .presets
        .iter()
        .flat_map(|&p| spec.adapters.iter().map(move |&a| (p, a)))
        .collect();
    let threads = grid_threads().min(cells.len()).max(1);
    let mut reports: Vec<Option<RunReport>> = (0..cells.len()).map(|_| None).collect();
    for chunk_start in (0..cells.len()).step_by(threads) {
        let chunk_end = (chunk_start + threads).min(cells.len());
        let chunk = &cells[chunk_start..chunk_end];
        let outputs: Vec<RunReport> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(preset, kind)| {
                    scope.spawn(move || {
                        run_cell(spec, kind, preset).unwrap_or_else(|e| {
                            failure_report(kind, preset, spec.base.task, &e)
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("grid worker panicked"))
                .collect()
        });
        for (offset, report) in outputs.into_iter().enumerate() {
            reports[chunk_start + offset] = Some(report);
        }
    }
    let mut reports: Vec<RunReport> = reports.into_iter().map(|r| r.expect("filled")).collect();

    // paired bootstrap against the Base cell of the same preset
    let metric = match spec.base.task {
        Task::Asr => Metric::Wer,
        Task::St => Metric::Bleu,
    };
    for &preset in &spec.presets {
        let base_idx = reports.iter().position(|r| {
            r.sfm_preset == preset && r.adapter_kind == AdapterKind::Base && !r.hyps.is_empty()
        });
        let Some(base_idx) = base_idx else { continue };
        let base_refs = reports[base_idx].refs.clone();
        let base_hyps = reports[base_idx].hyps.clone();
        for r in reports.iter_mut() {
            if r.sfm_preset != preset
                || r.adapter_kind == AdapterKind::Base
                || r.hyps.is_empty()
            {
                continue;
            }
            match bootstrap_significance(
                &base_refs,
                &base_hyps,
                &r.hyps,
                metric,
                spec.bootstrap_resamples,
                spec.base.seed ^ 0x424f4f54,
            ) {
                Ok(p) => r.p_vs_baseline = Some(p),
                Err(e) => r.notes.push(format!("significance failed: {e}")),
            }
        }
    }
    emit_report(&reports, &spec.out_dir)?;
    Ok(reports)
}

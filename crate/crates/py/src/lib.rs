//! Python bindings: the numeric primitives (schedule, compression, CTC, CIF,
//! metrics, significance), parameter accounting, and the full CLI entry
//! point for driving whole pipelines from Python.

use adapter_forge::adapters::{
    build_adapter_with, cif_integrate_fire, fire_plan, label_runs, AdapterConfig, AdapterKind,
    CifConfig, FireRule,
};
use adapter_forge::harness::{bootstrap_significance as bootstrap_rs, Metric};
use adapter_forge::numkernel::{lr_at_step as lr_rs, EncoderStackConfig, ParamStore, ScheduleConfig};
use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn to_py(e: adapter_forge::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Dispatches the full command line; returns the process exit code.
#[pyfunction]
fn run(argv: Vec<String>) -> i32 {
    adapter_forge::cli::run(argv)
}

#[pyfunction]
#[pyo3(signature = (peak_lr, warmup_steps, total_steps, floor_lr, step))]
fn lr_at_step(peak_lr: f64, warmup_steps: usize, total_steps: usize, floor_lr: f64, step: usize) -> f64 {
    lr_rs(
        &ScheduleConfig {
            peak_lr,
            warmup_steps,
            total_steps,
            floor_lr,
        },
        step,
    )
}

#[pyfunction]
fn compression_stats(in_len: usize, out_len: usize, in_rate_hz: f64) -> PyResult<(f64, f64)> {
    adapter_forge::adapters::compression_stats(in_len, out_len, in_rate_hz).map_err(to_py)
}

#[pyfunction]
fn encoder_param_count(n_layers: usize, hidden: usize, intermediate: usize, n_heads: usize) -> usize {
    EncoderStackConfig::new(n_layers, hidden, intermediate, n_heads).param_count()
}

/// Parameter accounting for one adapter kind; returns a dict with the
/// modality core, length adapter, projection and total counts.
#[pyfunction]
#[pyo3(signature = (kind, n_layers=4, hidden=768, intermediate=3072, n_heads=12, in_dim=1280, lm_dim=4096, ctc_alphabet=30))]
#[allow(clippy::too_many_arguments)]
fn adapter_param_counts(
    kind: &str,
    n_layers: usize,
    hidden: usize,
    intermediate: usize,
    n_heads: usize,
    in_dim: usize,
    lm_dim: usize,
    ctc_alphabet: usize,
) -> PyResult<HashMap<String, usize>> {
    let kind: AdapterKind = kind.parse().map_err(to_py)?;
    let cfg = AdapterConfig {
        stack: EncoderStackConfig::new(n_layers, hidden, intermediate, n_heads),
        cif: CifConfig::default(),
        wlq: Default::default(),
        ctc_alphabet,
        conv_kernel: 3,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adapter = build_adapter_with(kind, in_dim, lm_dim, &cfg, "adapter", &mut store, &mut rng)
        .map_err(to_py)?;
    let mut out = HashMap::new();
    out.insert("modality_core".into(), adapter.modality_core_params(&store));
    out.insert("length_adapter".into(), adapter.length_adapter_params(&store));
    out.insert("projections".into(), adapter.projection_params(&store));
    out.insert("total".into(), adapter.total_params(&store));
    Ok(out)
}

#[pyfunction]
fn wer(refs: Vec<String>, hyps: Vec<String>) -> PyResult<f64> {
    adapter_forge::harness::wer(&refs, &hyps).map_err(to_py)
}

#[pyfunction]
fn bleu(refs: Vec<String>, hyps: Vec<String>) -> PyResult<f64> {
    adapter_forge::harness::bleu(&refs, &hyps).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (refs, hyps_a, hyps_b, metric="wer", n_resamples=1000, seed=0))]
fn bootstrap_significance(
    refs: Vec<String>,
    hyps_a: Vec<String>,
    hyps_b: Vec<String>,
    metric: &str,
    n_resamples: usize,
    seed: u64,
) -> PyResult<f64> {
    let metric: Metric = metric.parse().map_err(to_py)?;
    bootstrap_rs(&refs, &hyps_a, &hyps_b, metric, n_resamples, seed).map_err(to_py)
}

/// CTC loss of one sequence; `logprobs` rows are per-frame log-distributions
/// over the alphabet plus blank (blank last).
#[pyfunction]
fn ctc_loss(logprobs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<f64> {
    let t = logprobs.len();
    let w = logprobs.first().map(|r| r.len()).unwrap_or(0);
    if logprobs.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged logprob rows"));
    }
    let flat: Vec<f64> = logprobs.into_iter().flatten().collect();
    let arr = Array2::from_shape_vec((t, w), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    adapter_forge::losses::ctc_loss(&arr, &target).map_err(to_py)
}

/// Number of maximal equal-label runs (the CTC-collapse output length).
#[pyfunction]
fn ctc_run_count(labels: Vec<usize>) -> usize {
    label_runs(&labels).len()
}

/// Integrate-and-fire over raw weights: returns the fire count and each
/// fired group's weight sum. With `target_len` the weights are rescaled so
/// the count matches exactly.
#[pyfunction]
#[pyo3(signature = (alpha, beta=1.0, target_len=None))]
fn cif_fire(alpha: Vec<f64>, beta: f64, target_len: Option<usize>) -> PyResult<(usize, Vec<f64>)> {
    let cfg = CifConfig {
        beta,
        scale_to_target: target_len.is_some(),
    };
    let h = Array2::zeros((alpha.len(), 1));
    let (_, count) = cif_integrate_fire(&h, &alpha, &cfg, target_len).map_err(to_py)?;
    let scaled: Vec<f64> = match target_len {
        Some(n) => {
            let sum: f64 = alpha.iter().sum();
            alpha.iter().map(|a| a * n as f64 * beta / sum).collect()
        }
        None => alpha.clone(),
    };
    let rule = match target_len {
        Some(n) => FireRule::Exact(n),
        None => FireRule::Threshold,
    };
    let plan = fire_plan(&scaled, beta, rule);
    Ok((count, plan.group_weight_sums()))
}

/// Per-sample quantity loss `|sum(alpha) - target_len|`.
#[pyfunction]
fn quantity_loss(alpha: Vec<f64>, target_len: usize) -> f64 {
    adapter_forge::losses::quantity_loss(&alpha, target_len)
}

#[pymodule]
fn adapter_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_step, m)?)?;
    m.add_function(wrap_pyfunction!(compression_stats, m)?)?;
    m.add_function(wrap_pyfunction!(encoder_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(adapter_param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_significance, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_run_count, m)?)?;
    m.add_function(wrap_pyfunction!(cif_fire, m)?)?;
    m.add_function(wrap_pyfunction!(quantity_loss, m)?)?;
    Ok(())
}

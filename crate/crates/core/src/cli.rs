//! The `adapter-forge` command line: data synthesis, LM pretraining, adapter
//! training, evaluation, the preset/adapter grid, gradient checking,
//! parameter accounting and significance testing.

use crate::adapters::{
    build_adapter_with, compression_stats, AdapterConfig, AdapterKind, ForwardMode,
};
use crate::datasynth::{build_dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::harness::{
    bootstrap_significance, emit_report, evaluate, grid_run, train_adapter, GridSpec, Metric,
    RunConfig,
};
use crate::losses::{ctc_loss_node, quantity_loss_node};
use crate::numkernel::encoder::EncoderStackConfig;
use crate::numkernel::gradcheck::grad_check;
use crate::numkernel::store::ParamStore;
use crate::toystack::{make_lm_corpus, pretrain_toy_lm, LmConfig, SfmPreset, Task, Vocab};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "adapter-forge",
    about = "Desk-scale lab for speech-to-LM adapter architectures",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature/text dataset with a manifest.
    SynthData(SynthDataArgs),
    /// Pretrain the toy LM on synthetic text and freeze it.
    PretrainLm(PretrainArgs),
    /// Train one adapter configuration.
    Train(TrainArgs),
    /// Evaluate a run checkpoint on a manifest's test split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every adapter x preset combination.
    Grid(GridArgs),
    /// Central-difference check of the full training loss for one adapter.
    Gradcheck(GradcheckArgs),
    /// Print parameter accounting for an adapter kind.
    Params(ParamsArgs),
    /// Paired bootstrap significance between two hypothesis files.
    Significance(SignificanceArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Output directory (receives FSEQ files plus manifest.tsv).
    #[arg(long)]
    out_dir: PathBuf,
    /// Encoder preset fixing the frame rate (whisper-like | seamless-like).
    #[arg(long, default_value = "whisper-like")]
    preset: String,
    #[arg(long, default_value_t = 400)]
    n_items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 2)]
    sentence_min: usize,
    #[arg(long, default_value_t = 5)]
    sentence_max: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    /// Replace an existing manifest.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 128)]
    ff: usize,
    #[arg(long, default_value_t = 192)]
    max_len: usize,
    #[arg(long, default_value_t = 6000)]
    corpus_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    peak_lr: f64,
    #[arg(long, default_value_t = 2)]
    sentence_min: usize,
    #[arg(long, default_value_t = 5)]
    sentence_max: usize,
}

#[derive(Args, Clone)]
struct RunOverrides {
    /// Key-value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    floor_lr: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    adapter_layers: Option<usize>,
    #[arg(long)]
    adapter_hidden: Option<usize>,
    #[arg(long)]
    adapter_intermediate: Option<usize>,
    #[arg(long)]
    adapter_heads: Option<usize>,
    #[arg(long)]
    sfm_dim: Option<usize>,
    #[arg(long)]
    cif_beta: Option<f64>,
    #[arg(long)]
    wlq_window_seconds: Option<f64>,
    #[arg(long)]
    wlq_queries: Option<usize>,
    #[arg(long)]
    wlq_layers: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_gen_len: Option<usize>,
}

impl RunOverrides {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::desk(),
        };
        macro_rules! apply {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.apply_kv($key, &v.to_string())?;
                }
            };
        }
        apply!(adapter, "adapter");
        apply!(preset, "preset");
        apply!(task, "task");
        apply!(steps, "steps");
        apply!(micro_batch, "micro_batch");
        apply!(grad_accum, "grad_accum");
        apply!(peak_lr, "peak_lr");
        apply!(warmup_steps, "warmup_steps");
        apply!(floor_lr, "floor_lr");
        apply!(aux_weight, "aux_weight");
        apply!(seed, "seed");
        apply!(adapter_layers, "adapter_layers");
        apply!(adapter_hidden, "adapter_hidden");
        apply!(adapter_intermediate, "adapter_intermediate");
        apply!(adapter_heads, "adapter_heads");
        apply!(sfm_dim, "sfm_dim");
        apply!(cif_beta, "cif_beta");
        apply!(wlq_window_seconds, "wlq_window_seconds");
        apply!(wlq_queries, "wlq_queries");
        apply!(wlq_layers, "wlq_layers");
        apply!(weight_decay, "weight_decay");
        apply!(max_gen_len, "max_gen_len");
        if let Some(p) = &self.lm_checkpoint {
            cfg.lm_checkpoint = p.clone();
        }
        if let Some(p) = &self.manifest {
            cfg.manifest = p.clone();
        }
        if let Some(p) = &self.out_dir {
            cfg.out_dir = p.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: RunOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "asr")]
    task: String,
    /// Where to write report files (defaults to the checkpoint's directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write refs.txt and hyps.txt (one sentence per line) for use with
    /// the significance subcommand.
    #[arg(long)]
    dump_hyps: bool,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    overrides: RunOverrides,
    /// Comma-separated adapter kinds, or `all`.
    #[arg(long, default_value = "all")]
    adapters: String,
    /// Comma-separated presets, or `all`.
    #[arg(long, default_value = "all")]
    presets: String,
    /// Directory holding (or receiving) per-preset datasets.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n_items: usize,
    #[arg(long, default_value_t = 1000)]
    bootstrap_resamples: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "base")]
    adapter: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Checks this many random instances.
    #[arg(long, default_value_t = 3)]
    instances: usize,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, default_value = "base")]
    adapter: String,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 768)]
    hidden: usize,
    #[arg(long, default_value_t = 3072)]
    intermediate: usize,
    #[arg(long, default_value_t = 12)]
    heads: usize,
    #[arg(long, default_value_t = 1280)]
    in_dim: usize,
    #[arg(long, default_value_t = 4096)]
    lm_dim: usize,
    #[arg(long, default_value_t = 30)]
    ctc_alphabet: usize,
}

#[derive(Args)]
struct SignificanceArgs {
    /// Reference sentences, one per line.
    #[arg(long)]
    refs: PathBuf,
    /// System A hypotheses, one per line.
    #[arg(long)]
    hyps_a: PathBuf,
    /// System B hypotheses, one per line.
    #[arg(long)]
    hyps_b: PathBuf,
    #[arg(long, default_value = "wer")]
    metric: String,
    #[arg(long, default_value_t = 1000)]
    n_resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Dispatches a full argv (without the program name). Exit codes: 0 success,
/// 1 domain error, 2 usage error.
pub fn run<I>(argv: I) -> i32
where
    I: IntoIterator,
    I::Item: Into<String>,
{
    let mut full: Vec<String> = vec!["adapter-forge".to_string()];
    full.extend(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(full) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::SynthData(args) => synth_data(args),
        Command::PretrainLm(args) => pretrain_lm(args),
        Command::Train(args) => train(args),
        Command::Evaluate(args) => do_evaluate(args),
        Command::Grid(args) => grid(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Params(args) => params(args),
        Command::Significance(args) => significance(args),
    }
}

fn synth_data(args: SynthDataArgs) -> Result<i32> {
    let preset: SfmPreset = args.preset.parse()?;
    let rate = preset.frame_rate_hz();
    let spec = SynthSpec {
        vocab_size: args.vocab_size,
        sentence_len_range: (args.sentence_min, args.sentence_max),
        frames_per_token_mean: crate::datasynth::frames_per_token_for_rate(rate),
        noise_std: args.noise_std,
        feature_dim: args.feature_dim,
        seed: args.seed,
    };
    let manifest = build_dataset(&spec, args.n_items, rate, &args.out_dir, args.overwrite)?;
    println!(
        "wrote {} items ({} train / {} dev / {} test) under {}",
        manifest.records.len(),
        manifest.items(crate::datasynth::Split::Train).count(),
        manifest.items(crate::datasynth::Split::Dev).count(),
        manifest.items(crate::datasynth::Split::Test).count(),
        args.out_dir.display()
    );
    Ok(0)
}

fn pretrain_lm(args: PretrainArgs) -> Result<i32> {
    let vocab = Vocab::build(args.vocab_size);
    let corpus = make_lm_corpus(
        &vocab,
        (args.sentence_min, args.sentence_max),
        args.corpus_size,
        args.seed,
    );
    let cfg = LmConfig {
        n_layers: args.layers,
        n_heads: args.heads,
        dim: args.dim,
        ff: args.ff,
        max_len: args.max_len,
    };
    let mut store = ParamStore::new();
    let (_lm, report) = pretrain_toy_lm(
        &corpus,
        args.steps,
        args.seed,
        &cfg,
        args.vocab_size,
        args.peak_lr,
        &mut store,
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    store.save(&args.out)?;
    println!(
        "pretrained {} steps: held-out perplexity {:.2} -> {:.2}; saved {}",
        args.steps,
        report.perplexity_untrained,
        report.perplexity_trained,
        args.out.display()
    );
    Ok(0)
}

fn train(args: TrainArgs) -> Result<i32> {
    let cfg = args.overrides.build()?;
    let (_p, outcome) = train_adapter(&cfg)?;
    let last = outcome.loss_curve.last().expect("at least one step");
    println!(
        "trained {} steps ({} trainable params); final total loss {:.4}; checkpoint {}",
        cfg.steps,
        outcome.trainable_params,
        last.breakdown.total,
        outcome.checkpoint.display()
    );
    Ok(0)
}

fn do_evaluate(args: EvaluateArgs) -> Result<i32> {
    let task: Task = args.task.parse()?;
    let report = evaluate(&args.checkpoint, &args.manifest, task)?;
    let out_dir = args.out_dir.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    });
    emit_report(std::slice::from_ref(&report), &out_dir)?;
    if args.dump_hyps {
        let write = |name: &str, lines: &[String]| -> Result<()> {
            let p = out_dir.join(name);
            std::fs::write(&p, lines.join("\n") + "\n").map_err(|e| Error::io(&p, e))
        };
        write("refs.txt", &report.refs)?;
        write("hyps.txt", &report.hyps)?;
    }
    match task {
        Task::Asr => println!(
            "WER {:.4} | compression {:.2}:1 | out rate {:.2} Hz | ref tokens/s {:.2}",
            report.wer.unwrap_or(f64::NAN),
            report.mean_compression_ratio,
            report.out_rate_hz,
            report.ref_tokens_per_second
        ),
        Task::St => println!(
            "BLEU {:.2} | compression {:.2}:1 | out rate {:.2} Hz | ref tokens/s {:.2}",
            report.bleu.unwrap_or(f64::NAN),
            report.mean_compression_ratio,
            report.out_rate_hz,
            report.ref_tokens_per_second
        ),
    }
    println!("reports written to {}", out_dir.display());
    Ok(0)
}

fn parse_adapters(s: &str) -> Result<Vec<AdapterKind>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(AdapterKind::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn parse_presets(s: &str) -> Result<Vec<SfmPreset>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(SfmPreset::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn grid(args: GridArgs) -> Result<i32> {
    let base = args.overrides.build()?;
    let adapters = parse_adapters(&args.adapters)?;
    let presets = parse_presets(&args.presets)?;
    let data_dir = args
        .data_dir
        .unwrap_or_else(|| base.out_dir.join("data"));
    let mut manifests = Vec::new();
    for &preset in &presets {
        let dir = data_dir.join(preset.name());
        let manifest_path = dir.join("manifest.tsv");
        if !manifest_path.exists() {
            let spec = SynthSpec {
                frames_per_token_mean: crate::datasynth::frames_per_token_for_rate(
                    preset.frame_rate_hz(),
                ),
                seed: base.seed ^ 0xda7a,
                ..SynthSpec::desk(preset.frame_rate_hz(), base.seed ^ 0xda7a)
            };
            build_dataset(&spec, args.n_items, preset.frame_rate_hz(), &dir, false)?;
            eprintln!("synthesized {} items for {preset}", args.n_items);
        }
        manifests.push((preset, manifest_path));
    }
    let out_dir = base.out_dir.clone();
    let spec = GridSpec {
        base,
        adapters,
        presets,
        manifests,
        out_dir,
        bootstrap_resamples: args.bootstrap_resamples,
    };
    let reports = grid_run(&spec)?;
    println!(
        "grid finished: {} cells; tables under {}",
        reports.len(),
        spec.out_dir.display()
    );
    for r in &reports {
        for note in &r.notes {
            eprintln!("note [{} {}]: {note}", r.sfm_preset, r.adapter_kind);
        }
    }
    Ok(0)
}

fn gradcheck(args: GradcheckArgs) -> Result<i32> {
    let kind: AdapterKind = args.adapter.parse()?;
    let mut worst = 0.0f64;
    for instance in 0..args.instances {
        let err = gradcheck_instance(kind, args.seed.wrapping_add(instance as u64), args.eps)?;
        worst = worst.max(err);
    }
    println!("max relative gradient error over {} instances: {worst:.3e}", args.instances);
    Ok(if worst < 1e-4 { 0 } else { 1 })
}

/// Builds a tiny full training loss (adapter + frozen LM cross-entropy +
/// auxiliary terms) and checks it against central differences.
pub fn gradcheck_instance(kind: AdapterKind, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let n_source = 4;
    let lm_cfg = LmConfig {
        n_layers: 1,
        n_heads: 2,
        dim: 12,
        ff: 16,
        max_len: 64,
    };
    let lm = crate::toystack::build_toy_lm(&lm_cfg, Vocab::build(n_source), &mut store, &mut rng)?;
    store.freeze_prefix("lm");
    let adapter_cfg = AdapterConfig {
        stack: EncoderStackConfig::new(2, 8, 12, 2),
        cif: Default::default(),
        wlq: crate::adapters::WlqConfig {
            window_seconds: 0.33,
            n_queries: 1,
            n_layers: 1,
        },
        ctc_alphabet: n_source,
        conv_kernel: 3,
    };
    let adapter = build_adapter_with(kind, 5, lm_cfg.dim, &adapter_cfg, "adapter", &mut store, &mut rng)?;
    let t_len = rng.random_range(6..12);
    let item = Array2::from_shape_fn((t_len, 5), |_| rng.random_range(-1.0..1.0));
    let transcript: Vec<usize> = (0..rng.random_range(2..=3))
        .map(|_| rng.random_range(0..n_source))
        .collect();
    let mut response: Vec<usize> = transcript.iter().map(|&k| lm.vocab.source_id(k)).collect();
    response.push(crate::toystack::EOS);
    let prompt = crate::toystack::build_prompt(&crate::toystack::PromptSpec::asr("en"), &lm.vocab)?;
    // The CTC kind's collapse follows argmax label decisions, which the
    // gradient treats as constants; pin them at the base point so the
    // difference quotient probes the same function the backward pass
    // differentiates (finite differences are undefined across a label flip).
    let pinned: Option<Vec<usize>> = if kind == AdapterKind::CtcBased {
        let mut g = crate::numkernel::graph::Graph::new();
        let fwd = adapter.forward_item(
            &mut g,
            &store,
            &item,
            50.0,
            ForwardMode::Train {
                transcript: Some(&transcript),
            },
        )?;
        let lp = fwd.ctc_logprobs.expect("ctc kind emits logprobs");
        Some(crate::adapters::argmax_labels(g.value(lp)))
    } else {
        None
    };
    let report = grad_check(
        |g, s| {
            let fwd = match &pinned {
                Some(labels) => adapter.forward_item_pinned_labels(
                    g,
                    s,
                    &item,
                    50.0,
                    ForwardMode::Train {
                        transcript: Some(&transcript),
                    },
                    labels,
                )?,
                None => adapter.forward_item(
                    g,
                    s,
                    &item,
                    50.0,
                    ForwardMode::Train {
                        transcript: Some(&transcript),
                    },
                )?,
            };
            let join = crate::toystack::join_j(g, s, &lm, &prompt, fwd.features, Some(&response))?;
            let logits = crate::toystack::lm_forward(g, s, &lm, join.inputs)?;
            let logp = g.log_softmax_rows(logits);
            let mut total = g.nll_pick_mean(logp, &join.picks);
            if let Some(lp) = fwd.ctc_logprobs {
                let ctc = ctc_loss_node(g, lp, &transcript)?;
                let scaled = g.scale(ctc, 0.1);
                total = g.add(total, scaled);
            }
            if let Some(alpha) = fwd.alpha {
                let q = quantity_loss_node(g, alpha, transcript.len());
                let scaled = g.scale(q, 0.1);
                total = g.add(total, scaled);
            }
            Ok(total)
        },
        &mut store,
        eps,
    )?;
    Ok(report.max_rel_err)
}

fn params(args: ParamsArgs) -> Result<i32> {
    let kind: AdapterKind = args.adapter.parse()?;
    let cfg = AdapterConfig {
        stack: EncoderStackConfig::new(args.layers, args.hidden, args.intermediate, args.heads),
        cif: Default::default(),
        wlq: Default::default(),
        ctc_alphabet: args.ctc_alphabet,
        conv_kernel: 3,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adapter = build_adapter_with(
        kind,
        args.in_dim,
        args.lm_dim,
        &cfg,
        "adapter",
        &mut store,
        &mut rng,
    )?;
    println!("adapter kind: {kind}");
    println!("modality core:  {:>12}", adapter.modality_core_params(&store));
    println!("length adapter: {:>12}", adapter.length_adapter_params(&store));
    println!("projections:    {:>12}", adapter.projection_params(&store));
    println!("total:          {:>12}", adapter.total_params(&store));
    // structural compression accounting at the two preset rates
    for preset in SfmPreset::ALL {
        let rate = preset.frame_rate_hz();
        let (ratio_num, ratio_den): (usize, usize) = match kind {
            AdapterKind::Base => (1, 1),
            AdapterKind::ConvBased => (4, 1),
            AdapterKind::WlqFormer => (
                crate::adapters::window_length(rate, cfg.wlq.window_seconds),
                cfg.wlq.n_queries,
            ),
            _ => continue, // content-based: measured on data, not structural
        };
        let (ratio, out_rate) = compression_stats(ratio_num, ratio_den, rate)?;
        println!("{preset}: ratio {ratio:.2}:1, output rate {out_rate:.3} Hz");
    }
    Ok(0)
}

fn significance(args: SignificanceArgs) -> Result<i32> {
    let read_lines = |p: &PathBuf| -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(|l| l.to_string())
            .collect())
    };
    let refs = read_lines(&args.refs)?;
    let hyps_a = read_lines(&args.hyps_a)?;
    let hyps_b = read_lines(&args.hyps_b)?;
    let metric: Metric = args.metric.parse()?;
    let p = bootstrap_significance(&refs, &hyps_a, &hyps_b, metric, args.n_resamples, args.seed)?;
    println!(
        "p = {p:.4} ({})",
        if p < 0.05 {
            "significant at p<0.05"
        } else {
            "not significant"
        }
    );
    Ok(0)
}

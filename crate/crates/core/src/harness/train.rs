//! Adapter training: frozen backbones, gradient accumulation, AdamW with the
//! warmup+cosine schedule, loss-curve logging and checkpointing.

use crate::adapters::{adapter_meta_array, build_adapter_with, Adapter, AdapterConfig, ForwardMode};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::harness::config::RunConfig;
use crate::losses::{composite_loss, ctc_loss_node, quantity_loss_node, LossBreakdown};
use crate::numkernel::graph::Graph;
use crate::numkernel::optim::{adamw_step, AdamState};
use crate::numkernel::schedule::lr_at_step;
use crate::numkernel::store::ParamStore;
use crate::datasynth::{read_fseq, Manifest, Split};
use crate::toystack::{
    build_prompt, build_toy_sfm, join_j_ordered, lm_forward, load_toy_lm, sfm_encode, PromptSpec,
    Task, ToyLM, ToySFM, EOS,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

const SFM_SEED_SALT: u64 = 0x53464d5f53454544; // "SFM_SEED"
const INIT_SEED_SALT: u64 = 0x494e49545f414456;
const BATCH_SEED_SALT: u64 = 0x42415443485f5345;

/// One ready-to-train item: encoded features plus supervision targets.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub encoded: Array2<f64>,
    /// Transcript as local source-alphabet ids (CTC/CIF auxiliary target).
    pub aux_target: Vec<usize>,
    /// Task response as vocabulary ids, ending in EOS.
    pub response: Vec<usize>,
    pub prompt: Vec<usize>,
}

/// Frozen backbones, trainable adapter, and the prepared training split.
pub struct PreparedRun {
    pub store: ParamStore,
    pub lm: ToyLM,
    pub sfm: ToySFM,
    pub adapter: Adapter,
    pub items: Vec<TrainItem>,
    pub audio_first: bool,
    adapter_aux_weight: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve: Vec<LossRow>,
    pub trainable_params: usize,
    pub frozen_verified: bool,
}

/// Tokenizes a record's supervision targets for the given task.
pub fn targets_for(
    lm: &ToyLM,
    task: Task,
    transcript: &str,
    translation: &str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let transcript_ids = lm.vocab.tokenize(transcript)?;
    let base = lm.vocab.source_id(0);
    let aux: Result<Vec<usize>> = transcript_ids
        .iter()
        .map(|&id| {
            id.checked_sub(base)
                .filter(|&k| k < lm.vocab.n_source())
                .ok_or_else(|| Error::Data(format!("transcript token {id} is not a source word")))
        })
        .collect();
    let response_text = match task {
        Task::Asr => transcript,
        Task::St => translation,
    };
    let mut response = lm.vocab.tokenize(response_text)?;
    response.push(EOS);
    Ok((aux?, response))
}

/// Loads backbones and data, builds the trainable adapter, and encodes the
/// training split through the frozen encoder.
pub fn prepare_run(cfg: &RunConfig) -> Result<PreparedRun> {
    cfg.validate()?;
    let mut store = ParamStore::load(&cfg.lm_checkpoint)?;
    let lm = load_toy_lm(&mut store)?;
    let sfm = build_toy_sfm(
        cfg.sfm_preset,
        cfg.sfm_dim,
        cfg.seed ^ SFM_SEED_SALT,
        false,
        &mut store,
        "sfm",
    )?;
    let adapter_cfg = AdapterConfig {
        stack: cfg.adapter_stack,
        cif: cfg.cif,
        wlq: cfg.wlq,
        ctc_alphabet: lm.vocab.n_source(),
        conv_kernel: 3,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SEED_SALT);
    let adapter = build_adapter_with(
        cfg.adapter_kind,
        cfg.sfm_dim,
        lm.cfg.dim,
        &adapter_cfg,
        "adapter",
        &mut store,
        &mut init_rng,
    )?;
    store.register("meta.adapter", adapter_meta_array(&adapter))?;
    store.register(
        "meta.join",
        ndarray::Array2::from_elem((1, 1), f64::from(cfg.audio_first)),
    )?;
    store.freeze_prefix("meta.");

    let manifest = Manifest::load(&cfg.manifest)?;
    let items = load_split(&manifest, Split::Train, cfg, &lm, &sfm, &store)?;
    if items.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(PreparedRun {
        store,
        lm,
        sfm,
        adapter,
        items,
        audio_first: cfg.audio_first,
        adapter_aux_weight: cfg.aux_weight,
    })
}

/// Reads and encodes one manifest split.
pub fn load_split(
    manifest: &Manifest,
    split: Split,
    cfg: &RunConfig,
    lm: &ToyLM,
    sfm: &ToySFM,
    store: &ParamStore,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for record in manifest.items(split) {
        let (feats, rate) = read_fseq(manifest.feature_path(record))?;
        if rate != sfm.frame_rate_hz() {
            return Err(Error::Config(format!(
                "{}: feature rate {rate} does not match preset {}",
                record.path.display(),
                sfm.preset
            )));
        }
        if feats.ncols() != cfg.sfm_dim {
            return Err(Error::Shape(format!(
                "{}: feature dim {} does not match sfm_dim {}",
                record.path.display(),
                feats.ncols(),
                cfg.sfm_dim
            )));
        }
        let raw = FeatureSequence::single(feats, rate)?;
        let encoded = sfm_encode(sfm, store, &raw)?.item_owned(0);
        let (aux_target, response) =
            targets_for(lm, cfg.task, &record.transcript, &record.translation)?;
        let prompt_spec = match cfg.task {
            Task::Asr => PromptSpec::asr(&record.source_lang),
            Task::St => PromptSpec::st(&record.source_lang, &record.target_lang),
        };
        let prompt = build_prompt(&prompt_spec, &lm.vocab)?;
        items.push(TrainItem {
            encoded,
            aux_target,
            response,
            prompt,
        });
    }
    Ok(items)
}

/// Builds the full training loss for one item and backpropagates it scaled
/// by `weight`. Returns the (unscaled) loss components.
pub fn item_loss_backward(
    p: &mut PreparedRun,
    item_idx: usize,
    weight: f64,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let item = &p.items[item_idx];
    let mut g = Graph::new();
    let fwd = p.adapter.forward_item(
        &mut g,
        &p.store,
        &item.encoded,
        p.sfm.frame_rate_hz(),
        ForwardMode::Train {
            transcript: Some(&item.aux_target),
        },
    )?;
    let join = join_j_ordered(
        &mut g,
        &p.store,
        &p.lm,
        &item.prompt,
        fwd.features,
        Some(&item.response),
        p.audio_first,
    )?;
    let logits = lm_forward(&mut g, &p.store, &p.lm, join.inputs)?;
    let logp = g.log_softmax_rows(logits);
    let ce_node = g.nll_pick_mean(logp, &join.picks);
    let mut total = ce_node;
    let mut ctc_val = None;
    let mut qty_val = None;
    if let Some(lp) = fwd.ctc_logprobs {
        let ctc = ctc_loss_node(&mut g, lp, &item.aux_target)?;
        ctc_val = Some(g.scalar(ctc));
        let scaled = g.scale(ctc, p.adapter_aux_weight);
        total = g.add(total, scaled);
    }
    if let Some(alpha) = fwd.alpha {
        let q = quantity_loss_node(&mut g, alpha, item.aux_target.len());
        qty_val = Some(g.scalar(q));
        let scaled = g.scale(q, p.adapter_aux_weight);
        total = g.add(total, scaled);
    }
    let ce = g.scalar(ce_node);
    let scaled_total = g.scale(total, weight);
    g.backward(scaled_total, &mut p.store)?;
    Ok((ce, ctc_val, qty_val))
}

impl PreparedRun {
    /// Auxiliary-loss weight is stored on the run so the item loss can reach
    /// it without re-threading the config.
    pub fn set_aux_weight(&mut self, w: f64) {
        self.adapter_aux_weight = w;
    }
}

/// Accumulates gradients for one optimizer step (`grad_accum` micro-batches
/// of `micro_batch` items, each weighted by one over the effective batch).
/// Returns the effective-batch mean loss breakdown.
pub fn accumulate_step(
    p: &mut PreparedRun,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let effective = cfg.micro_batch * cfg.grad_accum;
    let weight = 1.0 / effective as f64;
    let mut ce_sum = 0.0;
    let mut ctc_sum = 0.0;
    let mut ctc_seen = false;
    let mut qty_sum = 0.0;
    let mut qty_seen = false;
    for _ in 0..cfg.grad_accum {
        for _ in 0..cfg.micro_batch {
            let idx = rng.random_range(0..p.items.len());
            let (ce, ctc, qty) = item_loss_backward(p, idx, weight)?;
            ce_sum += ce * weight;
            if let Some(c) = ctc {
                ctc_sum += c * weight;
                ctc_seen = true;
            }
            if let Some(q) = qty {
                qty_sum += q * weight;
                qty_seen = true;
            }
        }
    }
    composite_loss(
        ce_sum,
        ctc_seen.then_some(ctc_sum),
        qty_seen.then_some(qty_sum),
        cfg.aux_weight,
    )
}

/// Runs the full training loop on a prepared run.
pub fn train_prepared(p: &mut PreparedRun, cfg: &RunConfig) -> Result<TrainOutcome> {
    p.set_aux_weight(cfg.aux_weight);
    let lm_sum_before = p.store.checksum("lm.");
    let sfm_sum_before = p.store.checksum("sfm.");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_SEED_SALT);
    let mut opt = AdamState::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        p.store.zero_grads();
        let breakdown = match accumulate_step(p, cfg, &mut rng) {
            Ok(b) => b,
            Err(Error::NonFinite(what)) => {
                return Err(Error::TrainAborted {
                    step,
                    message: format!("non-finite loss ({what})"),
                })
            }
            Err(e) => return Err(e),
        };
        if !breakdown.total.is_finite() {
            return Err(Error::TrainAborted {
                step,
                message: format!(
                    "non-finite loss: ce={} ctc={:?} quantity={:?}",
                    breakdown.ce, breakdown.ctc, breakdown.quantity
                ),
            });
        }
        let lr = lr_at_step(&cfg.schedule, step);
        adamw_step(
            &mut p.store,
            &mut opt,
            lr,
            (0.9, 0.999),
            1e-8,
            cfg.weight_decay,
        )
        .map_err(|e| Error::TrainAborted {
            step,
            message: e.to_string(),
        })?;
        curve.push(LossRow {
            step,
            lr,
            breakdown,
        });
    }
    if p.store.checksum("lm.") != lm_sum_before || p.store.checksum("sfm.") != sfm_sum_before {
        return Err(Error::Data(
            "frozen backbone parameters changed during training".into(),
        ));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let checkpoint = cfg.out_dir.join("checkpoint.afck");
    p.store.save(&checkpoint)?;
    write_loss_csv(&cfg.out_dir.join("loss.csv"), &curve)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_curve: curve,
        trainable_params: p.store.count_params("adapter", true),
        frozen_verified: true,
    })
}

/// End-to-end: prepare, train, checkpoint.
pub fn train_adapter(cfg: &RunConfig) -> Result<(PreparedRun, TrainOutcome)> {
    let mut p = prepare_run(cfg)?;
    let outcome = train_prepared(&mut p, cfg)?;
    Ok((p, outcome))
}

pub fn write_loss_csv(path: &std::path::Path, curve: &[LossRow]) -> Result<()> {
    let mut out = String::from("step,lr,ce,ctc,quantity,total\n");
    for row in curve {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.step,
            row.lr,
            row.breakdown.ce,
            opt(row.breakdown.ctc),
            opt(row.breakdown.quantity),
            row.breakdown.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

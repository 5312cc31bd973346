//! Decoder-only toy language model: causal transformer over the toy
//! vocabulary with learned positional embeddings, an untied output head,
//! next-token pretraining, prompt/audio joining and greedy decoding.

use crate::error::{Error, Result};
use crate::numkernel::encoder::{
    attention_node, layer_norm_node, linear_node, register_layer_norm, register_linear, INIT_STD,
};
use crate::numkernel::graph::{Graph, NodeId, SoftmaxMask};
use crate::numkernel::optim::{adamw_step, AdamState};
use crate::numkernel::schedule::{lr_at_step, ScheduleConfig};
use crate::numkernel::store::ParamStore;
use crate::toystack::vocab::{Vocab, BOS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LM_PREFIX: &str = "lm";
const META_NAME: &str = "meta.lm";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim: usize,
    pub ff: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            dim: 256,
            ff: 1024,
            max_len: 256,
        }
    }
}

impl LmConfig {
    /// Small preset sized for single-core desk runs.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            dim: 64,
            ff: 128,
            max_len: 192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.n_heads < 1 || self.dim < 1 || self.ff < 1 || self.max_len < 2
        {
            return Err(Error::Config("all LM dimensions must be >= 1".into()));
        }
        if self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Handle to the toy LM; parameters live in the store under `lm.`.
#[derive(Debug, Clone)]
pub struct ToyLM {
    pub cfg: LmConfig,
    pub vocab: Vocab,
}

impl ToyLM {
    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.is_frozen(&format!("{LM_PREFIX}.emb"))
    }
}

/// Registers LM parameters (trainable) plus a frozen `meta.lm` entry that
/// records the configuration for checkpoint reload.
pub fn build_toy_lm<R: Rng>(
    cfg: &LmConfig,
    vocab: Vocab,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<ToyLM> {
    cfg.validate()?;
    let v = vocab.len();
    let d = cfg.dim;
    store.register_trunc_normal(&format!("{LM_PREFIX}.emb"), (v, d), INIT_STD, rng)?;
    store.register_trunc_normal(&format!("{LM_PREFIX}.pos"), (cfg.max_len, d), INIT_STD, rng)?;
    for j in 0..cfg.n_layers {
        let lp = format!("{LM_PREFIX}.layer{j}");
        for proj in ["q", "k", "v", "o"] {
            register_linear(store, &format!("{lp}.attn.{proj}"), d, d, rng)?;
        }
        register_linear(store, &format!("{lp}.ff.in"), d, cfg.ff, rng)?;
        register_linear(store, &format!("{lp}.ff.out"), cfg.ff, d, rng)?;
        register_layer_norm(store, &format!("{lp}.ln1"), d)?;
        register_layer_norm(store, &format!("{lp}.ln2"), d)?;
    }
    register_layer_norm(store, &format!("{LM_PREFIX}.final_ln"), d)?;
    register_linear(store, &format!("{LM_PREFIX}.head"), d, v, rng)?;
    let meta = Array2::from_shape_vec(
        (1, 6),
        vec![
            cfg.n_layers as f64,
            cfg.n_heads as f64,
            cfg.dim as f64,
            cfg.ff as f64,
            vocab.n_source() as f64,
            cfg.max_len as f64,
        ],
    )
    .expect("shape");
    store.register(META_NAME, meta)?;
    store.freeze_prefix(META_NAME);
    Ok(ToyLM { cfg: *cfg, vocab })
}

/// Rebuilds the LM handle from a checkpoint's `meta.lm` entry and freezes the
/// LM parameters.
pub fn load_toy_lm(store: &mut ParamStore) -> Result<ToyLM> {
    let meta = store.values(META_NAME)?.clone();
    if meta.len() != 6 {
        return Err(Error::Data(format!(
            "meta.lm has {} fields, expected 6",
            meta.len()
        )));
    }
    let at = |i: usize| meta[[0, i]].round() as usize;
    let cfg = LmConfig {
        n_layers: at(0),
        n_heads: at(1),
        dim: at(2),
        ff: at(3),
        max_len: at(5),
    };
    cfg.validate()?;
    let vocab = Vocab::build(at(4));
    let expected_rows = vocab.len();
    let emb = store.values(&format!("{LM_PREFIX}.emb"))?;
    if emb.dim() != (expected_rows, cfg.dim) {
        return Err(Error::Data(format!(
            "embedding shape {:?} does not match meta ({expected_rows}, {})",
            emb.dim(),
            cfg.dim
        )));
    }
    store.freeze_prefix(LM_PREFIX);
    Ok(ToyLM { cfg, vocab })
}

/// Embeds token ids through the LM embedding table.
pub fn embed_ids(g: &mut Graph, store: &ParamStore, lm: &ToyLM, ids: &[usize]) -> Result<NodeId> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= lm.vocab.len()) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary")));
    }
    let emb = g.param(store, &format!("{LM_PREFIX}.emb"))?;
    Ok(g.gather_rows(emb, ids))
}

/// Causal forward from input embeddings (T x dim) to logits (T x vocab).
pub fn lm_forward(g: &mut Graph, store: &ParamStore, lm: &ToyLM, x: NodeId) -> Result<NodeId> {
    let t = g.value(x).nrows();
    if t == 0 {
        return Err(Error::Data("LM forward on empty input".into()));
    }
    if t > lm.cfg.max_len {
        return Err(Error::Data(format!(
            "sequence length {t} exceeds LM max_len {}",
            lm.cfg.max_len
        )));
    }
    if g.value(x).ncols() != lm.cfg.dim {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match LM dim {}",
            g.value(x).ncols(),
            lm.cfg.dim
        )));
    }
    let pos_table = g.param(store, &format!("{LM_PREFIX}.pos"))?;
    let pos = g.slice_rows(pos_table, 0, t);
    let mut h = g.add(x, pos);
    for j in 0..lm.cfg.n_layers {
        let lp = format!("{LM_PREFIX}.layer{j}");
        let normed = layer_norm_node(g, store, &format!("{lp}.ln1"), h)?;
        let attn = attention_node(
            g,
            store,
            &format!("{lp}.attn"),
            normed,
            normed,
            lm.cfg.n_heads,
            SoftmaxMask::Causal,
        )?;
        h = g.add(h, attn);
        let normed2 = layer_norm_node(g, store, &format!("{lp}.ln2"), h)?;
        let mid = linear_node(g, store, &format!("{lp}.ff.in"), normed2)?;
        let act = g.gelu(mid);
        let ff = linear_node(g, store, &format!("{lp}.ff.out"), act)?;
        h = g.add(h, ff);
    }
    let final_normed = layer_norm_node(g, store, &format!("{LM_PREFIX}.final_ln"), h)?;
    linear_node(g, store, &format!("{LM_PREFIX}.head"), final_normed)
}

/// Joined LM input and the response supervision positions.
#[derive(Debug, Clone)]
pub struct JoinOutput {
    pub inputs: NodeId,
    /// True exactly at the logit rows that predict a response token.
    pub loss_mask: Vec<bool>,
    /// (logit row, expected token) pairs, in response order.
    pub picks: Vec<(usize, usize)>,
}

/// Concatenates `[BOS, prompt embeddings, audio embeddings, response
/// embeddings]` (response only with teacher forcing) and derives the loss
/// mask over response prediction positions.
pub fn join_j(
    g: &mut Graph,
    store: &ParamStore,
    lm: &ToyLM,
    prompt_ids: &[usize],
    audio: NodeId,
    response_ids: Option<&[usize]>,
) -> Result<JoinOutput> {
    join_j_ordered(g, store, lm, prompt_ids, audio, response_ids, false)
}

/// As [`join_j`], with the prompt/audio order switchable: `audio_first`
/// places the audio block before the prompt embeddings. The response always
/// comes last and its prediction positions are unaffected by the order.
pub fn join_j_ordered(
    g: &mut Graph,
    store: &ParamStore,
    lm: &ToyLM,
    prompt_ids: &[usize],
    audio: NodeId,
    response_ids: Option<&[usize]>,
    audio_first: bool,
) -> Result<JoinOutput> {
    let a = g.value(audio).nrows();
    if a == 0 {
        return Err(Error::Data("zero-length audio rejected by join".into()));
    }
    if g.value(audio).ncols() != lm.cfg.dim {
        return Err(Error::Shape(format!(
            "audio dim {} does not match LM embedding dim {}",
            g.value(audio).ncols(),
            lm.cfg.dim
        )));
    }
    let bos = embed_ids(g, store, lm, &[BOS])?;
    let prompt = embed_ids(g, store, lm, prompt_ids)?;
    let mut parts = if audio_first {
        vec![bos, audio, prompt]
    } else {
        vec![bos, prompt, audio]
    };
    let response = response_ids.unwrap_or(&[]);
    if !response.is_empty() {
        parts.push(embed_ids(g, store, lm, response)?);
    }
    let inputs = g.concat_rows(&parts);
    let p = prompt_ids.len();
    let total = 1 + p + a + response.len();
    let mut loss_mask = vec![false; total];
    let mut picks = Vec::with_capacity(response.len());
    for (i, &tok) in response.iter().enumerate() {
        let row = p + a + i; // logits at this row predict input row+1
        loss_mask[row] = true;
        picks.push((row, tok));
    }
    Ok(JoinOutput {
        inputs,
        loss_mask,
        picks,
    })
}

/// Greedy decoding from `[BOS, prompt, audio]` until EOS or `max_len` tokens.
pub fn greedy_generate(
    lm: &ToyLM,
    store: &ParamStore,
    prompt_ids: &[usize],
    audio: &Array2<f64>,
    max_len: usize,
) -> Result<Vec<usize>> {
    greedy_generate_ordered(lm, store, prompt_ids, audio, max_len, false)
}

/// Greedy decoding under a chosen prompt/audio order.
pub fn greedy_generate_ordered(
    lm: &ToyLM,
    store: &ParamStore,
    prompt_ids: &[usize],
    audio: &Array2<f64>,
    max_len: usize,
    audio_first: bool,
) -> Result<Vec<usize>> {
    let mut generated: Vec<usize> = Vec::new();
    for _ in 0..max_len {
        let mut g = Graph::new();
        let audio_node = g.constant(audio.clone());
        let join = join_j_ordered(
            &mut g,
            store,
            lm,
            prompt_ids,
            audio_node,
            (!generated.is_empty()).then_some(generated.as_slice()),
            audio_first,
        )?;
        let logits = lm_forward(&mut g, store, lm, join.inputs)?;
        let last = g.value(logits).nrows() - 1;
        let row = g.value(logits).row(last);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if best == crate::toystack::vocab::EOS {
            break;
        }
        generated.push(best);
    }
    Ok(generated)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainReport {
    pub perplexity_untrained: f64,
    pub perplexity_trained: f64,
    pub final_loss: f64,
}

/// Held-out perplexity: exp of mean next-token NLL per transition.
pub fn perplexity(lm: &ToyLM, store: &ParamStore, corpus: &[Vec<usize>]) -> Result<f64> {
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            continue;
        }
        let mut g = Graph::new();
        let emb = embed_ids(&mut g, store, lm, &seq[..seq.len() - 1])?;
        let logits = lm_forward(&mut g, store, lm, emb)?;
        let logp = g.log_softmax_rows(logits);
        let picks: Vec<(usize, usize)> = (0..seq.len() - 1).map(|t| (t, seq[t + 1])).collect();
        let nll = g.nll_pick_mean(logp, &picks);
        total_nll += g.scalar(nll) * picks.len() as f64;
        total_tokens += picks.len();
    }
    if total_tokens == 0 {
        return Err(Error::Data("no scorable sequences in corpus".into()));
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// Next-token pretraining until `steps`, then the model is frozen. Aborts on
/// divergence, and errors if held-out perplexity failed to improve.
pub fn pretrain_toy_lm(
    corpus: &[Vec<usize>],
    steps: usize,
    seed: u64,
    lm_cfg: &LmConfig,
    n_source: usize,
    peak_lr: f64,
    store: &mut ParamStore,
) -> Result<(ToyLM, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    if steps < 1 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    let vocab = Vocab::build(n_source);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lm = build_toy_lm(lm_cfg, vocab, store, &mut rng)?;

    let held: Vec<Vec<usize>> = corpus
        .iter()
        .enumerate()
        .filter(|(i, s)| i % 20 == 19 && s.len() >= 2)
        .map(|(_, s)| s.clone())
        .collect();
    let train: Vec<&Vec<usize>> = corpus
        .iter()
        .enumerate()
        .filter(|(i, s)| i % 20 != 19 && s.len() >= 2)
        .map(|(_, s)| s)
        .collect();
    if train.is_empty() {
        return Err(Error::Data("no trainable sequences in corpus".into()));
    }
    let held = if held.is_empty() {
        train.iter().take(16).map(|s| (*s).clone()).collect()
    } else {
        held
    };

    let ppl_before = perplexity(&lm, store, &held)?;
    let schedule = ScheduleConfig {
        peak_lr,
        warmup_steps: (steps / 20).max(1),
        total_steps: steps,
        floor_lr: peak_lr * 0.05,
    };
    let mut opt = AdamState::new();
    let batch = 16usize;
    let mut last_loss = f64::NAN;
    for step in 1..=steps {
        store.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..batch {
            let seq = train[rng.random_range(0..train.len())];
            let mut g = Graph::new();
            let emb = embed_ids(&mut g, store, &lm, &seq[..seq.len() - 1])?;
            let logits = lm_forward(&mut g, store, &lm, emb)?;
            let logp = g.log_softmax_rows(logits);
            let picks: Vec<(usize, usize)> = (0..seq.len() - 1).map(|t| (t, seq[t + 1])).collect();
            let nll = g.nll_pick_mean(logp, &picks);
            let scaled = g.scale(nll, 1.0 / batch as f64);
            batch_loss += g.scalar(scaled);
            g.backward(scaled, store)?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::TrainAborted {
                step,
                message: format!("non-finite pretraining loss {batch_loss}"),
            });
        }
        let lr = lr_at_step(&schedule, step);
        adamw_step(store, &mut opt, lr, (0.9, 0.999), 1e-8, 0.01)
            .map_err(|e| Error::TrainAborted {
                step,
                message: e.to_string(),
            })?;
        last_loss = batch_loss;
    }
    let ppl_after = perplexity(&lm, store, &held)?;
    if ppl_after >= ppl_before {
        return Err(Error::TrainAborted {
            step: steps,
            message: format!(
                "held-out perplexity did not improve: {ppl_before:.3} -> {ppl_after:.3}"
            ),
        });
    }
    store.freeze_prefix(LM_PREFIX);
    Ok((
        lm,
        PretrainReport {
            perplexity_untrained: ppl_before,
            perplexity_trained: ppl_after,
            final_loss: last_loss,
        },
    ))
}

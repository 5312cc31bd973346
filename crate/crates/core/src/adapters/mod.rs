//! The five adapter architectures mapping encoder output into the LM
//! embedding space, each with an explicit length-adaptation strategy.
//!
//! Base keeps the sequence length; Conv applies two stride-2 convolutions
//! (4:1); CIF and CTC compress based on content; the window-level query
//! former replaces the whole stack with windowed cross-attention pooling.

pub mod cif;
pub mod ctc_compress;
pub mod wlq;

pub use cif::{cif_fire_node, cif_integrate_fire, cif_weights, fire_plan, CifConfig, FirePlan, FireRule};
pub use ctc_compress::{argmax_labels, ctc_collapse, ctc_collapse_node, label_runs};
pub use wlq::{window_length, wlq_out_len, WlqConfig};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numkernel::encoder::{
    build_encoder_stack, conv1d_node, linear_node, register_conv1d, register_linear,
    stack_layers_node, EncoderStack, EncoderStackConfig,
};
use crate::numkernel::graph::{Graph, NodeId};
use crate::numkernel::store::ParamStore;
use ndarray::Array2;
use rand::Rng;

/// The length adapter of the Conv/CIF/CTC kinds sits after this many stack
/// layers (clamped to the stack depth for very shallow test configurations).
const LENGTH_ADAPTER_AFTER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Base,
    ConvBased,
    CifBased,
    CtcBased,
    WlqFormer,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::Base,
        AdapterKind::ConvBased,
        AdapterKind::CifBased,
        AdapterKind::CtcBased,
        AdapterKind::WlqFormer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AdapterKind::Base => "base",
            AdapterKind::ConvBased => "conv-based",
            AdapterKind::CifBased => "cif-based",
            AdapterKind::CtcBased => "ctc-based",
            AdapterKind::WlqFormer => "wlq-former",
        }
    }

    /// True for kinds whose output length depends on the input content.
    pub fn is_content_based(&self) -> bool {
        matches!(self, AdapterKind::CifBased | AdapterKind::CtcBased)
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(AdapterKind::Base),
            "conv" | "conv-based" => Ok(AdapterKind::ConvBased),
            "cif" | "cif-based" => Ok(AdapterKind::CifBased),
            "ctc" | "ctc-based" => Ok(AdapterKind::CtcBased),
            "wlq" | "wlq-former" => Ok(AdapterKind::WlqFormer),
            other => Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

/// Everything needed to size an adapter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    /// Modality-core dimensions (the window former borrows hidden,
    /// intermediate and head count from here).
    pub stack: EncoderStackConfig,
    pub cif: CifConfig,
    pub wlq: WlqConfig,
    /// Symbols (excluding blank) of the CTC prediction head.
    pub ctc_alphabet: usize,
    pub conv_kernel: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            stack: EncoderStackConfig::default(),
            cif: CifConfig::default(),
            wlq: WlqConfig::default(),
            ctc_alphabet: 30,
            conv_kernel: 3,
        }
    }
}

/// A built adapter; parameters live in the store under `prefix`.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub kind: AdapterKind,
    pub in_dim: usize,
    pub lm_dim: usize,
    pub cfg: AdapterConfig,
    pub prefix: String,
    stack: Option<EncoderStack>,
}

/// Forward behavior: training runs CIF with target-length scaling and
/// requires transcripts for the content-based kinds.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Train { transcript: Option<&'a [usize]> },
    Infer,
}

/// Graph-level output of one item's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ItemForward {
    pub features: NodeId,
    pub out_len: usize,
    pub ctc_logprobs: Option<NodeId>,
    pub alpha: Option<NodeId>,
}

/// Value-level batched output.
#[derive(Debug, Clone)]
pub struct AdapterOutput {
    pub features: FeatureSequence,
    pub out_lengths: Vec<usize>,
    pub ctc_logprobs: Option<Vec<Array2<f64>>>,
    pub alpha: Option<Vec<Vec<f64>>>,
}

/// Builds an adapter with the default configuration under the `adapter`
/// prefix.
pub fn build_adapter<R: Rng>(
    kind: AdapterKind,
    in_dim: usize,
    lm_dim: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<Adapter> {
    build_adapter_with(kind, in_dim, lm_dim, &AdapterConfig::default(), "adapter", store, rng)
}

pub fn build_adapter_with<R: Rng>(
    kind: AdapterKind,
    in_dim: usize,
    lm_dim: usize,
    cfg: &AdapterConfig,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<Adapter> {
    if in_dim < 1 || lm_dim < 1 {
        return Err(Error::Config("adapter dims must be >= 1".into()));
    }
    cfg.stack.validate()?;
    cfg.cif.validate()?;
    cfg.wlq.validate()?;
    if store.names().any(|n| n.starts_with(prefix)) {
        return Err(Error::DuplicateParam(format!(
            "prefix `{prefix}` already in use"
        )));
    }
    let hidden = cfg.stack.hidden;
    let stack = if kind == AdapterKind::WlqFormer {
        wlq::register_wlq(
            store,
            &format!("{prefix}.wlq"),
            in_dim,
            hidden,
            cfg.stack.intermediate,
            &cfg.wlq,
            lm_dim,
            rng,
        )?;
        None
    } else {
        register_linear(store, &format!("{prefix}.in_proj"), in_dim, hidden, rng)?;
        let stack = build_encoder_stack(&cfg.stack, store, &format!("{prefix}.stack"), rng)?;
        register_linear(store, &format!("{prefix}.out_proj"), hidden, lm_dim, rng)?;
        match kind {
            AdapterKind::ConvBased => {
                register_conv1d(
                    store,
                    &format!("{prefix}.len.conv1"),
                    hidden,
                    hidden,
                    cfg.conv_kernel,
                    rng,
                )?;
                register_conv1d(
                    store,
                    &format!("{prefix}.len.conv2"),
                    hidden,
                    hidden,
                    cfg.conv_kernel,
                    rng,
                )?;
            }
            AdapterKind::CifBased => {
                register_linear(store, &format!("{prefix}.len.cif_head"), hidden, 1, rng)?;
            }
            AdapterKind::CtcBased => {
                register_linear(
                    store,
                    &format!("{prefix}.len.ctc_head"),
                    hidden,
                    cfg.ctc_alphabet + 1,
                    rng,
                )?;
            }
            _ => {}
        }
        Some(stack)
    };
    Ok(Adapter {
        kind,
        in_dim,
        lm_dim,
        cfg: *cfg,
        prefix: prefix.to_string(),
        stack,
    })
}

impl Adapter {
    /// Trainable parameters of the shared modality core (zero for the window
    /// former, which has no separate core).
    pub fn modality_core_params(&self, store: &ParamStore) -> usize {
        store.count_params(&format!("{}.stack", self.prefix), false)
    }

    /// Parameters of the length-adaptation block. For the window former the
    /// whole merged block is reported here.
    pub fn length_adapter_params(&self, store: &ParamStore) -> usize {
        store.count_params(&format!("{}.len", self.prefix), false)
            + store.count_params(&format!("{}.wlq", self.prefix), false)
    }

    /// Input and output projections (reported separately from the core).
    pub fn projection_params(&self, store: &ParamStore) -> usize {
        store.count_params(&format!("{}.in_proj", self.prefix), false)
            + store.count_params(&format!("{}.out_proj", self.prefix), false)
    }

    pub fn total_params(&self, store: &ParamStore) -> usize {
        store.count_params(&self.prefix, false)
    }

    fn split_point(&self) -> usize {
        LENGTH_ADAPTER_AFTER.min(self.cfg.stack.n_layers)
    }

    /// Forward over one item's valid frames (T x in_dim).
    pub fn forward_item(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Array2<f64>,
        frame_rate_hz: f64,
        mode: ForwardMode<'_>,
    ) -> Result<ItemForward> {
        self.forward_item_impl(g, store, x, frame_rate_hz, mode, None)
    }

    /// Forward with the CTC collapse labels pinned instead of recomputed by
    /// argmax. Label decisions are constants to the gradient; pinning them
    /// lets central-difference checks probe the same locally smooth function
    /// the analytic backward pass differentiates.
    pub fn forward_item_pinned_labels(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Array2<f64>,
        frame_rate_hz: f64,
        mode: ForwardMode<'_>,
        labels: &[usize],
    ) -> Result<ItemForward> {
        self.forward_item_impl(g, store, x, frame_rate_hz, mode, Some(labels))
    }

    fn forward_item_impl(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Array2<f64>,
        frame_rate_hz: f64,
        mode: ForwardMode<'_>,
        pinned_labels: Option<&[usize]>,
    ) -> Result<ItemForward> {
        if x.ncols() != self.in_dim {
            return Err(Error::Shape(format!(
                "input dim {} does not match adapter in_dim {}",
                x.ncols(),
                self.in_dim
            )));
        }
        let t = x.nrows();
        if t == 0 {
            return Err(Error::Data("adapter forward on empty sequence".into()));
        }
        if self.kind == AdapterKind::WlqFormer {
            let xn = g.constant(x.clone());
            let out = wlq::wlq_forward_node(
                g,
                store,
                &format!("{}.wlq", self.prefix),
                &self.cfg.wlq,
                self.cfg.stack.n_heads,
                xn,
                frame_rate_hz,
            )?;
            let w = window_length(frame_rate_hz, self.cfg.wlq.window_seconds);
            return Ok(ItemForward {
                features: out,
                out_len: wlq_out_len(t, w, self.cfg.wlq.n_queries),
                ctc_logprobs: None,
                alpha: None,
            });
        }

        let stack = self.stack.as_ref().expect("non-wlq adapter has a stack");
        let split = self.split_point();
        let xn = g.constant(x.clone());
        let projected = linear_node(g, store, &format!("{}.in_proj", self.prefix), xn)?;
        let mut h = stack_layers_node(g, store, stack, projected, 0..split)?;
        let mut out_len = t;
        let mut ctc_logprobs = None;
        let mut alpha_out = None;

        match self.kind {
            AdapterKind::Base => {}
            AdapterKind::ConvBased => {
                let c1 = conv1d_node(
                    g,
                    store,
                    &format!("{}.len.conv1", self.prefix),
                    h,
                    2,
                    self.cfg.conv_kernel,
                )?;
                let a1 = g.gelu(c1);
                h = conv1d_node(
                    g,
                    store,
                    &format!("{}.len.conv2", self.prefix),
                    a1,
                    2,
                    self.cfg.conv_kernel,
                )?;
                out_len = t.div_ceil(2).div_ceil(2);
            }
            AdapterKind::CifBased => {
                let logit = linear_node(g, store, &format!("{}.len.cif_head", self.prefix), h)?;
                let alpha = g.sigmoid(logit);
                alpha_out = Some(alpha);
                let (fired, n) = match mode {
                    ForwardMode::Train { transcript } if self.cfg.cif.scale_to_target => {
                        let transcript = transcript.ok_or_else(|| {
                            Error::Data(
                                "transcripts required during training for cif-based adapters"
                                    .into(),
                            )
                        })?;
                        if transcript.is_empty() {
                            return Err(Error::Data("empty transcript for CIF scaling".into()));
                        }
                        let target = transcript.len();
                        let asum = g.sum_all(alpha);
                        if g.scalar(asum) <= 0.0 {
                            return Err(Error::Data(
                                "cannot scale CIF weights: weight sum is zero".into(),
                            ));
                        }
                        let inv = g.recip(asum);
                        let factor = g.scale(inv, target as f64 * self.cfg.cif.beta);
                        let scaled = g.scale_by(alpha, factor);
                        cif_fire_node(g, h, scaled, self.cfg.cif.beta, FireRule::Exact(target))?
                    }
                    _ => cif_fire_node(g, h, alpha, self.cfg.cif.beta, FireRule::Threshold)?,
                };
                h = fired;
                out_len = n;
            }
            AdapterKind::CtcBased => {
                if let ForwardMode::Train { transcript: None } = mode {
                    return Err(Error::Data(
                        "transcripts required during training for ctc-based adapters".into(),
                    ));
                }
                let logits = linear_node(g, store, &format!("{}.len.ctc_head", self.prefix), h)?;
                let logprobs = g.log_softmax_rows(logits);
                ctc_logprobs = Some(logprobs);
                let labels = match pinned_labels {
                    Some(l) => {
                        if l.len() != t {
                            return Err(Error::Shape(format!(
                                "{} pinned labels for {t} frames",
                                l.len()
                            )));
                        }
                        l.to_vec()
                    }
                    None => argmax_labels(g.value(logprobs)),
                };
                let (collapsed, n_runs) = ctc_collapse_node(g, h, &labels);
                h = collapsed;
                out_len = n_runs;
            }
            AdapterKind::WlqFormer => unreachable!(),
        }

        if out_len == 0 {
            return Err(Error::Data(
                "length adapter emitted an empty sequence".into(),
            ));
        }
        let h = stack_layers_node(g, store, stack, h, split..self.cfg.stack.n_layers)?;
        let out = linear_node(g, store, &format!("{}.out_proj", self.prefix), h)?;
        debug_assert_eq!(g.value(out).nrows(), out_len);
        Ok(ItemForward {
            features: out,
            out_len,
            ctc_logprobs,
            alpha: alpha_out,
        })
    }

    /// Batched value-level forward. Passing transcripts selects training
    /// behavior (CIF scales its weights to the transcript length).
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &FeatureSequence,
        transcripts: Option<&[Vec<usize>]>,
    ) -> Result<AdapterOutput> {
        if let Some(ts) = transcripts {
            if ts.len() != x.batch_size() {
                return Err(Error::Shape(format!(
                    "{} transcripts for batch of {}",
                    ts.len(),
                    x.batch_size()
                )));
            }
        }
        let mut items = Vec::with_capacity(x.batch_size());
        let mut out_lengths = Vec::with_capacity(x.batch_size());
        let mut all_logprobs = Vec::new();
        let mut all_alpha = Vec::new();
        let mut total_in = 0usize;
        let mut total_out = 0usize;
        for b in 0..x.batch_size() {
            let mut g = Graph::new();
            let mode = match transcripts {
                Some(ts) => ForwardMode::Train {
                    transcript: Some(&ts[b]),
                },
                None => ForwardMode::Infer,
            };
            let item = x.item_owned(b);
            let fwd = self.forward_item(&mut g, store, &item, x.frame_rate_hz(), mode)?;
            items.push(g.value(fwd.features).clone());
            out_lengths.push(fwd.out_len);
            total_in += x.lengths()[b];
            total_out += fwd.out_len;
            if let Some(lp) = fwd.ctc_logprobs {
                all_logprobs.push(g.value(lp).clone());
            }
            if let Some(a) = fwd.alpha {
                all_alpha.push(g.value(a).column(0).to_vec());
            }
        }
        let rate = x.frame_rate_hz() * total_out as f64 / total_in as f64;
        Ok(AdapterOutput {
            features: FeatureSequence::from_items(&items, rate)?,
            out_lengths,
            ctc_logprobs: (!all_logprobs.is_empty()).then_some(all_logprobs),
            alpha: (!all_alpha.is_empty()).then_some(all_alpha),
        })
    }
}

/// Serializes an adapter's identity and sizing into a checkpoint meta row.
pub fn adapter_meta_array(a: &Adapter) -> ndarray::Array2<f64> {
    let kind_code = AdapterKind::ALL
        .iter()
        .position(|k| *k == a.kind)
        .expect("known kind") as f64;
    ndarray::Array2::from_shape_vec(
        (1, 14),
        vec![
            kind_code,
            a.in_dim as f64,
            a.lm_dim as f64,
            a.cfg.stack.n_layers as f64,
            a.cfg.stack.hidden as f64,
            a.cfg.stack.intermediate as f64,
            a.cfg.stack.n_heads as f64,
            a.cfg.cif.beta,
            f64::from(a.cfg.cif.scale_to_target),
            a.cfg.wlq.window_seconds,
            a.cfg.wlq.n_queries as f64,
            a.cfg.wlq.n_layers as f64,
            a.cfg.ctc_alphabet as f64,
            a.cfg.conv_kernel as f64,
        ],
    )
    .expect("shape")
}

/// Rebuilds an adapter handle from its meta row; the parameters themselves
/// come from the checkpoint under `prefix`.
pub fn adapter_from_meta(meta: &ndarray::Array2<f64>, prefix: &str) -> Result<Adapter> {
    if meta.len() != 14 {
        return Err(Error::Data(format!(
            "adapter meta has {} fields, expected 14",
            meta.len()
        )));
    }
    let at = |i: usize| meta[[0, i]];
    let kind = *AdapterKind::ALL
        .get(at(0).round() as usize)
        .ok_or_else(|| Error::Data(format!("bad adapter kind code {}", at(0))))?;
    let cfg = AdapterConfig {
        stack: EncoderStackConfig::new(
            at(3).round() as usize,
            at(4).round() as usize,
            at(5).round() as usize,
            at(6).round() as usize,
        ),
        cif: CifConfig {
            beta: at(7),
            scale_to_target: at(8) != 0.0,
        },
        wlq: WlqConfig {
            window_seconds: at(9),
            n_queries: at(10).round() as usize,
            n_layers: at(11).round() as usize,
        },
        ctc_alphabet: at(12).round() as usize,
        conv_kernel: at(13).round() as usize,
    };
    let stack = (kind != AdapterKind::WlqFormer).then(|| EncoderStack {
        cfg: cfg.stack,
        prefix: format!("{prefix}.stack"),
    });
    Ok(Adapter {
        kind,
        in_dim: at(1).round() as usize,
        lm_dim: at(2).round() as usize,
        cfg,
        prefix: prefix.to_string(),
        stack,
    })
}

/// Compression accounting: `(in_len/out_len, in_rate*out_len/in_len)`.
pub fn compression_stats(in_len: usize, out_len: usize, in_rate_hz: f64) -> Result<(f64, f64)> {
    if out_len == 0 {
        return Err(Error::Data("compression stats with zero output length".into()));
    }
    let ratio = in_len as f64 / out_len as f64;
    let out_rate = in_rate_hz * out_len as f64 / in_len as f64;
    Ok((ratio, out_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> AdapterConfig {
        AdapterConfig {
            stack: EncoderStackConfig::new(4, 8, 16, 2),
            cif: CifConfig::default(),
            wlq: WlqConfig {
                window_seconds: 0.33,
                n_queries: 1,
                n_layers: 2,
            },
            ctc_alphabet: 5,
            conv_kernel: 3,
        }
    }

    fn build(kind: AdapterKind, seed: u64) -> (Adapter, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapter =
            build_adapter_with(kind, 5, 7, &tiny_cfg(), "adapter", &mut store, &mut rng).unwrap();
        (adapter, store)
    }

    fn random_batch(rng: &mut ChaCha8Rng, lens: &[usize], dim: usize, rate: f64) -> FeatureSequence {
        let items: Vec<Array2<f64>> = lens
            .iter()
            .map(|&l| Array2::from_shape_fn((l, dim), |_| rng.random_range(-1.0..1.0)))
            .collect();
        FeatureSequence::from_items(&items, rate).unwrap()
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in AdapterKind::ALL {
            assert_eq!(kind.name().parse::<AdapterKind>().unwrap(), kind);
        }
        assert_eq!("conv".parse::<AdapterKind>().unwrap(), AdapterKind::ConvBased);
        assert!("mystery".parse::<AdapterKind>().is_err());
    }

    #[test]
    fn modality_core_counts_are_identical_across_stack_kinds() {
        let mut counts = Vec::new();
        for kind in [
            AdapterKind::Base,
            AdapterKind::ConvBased,
            AdapterKind::CifBased,
            AdapterKind::CtcBased,
        ] {
            let (adapter, store) = build(kind, 1);
            counts.push(adapter.modality_core_params(&store));
        }
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(counts[0], tiny_cfg().stack.param_count());
    }

    #[test]
    fn wlq_has_no_separate_modality_core() {
        let (adapter, store) = build(AdapterKind::WlqFormer, 2);
        assert_eq!(adapter.modality_core_params(&store), 0);
        assert!(adapter.length_adapter_params(&store) > 0);
        assert_eq!(
            adapter.total_params(&store),
            adapter.length_adapter_params(&store)
        );
    }

    #[test]
    fn base_length_is_identity() {
        let (adapter, store) = build(AdapterKind::Base, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = random_batch(&mut rng, &[40, 7], 5, 50.0);
        let out = adapter.forward(&store, &x, None).unwrap();
        assert_eq!(out.out_lengths, vec![40, 7]);
        assert_eq!(out.features.dim(), 7);
    }

    #[test]
    fn conv_length_is_two_ceil_halvings() {
        let (adapter, store) = build(AdapterKind::ConvBased, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_batch(&mut rng, &[40, 5, 1], 5, 50.0);
        let out = adapter.forward(&store, &x, None).unwrap();
        assert_eq!(out.out_lengths, vec![10, 2, 1]);
    }

    #[test]
    fn wlq_length_follows_window_law() {
        let (adapter, store) = build(AdapterKind::WlqFormer, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        // 50 Hz -> W=16: T=33 -> 3 outputs; T=16 -> 1 output
        let x = random_batch(&mut rng, &[33, 16], 5, 50.0);
        let out = adapter.forward(&store, &x, None).unwrap();
        assert_eq!(out.out_lengths, vec![3, 1]);
        // 6.25 Hz -> W=2 -> 2:1
        let x = random_batch(&mut rng, &[8], 5, 6.25);
        let out = adapter.forward(&store, &x, None).unwrap();
        assert_eq!(out.out_lengths, vec![4]);
    }

    #[test]
    fn cif_training_length_equals_transcript_length() {
        let (adapter, store) = build(AdapterKind::CifBased, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = random_batch(&mut rng, &[12, 20], 5, 50.0);
        let transcripts = vec![vec![0usize, 1, 2], vec![3usize, 4]];
        let out = adapter.forward(&store, &x, Some(&transcripts)).unwrap();
        assert_eq!(out.out_lengths, vec![3, 2]);
        let alpha = out.alpha.unwrap();
        assert!(alpha
            .iter()
            .flatten()
            .all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn cif_training_without_transcripts_is_an_error() {
        let (adapter, store) = build(AdapterKind::CifBased, 7);
        let mut g = Graph::new();
        let x = Array2::zeros((6, 5));
        let err = adapter
            .forward_item(
                &mut g,
                &store,
                &x,
                50.0,
                ForwardMode::Train { transcript: None },
            )
            .unwrap_err();
        assert!(err.to_string().contains("transcripts required"));
    }

    #[test]
    fn ctc_kind_emits_normalized_logprobs_and_run_counts() {
        let (adapter, store) = build(AdapterKind::CtcBased, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = random_batch(&mut rng, &[15], 5, 50.0);
        let out = adapter.forward(&store, &x, None).unwrap();
        let lp = &out.ctc_logprobs.unwrap()[0];
        assert_eq!(lp.dim(), (15, 6));
        for row in lp.rows() {
            let p: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((p - 1.0).abs() < 1e-5);
        }
        let labels = argmax_labels(lp);
        assert_eq!(out.out_lengths[0], label_runs(&labels).len());
    }

    #[test]
    fn all_kinds_share_one_interface() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let transcripts = vec![vec![0usize, 1], vec![2usize, 3, 4]];
        for (i, kind) in AdapterKind::ALL.into_iter().enumerate() {
            let (adapter, store) = build(kind, 40 + i as u64);
            let x = random_batch(&mut rng, &[9, 14], 5, 50.0);
            // inference path
            let out = adapter.forward(&store, &x, None).unwrap();
            assert_eq!(out.features.dim(), 7);
            assert_eq!(out.out_lengths.len(), 2);
            for (b, &ol) in out.out_lengths.iter().enumerate() {
                assert!(ol >= 1);
                assert!(
                    ol <= x.lengths()[b],
                    "{kind}: out {ol} > in {}",
                    x.lengths()[b]
                );
            }
            // training path
            let out = adapter.forward(&store, &x, Some(&transcripts)).unwrap();
            assert_eq!(out.features.dim(), 7);
        }
    }

    #[test]
    fn output_length_laws_hold_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let kinds = [
            AdapterKind::Base,
            AdapterKind::ConvBased,
            AdapterKind::WlqFormer,
            AdapterKind::CifBased,
        ];
        for (i, kind) in kinds.into_iter().enumerate() {
            let (adapter, store) = build(kind, 90 + i as u64);
            for _ in 0..25 {
                let t = rng.random_range(1..60);
                let rate = if rng.random_bool(0.5) { 50.0 } else { 6.25 };
                let x = random_batch(&mut rng, &[t], 5, rate);
                let target = rng.random_range(1..=t);
                let transcripts = vec![(0..target).map(|k| k % 5).collect::<Vec<_>>()];
                let out = adapter.forward(&store, &x, Some(&transcripts)).unwrap();
                let expect = match kind {
                    AdapterKind::Base => t,
                    AdapterKind::ConvBased => t.div_ceil(2).div_ceil(2),
                    AdapterKind::WlqFormer => {
                        wlq_out_len(t, window_length(rate, 0.33), 1)
                    }
                    AdapterKind::CifBased => target,
                    AdapterKind::CtcBased => unreachable!(),
                };
                assert_eq!(out.out_lengths[0], expect, "{kind} T={t}");
            }
        }
    }

    #[test]
    fn compression_stats_examples() {
        let (ratio, rate) = compression_stats(3, 1, 6.25).unwrap();
        assert_eq!(ratio, 3.0);
        assert!((rate - 2.08).abs() < 0.01);

        let (ratio, rate) = compression_stats(25, 1, 50.0).unwrap();
        assert_eq!(ratio, 25.0);
        assert!((rate - 2.00).abs() < 1e-12);

        let (ratio, rate) = compression_stats(17, 17, 6.25).unwrap();
        assert_eq!(ratio, 1.0);
        assert_eq!(rate, 6.25);

        assert!(compression_stats(10, 0, 50.0).is_err());
    }

    #[test]
    fn adapter_gradients_match_central_differences() {
        // adapter-level losses (readout + aux terms); the end-to-end training
        // loss is checked in the acceptance suite
        let mut rng_outer = ChaCha8Rng::seed_from_u64(55);
        for kind in AdapterKind::ALL {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(56);
            let cfg = AdapterConfig {
                stack: EncoderStackConfig::new(2, 6, 8, 2),
                cif: CifConfig::default(),
                wlq: WlqConfig {
                    window_seconds: 0.33,
                    n_queries: 1,
                    n_layers: 1,
                },
                ctc_alphabet: 3,
                conv_kernel: 3,
            };
            let adapter =
                build_adapter_with(kind, 4, 5, &cfg, "adapter", &mut store, &mut rng).unwrap();
            let item = Array2::from_shape_fn((7, 4), |_| rng_outer.random_range(-1.0..1.0));
            let transcript = vec![1usize, 0, 2];
            let out_rows = {
                let mut g = Graph::new();
                adapter
                    .forward_item(
                        &mut g,
                        &store,
                        &item,
                        50.0,
                        ForwardMode::Train {
                            transcript: Some(&transcript),
                        },
                    )
                    .map(|f| f.out_len)
                    .unwrap()
            };
            let readout = Array2::from_shape_fn((out_rows, 5), |(i, j)| {
                ((i * 3 + j) as f64 * 0.61).sin()
            });
            let report = crate::numkernel::gradcheck::grad_check(
                |g, s| {
                    let fwd = adapter.forward_item(
                        g,
                        s,
                        &item,
                        50.0,
                        ForwardMode::Train {
                            transcript: Some(&transcript),
                        },
                    )?;
                    let w = g.constant(readout.clone());
                    let p = g.mul(fwd.features, w);
                    let mut loss = g.sum_all(p);
                    if let Some(lp) = fwd.ctc_logprobs {
                        let ctc = crate::losses::ctc_loss_node(g, lp, &transcript)?;
                        let scaled = g.scale(ctc, 0.1);
                        loss = g.add(loss, scaled);
                    }
                    if let Some(alpha) = fwd.alpha {
                        let q = crate::losses::quantity_loss_node(g, alpha, transcript.len());
                        let scaled = g.scale(q, 0.1);
                        loss = g.add(loss, scaled);
                    }
                    Ok(loss)
                },
                &mut store,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{kind}: err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }
}

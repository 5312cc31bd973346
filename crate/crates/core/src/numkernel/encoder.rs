//! Transformer encoder stack and the shared layer primitives (linear,
//! layer-norm, multi-head attention, strided 1-D convolution).

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, PaddingMask};
use crate::numkernel::graph::{Graph, NodeId, SoftmaxMask};
use crate::numkernel::store::ParamStore;
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Stack hyperparameters. Defaults follow the BERT-base block: 4 layers,
/// hidden 768, intermediate 3072, 12 attention heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderStackConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub n_heads: usize,
}

impl Default for EncoderStackConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden: 768,
            intermediate: 3072,
            n_heads: 12,
        }
    }
}

impl EncoderStackConfig {
    pub fn new(n_layers: usize, hidden: usize, intermediate: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            hidden,
            intermediate,
            n_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.hidden < 1 || self.intermediate < 1 || self.n_heads < 1 {
            return Err(Error::Config("all stack dimensions must be >= 1".into()));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count:
    /// `n_layers * (4(h^2+h) + (h*i+i) + (i*h+h) + 4h)`.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let i = self.intermediate;
        self.n_layers * (4 * (h * h + h) + (h * i + i) + (i * h + h) + 4 * h)
    }
}

/// Handle to a registered stack; parameters live in the store under
/// `{prefix}.layer{j}.*`.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub cfg: EncoderStackConfig,
    pub prefix: String,
}

/// Registers a pre-norm bidirectional encoder stack. The prefix must be
/// unused in the store.
pub fn build_encoder_stack<R: Rng>(
    cfg: &EncoderStackConfig,
    store: &mut ParamStore,
    name_prefix: &str,
    rng: &mut R,
) -> Result<EncoderStack> {
    cfg.validate()?;
    if store.names().any(|n| n.starts_with(name_prefix)) {
        return Err(Error::DuplicateParam(format!(
            "prefix `{name_prefix}` already in use"
        )));
    }
    for j in 0..cfg.n_layers {
        let lp = format!("{name_prefix}.layer{j}");
        for proj in ["q", "k", "v", "o"] {
            register_linear(
                store,
                &format!("{lp}.attn.{proj}"),
                cfg.hidden,
                cfg.hidden,
                rng,
            )?;
        }
        register_linear(store, &format!("{lp}.ff.in"), cfg.hidden, cfg.intermediate, rng)?;
        register_linear(store, &format!("{lp}.ff.out"), cfg.intermediate, cfg.hidden, rng)?;
        register_layer_norm(store, &format!("{lp}.ln1"), cfg.hidden)?;
        register_layer_norm(store, &format!("{lp}.ln2"), cfg.hidden)?;
    }
    Ok(EncoderStack {
        cfg: *cfg,
        prefix: name_prefix.to_string(),
    })
}

/// Registers `{prefix}.weight` (in x out, truncated normal) and
/// `{prefix}.bias` (1 x out, zeros).
pub fn register_linear<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<()> {
    store.register_trunc_normal(&format!("{prefix}.weight"), (in_dim, out_dim), INIT_STD, rng)?;
    store.register_zeros(&format!("{prefix}.bias"), (1, out_dim))?;
    Ok(())
}

/// Registers `{prefix}.gain` (ones) and `{prefix}.bias` (zeros), both 1 x dim.
pub fn register_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.register_ones(&format!("{prefix}.gain"), (1, dim))?;
    store.register_zeros(&format!("{prefix}.bias"), (1, dim))?;
    Ok(())
}

/// `x @ W + b` for a registered linear layer.
pub fn linear_node(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let xw = g.matmul(x, w);
    Ok(g.add_row(xw, b))
}

pub fn layer_norm_node(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gain, bias, LN_EPS))
}

/// Multi-head attention. Queries come from `q_in`, keys and values from
/// `kv_in`; `mask` controls which key positions each query may see.
pub fn attention_node(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    n_heads: usize,
    mask: SoftmaxMask,
) -> Result<NodeId> {
    let hidden = g.value(q_in).ncols();
    debug_assert_eq!(hidden % n_heads, 0);
    let head_dim = hidden / n_heads;
    let q = linear_node(g, store, &format!("{prefix}.q"), q_in)?;
    let k = linear_node(g, store, &format!("{prefix}.k"), kv_in)?;
    let v = linear_node(g, store, &format!("{prefix}.v"), kv_in)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores, mask.clone());
        heads.push(g.matmul(probs, vh));
    }
    let ctx = g.concat_cols(&heads);
    linear_node(g, store, &format!("{prefix}.o"), ctx)
}

/// One pre-norm encoder layer: `x + attn(ln1(x))`, then `y + ff(ln2(y))`.
pub fn encoder_layer_node(
    g: &mut Graph,
    store: &ParamStore,
    stack: &EncoderStack,
    layer: usize,
    x: NodeId,
) -> Result<NodeId> {
    let lp = format!("{}.layer{layer}", stack.prefix);
    let normed = layer_norm_node(g, store, &format!("{lp}.ln1"), x)?;
    let attn = attention_node(
        g,
        store,
        &format!("{lp}.attn"),
        normed,
        normed,
        stack.cfg.n_heads,
        SoftmaxMask::Full,
    )?;
    let x1 = g.add(x, attn);
    let normed2 = layer_norm_node(g, store, &format!("{lp}.ln2"), x1)?;
    let mid = linear_node(g, store, &format!("{lp}.ff.in"), normed2)?;
    let act = g.gelu(mid);
    let ff = linear_node(g, store, &format!("{lp}.ff.out"), act)?;
    Ok(g.add(x1, ff))
}

/// Runs layers `range` of the stack over a single item (T x hidden).
pub fn stack_layers_node(
    g: &mut Graph,
    store: &ParamStore,
    stack: &EncoderStack,
    x: NodeId,
    range: std::ops::Range<usize>,
) -> Result<NodeId> {
    let mut cur = x;
    for j in range {
        cur = encoder_layer_node(g, store, stack, j, cur)?;
    }
    Ok(cur)
}

/// Whole-stack forward over a padded batch. Output lengths equal input
/// lengths, and padded positions never influence valid positions (each item
/// is processed over its valid frames only).
pub fn encoder_forward(
    stack: &EncoderStack,
    store: &ParamStore,
    x: &FeatureSequence,
    mask: &PaddingMask,
) -> Result<FeatureSequence> {
    mask.check(x)?;
    if x.dim() != stack.cfg.hidden {
        return Err(Error::Shape(format!(
            "input dim {} does not match stack hidden {}",
            x.dim(),
            stack.cfg.hidden
        )));
    }
    let mut items = Vec::with_capacity(x.batch_size());
    for b in 0..x.batch_size() {
        let mut g = Graph::new();
        let input = g.constant(x.item_owned(b));
        let out = stack_layers_node(&mut g, store, stack, input, 0..stack.cfg.n_layers)?;
        items.push(g.value(out).clone());
    }
    FeatureSequence::from_items(&items, x.frame_rate_hz())
}

/// Registers a strided same-padding 1-D convolution:
/// `{prefix}.weight` ((kernel*c_in) x c_out) and `{prefix}.bias`.
pub fn register_conv1d<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<()> {
    store.register_trunc_normal(
        &format!("{prefix}.weight"),
        (kernel * c_in, c_out),
        INIT_STD,
        rng,
    )?;
    store.register_zeros(&format!("{prefix}.bias"), (1, c_out))?;
    Ok(())
}

/// Graph-level strided convolution over one item (T x c_in). Same-style
/// padding; output length is `ceil(T/stride)`.
pub fn conv1d_node(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    stride: usize,
    kernel: usize,
) -> Result<NodeId> {
    if g.value(x).nrows() == 0 {
        return Err(Error::Data("conv1d on empty sequence".into()));
    }
    let pad = (kernel - 1) / 2;
    let cols = g.im2col(x, stride, kernel, pad);
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(cols, w);
    Ok(g.add_row(y, b))
}

/// Batched value-level convolution. Per-item output length is
/// `ceil(len/stride)`; the nominal output rate divides by the stride.
pub fn conv1d_forward(
    store: &ParamStore,
    prefix: &str,
    x: &FeatureSequence,
    stride: usize,
    kernel: usize,
) -> Result<FeatureSequence> {
    if stride < 1 || kernel < 1 {
        return Err(Error::Config("stride and kernel must be >= 1".into()));
    }
    if x.lengths().iter().any(|&l| l == 0) {
        return Err(Error::Data("conv1d on empty sequence".into()));
    }
    let mut items = Vec::with_capacity(x.batch_size());
    for b in 0..x.batch_size() {
        let mut g = Graph::new();
        let input = g.constant(x.item_owned(b));
        let out = conv1d_node(&mut g, store, prefix, input, stride, kernel)?;
        items.push(g.value(out).clone());
    }
    FeatureSequence::from_items(&items, x.frame_rate_hz() / stride as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderStackConfig {
        EncoderStackConfig::new(1, 8, 16, 2)
    }

    #[test]
    fn param_count_matches_closed_form() {
        // 4*(8*8+8) + (8*16+16) + (16*8+8) + 4*8 per layer
        assert_eq!(tiny_cfg().param_count(), 4 * 72 + 144 + 136 + 32);
        assert_eq!(EncoderStackConfig::default().param_count(), 28_351_488);
        assert_eq!(
            EncoderStackConfig::new(2, 768, 3072, 12).param_count(),
            14_175_744
        );
    }

    #[test]
    fn registered_count_equals_closed_form() {
        for cfg in [
            tiny_cfg(),
            EncoderStackConfig::new(2, 12, 24, 3),
            EncoderStackConfig::new(3, 20, 8, 4),
        ] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            build_encoder_stack(&cfg, &mut store, "enc", &mut rng).unwrap();
            assert_eq!(store.count_params("enc", true), cfg.param_count());
        }
    }

    #[test]
    fn duplicate_prefix_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_encoder_stack(&tiny_cfg(), &mut store, "enc", &mut rng).unwrap();
        assert!(build_encoder_stack(&tiny_cfg(), &mut store, "enc", &mut rng).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(EncoderStackConfig::new(1, 10, 16, 3).validate().is_err());
        assert!(EncoderStackConfig::new(0, 8, 16, 2).validate().is_err());
    }

    #[test]
    fn forward_preserves_lengths() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = build_encoder_stack(&cfg, &mut store, "enc", &mut rng).unwrap();
        let items = [
            Array2::from_shape_fn((7, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin()),
            Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64 * 0.11).cos()),
        ];
        let x = FeatureSequence::from_items(&items, 50.0).unwrap();
        let y = encoder_forward(&stack, &store, &x, &PaddingMask::of(&x)).unwrap();
        assert_eq!(y.lengths(), &[7, 3]);
        assert_eq!(y.dim(), 8);
    }

    #[test]
    fn padding_length_does_not_change_valid_outputs() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = build_encoder_stack(&cfg, &mut store, "enc", &mut rng).unwrap();
        let item = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.21).sin());

        let pad10 = {
            let mut data = ndarray::Array3::zeros((1, 10, 8));
            data.slice_mut(ndarray::s![0, ..5, ..]).assign(&item);
            FeatureSequence::new(data, vec![5], 50.0).unwrap()
        };
        let pad20 = {
            let mut data = ndarray::Array3::zeros((1, 20, 8));
            data.slice_mut(ndarray::s![0, ..5, ..]).assign(&item);
            FeatureSequence::new(data, vec![5], 50.0).unwrap()
        };
        let y10 = encoder_forward(&stack, &store, &pad10, &PaddingMask::of(&pad10)).unwrap();
        let y20 = encoder_forward(&stack, &store, &pad20, &PaddingMask::of(&pad20)).unwrap();
        let a = y10.item(0);
        let b = y20.item(0);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn dim_mismatch_is_a_shape_error() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = build_encoder_stack(&cfg, &mut store, "enc", &mut rng).unwrap();
        let x = FeatureSequence::from_items(&[Array2::zeros((4, 6))], 50.0).unwrap();
        assert!(matches!(
            encoder_forward(&stack, &store, &x, &PaddingMask::of(&x)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_output_lengths_follow_ceil_division() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        register_conv1d(&mut store, "conv", 4, 4, 3, &mut rng).unwrap();

        let case = |len: usize| {
            let x =
                FeatureSequence::from_items(&[Array2::from_elem((len, 4), 0.5)], 50.0).unwrap();
            conv1d_forward(&store, "conv", &x, 2, 3).unwrap().lengths()[0]
        };
        assert_eq!(case(100), 50);
        assert_eq!(case(5), 3);

        // two stride-2 convolutions give a 4:1 ratio
        let x = FeatureSequence::from_items(&[Array2::from_elem((100, 4), 0.5)], 50.0).unwrap();
        let once = conv1d_forward(&store, "conv", &x, 2, 3).unwrap();
        let twice = conv1d_forward(&store, "conv", &once, 2, 3).unwrap();
        assert_eq!(twice.lengths()[0], 25);
    }

    #[test]
    fn encoder_gradients_match_central_differences() {
        // one item of shape (1, 5, 8) through the stack, eps 1e-4
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stack = build_encoder_stack(&cfg, &mut store, "enc", &mut rng).unwrap();
        let item = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.53).sin());
        let readout = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 3 + j * 7) as f64 * 0.29).cos());
        let report = crate::numkernel::gradcheck::grad_check(
            |g, s| {
                let x = g.constant(item.clone());
                let y = stack_layers_node(g, s, &stack, x, 0..1)?;
                let w = g.constant(readout.clone());
                let p = g.mul(y, w);
                Ok(g.sum_all(p))
            },
            &mut store,
            1e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn conv_gradients_match_central_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        register_conv1d(&mut store, "conv", 3, 4, 3, &mut rng).unwrap();
        let item = Array2::from_shape_fn((7, 3), |(i, j)| ((i * 3 + j) as f64 * 0.77).sin());
        let report = crate::numkernel::gradcheck::grad_check(
            |g, s| {
                let x = g.constant(item.clone());
                let y = conv1d_node(g, s, "conv", x, 2, 3)?;
                let w = g.constant(Array2::from_shape_fn((4, 4), |(i, j)| {
                    ((i + 5 * j) as f64 * 0.13).cos()
                }));
                let p = g.mul(y, w);
                Ok(g.sum_all(p))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn conv_rejects_empty_sequences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        register_conv1d(&mut store, "conv", 4, 4, 3, &mut rng).unwrap();
        let x = FeatureSequence::new(ndarray::Array3::zeros((1, 3, 4)), vec![0], 50.0).unwrap();
        assert!(conv1d_forward(&store, "conv", &x, 2, 3).is_err());
    }
}

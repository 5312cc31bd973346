//! Window-level query former: fixed windows of encoded frames, each
//! summarized by learnable query vectors through cross-attention.

use crate::error::{Error, Result};
use crate::numkernel::encoder::{
    attention_node, layer_norm_node, linear_node, register_layer_norm, register_linear, INIT_STD,
};
use crate::numkernel::graph::{Graph, NodeId, SoftmaxMask};
use crate::numkernel::store::ParamStore;
use rand::Rng;

/// Window former configuration: windows of `window_seconds`, each reduced to
/// `n_queries` vectors by `n_layers` query-transformer layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WlqConfig {
    pub window_seconds: f64,
    pub n_queries: usize,
    pub n_layers: usize,
}

impl Default for WlqConfig {
    fn default() -> Self {
        Self {
            window_seconds: 0.33,
            n_queries: 1,
            n_layers: 2,
        }
    }
}

impl WlqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_seconds <= 0.0 {
            return Err(Error::Config(format!(
                "window_seconds must be positive, got {}",
                self.window_seconds
            )));
        }
        if self.n_queries < 1 || self.n_layers < 1 {
            return Err(Error::Config(
                "n_queries and n_layers must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Frames per window at a given rate: `max(1, floor(rate * window_seconds))`.
pub fn window_length(frame_rate_hz: f64, window_seconds: f64) -> usize {
    ((frame_rate_hz * window_seconds).floor() as usize).max(1)
}

/// Output length law: `ceil(T / W) * n_queries`.
pub fn wlq_out_len(t: usize, window: usize, n_queries: usize) -> usize {
    t.div_ceil(window) * n_queries
}

/// Registers the window-former parameters under `prefix`: input projection,
/// learnable queries, `n_layers` of (self-attention, cross-attention,
/// feed-forward) with pre-norms, and the output projection.
pub fn register_wlq<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    intermediate: usize,
    cfg: &WlqConfig,
    lm_dim: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    register_linear(store, &format!("{prefix}.in_proj"), in_dim, hidden, rng)?;
    store.register_trunc_normal(
        &format!("{prefix}.queries"),
        (cfg.n_queries, hidden),
        INIT_STD,
        rng,
    )?;
    for l in 0..cfg.n_layers {
        let lp = format!("{prefix}.layer{l}");
        for proj in ["q", "k", "v", "o"] {
            register_linear(store, &format!("{lp}.self_attn.{proj}"), hidden, hidden, rng)?;
            register_linear(store, &format!("{lp}.cross_attn.{proj}"), hidden, hidden, rng)?;
        }
        register_linear(store, &format!("{lp}.ff.in"), hidden, intermediate, rng)?;
        register_linear(store, &format!("{lp}.ff.out"), intermediate, hidden, rng)?;
        register_layer_norm(store, &format!("{lp}.ln1"), hidden)?;
        register_layer_norm(store, &format!("{lp}.ln2"), hidden)?;
        register_layer_norm(store, &format!("{lp}.ln3"), hidden)?;
    }
    register_linear(store, &format!("{prefix}.out_proj"), hidden, lm_dim, rng)?;
    Ok(())
}

/// Forward over one item (T x in_dim): non-overlapping windows (the last may
/// be short), queries cross-attend to each window, outputs concatenate per
/// window in order. Returns the output node (ceil(T/W)*n_queries x lm_dim).
#[allow(clippy::too_many_arguments)]
pub fn wlq_forward_node(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &WlqConfig,
    n_heads: usize,
    x: NodeId,
    frame_rate_hz: f64,
) -> Result<NodeId> {
    let t = g.value(x).nrows();
    if t == 0 {
        return Err(Error::Data("window former on empty sequence".into()));
    }
    let w = window_length(frame_rate_hz, cfg.window_seconds);
    let projected = linear_node(g, store, &format!("{prefix}.in_proj"), x)?;
    let queries = g.param(store, &format!("{prefix}.queries"))?;
    let mut outputs = Vec::new();
    let mut start = 0;
    while start < t {
        let len = w.min(t - start);
        let window = g.slice_rows(projected, start, len);
        let mut q = queries;
        for l in 0..cfg.n_layers {
            let lp = format!("{prefix}.layer{l}");
            let qn = layer_norm_node(g, store, &format!("{lp}.ln1"), q)?;
            let sa = attention_node(
                g,
                store,
                &format!("{lp}.self_attn"),
                qn,
                qn,
                n_heads,
                SoftmaxMask::Full,
            )?;
            q = g.add(q, sa);
            let qn2 = layer_norm_node(g, store, &format!("{lp}.ln2"), q)?;
            let ca = attention_node(
                g,
                store,
                &format!("{lp}.cross_attn"),
                qn2,
                window,
                n_heads,
                SoftmaxMask::Full,
            )?;
            q = g.add(q, ca);
            let qn3 = layer_norm_node(g, store, &format!("{lp}.ln3"), q)?;
            let mid = linear_node(g, store, &format!("{lp}.ff.in"), qn3)?;
            let act = g.gelu(mid);
            let ff = linear_node(g, store, &format!("{lp}.ff.out"), act)?;
            q = g.add(q, ff);
        }
        outputs.push(q);
        start += len;
    }
    let stacked = g.concat_rows(&outputs);
    linear_node(g, store, &format!("{prefix}.out_proj"), stacked)
}

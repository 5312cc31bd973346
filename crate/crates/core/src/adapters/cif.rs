//! Continuous integrate-and-fire length adaptation.
//!
//! Per-frame weights accumulate left to right; each time the accumulator
//! crosses the firing threshold the weighted sum of the frames since the last
//! firing is emitted, with the boundary frame's weight split so every fired
//! group's weights sum exactly to the threshold.
//!
//! Internally the accumulator is phrased through prefix sums: frame `t` owns
//! the mass interval `[A_{t-1}, A_t)` and group `j` owns `[j*beta, (j+1)*beta)`;
//! a frame's weight in a group is the overlap length. The overlap is
//! piecewise-linear in the prefix sums, which yields the analytic gradient.

use crate::error::{Error, Result};
use crate::numkernel::graph::{Graph, NodeId};
use ndarray::Array2;

/// CIF configuration. `beta` is the integration threshold; with
/// `scale_to_target` the weights are rescaled at training time so the number
/// of firings equals the transcript length exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CifConfig {
    pub beta: f64,
    pub scale_to_target: bool,
}

impl Default for CifConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            scale_to_target: true,
        }
    }
}

impl CifConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// How the number of fired groups is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FireRule {
    /// `floor(sum(alpha)/beta)` groups; the trailing residual is discarded.
    Threshold,
    /// Exactly this many groups; the trailing residual folds into the last.
    Exact(usize),
}

/// The weight assignment of frames to fired groups.
#[derive(Debug, Clone)]
pub struct FirePlan {
    /// Per group: (frame index, weight) pairs with strictly positive weight.
    pub groups: Vec<Vec<(usize, f64)>>,
    /// Prefix sums of the (scaled) weights.
    pub prefix: Vec<f64>,
    pub beta: f64,
    pub rule: FireRule,
}

impl FirePlan {
    /// Upper mass boundary of group `j` (0-based).
    fn hi(&self, j: usize) -> f64 {
        match self.rule {
            FireRule::Exact(n) if j + 1 == n => f64::INFINITY,
            _ => (j + 1) as f64 * self.beta,
        }
    }

    pub fn group_weight_sums(&self) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&(_, w)| w).sum())
            .collect()
    }
}

/// Assigns frames to fired groups for the given (already scaled) weights.
pub fn fire_plan(alpha: &[f64], beta: f64, rule: FireRule) -> FirePlan {
    let mut prefix = Vec::with_capacity(alpha.len());
    let mut acc = 0.0;
    for &a in alpha {
        acc += a;
        prefix.push(acc);
    }
    let mass = acc;
    let n_groups = match rule {
        FireRule::Threshold => (mass / beta).floor() as usize,
        FireRule::Exact(n) => n,
    };
    let mut groups = Vec::with_capacity(n_groups);
    let mut t_start = 0usize;
    for j in 0..n_groups {
        let lo = j as f64 * beta;
        let hi = match rule {
            FireRule::Exact(n) if j + 1 == n => f64::INFINITY,
            _ => (j + 1) as f64 * beta,
        };
        let mut group = Vec::new();
        let mut t = t_start;
        while t < alpha.len() {
            let a_prev = if t == 0 { 0.0 } else { prefix[t - 1] };
            if a_prev >= hi {
                break;
            }
            let w = prefix[t].min(hi) - a_prev.max(lo);
            if w > 0.0 {
                group.push((t, w));
            }
            // once this frame's interval ends inside the group, the next
            // group cannot start before it
            if prefix[t] < hi {
                t_start = t + 1;
            } else {
                t_start = t;
            }
            t += 1;
        }
        groups.push(group);
    }
    FirePlan {
        groups,
        prefix,
        beta,
        rule,
    }
}

/// Per-frame firing weights over a batch: `logistic(linear(h_t))` for every
/// valid frame, zero in the padding. The head is a registered linear layer
/// (`{head_prefix}.weight`, `{head_prefix}.bias`) mapping hidden -> 1.
pub fn cif_weights(
    store: &crate::numkernel::store::ParamStore,
    head_prefix: &str,
    h: &crate::features::FeatureSequence,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((h.batch_size(), h.time()));
    for b in 0..h.batch_size() {
        let mut g = Graph::new();
        let x = g.constant(h.item_owned(b));
        let logit = crate::numkernel::encoder::linear_node(&mut g, store, head_prefix, x)?;
        let alpha = g.sigmoid(logit);
        for (t, v) in g.value(alpha).column(0).iter().enumerate() {
            out[[b, t]] = *v;
        }
    }
    Ok(out)
}

/// Value-level integrate-and-fire over one item. Returns the fired vectors
/// (fire_count x dim) and the fire count. `target_len` is required (and the
/// weight sum must be positive) when `cfg.scale_to_target` asks for scaling.
pub fn cif_integrate_fire(
    h: &Array2<f64>,
    alpha: &[f64],
    cfg: &CifConfig,
    target_len: Option<usize>,
) -> Result<(Array2<f64>, usize)> {
    cfg.validate()?;
    if h.nrows() != alpha.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} weights",
            h.nrows(),
            alpha.len()
        )));
    }
    let (alpha_scaled, rule): (Vec<f64>, FireRule) = match target_len {
        Some(n) => {
            let sum: f64 = alpha.iter().sum();
            if sum <= 0.0 {
                return Err(Error::Data(
                    "cannot scale CIF weights: weight sum is zero".into(),
                ));
            }
            if n == 0 {
                return Err(Error::Data("target length must be at least 1".into()));
            }
            let s = n as f64 * cfg.beta / sum;
            (alpha.iter().map(|&a| a * s).collect(), FireRule::Exact(n))
        }
        None => (alpha.to_vec(), FireRule::Threshold),
    };
    let plan = fire_plan(&alpha_scaled, cfg.beta, rule);
    let mut fired = Array2::zeros((plan.groups.len(), h.ncols()));
    for (j, group) in plan.groups.iter().enumerate() {
        for &(t, w) in group {
            fired.row_mut(j).scaled_add(w, &h.row(t));
        }
    }
    let count = plan.groups.len();
    Ok((fired, count))
}

/// Graph-level firing. `alpha` is a Tx1 column of already-scaled weights;
/// gradients flow into both the frames and the weights (decision points are
/// constants; the weight of each frame in each group is differentiable).
pub fn cif_fire_node(
    g: &mut Graph,
    h: NodeId,
    alpha: NodeId,
    beta: f64,
    rule: FireRule,
) -> Result<(NodeId, usize)> {
    let hv = g.value_arc(h);
    let av = g.value(alpha);
    if av.ncols() != 1 || av.nrows() != hv.nrows() {
        return Err(Error::Shape(format!(
            "alpha shape {:?} does not match {} frames",
            av.dim(),
            hv.nrows()
        )));
    }
    let alpha_vals: Vec<f64> = av.column(0).to_vec();
    let plan = fire_plan(&alpha_vals, beta, rule);
    let t_len = alpha_vals.len();
    let d = hv.ncols();
    let n_groups = plan.groups.len();
    let mut fired = Array2::zeros((n_groups, d));
    for (j, group) in plan.groups.iter().enumerate() {
        for &(t, w) in group {
            fired.row_mut(j).scaled_add(w, &hv.row(t));
        }
    }
    let needs = g.needs_grad(h) || g.needs_grad(alpha);
    let (hn, an) = (g.needs_grad(h), g.needs_grad(alpha));
    let (h_idx, a_idx) = (h.0, alpha.0);
    let node = g.push_op(
        fired,
        needs,
        Box::new(move |gout, grads| {
            if hn {
                for (j, group) in plan.groups.iter().enumerate() {
                    for &(t, w) in group {
                        let mut dst = grads[h_idx].row_mut(t);
                        dst.scaled_add(w, &gout.row(j));
                    }
                }
            }
            if an {
                // d(loss)/d(prefix sum A_t), then suffix-sum into the weights
                let mut d_prefix = vec![0.0; t_len];
                for (j, group) in plan.groups.iter().enumerate() {
                    let lo = j as f64 * plan.beta;
                    let hi = plan.hi(j);
                    for &(t, _w) in group {
                        let dw: f64 = gout
                            .row(j)
                            .iter()
                            .zip(hv.row(t).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        let a_t = plan.prefix[t];
                        let a_prev = if t == 0 { 0.0 } else { plan.prefix[t - 1] };
                        if a_t < hi {
                            d_prefix[t] += dw;
                        }
                        if t >= 1 && a_prev > lo {
                            d_prefix[t - 1] -= dw;
                        }
                    }
                }
                let mut acc = 0.0;
                for t in (0..t_len).rev() {
                    acc += d_prefix[t];
                    grads[a_idx][[t, 0]] += acc;
                }
            }
        }),
    );
    Ok((node, n_groups))
}

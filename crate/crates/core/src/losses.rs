//! Training objectives: CTC forward-backward loss, CIF quantity loss, LM
//! cross-entropy, and their weighted composite.

use crate::error::{Error, Result};
use crate::numkernel::graph::{Graph, NodeId};
use ndarray::Array2;

/// Per-batch loss components. `total` is `ce + aux_weight*(ctc + quantity)`
/// with absent components contributing zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ctc: Option<f64>,
    pub quantity: Option<f64>,
    pub total: f64,
    pub aux_weight: f64,
}

/// Combines components into a [`LossBreakdown`].
pub fn composite_loss(
    ce: f64,
    ctc: Option<f64>,
    quantity: Option<f64>,
    aux_weight: f64,
) -> Result<LossBreakdown> {
    if aux_weight < 0.0 {
        return Err(Error::Config(format!(
            "negative auxiliary weight {aux_weight}"
        )));
    }
    for (name, v) in [("ce", Some(ce)), ("ctc", ctc), ("quantity", quantity)] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss component")));
            }
        }
    }
    let total = ce + aux_weight * ctc.unwrap_or(0.0) + aux_weight * quantity.unwrap_or(0.0);
    Ok(LossBreakdown {
        ce,
        ctc,
        quantity,
        total,
        aux_weight,
    })
}

// ---------------------------------------------------------------------------
// CTC forward-backward
// ---------------------------------------------------------------------------

const NEG_INF: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Blank-interleaved extended target: `[b, t1, b, t2, ..., tL, b]`.
fn extend_target(target: &[usize], blank: usize) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * target.len() + 1);
    z.push(blank);
    for &t in target {
        z.push(t);
        z.push(blank);
    }
    z
}

/// Minimum number of frames admitting any alignment of `target`.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Negative log probability of all blank-augmented alignments collapsing to
/// `target`, with the analytic gradient w.r.t. the per-frame log-scores.
///
/// `logprobs` is T x (alphabet+1) with the blank in the last column. The
/// scores need not be normalized; the forward-backward recursion runs
/// entirely in log space.
pub fn ctc_loss_with_grad(
    logprobs: &Array2<f64>,
    target: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (t_len, width) = logprobs.dim();
    if width < 2 {
        return Err(Error::Shape(
            "ctc needs at least one symbol plus blank".into(),
        ));
    }
    let blank = width - 1;
    if let Some(&bad) = target.iter().find(|&&s| s >= blank) {
        return Err(Error::Data(format!(
            "target symbol {bad} outside alphabet of size {blank}"
        )));
    }
    if t_len < ctc_min_frames(target) {
        return Err(Error::InfiniteLoss(format!(
            "target needs at least {} frames, got {}",
            ctc_min_frames(target),
            t_len
        )));
    }

    let z = extend_target(target, blank);
    let s_len = z.len();
    let lp = |t: usize, k: usize| logprobs[[t, k]];

    // forward variables (emission at t included)
    let mut alpha = Array2::from_elem((t_len, s_len), NEG_INF);
    alpha[[0, 0]] = lp(0, z[0]);
    if s_len > 1 {
        alpha[[0, 1]] = lp(0, z[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if s >= 2 && z[s] != blank && z[s] != z[s - 2] {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            if acc != NEG_INF {
                alpha[[t, s]] = acc + lp(t, z[s]);
            }
        }
    }
    let log_p = if s_len > 1 {
        log_add(alpha[[t_len - 1, s_len - 1]], alpha[[t_len - 1, s_len - 2]])
    } else {
        alpha[[t_len - 1, 0]]
    };
    if log_p == NEG_INF {
        return Err(Error::InfiniteLoss(
            "no alignment has positive probability".into(),
        ));
    }

    // backward variables (emission at t included)
    let mut beta = Array2::from_elem((t_len, s_len), NEG_INF);
    beta[[t_len - 1, s_len - 1]] = lp(t_len - 1, z[s_len - 1]);
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = lp(t_len - 1, z[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && z[s + 2] != blank && z[s + 2] != z[s] {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            if acc != NEG_INF {
                beta[[t, s]] = acc + lp(t, z[s]);
            }
        }
    }

    // dL/dlogprobs[t,k] = -exp(LSE_{s: z_s=k}(alpha+beta) - logP - lp[t,k])
    let mut grad = Array2::zeros((t_len, width));
    for t in 0..t_len {
        let mut per_symbol = vec![NEG_INF; width];
        for s in 0..s_len {
            let ab = if alpha[[t, s]] == NEG_INF || beta[[t, s]] == NEG_INF {
                NEG_INF
            } else {
                alpha[[t, s]] + beta[[t, s]]
            };
            per_symbol[z[s]] = log_add(per_symbol[z[s]], ab);
        }
        for k in 0..width {
            if per_symbol[k] != NEG_INF && lp(t, k) != NEG_INF {
                grad[[t, k]] = -(per_symbol[k] - log_p - lp(t, k)).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Loss value only (blank is the last column).
pub fn ctc_loss(logprobs: &Array2<f64>, target: &[usize]) -> Result<f64> {
    ctc_loss_with_grad(logprobs, target).map(|(loss, _)| loss)
}

/// Graph node for the CTC loss of one sequence.
pub fn ctc_loss_node(g: &mut Graph, logprobs: NodeId, target: &[usize]) -> Result<NodeId> {
    let (loss, grad) = ctc_loss_with_grad(g.value(logprobs), target)?;
    let needs = g.needs_grad(logprobs);
    let li = logprobs.0;
    Ok(g.push_op(
        Array2::from_elem((1, 1), loss),
        needs,
        Box::new(move |gout, grads| {
            grads[li].scaled_add(gout[[0, 0]], &grad);
        }),
    ))
}

// ---------------------------------------------------------------------------
// Quantity loss
// ---------------------------------------------------------------------------

/// `|sum(alpha) - target_len|` over the valid frames.
pub fn quantity_loss(alpha: &[f64], target_len: usize) -> f64 {
    (alpha.iter().sum::<f64>() - target_len as f64).abs()
}

/// Graph node version; `alpha` holds the valid frames only.
pub fn quantity_loss_node(g: &mut Graph, alpha: NodeId, target_len: usize) -> NodeId {
    let s = g.sum_all(alpha);
    let d = g.add_scalar(s, -(target_len as f64));
    g.abs_all(d)
}

// ---------------------------------------------------------------------------
// LM cross-entropy
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood over the masked (response prediction)
/// positions. `loss_mask[p]` marks position `p` as predicting the next
/// response token; masked positions pair with `response_ids` in order.
pub fn lm_cross_entropy(
    logits: &Array2<f64>,
    response_ids: &[usize],
    loss_mask: &[bool],
) -> Result<f64> {
    if loss_mask.len() != logits.nrows() {
        return Err(Error::Shape(format!(
            "mask length {} vs {} logit rows",
            loss_mask.len(),
            logits.nrows()
        )));
    }
    let positions: Vec<usize> = (0..loss_mask.len()).filter(|&p| loss_mask[p]).collect();
    if positions.is_empty() {
        return Err(Error::Data("empty loss mask".into()));
    }
    if positions.len() != response_ids.len() {
        return Err(Error::Shape(format!(
            "{} masked positions vs {} response ids",
            positions.len(),
            response_ids.len()
        )));
    }
    let mut total = 0.0;
    for (&pos, &id) in positions.iter().zip(response_ids) {
        let row = logits.row(pos);
        let mx = row.fold(NEG_INF, |acc, &v| acc.max(v));
        let lse = row.mapv(|v| (v - mx).exp()).sum().ln() + mx;
        total += lse - logits[[pos, id]];
    }
    Ok(total / positions.len() as f64)
}

//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numkernel::graph::{Graph, NodeId};
use crate::numkernel::store::ParamStore;
use std::collections::BTreeMap;

/// Outcome of a gradient check over every non-frozen store entry.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Entry name and flat element index of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub checked_entries: usize,
    pub checked_elements: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor so near-zero gradients compare on an absolute
/// scale. The floor sits above the roundoff of a central difference at
/// eps ~ 1e-5 on order-one losses, where the quotient itself carries about
/// 1e-10 of absolute noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Compares analytic gradients of the scalar loss built by `f` against
/// central differences of size `eps`, for every element of every non-frozen
/// entry. `f` must be deterministic.
pub fn grad_check<F>(f: F, store: &mut ParamStore, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    store.zero_grads();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite("loss at base point".into()));
        }
        g.backward(loss, store)?;
    }
    let analytic: BTreeMap<String, Vec<f64>> = store
        .iter()
        .filter(|(_, e)| !e.frozen)
        .map(|(n, e)| (n.to_string(), e.grad.iter().cloned().collect()))
        .collect();

    let eval = |store: &ParamStore, context: &str| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(v)
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked_entries: 0,
        checked_elements: 0,
    };
    for (name, grads) in &analytic {
        report.checked_entries += 1;
        for idx in 0..grads.len() {
            let original = {
                let vals = store.values_mut(name)?;
                let slice = vals.as_slice_mut().expect("contiguous");
                let orig = slice[idx];
                slice[idx] = orig + eps;
                orig
            };
            let plus = eval(store, name)?;
            {
                let vals = store.values_mut(name)?;
                vals.as_slice_mut().expect("contiguous")[idx] = original - eps;
            }
            let minus = eval(store, name)?;
            {
                let vals = store.values_mut(name)?;
                vals.as_slice_mut().expect("contiguous")[idx] = original;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(grads[idx], numeric);
            report.checked_elements += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut store = ParamStore::new();
        store.register("w", array![[1.0, 2.0]]).unwrap();
        let report = grad_check(
            |g, s| {
                let w = g.param(s, "w")?;
                let sq = g.mul(w, w);
                Ok(g.sum_all(sq))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
        assert_eq!(report.checked_elements, 2);
        // analytic grads are 2w
        assert_eq!(store.grad("w").unwrap(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn frozen_entries_are_excluded() {
        let mut store = ParamStore::new();
        store.register("w", array![[1.0]]).unwrap();
        store.register("frozen.w", array![[3.0]]).unwrap();
        store.freeze_prefix("frozen.");
        let report = grad_check(
            |g, s| {
                let w = g.param(s, "w")?;
                let f = g.param(s, "frozen.w")?;
                let p = g.mul(w, w);
                let q = g.add(p, f);
                Ok(g.sum_all(q))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked_entries, 1);
        assert_eq!(report.checked_elements, 1);
    }

    #[test]
    fn non_finite_loss_names_the_perturbed_entry() {
        let mut store = ParamStore::new();
        store.register("w", array![[0.0]]).unwrap();
        // 1/w is infinite once w is perturbed back through zero
        let err = grad_check(
            |g, s| {
                let w = g.param(s, "w")?;
                let s1 = g.sum_all(w);
                Ok(g.recip(s1))
            },
            &mut store,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}

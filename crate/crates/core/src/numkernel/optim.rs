//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::numkernel::store::ParamStore;
use ndarray::Array2;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    step: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over all non-frozen entries.
///
/// Rejects the whole step (no entry modified, moments untouched) if any
/// non-frozen gradient contains a non-finite value.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Config(format!("negative learning rate {lr}")));
    }
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| !e.frozen)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in &names {
        if !store.grad(name)?.iter().all(|v| v.is_finite()) {
            return Err(Error::OptimRejected(format!(
                "non-finite gradient in `{name}`"
            )));
        }
    }
    let (b1, b2) = betas;
    let t = state.step + 1;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for name in &names {
        let grad = store.grad(name)?.clone();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(grad.dim()));
        m.zip_mut_with(&grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        let m = m.clone();
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(grad.dim()));
        v.zip_mut_with(&grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let v = v.clone();

        let values = store.values_mut(name)?;
        ndarray::Zip::from(&mut *values)
            .and(&m)
            .and(&v)
            .for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
            });
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(name: &str, w: f64, g: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.register(name, array![[w]]).unwrap();
        store.accumulate_grad(name, &array![[g]]).unwrap();
        store
    }

    #[test]
    fn single_scalar_first_step_moves_by_lr() {
        // w=1, grad=1, lr=0.1, no decay, fresh moments: bias correction makes
        // mhat=1 and vhat=1, so the update is lr/(1+eps) and w lands at ~0.9.
        let mut store = store_with("w", 1.0, 1.0);
        let mut state = AdamState::new();
        adamw_step(&mut store, &mut state, 0.1, (0.9, 0.999), 1e-8, 0.0).unwrap();
        let w = store.values("w").unwrap()[[0, 0]];
        assert!((w - 0.9).abs() < 1e-8, "got {w}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut store = store_with("w", 1.0, 5.0);
        let mut state = AdamState::new();
        adamw_step(&mut store, &mut state, 0.0, (0.9, 0.999), 1e-8, 0.1).unwrap();
        assert_eq!(store.values("w").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn frozen_entry_with_gradient_is_untouched() {
        let mut store = store_with("lm.w", 1.0, 5.0);
        store.freeze_prefix("lm.");
        let mut state = AdamState::new();
        adamw_step(&mut store, &mut state, 0.1, (0.9, 0.999), 1e-8, 0.01).unwrap();
        assert_eq!(store.values("lm.w").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn nan_gradient_rejects_the_step() {
        let mut store = ParamStore::new();
        store.register("a", array![[1.0]]).unwrap();
        store.register("b", array![[2.0]]).unwrap();
        store.accumulate_grad("a", &array![[f64::NAN]]).unwrap();
        store.accumulate_grad("b", &array![[1.0]]).unwrap();
        let mut state = AdamState::new();
        let err = adamw_step(&mut store, &mut state, 0.1, (0.9, 0.999), 1e-8, 0.0).unwrap_err();
        assert!(err.to_string().contains("a"));
        // nothing moved, not even the healthy entry
        assert_eq!(store.values("b").unwrap()[[0, 0]], 2.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_even_with_zero_grad() {
        let mut store = store_with("w", 2.0, 0.0);
        let mut state = AdamState::new();
        adamw_step(&mut store, &mut state, 0.1, (0.9, 0.999), 1e-8, 0.5).unwrap();
        let w = store.values("w").unwrap()[[0, 0]];
        assert!((w - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}

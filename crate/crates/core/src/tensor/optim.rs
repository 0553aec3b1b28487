//! Adam with bias correction and decoupled weight decay, plus global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay coefficient, applied only to parameters flagged `decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
            config,
        }
    }
}

/// One Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moments",
                store.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, entry) in store.entries().iter().enumerate() {
        if entry.value.shape() != grads[i].shape() || entry.value.shape() != state.m[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("parameter {} vs grad {:?}", entry.name, grads[i].shape()),
            });
        }
    }
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, entry) in store.entries_mut().iter_mut().enumerate() {
        let decay = if entry.decay { lr * weight_decay } else { 0.0 };
        let p = entry.value.data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= decay * p[j] + lr * mhat / (vhat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![x]), false).unwrap();
        s
    }

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_grad_leaves_everything_unchanged() {
        let mut store = scalar_store(1.5);
        let mut st = AdamState::new(&store, no_decay());
        adam_step(&mut store, &[Tensor::vector(vec![0.0])], &mut st, 0.1).unwrap();
        assert_eq!(store.value(store.find("x").unwrap()).data(), &[1.5]);
        assert_eq!(st.m[0].data(), &[0.0]);
        assert_eq!(st.v[0].data(), &[0.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(0.0);
        let mut st = AdamState::new(&store, no_decay());
        adam_step(&mut store, &[Tensor::vector(vec![1.0])], &mut st, 0.1).unwrap();
        let x = store.entries()[0].value.data()[0];
        // mhat = 1, vhat = 1: update lr / (1 + eps)
        assert!((x + 0.1 / (1.0 + 1e-6)).abs() < 1e-15);
        adam_step(&mut store, &[Tensor::vector(vec![1.0])], &mut st, 0.1).unwrap();
        assert!(store.entries()[0].value.data()[0] < x);
    }

    #[test]
    fn decay_applies_only_to_flagged_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![2.0]), true).unwrap();
        store.add("b", Tensor::vector(vec![2.0]), false).unwrap();
        let mut st = AdamState::new(&store, AdamConfig::default());
        let zeros = store.zeros_like();
        adam_step(&mut store, &zeros, &mut st, 0.5).unwrap();
        assert!((store.entries()[0].value.data()[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-15);
        assert_eq!(store.entries()[1].value.data()[0], 2.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut store = scalar_store(0.0);
        let mut st = AdamState::new(&store, no_decay());
        let bad = [Tensor::vector(vec![1.0, 2.0])];
        assert!(adam_step(&mut store, &bad, &mut st, 0.1).is_err());
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::vector(vec![0.6, 0.8])];
        assert_eq!(clip_grad_norm(&mut g, 2.0), 1.0);
        assert_eq!(g[0].data(), &[0.6, 0.8]);

        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 2.0), 5.0);
        assert!((g[0].data()[0] - 1.2).abs() < 1e-15);
        assert!((g[1].data()[0] - 1.6).abs() < 1e-15);

        let mut g = vec![Tensor::zeros(&[3])];
        assert_eq!(clip_grad_norm(&mut g, 2.0), 0.0);
        assert_eq!(g[0].data(), &[0.0; 3]);
    }
}

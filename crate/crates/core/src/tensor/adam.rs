//! Adam optimizer with bias correction.

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Per-parameter first/second moment estimates plus the shared step
/// counter and hyperparameters. Moments are zero-initialized on first
/// contact with a parameter; `t` increments by exactly one per
/// [`adam_step`].
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update over every parameter in the store. Every parameter
/// must carry a gradient; gradients are left untouched so the caller
/// controls zeroing.
pub fn adam_step(params: &ParameterStore, state: &mut AdamState) -> Result<()> {
    // Validate all gradients before mutating anything.
    let mut grads: Vec<(&String, &Tensor, Vec<f64>)> = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let g = p
            .grad()
            .ok_or_else(|| Error::MissingGrad { name: name.clone() })?;
        grads.push((name, p, g));
    }

    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);

    for (name, p, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        p.update_values(|values| {
            for i in 0..values.len() {
                m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::parameter(&[values.len()], values).unwrap())
            .unwrap();
        s
    }

    fn set_grad(s: &ParameterStore, name: &str, g: &[f64]) {
        // Drive the gradient through the graph: loss = sum(g .* p).
        let p = s.get(name).unwrap();
        let gt = Tensor::new(&[g.len()], g.to_vec()).unwrap();
        p.mul(&gt).unwrap().sum().backward().unwrap();
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With bias correction, step 1 moves by lr * g/(|g| + eps*sqrt(bc2)).
        let lr = 0.01;
        let store = store_with("w", vec![1.0, -2.0]);
        set_grad(&store, "w", &[0.5, -3.0]);
        let mut state = AdamState::new(lr);
        adam_step(&store, &mut state).unwrap();
        let w = store.get("w").unwrap().values();
        for (i, (w0, g)) in [(1.0, 0.5), (-2.0, -3.0)].iter().enumerate() {
            let expected = w0 - lr * g.signum();
            let tol = lr * state.epsilon / g.abs() + 1e-12;
            assert!(
                (w[i] - expected).abs() <= tol,
                "w[{i}] = {} vs {expected}",
                w[i]
            );
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_grad_leaves_parameters_unchanged() {
        let store = store_with("w", vec![1.5, -0.5]);
        set_grad(&store, "w", &[0.0, 0.0]);
        let mut state = AdamState::new(0.1);
        adam_step(&store, &mut state).unwrap();
        assert_eq!(store.get("w").unwrap().values(), vec![1.5, -0.5]);
    }

    #[test]
    fn two_steps_match_hand_rolled_oracle() {
        let (lr, b1, b2, eps) = (0.02, 0.9, 0.999, 1e-8);
        let g = 0.7;
        let mut w = 0.3;
        // Hand-rolled two iterations of Adam with constant gradient.
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1_pow(b1, t));
            let v_hat = v / (1.0 - b1_pow(b2, t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let store = store_with("w", vec![0.3]);
        let mut state = AdamState::new(lr);
        for _ in 0..2 {
            store.zero_grad();
            set_grad(&store, "w", &[g]);
            adam_step(&store, &mut state).unwrap();
        }
        assert!((store.get("w").unwrap().values()[0] - w).abs() < 1e-12);

        fn b1_pow(b: f64, t: u32) -> f64 {
            b.powi(t as i32)
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let store = store_with("enc.w", vec![0.0]);
        let mut state = AdamState::new(0.1);
        match adam_step(&store, &mut state) {
            Err(Error::MissingGrad { name }) => assert_eq!(name, "enc.w"),
            other => panic!("expected MissingGrad, got {other:?}"),
        }
        // A failed step must not advance the counter.
        assert_eq!(state.t, 0);
    }
}

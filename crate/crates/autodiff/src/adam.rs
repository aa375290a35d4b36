//! Adam with bias correction.

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            m: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "adam: {} params, {} grads, {} moments",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id);
            let p = store.get_mut(id);
            if g.shape() != p.shape() || self.m[i].shape() != p.shape() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "adam: gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, pv) in p.data_mut().iter_mut().enumerate() {
                let gv = g.data()[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gv;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gv * gv;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn grads_for(store: &ParamStore, coeffs: &[f64]) -> Gradients {
        // loss = sum(coeffs .* w)  =>  dloss/dw = coeffs
        let mut tape = Tape::new();
        let b = tape.bind(store).unwrap();
        let id = store.ids().next().unwrap();
        let c = Tensor::new(1, coeffs.len(), coeffs.to_vec()).unwrap();
        let loss = tape.sum_weighted(b.var(id), c).unwrap();
        tape.backward(loss).unwrap().param_gradients(&tape, store)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(vec![0.3, -0.7]));
        let before = store.clone();
        let mut state = AdamState::new(&store);
        let g = grads_for(&store, &[0.0, 0.0]);
        for _ in 0..5 {
            state.step(&mut store, &g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0, 1.0, 1.0]));
        let mut state = AdamState::new(&store);
        let g = grads_for(&store, &[3.0, -0.02, 250.0]);
        let cfg = AdamConfig::default();
        state.step(&mut store, &g, &cfg).unwrap();
        let w = store.get(id).data();
        // m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps).
        for (wv, gv) in w.iter().zip([3.0f64, -0.02, 250.0]) {
            let expected = 1.0 - cfg.learning_rate * gv / (gv.abs() + cfg.eps);
            assert!((wv - expected).abs() < 1e-15);
            assert!(((1.0 - wv) - cfg.learning_rate * gv.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_gradient_step_size_tends_to_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![0.0]));
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig {
            learning_rate: 0.001,
            ..AdamConfig::default()
        };
        let g = grads_for(&store, &[0.5]);
        let mut last = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            state.step(&mut store, &g, &cfg).unwrap();
            let now = store.get(id).data()[0];
            step = (now - last).abs();
            last = now;
        }
        assert!((step - cfg.learning_rate).abs() < 1e-9);
    }
}

//! Adam and global-norm gradient clipping over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::tensor::{Element, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one pair of flat buffers per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Element>(store: &ParamStore<F>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the store's `grad` buffers.
    pub fn step<F: Element>(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let mut value = (*p.value).clone();
            for (((x, g), m), v) in value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *x = F::c(x.f64() - update);
            }
            p.value = std::sync::Arc::new(value);
        }
    }
}

/// Fails on the first parameter holding a non-finite gradient.
pub fn check_grads<F: Element>(store: &ParamStore<F>) -> Result<(), TrainError> {
    for (_, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

pub fn global_norm<F: Element>(store: &ParamStore<F>) -> f64 {
    store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient so the global 2-norm is at most `threshold`;
/// returns the factor applied.
pub fn clip_grads<F: Element>(store: &mut ParamStore<F>, threshold: f64) -> Result<f64, TrainError> {
    check_grads(store)?;
    let norm = global_norm(store);
    if norm <= threshold || norm == 0.0 {
        return Ok(1.0);
    }
    let scale = threshold / norm;
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g = F::c(g.f64() * scale);
        }
    }
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_vec([1, 1, 1, values.len()], values.to_vec()).unwrap());
        s.get_mut(id).grad = Tensor::from_vec([1, 1, 1, grads.len()], grads.to_vec()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 1e-2);
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut s = store(&[1.0, -2.0], &[0.3, -4.0]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.0);
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02] {
            let mut s = store(&[0.5], &[g]);
            let mut adam = Adam::new(&s, AdamConfig::default());
            adam.step(&mut s, 1e-3);
            let moved = s.iter().next().unwrap().1.value.data()[0] - 0.5;
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn clipping_halves_norm_two() {
        let mut s = store(&[0.0, 0.0], &[1.2, 1.6]);
        let scale = clip_grads(&mut s, 1.0).unwrap();
        assert!((scale - 0.5).abs() < 1e-12);
        let g = s.iter().next().unwrap().1.grad.data().to_vec();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(&[0.0], &[f64::NAN]);
        match clip_grads(&mut s, 1.0) {
            Err(TrainError::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn clipping_never_grows_and_keeps_direction(
            g in prop::collection::vec(-10.0f64..10.0, 1..20),
            threshold in 0.01f64..5.0,
        ) {
            let mut s = store(&vec![0.0; g.len()], &g);
            let scale = clip_grads(&mut s, threshold).unwrap();
            prop_assert!(scale <= 1.0 && scale > 0.0);
            let out = s.iter().next().unwrap().1.grad.data().to_vec();
            for (a, b) in g.iter().zip(&out) {
                prop_assert!(b.abs() <= a.abs() + 1e-15);
                prop_assert!((a * scale - b).abs() < 1e-12);
            }
            prop_assert!(global_norm(&s) <= threshold + 1e-9);
        }
    }
}

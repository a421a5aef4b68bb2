use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::Weights;
use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Weights,
    pub v: Weights,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &Weights) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut Weights,
    grads: &Weights,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), EngineError> {
    if grads.tensors().iter().any(|t| t.iter().any(|v| v.is_nan())) {
        return Err(EngineError::NanGradient);
    }
    let shapes_match = |a: &Weights, b: &Weights| {
        let (a, b) = (a.tensors(), b.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.dim() == y.dim())
    };
    if !shapes_match(params, grads) || !shapes_match(params, &state.m) {
        return Err(EngineError::Shape("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = *hyper;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Rescales gradients to global norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut Weights, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Cosine annealing from `lr` at epoch 0 to `lr_min` at epoch `epochs`.
pub fn cosine_lr(lr: f64, lr_min: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr;
    }
    let progress = (epoch.min(epochs) as f64) / epochs as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::params::Weights;
    use ndarray::{array, Array2};

    fn scalar(v: f64) -> Weights {
        Weights {
            blocks: vec![],
            readout: vec![array![[v]]],
        }
    }

    #[test]
    fn scalar_trace_matches_hand_computation() {
        let mut p = scalar(0.5);
        let g = scalar(1.0);
        let mut state = AdamState::new(&p);
        let hyper = AdamHyper::default();
        // hand-rolled reference
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=5 {
            adam_step(&mut p, &g, &mut state, &hyper).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((p.readout[0][[0, 0]] - x).abs() < 1e-15);
        }
        // first step moves by lr up to the eps correction
        let mut q = scalar(0.0);
        let mut fresh = AdamState::new(&q);
        adam_step(&mut q, &g, &mut fresh, &hyper).unwrap();
        assert!((q.readout[0][[0, 0]] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = scalar(2.0);
        let mut state = AdamState::new(&p);
        state.m.readout[0][[0, 0]] = 1.0;
        state.v.readout[0][[0, 0]] = 1.0;
        state.step = 1;
        let before = p.clone();
        let hyper = AdamHyper {
            lr: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &scalar(0.0), &mut state, &hyper).unwrap();
        assert_eq!(p, before);
        assert!((state.m.readout[0][[0, 0]] - 0.9).abs() < 1e-15);
        assert!((state.v.readout[0][[0, 0]] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn clipping_and_nan() {
        let mut g = Weights {
            blocks: vec![],
            readout: vec![Array2::from_elem((1, 2), 50.0 / 2f64.sqrt())],
        };
        let before = clip_grad_norm(&mut g, 5.0);
        assert!((before - 50.0).abs() < 1e-12);
        assert!((g.global_norm() - 5.0).abs() < 1e-12);

        let mut p = scalar(0.0);
        let mut state = AdamState::new(&p);
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut state, &AdamHyper::default());
        assert!(matches!(err, Err(EngineError::NanGradient)));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1e-6, 0, 150), 1e-3);
        assert!((cosine_lr(1e-3, 1e-6, 150, 150) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 1e-6, 75, 150) - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
    }
}

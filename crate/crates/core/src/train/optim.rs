//! AdamW with decoupled weight decay.

use clim_tensor::{lit, Real, Tensor};

use crate::config::OptimConfig;
use crate::params::ParamStore;

/// First and second moment estimates, one pair per parameter, plus the
/// number of updates taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update at learning rate `lr`.
///
/// Parameters flagged `decay` are first shrunk by `1 − lr·λ`, independently
/// of the gradient; then every parameter with a gradient takes the
/// bias-corrected Adam step. Parameters whose gradient is `None` are left
/// untouched, moments included.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    hyper: &OptimConfig,
    lr: f64,
) {
    assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
    state.t += 1;
    let (b1, b2): (T, T) = (lit(hyper.beta1), lit(hyper.beta2));
    let t = state.t as i32;
    let c1: T = lit(1.0 - hyper.beta1.powi(t));
    let c2: T = lit(1.0 - hyper.beta2.powi(t));
    let (lr_t, eps): (T, T) = (lit(lr), lit(hyper.eps));
    let shrink: T = lit(1.0 - lr * hyper.weight_decay);
    for (i, entry) in store.entries_mut().iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        assert_eq!(g.shape(), entry.value.shape(), "gradient shape of {}", entry.name);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = entry.value.data_mut();
        for k in 0..p.len() {
            if entry.decay {
                p[k] = p[k] * shrink;
            }
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] = p[k] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Warm-up then optional cosine decay of the base rate.
pub fn learning_rate(hyper: &OptimConfig, step: u64, total: u64) -> f64 {
    let warm = if hyper.warmup_steps > 0 {
        ((step + 1) as f64 / hyper.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    let decay = if hyper.cosine && total > 0 {
        let progress = (step as f64 / total as f64).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    } else {
        1.0
    };
    hyper.lr * warm * decay
}

/// Scales all gradients so their joint norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k: T = lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
    norm
}

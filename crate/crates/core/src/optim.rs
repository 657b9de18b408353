//! AdamW with decoupled weight decay, the warmup-cosine schedule and
//! layer-wise learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};

pub const ADAM_EPS: f32 = 1e-8;

/// First and second moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One AdamW update of a single buffer at (1-based) step `t`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f32,
    betas: (f32, f32),
    weight_decay: f32,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - (b1 as f64).powi(t as i32);
    let c2 = 1.0 - (b2 as f64).powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mhat = m[i] as f64 / c1;
        let vhat = v[i] as f64 / c2;
        let decayed = param[i] as f64 * (1.0 - lr as f64 * weight_decay as f64);
        param[i] = (decayed - lr as f64 * mhat / (vhat.sqrt() + ADAM_EPS as f64)) as f32;
    }
}

/// Applies one AdamW step to every tensor that carries a gradient. `scales`
/// multiplies the learning rate per tensor. Weight decay skips rank-1
/// tensors (biases, norms).
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f32,
    scales: &[f32],
    betas: (f32, f32),
    weight_decay: f32,
) -> Result<()> {
    if state.m.len() != store.len() || scales.len() != store.len() {
        return Err(Error::dim("optimizer state does not match the parameter store"));
    }
    state.step += 1;
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        let Some(g) = t.grad().map(<[f32]>::to_vec) else {
            continue;
        };
        let wd = if t.rank() >= 2 { weight_decay } else { 0.0 };
        adamw_update(t.data_mut(), &g, &mut state.m[i], &mut state.v[i], state.step, lr * scales[i], betas, wd);
    }
    Ok(())
}

/// Linear warmup to `base` over `warmup` steps, then half-cosine to zero at
/// `total`.
pub fn lr_at(step: u64, base: f32, warmup: u64, total: u64) -> f32 {
    if step < warmup {
        return base * step as f32 / warmup as f32;
    }
    if step >= total || total <= warmup {
        return if step < total { base } else { 0.0 };
    }
    let p = (step - warmup) as f64 / (total - warmup) as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())).max(0.0) as f32
}

/// Head 1, block `i` `decay^(depth − i)`, embedding `decay^(depth + 1)`.
pub fn layer_lr_scale(group: ParamGroup, depth: usize, decay: f32) -> f32 {
    match group {
        ParamGroup::Head => 1.0,
        ParamGroup::Block(i) => decay.powi((depth - i) as i32),
        ParamGroup::Embed => decay.powi(depth as i32 + 1),
    }
}

pub fn layer_scales(store: &ParamStore, depth: usize, decay: f32) -> Vec<f32> {
    (0..store.len()).map(|i| layer_lr_scale(store.group(i), depth, decay)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_closed_form() {
        let (mut p, mut m, mut v) = (vec![1.0f32], vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, (0.9, 0.999), 0.0);
        assert!((p[0] - 0.9).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut p, mut m, mut v) = (vec![0.3f32, -2.0], vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, (0.9, 0.999), 0.0);
        assert_eq!(p, vec![0.3, -2.0]);
    }

    #[test]
    fn decay_is_decoupled() {
        let (mut p, mut m, mut v) = (vec![2.0f32], vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, (0.9, 0.999), 0.05);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-7);
    }

    #[test]
    fn schedule_landmarks() {
        let (base, w, t) = (1e-3f32, 100u64, 1100u64);
        assert_eq!(lr_at(0, base, w, t), 0.0);
        assert_eq!(lr_at(w, base, w, t), base);
        assert!((lr_at((w + t) / 2, base, w, t) - base / 2.0).abs() < 1e-9);
        assert_eq!(lr_at(t, base, w, t), 0.0);
        assert_eq!(lr_at(t + 5, base, w, t), 0.0);
        let below = lr_at(w - 1, base, w, t);
        let above = lr_at(w + 1, base, w, t);
        assert!((above - below).abs() < 2.5 * base / w as f32);
    }

    #[test]
    fn layer_scale_examples() {
        assert_eq!(layer_lr_scale(ParamGroup::Head, 2, 0.5), 1.0);
        assert_eq!(layer_lr_scale(ParamGroup::Block(1), 2, 0.5), 0.5);
        assert_eq!(layer_lr_scale(ParamGroup::Block(0), 2, 0.5), 0.25);
        assert_eq!(layer_lr_scale(ParamGroup::Embed, 2, 0.5), 0.125);
    }

    proptest! {
        #[test]
        fn schedule_stays_within_base(step in 0u64..5000, w in 0u64..500, extra in 1u64..3000) {
            let lr = lr_at(step, 0.01, w, w + extra);
            prop_assert!((0.0..=0.01).contains(&lr));
        }
    }
}

//! AdamW with decoupled weight decay, plus the cosine schedule.

use std::f64::consts::PI;

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One AdamW step in place. Decay `theta -= lr * wd * theta` is applied
/// before, and independently of, the bias-corrected adaptive step.
pub fn adamw_update(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(
            "adamw",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        );
    }
    state.t += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
            return shape_err("adamw", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, th) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            *th -= lr * weight_decay * *th;
            *th -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`; `total = 0` gives `lr0`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let s = step.min(total) as f64;
    lr0 * (1.0 + (PI * s / total as f64).cos()) / 2.0
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::zeros_like(&[&p]);
        adamw_update(&mut [&mut p], &[Tensor::zeros(&[1, 2])], &mut st, 0.1, (0.9, 0.999), 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::row(vec![0.0, 0.0, 0.0]);
        let g = Tensor::row(vec![3.0, -0.2, 1e-3]);
        let mut st = AdamState::zeros_like(&[&p]);
        adamw_update(&mut [&mut p], std::slice::from_ref(&g), &mut st, 0.01, (0.9, 0.999), 0.0).unwrap();
        for (d, gv) in p.data().iter().zip(g.data()) {
            let want = -0.01 * gv / (gv.abs() + ADAM_EPS);
            assert!((d - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Tensor::row(vec![2.0]);
        let mut st = AdamState::zeros_like(&[&p]);
        adamw_update(&mut [&mut p], &[Tensor::zeros(&[1, 1])], &mut st, 0.1, (0.9, 0.999), 0.5).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let target = [1.5, -0.5, 0.25];
        let mut p = Tensor::row(vec![0.0; 3]);
        let mut st = AdamState::zeros_like(&[&p]);
        for step in 0..100 {
            let g = Tensor::row(p.data().iter().zip(target).map(|(x, c)| 2.0 * (x - c)).collect());
            let lr = cosine_lr(step, 100, 0.2);
            adamw_update(&mut [&mut p], &[g], &mut st, lr, (0.5, 0.999), 0.0).unwrap();
        }
        for (x, c) in p.data().iter().zip(target) {
            assert!((x - c).abs() < 1e-3, "{x} vs {c}");
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 2e-4), 2e-4);
        assert!(cosine_lr(10, 10, 2e-4).abs() < 1e-20);
        assert!((cosine_lr(5, 10, 2e-4) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::row(vec![30.0, 40.0])];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 50.0);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12 && (g[0].data()[1] - 8.0).abs() < 1e-12);
    }
}

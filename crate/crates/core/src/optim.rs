//! Adam with bias correction, global-norm clipping, and warmup + cosine decay.

use crate::param::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One Adam update. Parameters without a gradient (or frozen ones) are left
/// untouched, but the step counter always advances by one.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut AdamState<T>, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (one, eps) = (T::one(), T::of(ADAM_EPS));
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    for (id, g) in grads.iter() {
        let p = store.get_mut(id);
        if !p.requires_grad {
            continue;
        }
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().as_f64().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamId;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![4], vec![0.5, -0.5, 1.0, 0.0]).unwrap());
        let mut grads = Gradients::new(1);
        grads.add(id, &Tensor::new(vec![4], vec![3.0, -1e-4, 0.25, -7.0]).unwrap());
        let before = store.get(id).value.clone();
        let mut state = AdamState::new(&store);
        let lr = 1e-3;
        adam_step(&mut store, &grads, &mut state, lr);
        for ((a, b), g) in before.data().iter().zip(store.get(id).value.data()).zip(grads.get(ParamId(0)).unwrap().data()) {
            let update = b - a;
            assert!(update.abs() >= 0.99 * lr && update.abs() <= lr, "{update}");
            assert_eq!(update.signum(), -g.signum());
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn cosine_endpoints() {
        assert!(cosine_lr(1000, 1000, 1e-4, 0).abs() < 1e-9);
        assert_eq!(cosine_lr(100, 1000, 1e-4, 100), 1e-4);
        assert_eq!(cosine_lr(0, 1000, 1e-4, 100), 0.0);
        assert!((cosine_lr(550, 1000, 1e-4, 100) - 0.5e-4).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut grads = Gradients::<f64>::new(1);
        grads.add(ParamId(0), &Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((grads.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}

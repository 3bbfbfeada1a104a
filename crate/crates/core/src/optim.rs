//! AdamW with decoupled weight decay, cosine schedule, clipping and EMA.

use crate::{Error, Result, Scalar};

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, base_lr: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm<T: Scalar>(grads: &[T]) -> f64 {
    grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` to norm `max_norm` if it is larger; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `ema ← decay·ema + (1−decay)·model`.
pub fn ema_update<T: Scalar>(ema: &mut [T], model: &[T], decay: f64) -> Result<()> {
    if ema.len() != model.len() {
        return Err(Error::State(format!(
            "EMA holds {} parameters, model {}",
            ema.len(),
            model.len()
        )));
    }
    let (a, b) = (T::lit(decay), T::lit(1.0 - decay));
    for (e, &p) in ema.iter_mut().zip(model) {
        *e = a * *e + b * p;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n: usize) -> Self {
        AdamW {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    /// One update. Entries with `decay[i]` shrink by `lr·wd` before the
    /// adaptive step.
    pub fn step(&mut self, cfg: &AdamWConfig, lr: f64, params: &mut [T], grads: &[T], decay: &[bool]) -> Result<()> {
        let n = params.len();
        if grads.len() != n || decay.len() != n || self.m.len() != n {
            return Err(Error::State("optimizer state does not match parameter count".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(cfg.eps);
        let shrink = T::lit(1.0 - lr * cfg.weight_decay);
        for i in 0..n {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + ob1 * g;
            self.v[i] = b2 * self.v[i] + ob2 * g * g;
            if decay[i] {
                params[i] *= shrink;
            }
            let denom = (self.v[i] * inv_bc2).sqrt() + eps;
            params[i] -= step * self.m[i] / denom;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 100, 0.1), 0.0);
        assert_eq!(cosine_lr(10, 10, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 10, 100, 0.1).abs() < 1e-12);
        assert!((cosine_lr(55, 10, 100, 0.1) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_down_only() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
        assert!((global_norm(&g) - 0.5).abs() < 1e-12);
        assert!((g[0] / g[1] - 0.75).abs() < 1e-12);
        let mut small = vec![0.1f64, 0.2];
        clip_grad_norm(&mut small, 0.5);
        assert_eq!(small, vec![0.1, 0.2]);
    }

    #[test]
    fn ema_limits() {
        let mut e = vec![1.0f64, 2.0];
        ema_update(&mut e, &[5.0, 6.0], 0.0).unwrap();
        assert_eq!(e, vec![5.0, 6.0]);
        ema_update(&mut e, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(e, vec![5.0, 6.0]);
        assert!(matches!(ema_update(&mut e, &[0.0], 0.5), Err(Error::State(_))));
    }

    #[test]
    fn decoupled_decay() {
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut opt = AdamW::<f64>::new(2);
        let mut p = vec![1.0, 1.0];
        for _ in 0..3 {
            opt.step(&cfg, 0.1, &mut p, &[0.0, 0.0], &[true, false]).unwrap();
        }
        assert!((p[0] - 0.999f64.powi(3)).abs() < 1e-15);
        assert_eq!(p[1], 1.0);
    }
}

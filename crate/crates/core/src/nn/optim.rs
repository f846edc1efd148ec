use ndarray::ArrayD;

use super::{Float, Module};

/// Adam with decoupled weight decay over the trainable parameters of a
/// module. State is matched to parameters by traversal order.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    pub step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(lr: F, beta1: F, beta2: F, weight_decay: F) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: F::lit(1e-8),
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients. Frozen parameters
    /// are skipped entirely.
    pub fn step<M: Module<F> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = F::one() - self.beta1.powi(t);
        let c2 = F::one() - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if ms.len() <= idx {
                ms.push(ArrayD::zeros(p.value.raw_dim()));
                vs.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    *w -= lr * wd * *w;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            idx += 1;
        });
    }
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Float, M: Module<F> + ?Sized>(module: &mut M, max_norm: F) -> F {
    let mut sq = F::zero();
    module.visit("", &mut |_, p| {
        if p.trainable {
            sq += p.grad.iter().map(|g| *g * *g).sum::<F>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > F::zero() {
        let s = max_norm / norm;
        module.visit_mut("", &mut |_, p| {
            if p.trainable {
                p.grad.mapv_inplace(|g| g * s);
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn zero_lr_leaves_params_and_frozen_untouched() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut lin = Linear::<f32>::random(3, 2, 1.0, true, false, &mut rng).with_lora(1, 1.0, &mut rng);
        lin.visit_mut("", &mut |_, p| p.grad.fill(1.0));
        let before = lin.clone();
        AdamW::new(0.0, 0.9, 0.999, 0.01).step(&mut lin);
        assert_eq!(lin.w, before.w);
        assert_eq!(lin.lora.as_ref().unwrap().a.value, before.lora.as_ref().unwrap().a.value);
        AdamW::new(0.1, 0.9, 0.999, 0.01).step(&mut lin);
        assert_eq!(lin.w.value, before.w.value);
        assert_ne!(lin.lora.as_ref().unwrap().b.value, before.lora.as_ref().unwrap().b.value);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut lin = Linear::<f64>::zeros(2, 1, false, true);
        lin.w.grad.fill(3.0);
        AdamW::new(0.5, 0.9, 0.999, 0.0).step(&mut lin);
        assert!(lin.w.value.iter().all(|w| (w + 0.5).abs() < 1e-6));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut lin = Linear::<f64>::zeros(2, 2, false, true);
        lin.w.grad.fill(3.0);
        let n = clip_grad_norm(&mut lin, 1.0);
        assert!((n - 6.0).abs() < 1e-12);
        let after: f64 = lin.w.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}

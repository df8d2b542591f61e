use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Scalar};

fn grad_for<'g, F: Scalar>(grads: &'g Gradients<F>, name: &str, len: usize) -> Result<&'g [F]> {
    let g = grads
        .get(name)
        .ok_or_else(|| Error::Usage(format!("no gradient for trainable parameter `{name}`")))?;
    if g.len() != len {
        return Err(Error::Usage(format!(
            "gradient for `{name}` has {} elements, parameter has {len}",
            g.len()
        )));
    }
    Ok(g.data())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<F: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable entry of `params`; each must have a gradient.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        let (mu, wd, lr) = (F::of(self.momentum), F::of(self.weight_decay), F::of(lr));
        for p in params.iter_mut().filter(|p| !p.is_buffer && !p.frozen) {
            let g = grad_for(grads, &p.name, p.value.len())?;
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            for ((x, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + (gi + wd * *x);
                *x -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    moments: HashMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        for p in params.iter().filter(|p| !p.is_buffer && !p.frozen) {
            grad_for(grads, &p.name, p.value.len())?;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = F::of(1.0 - b1.powi(t));
        let c2 = F::of(1.0 - b2.powi(t));
        let decay = F::of(1.0 - lr * self.weight_decay);
        let (b1, b2, eps, lr) = (F::of(b1), F::of(b2), F::of(self.eps), F::of(lr));
        for p in params.iter_mut().filter(|p| !p.is_buffer && !p.frozen) {
            let g = grads[&p.name].data();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![F::zero(); g.len()], vec![F::zero(); g.len()]));
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *x = *x * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `base * gamma^k` after `k` milestones have passed.
pub fn lr_multistep(epoch: usize, base_lr: f64, milestones: &[usize], gamma: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    base_lr * gamma.powi(passed as i32)
}

/// Linear warmup `base * (epoch + 1) / warmup`, then cosine annealing to 0
/// at `total`.
pub fn lr_warmup_cosine(epoch: usize, base_lr: f64, warmup: usize, total: usize) -> f64 {
    if epoch < warmup {
        return base_lr * (epoch + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return base_lr;
    }
    let progress = ((epoch - warmup) as f64 / span as f64).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Milestone epochs for fractions of the run, e.g. `[0.6, 0.8]`.
pub fn milestones_for(epochs: usize, fractions: &[f64]) -> Vec<usize> {
    fractions
        .iter()
        .map(|f| (f * epochs as f64).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert_param("w", Tensor::full([1], v));
        s
    }

    fn grads(g: f64) -> Gradients<f64> {
        [("w".to_string(), Tensor::full([1], g))].into_iter().collect()
    }

    fn w(s: &ParamStore<f64>) -> f64 {
        s.get("w").unwrap().data()[0]
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut s = store(1.5);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, &grads(0.0), 0.1).unwrap();
        assert_eq!(w(&s), 1.5);
    }

    #[test]
    fn sgd_two_step_trace() {
        let (p0, g1, g2, lr, mu, wd) = (1.0, 0.5, -0.25, 0.1, 0.9, 0.01);
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        let mut s = store(p0);
        let mut opt = Sgd::new(mu, wd);
        opt.step(&mut s, &grads(g1), lr).unwrap();
        assert!((w(&s) - p1).abs() < 1e-15);
        opt.step(&mut s, &grads(g2), lr).unwrap();
        assert!((w(&s) - p2).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_shrinks() {
        for p in [2.0, -2.0] {
            let mut s = store(p);
            Sgd::new(0.9, 0.1).step(&mut s, &grads(0.0), 0.5).unwrap();
            assert!(w(&s).abs() < p.abs());
            assert_eq!(w(&s).signum(), p.signum());
        }
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut s = store(1.0);
        let empty = Gradients::new();
        assert!(matches!(Sgd::new(0.9, 0.0).step(&mut s, &empty, 0.1), Err(Error::Usage(_))));
        assert!(matches!(AdamW::new(0.0).step(&mut s, &empty, 0.1), Err(Error::Usage(_))));
        s.set_frozen("w", true);
        Sgd::new(0.9, 0.0).step(&mut s, &empty, 0.1).unwrap();
    }

    #[test]
    fn adamw_first_step() {
        for g in [3.0, -0.002] {
            let (p0, lr, wd) = (0.7, 0.01, 0.06);
            let mut s = store(p0);
            AdamW::new(wd).step(&mut s, &grads(g), lr).unwrap();
            // m_hat = g, v_hat = g^2 at t = 1.
            let want = p0 * (1.0 - lr * wd) - lr * g / (g.abs() + 1e-8);
            assert!((w(&s) - want).abs() < 1e-15);
        }
        let mut s = store(0.3);
        AdamW::new(0.0).step(&mut s, &grads(0.0), 0.1).unwrap();
        assert_eq!(w(&s), 0.3);
    }

    #[test]
    fn adamw_decay_is_decoupled_from_gradient_scale() {
        let run = |scale: f64, wd: f64| {
            let mut s = store(1.0);
            let mut opt = AdamW::new(wd);
            for k in 0..5 {
                opt.step(&mut s, &grads(scale * (1.0 + k as f64)), 0.01).unwrap();
            }
            w(&s)
        };
        let shift_small = run(1e-2, 0.5) - run(1e-2, 0.0);
        let shift_big = run(1e2, 0.5) - run(1e2, 0.0);
        assert!((shift_small - shift_big).abs() < 1e-6, "{shift_small} vs {shift_big}");
    }

    #[test]
    fn multistep_table() {
        let ms = milestones_for(200, &[0.6, 0.8]);
        assert_eq!(ms, [120, 160]);
        for (e, want) in [(0, 0.03), (119, 0.03), (120, 0.003), (159, 0.003), (160, 0.0003), (199, 0.0003)] {
            assert!((lr_multistep(e, 0.03, &ms, 0.1) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn warmup_cosine_shape() {
        assert!((lr_warmup_cosine(0, 0.001, 30, 100) - 0.001 / 30.0).abs() < 1e-18);
        for e in 0..30 {
            let lr = lr_warmup_cosine(e, 0.001, 30, 100);
            assert!((lr - 0.001 * (e + 1) as f64 / 30.0).abs() < 1e-18);
        }
        assert_eq!(lr_warmup_cosine(30, 0.001, 30, 100), 0.001);
        assert!(lr_warmup_cosine(100, 0.001, 30, 100) < 1e-18);
        assert!((lr_warmup_cosine(65, 0.001, 30, 100) - 0.0005).abs() < 1e-15);
        let lrs: Vec<f64> = (30..=100).map(|e| lr_warmup_cosine(e, 1.0, 30, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}

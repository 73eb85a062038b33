/// AdamW with 64-bit moment estimates. Parameter tensors are addressed by
/// their visiting order, which must stay fixed across steps.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Call once per optimizer step before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates tensor number `index` in place.
    pub fn update(&mut self, index: usize, lr: f64, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        assert!(self.step > 0, "begin_step must precede update");
        while self.m.len() <= index {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[index].is_empty() {
            self.m[index] = vec![0.0; params.len()];
            self.v[index] = vec![0.0; params.len()];
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[index], &mut self.v[index]);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub(crate) fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{lr_at, TrainConfig};

    #[test]
    fn converges_on_quadratic() {
        // f(x) = (x - 3)^2
        let cfg = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        let total = 1000;
        let mut opt = AdamW::new(0.0);
        let mut x = [0.0];
        for step in 0..total {
            let g = [2.0 * (x[0] - 3.0)];
            opt.begin_step();
            opt.update(0, lr_at(step + 1, &cfg, total).max(0.0), &mut x, &g);
        }
        assert!((x[0] - 3.0).abs() < 1e-6, "x = {}", x[0]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = vec![3.0, 4.0];
        let mut b = vec![0.0];
        let before = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(before, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-12 && (a[1] - 0.8).abs() < 1e-12);
    }
}

use serde::{Deserialize, Serialize};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One update; `decay_mask[i]` selects parameters subject to weight decay.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64, decay_mask: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let mut p = params[i] as f64;
            if decay_mask[i] {
                p -= lr * self.weight_decay * p;
            }
            p -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            params[i] = p as f32;
        }
    }
}

/// Step decay: `lr0 * gamma^(floor(epoch / every))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub lr0: f64,
    pub gamma: f64,
    pub every: usize,
}

impl StepLr {
    pub fn at(&self, epoch: usize) -> f64 {
        self.lr0 * self.gamma.powi((epoch / self.every.max(1)) as i32)
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Exponential moving average of parameters.
pub fn ema_update(ema: &mut [f32], params: &[f32], decay: f64) {
    let d = decay as f32;
    for (e, p) in ema.iter_mut().zip(params) {
        *e = d * *e + (1.0 - d) * *p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut p = vec![3.0f32, -2.0];
        let mut opt = AdamW::new(2, 0.0);
        for _ in 0..2000 {
            let g: Vec<f32> = p.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut p, &g, 0.01, &[true, true]);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn step_schedule_decays_every_period() {
        let s = StepLr { lr0: 1e-4, gamma: 0.9, every: 100 };
        assert_eq!(s.at(0), 1e-4);
        assert!((s.at(100) - 0.9e-4).abs() < 1e-18);
        assert!((s.at(299) - 0.81e-4).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![3.0f32, 4.0];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }
}

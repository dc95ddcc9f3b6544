//! Adam meta-optimizer over flat parameter slices; deterministic, no
//! weight decay, bias-corrected moments.

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, dim: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    /// Drop moment state, keeping the step count at zero. Used when the
    /// training loop jumps to a snapshot from a different trajectory.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    /// In-place update of `params` from `grads`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer dim mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient dim mismatch");
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // with bias correction, step 1 moves by ~lr * sign(grad)
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), 2);
        let mut p = vec![1.0, -1.0];
        opt.update(&mut p, &[0.5, -2.0]);
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[1] - (-1.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), 1);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = 2.0 * p[0];
            opt.update(&mut p, &[g]);
        }
        assert!(p[0].abs() < 1e-3, "got {}", p[0]);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut opt = Adam::new(AdamConfig::with_lr(0.01), 3);
            let mut p = vec![0.1, 0.2, 0.3];
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64 + 1.0)).collect();
                opt.update(&mut p, &g);
            }
            p
        };
        let (a, b) = (run(), run());
        for i in 0..3 {
            assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }
}

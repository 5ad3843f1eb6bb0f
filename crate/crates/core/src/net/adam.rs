use super::Real;

/// Adam hyperparameters; defaults are lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of one tensor; `step` is the 1-based step index.
pub fn adam_update<T: Real>(value: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamConfig) {
    let b1 = T::from_f64(cfg.beta1).unwrap();
    let b2 = T::from_f64(cfg.beta2).unwrap();
    let one = T::one();
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32)).unwrap();
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32)).unwrap();
    let lr = T::from_f64(cfg.lr).unwrap();
    let eps = T::from_f64(cfg.eps).unwrap();
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let (mut x, mut m, mut v) = ([0.5f64], [0.0], [0.0]);
        adam_update(&mut x, &[1.0], &mut m, &mut v, 1, &cfg);
        let expected = 0.5 - cfg.lr / (1.0 + cfg.eps);
        assert!((x[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_loss_strictly_decreases() {
        // loss(x) = (x - 3)^2 starting from x = 0
        let cfg = AdamConfig::default();
        let (mut x, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        let mut prev = 9.0;
        for step in 1..=10 {
            let g = 2.0 * (x[0] - 3.0);
            adam_update(&mut x, &[g], &mut m, &mut v, step, &cfg);
            let loss = (x[0] - 3.0f64).powi(2);
            assert!(loss < prev, "step {step}: {loss} >= {prev}");
            prev = loss;
        }
    }
}

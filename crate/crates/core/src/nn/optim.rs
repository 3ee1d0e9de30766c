use super::NnError;

/// Optimizer and sampling settings for a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    /// Learning-rate step interval in iterations.
    pub decay_every: usize,
    pub batch: usize,
    /// `(different, same)` parts of each batch.
    pub ratio: (usize, usize),
    pub iterations: usize,
    /// Validation interval in iterations.
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            decay_factor: 0.25,
            decay_every: 50,
            batch: 32,
            ratio: (1, 1),
            iterations: 300,
            validate_every: 50,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 || self.validate_every == 0 {
            return bad("decay and validation intervals must be positive".into());
        }
        let parts = self.ratio.0 + self.ratio.1;
        if parts == 0 || self.ratio.0 == 0 || self.ratio.1 == 0 {
            return bad(format!("ratio parts must be positive, got {:?}", self.ratio));
        }
        if self.batch == 0 || !self.batch.is_multiple_of(parts) {
            return bad(format!("batch {} is not divisible by ratio sum {parts}", self.batch));
        }
        Ok(())
    }
}

/// `lr0 * decay_factor ^ floor(iter / decay_every)`, iterations counted from 0.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    let steps = (iter / cfg.decay_every) as i32;
    cfg.lr0 * cfg.decay_factor.powi(steps)
}

/// `v <- momentum * v + g; p <- p - lr * v`, applied to each parameter array.
pub fn sgd_momentum_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], velocity: &mut [Vec<f64>], lr: f64, momentum: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut f64, v: &mut f64, g: f64, lr: f64, momentum: f64) {
        let mut ps = [*p];
        let mut vs = vec![vec![*v]];
        sgd_momentum_step(&mut [&mut ps[..]], &[vec![g]], &mut vs, lr, momentum);
        *p = ps[0];
        *v = vs[0][0];
    }

    #[test]
    fn plain_sgd() {
        let (mut p, mut v) = (0.0, 0.0);
        step(&mut p, &mut v, 1.0, 0.1, 0.0);
        assert_eq!(p, -0.1);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut p, mut v) = (0.0, 0.0);
        step(&mut p, &mut v, 1.0, 0.1, 0.9);
        assert_eq!(v, 1.0);
        assert!((p + 0.1).abs() < 1e-15);
        step(&mut p, &mut v, 1.0, 0.1, 0.9);
        assert!((v - 1.9).abs() < 1e-15);
        assert!((p + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_converges_geometrically() {
        let (mut p, mut v) = (0.0, 1.0);
        let mut prev_v = v;
        for _ in 0..200 {
            step(&mut p, &mut v, 0.0, 0.1, 0.9);
            assert!((v - 0.9 * prev_v).abs() < 1e-15);
            prev_v = v;
        }
        // p -> -lr * v0 * 0.9 / (1 - 0.9)
        assert!((p + 0.9).abs() < 1e-8);
    }

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig::default();
        for it in 0..50 {
            assert_eq!(lr_schedule(it, &cfg), 0.01);
        }
        assert_eq!(lr_schedule(50, &cfg), 0.0025);
        assert_eq!(lr_schedule(100, &cfg), 0.000625);
        let flat = TrainConfig { decay_factor: 1.0, ..cfg };
        assert_eq!(lr_schedule(12345, &flat), 0.01);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let base = TrainConfig::default();
        for bad in [
            TrainConfig { momentum: 1.0, ..base.clone() },
            TrainConfig { lr0: 0.0, ..base.clone() },
            TrainConfig { decay_factor: 0.0, ..base.clone() },
            TrainConfig { decay_factor: 1.5, ..base.clone() },
            TrainConfig { batch: 33, ..base.clone() },
            TrainConfig { ratio: (0, 1), ..base.clone() },
            TrainConfig { decay_every: 0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}

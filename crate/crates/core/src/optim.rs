/// Per-parameter gradient RMS normalization (RMSprop with bias correction).
#[derive(Clone, Debug)]
pub struct RmsScaler {
    decay: f64,
    eps: f64,
    mean_sq: Vec<f64>,
    steps: i32,
}

impl RmsScaler {
    pub const DEFAULT_DECAY: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self::with_params(len, Self::DEFAULT_DECAY, Self::DEFAULT_EPS)
    }

    pub fn with_params(len: usize, decay: f64, eps: f64) -> Self {
        Self { decay, eps, mean_sq: vec![0.0; len], steps: 0 }
    }

    /// Replace `grad` in place by `grad / (rms + eps)`.
    pub fn normalize(&mut self, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.mean_sq.len());
        self.steps += 1;
        let correction = 1.0 - self.decay.powi(self.steps);
        for (g, m) in grad.iter_mut().zip(self.mean_sq.iter_mut()) {
            *m = self.decay * *m + (1.0 - self.decay) * *g * *g;
            *g /= (*m / correction).sqrt() + self.eps;
        }
    }
}

/// RMS normalization with first-moment averaging (Adam with bias correction).
#[derive(Clone, Debug)]
pub struct MomentumRmsScaler {
    momentum: f64,
    mean: Vec<f64>,
    rms: RmsScaler,
    steps: i32,
}

impl MomentumRmsScaler {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(len: usize) -> Self {
        Self { momentum: Self::DEFAULT_MOMENTUM, mean: vec![0.0; len], rms: RmsScaler::with_params(len, 0.999, RmsScaler::DEFAULT_EPS), steps: 0 }
    }

    /// Replace `grad` in place by the bias-corrected update direction.
    pub fn normalize(&mut self, grad: &mut [f64]) {
        self.steps += 1;
        let correction = 1.0 - self.momentum.powi(self.steps);
        let mut scaled = grad.to_vec();
        self.rms.normalize(&mut scaled);
        for ((g, m), s) in grad.iter_mut().zip(self.mean.iter_mut()).zip(&scaled) {
            *m = self.momentum * *m + (1.0 - self.momentum) * *s;
            *g = *m / correction;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_like() {
        let mut s = RmsScaler::new(3);
        let mut g = vec![4.0, -0.5, 0.0];
        s.normalize(&mut g);
        assert!((g[0] - 1.0).abs() < 1e-6);
        assert!((g[1] + 1.0).abs() < 1e-6);
        assert_eq!(g[2], 0.0);
    }
}

//! Shared optimization plumbing: adaptive-moment gradient steps, validation
//! early stopping, and seed derivation.

/// Adaptive-moment gradient descent over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One in-place update. A zero learning rate leaves the parameters
    /// untouched (moments still advance).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Halts when the observed metric has not improved for `patience`
/// consecutive observations. Lower is better; improvement is strict.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feed one metric value; true means stop now.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Derive a stream-specific seed from a master seed (splitmix64 step).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = AdamState::new(2);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[0.5, -0.5], 0.1);
        assert!(p[0] < 1.0);
        assert!(p[1] > -1.0);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut adam = AdamState::new(3);
        let mut p = vec![0.25, -3.0, 7.5];
        let before = p.clone();
        adam.step(&mut p, &[1.0, 2.0, 3.0], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn early_stop_fires_exactly_after_patience_stale_epochs() {
        // Improves, then goes stale: 0.5, 0.4, 0.4, 0.41, 0.4 -> stale x3
        let mut s = EarlyStopper::new(3);
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.4));
        assert!(!s.observe(0.4)); // stale 1 (not a strict improvement)
        assert!(!s.observe(0.41)); // stale 2
        assert!(s.observe(0.4)); // stale 3 -> stop
    }

    #[test]
    fn early_stop_resets_on_improvement() {
        let mut s = EarlyStopper::new(2);
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.1)); // stale 1
        assert!(!s.observe(0.9)); // improvement resets
        assert!(!s.observe(0.95)); // stale 1
        assert!(s.observe(0.95)); // stale 2 -> stop
        assert_eq!(s.best(), 0.9);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        let c = derive_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, 0));
    }
}

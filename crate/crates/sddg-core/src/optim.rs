//! Adam optimizer over flat parameter vectors.
//!
//! One optimizer state per player; the trainer flattens all LSTM policy
//! parameters of a player into a single vector, steps it, and scatters the
//! result back. Bias-corrected first/second moments, the standard update:
//!
//! ```text
//! m ← β₁ m + (1-β₁) g          v ← β₂ v + (1-β₂) g²
//! θ ← θ - lr · m̂ / (√v̂ + ε)    with m̂ = m/(1-β₁ᵗ), v̂ = v/(1-β₂ᵗ)
//! ```

use crate::error::SddgError;

/// Adam state for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    /// Standard coefficients: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(dim: usize) -> Self {
        Self::with_hyperparams(dim, 0.9, 0.999, 1e-8)
    }

    /// Custom coefficients. Panics on out-of-range values; the training
    /// config validates before construction, so a panic here means a caller
    /// bypassed validation.
    pub fn with_hyperparams(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        assert!((0.0..1.0).contains(&beta1), "adam: beta1 must be in [0, 1), got {beta1}");
        assert!((0.0..1.0).contains(&beta2), "adam: beta2 must be in [0, 1), got {beta2}");
        assert!(eps.is_finite() && eps > 0.0, "adam: eps must be positive, got {eps}");
        AdamState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, beta1, beta2, eps }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One Adam update of `params` in place.
    ///
    /// Rejects non-finite gradients (a training-divergence symptom that
    /// must surface as an error, not as silent NaN propagation).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), SddgError> {
        assert_eq!(params.len(), self.m.len(), "adam: params dim");
        assert_eq!(grads.len(), self.m.len(), "adam: grads dim");
        if !crate::linalg::all_finite(grads) {
            return Err(SddgError::NonFiniteGradient(format!(
                "adam step {}: gradient contains NaN/Inf",
                self.t + 1
            )));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powf(self.t as f64);
        let b2t = 1.0 - self.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        if !crate::linalg::all_finite(params) {
            return Err(SddgError::NonFiniteGradient(format!(
                "adam step {}: parameters became NaN/Inf",
                self.t
            )));
        }
        Ok(())
    }
}

/// Scale `grads` so its global 2-norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for &g in grads.iter() {
        sq += g * g;
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

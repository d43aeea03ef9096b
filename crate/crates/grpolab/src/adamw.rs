//! From-scratch AdamW with inspectable moments.
//!
//! Two update conventions are supported:
//!
//! - `standard`: the canonical recurrences followed by bias correction,
//!
//!   ```text
//!   m ← β₁m + (1-β₁)g        m̂ = m/(1-β₁^t)
//!   v ← β₂v + (1-β₂)g²       v̂ = v/(1-β₂^t)
//!   θ ← θ + ξ·m̂/(√v̂+ε) - ξλθ        (ascent form)
//!   ```
//!
//! - `paper-literal`: recurrences with the bias correction folded inline and
//!   a weight-decay term that *grows* the parameters,
//!
//!   ```text
//!   m ← β₁m/(1-β₁^{t-1}) + (1-β₁)g/(1-β₁^t)
//!   v ← β₂v/(1-β₂^{t-1}) + (1-β₂)g²/(1-β₂^t)
//!   θ ← θ + ξ·m/(√v+ε) + ξλθ
//!   ```
//!
//! The closed-form carryover coefficients quantify how much preconditioned
//! update magnitude survives after the incoming gradient is suppressed (for
//! example by ratio clipping): with a constant gradient up to step `T-1` and
//! zero afterwards, the first zero-gradient step still moves the parameters
//! by a factor
//!
//! ```text
//! carryover(T) = β₁·(1-β₁^{T-1})/(1-β₁^T) · sqrt( (1/β₂)·(1-β₂^T)/(1-β₂^{T-1}) )
//! ```
//!
//! of the last driven step, tending to β₁/√β₂ as T grows; `k` further
//! zero-gradient steps multiply on the corresponding powers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdamWError {
    #[error("gradient length {got} does not match parameter length {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("carryover coefficients require at least one driven step before the zero-gradient step (T = {0}, need T >= 2)")]
    TooFewSteps(u64),
    #[error("hyperparameter out of range: {0}")]
    BadHyper(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    #[default]
    Standard,
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Gradient ascent on an objective J; the preconditioned term is added.
    #[default]
    AscentOnObjective,
    /// Gradient descent on a loss; the preconditioned term is subtracted.
    DescentOnLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub convention: Convention,
    pub direction: Direction,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            convention: Convention::Standard,
            direction: Direction::AscentOnObjective,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<(), AdamWError> {
        if !(self.lr > 0.0) {
            return Err(AdamWError::BadHyper(format!("lr must be positive (got {})", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(AdamWError::BadHyper(format!(
                    "{name} must lie in [0, 1) (got {b})"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(AdamWError::BadHyper(format!(
                "eps must be positive (got {})",
                self.eps
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(AdamWError::BadHyper(format!(
                "weight_decay must be nonnegative (got {})",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moment vectors and the step counter, aligned with the
/// flattened parameter order of whatever the optimizer is driving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn zeros(param_count: usize) -> Self {
        AdamWState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Insert zeroed moment slots at `offset`, used when the parameter vector
    /// grows (a brand-new parameter behaves exactly as if it had existed all
    /// along with zero gradient).
    pub fn insert_zero_block(&mut self, offset: usize, len: usize) {
        self.m.splice(offset..offset, std::iter::repeat(0.0).take(len));
        self.v.splice(offset..offset, std::iter::repeat(0.0).take(len));
    }

    /// Bias-corrected moments under the standard convention. For the
    /// paper-literal convention the stored moments are already corrected.
    pub fn bias_corrected(&self, hyper: &AdamWHyper) -> (Vec<f64>, Vec<f64>) {
        match hyper.convention {
            Convention::Standard => {
                let c1 = 1.0 - hyper.beta1.powi(self.t as i32);
                let c2 = 1.0 - hyper.beta2.powi(self.t as i32);
                (
                    self.m.iter().map(|m| m / c1).collect(),
                    self.v.iter().map(|v| v / c2).collect(),
                )
            }
            Convention::PaperLiteral => (self.m.clone(), self.v.clone()),
        }
    }

    /// The preconditioned direction m̂/(√v̂+ε) at the current state.
    pub fn preconditioned(&self, hyper: &AdamWHyper) -> Vec<f64> {
        let (m_hat, v_hat) = self.bias_corrected(hyper);
        m_hat
            .iter()
            .zip(&v_hat)
            .map(|(m, v)| m / (v.sqrt() + hyper.eps))
            .collect()
    }
}

/// The optimizer: hyperparameters plus mutable state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper, param_count: usize) -> Self {
        AdamW {
            hyper,
            state: AdamWState::zeros(param_count),
        }
    }

    /// One update of `theta` in place from gradient `grad`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<(), AdamWError> {
        if grad.len() != theta.len() || theta.len() != self.state.len() {
            return Err(AdamWError::LengthMismatch {
                got: grad.len(),
                expected: self.state.len(),
            });
        }
        let h = &self.hyper;
        let dir = match h.direction {
            Direction::AscentOnObjective => 1.0,
            Direction::DescentOnLoss => -1.0,
        };
        self.state.t += 1;
        let t = self.state.t;
        match h.convention {
            Convention::Standard => {
                let c1 = 1.0 - h.beta1.powi(t as i32);
                let c2 = 1.0 - h.beta2.powi(t as i32);
                for j in 0..theta.len() {
                    let g = grad[j];
                    self.state.m[j] = h.beta1 * self.state.m[j] + (1.0 - h.beta1) * g;
                    self.state.v[j] = h.beta2 * self.state.v[j] + (1.0 - h.beta2) * g * g;
                    let m_hat = self.state.m[j] / c1;
                    let v_hat = self.state.v[j] / c2;
                    theta[j] += dir * h.lr * m_hat / (v_hat.sqrt() + h.eps)
                        - h.lr * h.weight_decay * theta[j];
                }
            }
            Convention::PaperLiteral => {
                // At t = 1 the previous-moment term is 0/0; the moments start
                // at zero, so it contributes nothing.
                let prev1 = 1.0 - h.beta1.powi(t as i32 - 1);
                let prev2 = 1.0 - h.beta2.powi(t as i32 - 1);
                let cur1 = 1.0 - h.beta1.powi(t as i32);
                let cur2 = 1.0 - h.beta2.powi(t as i32);
                for j in 0..theta.len() {
                    let g = grad[j];
                    let m_prev = if t == 1 {
                        0.0
                    } else {
                        h.beta1 * self.state.m[j] / prev1
                    };
                    let v_prev = if t == 1 {
                        0.0
                    } else {
                        h.beta2 * self.state.v[j] / prev2
                    };
                    self.state.m[j] = m_prev + (1.0 - h.beta1) * g / cur1;
                    self.state.v[j] = v_prev + (1.0 - h.beta2) * g * g / cur2;
                    theta[j] += dir * h.lr * self.state.m[j] / (self.state.v[j].sqrt() + h.eps)
                        + h.lr * h.weight_decay * theta[j];
                }
            }
        }
        Ok(())
    }
}

/// Preconditioned update magnitude surviving at the first zero-gradient step,
/// relative to the last driven step, after `t - 1` constant-gradient steps.
pub fn momentum_carryover(t: u64, beta1: f64, beta2: f64) -> Result<f64, AdamWError> {
    momentum_carryover_after(t, 0, beta1, beta2)
}

/// The same ratio `k` zero-gradient steps past the boundary:
///
/// ```text
/// β₁^{k+1}·(1-β₁^{T-1})/(1-β₁^{T+k}) · sqrt( (1/β₂^{k+1})·(1-β₂^{T+k})/(1-β₂^{T-1}) )
/// ```
///
/// tending to (β₁/√β₂)^{k+1} as T grows.
pub fn momentum_carryover_after(t: u64, k: u64, beta1: f64, beta2: f64) -> Result<f64, AdamWError> {
    if t < 2 {
        return Err(AdamWError::TooFewSteps(t));
    }
    let tm1 = (t - 1) as i32;
    let tpk = (t + k) as i32;
    let first = beta1.powi(k as i32 + 1) * (1.0 - beta1.powi(tm1)) / (1.0 - beta1.powi(tpk));
    let second = ((1.0 / beta2.powi(k as i32 + 1)) * (1.0 - beta2.powi(tpk))
        / (1.0 - beta2.powi(tm1)))
    .sqrt();
    Ok(first * second)
}

/// Correction factor `(√v_pre + ε)/(√v_post + ε)` modulating the carryover
/// when ε is not negligible against the second moment.
pub fn epsilon_damping(v_pre: f64, v_post: f64, eps: f64) -> f64 {
    (v_pre.sqrt() + eps) / (v_post.sqrt() + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(lr: f64, beta1: f64, beta2: f64, eps: f64, wd: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay: wd,
            convention: Convention::Standard,
            direction: Direction::AscentOnObjective,
        }
    }

    #[test]
    fn first_step_bias_correction_cancels() {
        let h = hyper(0.1, 0.9, 0.95, 1e-8, 0.0);
        let mut opt = AdamW::new(h, 1);
        let mut theta = vec![0.0];
        opt.step(&mut theta, &[1.0]).unwrap();
        let (m_hat, v_hat) = opt.state.bias_corrected(&h);
        assert!((m_hat[0] - 1.0).abs() < 1e-15);
        assert!((v_hat[0] - 1.0).abs() < 1e-15);
        assert!((theta[0] - 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_moments_geometrically() {
        let h = hyper(0.01, 0.9, 0.95, 1e-8, 0.0);
        let mut opt = AdamW::new(h, 2);
        let mut theta = vec![0.0, 0.0];
        for _ in 0..10 {
            opt.step(&mut theta, &[1.0, -0.5]).unwrap();
        }
        let m_before = opt.state.m.clone();
        let v_before = opt.state.v.clone();
        opt.step(&mut theta, &[0.0, 0.0]).unwrap();
        for j in 0..2 {
            assert!((opt.state.m[j] - 0.9 * m_before[j]).abs() < 1e-16);
            assert!((opt.state.v[j] - 0.95 * v_before[j]).abs() < 1e-16);
        }
        // k further zero steps: m_{T+k} = β₁^{k+1} m_{T-1}, iterative reference
        let mut expected = m_before.clone();
        for e in &mut expected {
            *e *= 0.9;
        }
        for _ in 0..4 {
            opt.step(&mut theta, &[0.0, 0.0]).unwrap();
            for e in &mut expected {
                *e *= 0.9;
            }
        }
        for j in 0..2 {
            assert!((opt.state.m[j] - expected[j]).abs() <= 1e-12 * expected[j].abs());
            // closed-form cross-check
            let closed = 0.9f64.powi(5) * m_before[j];
            assert!((opt.state.m[j] - closed).abs() <= 1e-12 * closed.abs());
        }
    }

    #[test]
    fn matches_straight_line_recurrence_oracle() {
        // A literal transcription of the update rule, kept separate from the
        // implementation on purpose.
        fn oracle(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Vec<f64> {
            let mut theta = 0.0;
            let mut m = 0.0;
            let mut v = 0.0;
            let mut out = Vec::new();
            for (i, g) in grads.iter().enumerate() {
                let t = (i + 1) as i32;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let m_hat = m / (1.0 - b1.powi(t));
                let v_hat = v / (1.0 - b2.powi(t));
                theta = theta + lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * theta;
                out.push(theta);
            }
            out
        }
        let grads: Vec<f64> = std::iter::repeat(0.7)
            .take(100)
            .chain(std::iter::repeat(0.0).take(20))
            .collect();
        let expected = oracle(&grads, 0.02, 0.9, 0.95, 1e-8, 0.01);
        let h = hyper(0.02, 0.9, 0.95, 1e-8, 0.01);
        let mut opt = AdamW::new(h, 1);
        let mut theta = vec![0.0];
        for (g, e) in grads.iter().zip(&expected) {
            opt.step(&mut theta, &[*g]).unwrap();
            assert!(
                (theta[0] - e).abs() < 1e-14,
                "drift {} vs oracle {}",
                theta[0],
                e
            );
        }
    }

    #[test]
    fn paper_literal_first_step_matches_standard() {
        // Both conventions give m̂=g, v̂=g² at t=1.
        let mut std_opt = AdamW::new(hyper(0.1, 0.9, 0.95, 1e-8, 0.0), 1);
        let mut lit = hyper(0.1, 0.9, 0.95, 1e-8, 0.0);
        lit.convention = Convention::PaperLiteral;
        let mut lit_opt = AdamW::new(lit, 1);
        let mut ta = vec![0.5];
        let mut tb = vec![0.5];
        std_opt.step(&mut ta, &[2.0]).unwrap();
        lit_opt.step(&mut tb, &[2.0]).unwrap();
        assert!((ta[0] - tb[0]).abs() < 1e-15);
    }

    #[test]
    fn paper_literal_weight_decay_grows_parameters() {
        let mut h = hyper(0.1, 0.9, 0.95, 1e-8, 0.5);
        h.convention = Convention::PaperLiteral;
        let mut opt = AdamW::new(h, 1);
        let mut theta = vec![1.0];
        opt.step(&mut theta, &[0.0]).unwrap();
        // zero gradient: only the +ξλθ term acts
        assert!((theta[0] - 1.05).abs() < 1e-15);

        let mut hs = hyper(0.1, 0.9, 0.95, 1e-8, 0.5);
        hs.convention = Convention::Standard;
        let mut opt_s = AdamW::new(hs, 1);
        let mut theta_s = vec![1.0];
        opt_s.step(&mut theta_s, &[0.0]).unwrap();
        assert!((theta_s[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn moment_scaling_is_exact_for_both_conventions() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let grads: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        for convention in [Convention::Standard, Convention::PaperLiteral] {
            for phi in [0.1, 10.0, 1000.0] {
                let mut h = hyper(0.01, 0.9, 0.95, 1e-12, 0.0);
                h.convention = convention;
                let mut base = AdamW::new(h, 4);
                let mut scaled = AdamW::new(h, 4);
                let mut ta = vec![0.0; 4];
                let mut tb = vec![0.0; 4];
                for g in &grads {
                    let gs: Vec<f64> = g.iter().map(|x| phi * x).collect();
                    base.step(&mut ta, g).unwrap();
                    scaled.step(&mut tb, &gs).unwrap();
                }
                for j in 0..4 {
                    let m_rel = (scaled.state.m[j] - phi * base.state.m[j]).abs()
                        / (phi * base.state.m[j]).abs().max(1e-300);
                    let v_rel = (scaled.state.v[j] - phi * phi * base.state.v[j]).abs()
                        / (phi * phi * base.state.v[j]).abs().max(1e-300);
                    assert!(m_rel < 1e-12, "m scaling violated: rel {m_rel}");
                    assert!(v_rel < 1e-12, "v scaling violated: rel {v_rel}");
                }
            }
        }
    }

    #[test]
    fn update_invariance_under_gradient_scaling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let grads: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        for phi in [0.1, 10.0, 1000.0] {
            let h = hyper(0.01, 0.9, 0.95, 1e-12, 0.0);
            let mut base = AdamW::new(h, 3);
            let mut scaled = AdamW::new(h, 3);
            let mut ta = vec![0.0; 3];
            let mut tb = vec![0.0; 3];
            let mut max_diff = 0.0f64;
            for g in &grads {
                let gs: Vec<f64> = g.iter().map(|x| phi * x).collect();
                base.step(&mut ta, g).unwrap();
                scaled.step(&mut tb, &gs).unwrap();
                for j in 0..3 {
                    max_diff = max_diff.max((ta[j] - tb[j]).abs());
                }
            }
            assert!(max_diff < 1e-9, "phi {phi}: divergence {max_diff}");
        }
    }

    #[test]
    fn carryover_coefficient_values() {
        // no momentum, no carryover
        for t in [2, 5, 100] {
            assert_eq!(momentum_carryover(t, 0.0, 0.95).unwrap(), 0.0);
        }
        // saturation toward β₁/√β₂
        let c = momentum_carryover(10_000, 0.9, 0.95).unwrap();
        assert!((c - 0.9233805168766388).abs() < 1e-12);
        // k = 0 coincides with the single-step form
        for t in [2, 10, 50] {
            let a = momentum_carryover(t, 0.9, 0.95).unwrap();
            let b = momentum_carryover_after(t, 0, 0.9, 0.95).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // large-T k=4 approaches (β₁/√β₂)^5
        let c5 = momentum_carryover_after(10_000, 4, 0.9, 0.95).unwrap();
        assert!((c5 - 0.9233805168766388f64.powi(5)).abs() < 1e-12);
        assert!(momentum_carryover(1, 0.9, 0.95).is_err());
    }

    #[test]
    fn carryover_matches_simulated_ratio() {
        for (b1, b2) in [(0.9, 0.95), (0.5, 0.5)] {
            for t_end in [10u64, 50] {
                let h = hyper(0.01, b1, b2, 1e-12, 0.0);
                let mut opt = AdamW::new(h, 1);
                let mut theta = vec![0.0];
                let mut norms = vec![f64::NAN]; // index by step number
                for step in 1..=(t_end + 2) {
                    let g = if step <= t_end - 1 { 1.0 } else { 0.0 };
                    opt.step(&mut theta, &[g]).unwrap();
                    norms.push(opt.state.preconditioned(&h)[0].abs());
                }
                for k in 0..=2u64 {
                    let measured = norms[(t_end + k) as usize] / norms[(t_end - 1) as usize];
                    let predicted = momentum_carryover_after(t_end, k, b1, b2).unwrap();
                    assert!(
                        (measured - predicted).abs() < 1e-10,
                        "T={t_end} k={k}: measured {measured} predicted {predicted}"
                    );
                }
            }
        }
    }

    #[test]
    fn epsilon_damping_values() {
        assert_eq!(epsilon_damping(4.0, 1.0, 0.0), 2.0);
        assert_eq!(epsilon_damping(0.7, 0.7, 123.0), 1.0);
        let dominated = epsilon_damping(1e-12, 1e-14, 1e-5);
        assert!((dominated - 1.0891089108910892).abs() < 1e-12);
        let bare = epsilon_damping(1e-12, 1e-14, 0.0);
        assert!((bare - 10.0).abs() < 1e-12);
    }

    #[test]
    fn state_growth_inserts_zero_slots() {
        let mut st = AdamWState::zeros(4);
        st.m = vec![1.0, 2.0, 3.0, 4.0];
        st.v = vec![0.1, 0.2, 0.3, 0.4];
        st.insert_zero_block(2, 2);
        assert_eq!(st.m, vec![1.0, 2.0, 0.0, 0.0, 3.0, 4.0]);
        assert_eq!(st.v, vec![0.1, 0.2, 0.0, 0.0, 0.3, 0.4]);
    }
}

//! A desk-scale laboratory for group-based policy-optimization training
//! dynamics.
//!
//! The crate implements the clipped group-relative surrogate objective
//!
//! ```text
//! J(θ) = Σ_i Σ_t α_{i,t} · min( s_{i,t}(θ)·A_i,
//!                               clip(s_{i,t}(θ), 1-ε_low, 1+ε_up)·A_i )
//!        - β·R(θ)
//! ```
//!
//! over a tabular autoregressive softmax policy, together with ten published
//! instantiations of the weight rule `α`, the ratio transform `s`, and the
//! regularizer `R`. Because the policy is a prefix-indexed logit table, every
//! gradient is exactly computable, so the optimizer-level claims about this
//! family (shared-prefix weighting bias, reward-scaling invariance under
//! AdamW, and momentum carryover past the clip boundary) can be checked
//! numerically against closed forms instead of eyeballed from training
//! curves.
//!
//! Module map:
//!
//! - [`group`] — completion groups, rewards, centered advantages
//! - [`policy`] — the tabular softmax policy and its analytic score function
//! - [`surrogate`] — objective value, branch logic, exact gradient, regularizers
//! - [`zoo`] — the registry of algorithm configurations
//! - [`adamw`] — a from-scratch AdamW with inspectable moments
//! - [`lab`] — experiment procedures and oracles (finite differences, etc.)
//! - [`harness`] — config files, CLI, report emission

pub mod adamw;
pub mod group;
pub mod harness;
pub mod lab;
pub mod policy;
pub mod surrogate;
pub mod zoo;

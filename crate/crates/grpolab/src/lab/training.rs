//! The outer/inner training loop: sample a group, freeze the sampling-time
//! log-probabilities, apply μ surrogate-gradient AdamW steps, repeat.
//!
//! Sampling can materialize new contexts, which grows the parameter vector;
//! the optimizer state is realigned by splicing zero moment slots at the new
//! positions (a brand-new parameter is indistinguishable from one that
//! existed all along with zero gradient). Groups with σ(r) = 0 carry no
//! learning signal and are skipped with a warning.

use std::sync::Arc;

use crate::adamw::{AdamW, AdamWHyper, AdamWState};
use crate::group::{SampledGroup, TokenSeq};
use crate::policy::ToyPolicy;
use crate::surrogate::{surrogate_gradient, surrogate_value, RegularizerKind};
use crate::zoo::AlgoConfig;

use super::{LabError, SyntheticReward};

#[derive(Debug, Clone)]
pub struct TrainingSettings {
    pub prompt: TokenSeq,
    pub group_size: usize,
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct InnerStepLog {
    /// Global inner-step counter, 1-based.
    pub step: usize,
    pub objective: f64,
    pub advantage_term: f64,
    pub regularizer_term: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub m_norm: f64,
    pub v_norm: f64,
    pub delta_theta_norm: f64,
}

#[derive(Debug, Clone)]
pub struct OuterIterLog {
    pub iter: usize,
    pub skipped_degenerate: bool,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub group: SampledGroup,
    pub inner: Vec<InnerStepLog>,
}

#[derive(Debug, Clone)]
pub struct TrainingTrajectory {
    /// Parameter vector before any step, then after every inner step. Note
    /// the vector length can grow across outer iterations as new contexts
    /// materialize.
    pub theta_steps: Vec<Vec<f64>>,
    pub outer: Vec<OuterIterLog>,
    pub final_policy: ToyPolicy,
    pub optimizer_state: AdamWState,
    pub layout: Vec<Vec<u32>>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn needs_reference(config: &AlgoConfig) -> bool {
    config.regularizer.beta != 0.0
        && matches!(
            config.regularizer.kind,
            RegularizerKind::Kl | RegularizerKind::RatioWeightedKl
        )
}

/// Splice zero moment slots wherever the policy has grown new contexts since
/// `layout` was captured.
fn realign_state(state: &mut AdamWState, layout: &mut Vec<Vec<u32>>, policy: &ToyPolicy) {
    let new_keys: Vec<Vec<u32>> = policy.context_keys().cloned().collect();
    if new_keys.len() == layout.len() {
        return;
    }
    let v = policy.vocab_size() as usize;
    let mut old_iter = layout.iter().peekable();
    for (idx, key) in new_keys.iter().enumerate() {
        match old_iter.peek() {
            Some(old) if *old == key => {
                old_iter.next();
            }
            _ => state.insert_zero_block(idx * v, v),
        }
    }
    *layout = new_keys;
}

/// Run `outer_iters` iterations of sample → reward → μ inner AdamW steps.
/// If the config's regularizer needs a reference policy and none is set, the
/// starting policy is snapshotted as the reference. Deterministic for a fixed
/// seed.
pub fn run_training(
    policy: &mut ToyPolicy,
    config: &AlgoConfig,
    reward: &SyntheticReward,
    hyper: &AdamWHyper,
    settings: &TrainingSettings,
) -> Result<TrainingTrajectory, LabError> {
    hyper.validate()?;
    let mut config = config.clone();
    if needs_reference(&config) && config.regularizer.reference.is_none() {
        config.regularizer.reference = Some(Arc::new(policy.clone()));
    }
    let mut layout: Vec<Vec<u32>> = policy.context_keys().cloned().collect();
    let mut opt = AdamW::new(*hyper, policy.param_count());
    let mut theta_steps = vec![policy.params()];
    let mut outer = Vec::with_capacity(settings.outer_iters);
    let mut step_counter = 0usize;
    for iter in 0..settings.outer_iters {
        let mut group = policy.sample_group(
            &settings.prompt,
            settings.group_size,
            settings.seed.wrapping_add(iter as u64),
        )?;
        realign_state(&mut opt.state, &mut layout, policy);
        reward.assign(&mut group)?;
        let rewards = group.rewards()?;
        let reward_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let reward_std = group.reward_std()?;
        let skipped_degenerate = reward_std == 0.0;
        let mut inner = Vec::new();
        if skipped_degenerate {
            log::warn!("outer iter {iter}: degenerate group (σ(r) = 0), skipping inner steps");
        } else {
            for _ in 0..settings.inner_steps {
                let report = surrogate_value(&group, policy, &config)?;
                let grad = surrogate_gradient(&group, policy, &config)?;
                let mut theta = policy.params();
                let before = theta.clone();
                opt.step(&mut theta, grad.values())?;
                policy.set_params(&theta)?;
                step_counter += 1;
                let delta: Vec<f64> = theta
                    .iter()
                    .zip(&before)
                    .map(|(a, b)| a - b)
                    .collect();
                inner.push(InnerStepLog {
                    step: step_counter,
                    objective: report.objective,
                    advantage_term: report.advantage_term,
                    regularizer_term: report.regularizer_term,
                    clip_fraction: report.clip_fraction(),
                    mean_ratio: report.mean_ratio(),
                    m_norm: l2(&opt.state.m),
                    v_norm: l2(&opt.state.v),
                    delta_theta_norm: l2(&delta),
                });
                theta_steps.push(theta);
            }
        }
        outer.push(OuterIterLog {
            iter,
            skipped_degenerate,
            reward_mean,
            reward_std,
            group,
            inner,
        });
    }
    Ok(TrainingTrajectory {
        theta_steps,
        outer,
        final_policy: policy.clone(),
        optimizer_state: opt.state,
        layout,
    })
}

/// Time-series emission; the column order is part of the report contract:
/// `step,objective,advantage_term,regularizer_term,clip_fraction,m_norm,v_norm,delta_theta_norm,mean_ratio`.
pub fn write_training_csv(
    trajectory: &TrainingTrajectory,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(
        out,
        "step,objective,advantage_term,regularizer_term,clip_fraction,m_norm,v_norm,delta_theta_norm,mean_ratio"
    )?;
    for outer in &trajectory.outer {
        for s in &outer.inner {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                s.step,
                s.objective,
                s.advantage_term,
                s.regularizer_term,
                s.clip_fraction,
                s.m_norm,
                s.v_norm,
                s.delta_theta_norm,
                s.mean_ratio
            )?;
        }
    }
    Ok(())
}

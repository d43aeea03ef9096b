//! Completion groups, rewards, and group-centered advantages.
//!
//! The unit consumed by the surrogate objective is a group of `G` completions
//! sampled from one prompt. Each completion `i` carries a scalar reward `r_i`
//! and a centered advantage
//!
//! ```text
//! A_i = r_i - mean(r)
//! ```
//!
//! so the advantages of a group always sum to zero. The population standard
//! deviation `σ(r)` of the group rewards is kept alongside because several
//! weight rules divide by it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GroupError {
    #[error("empty group")]
    EmptyGroup,
    #[error("scale must be positive (got {0})")]
    NonPositiveScale(f64),
    #[error("token sequence must be nonempty")]
    EmptyTokenSeq,
    #[error("reward count {got} does not match group size {expected}")]
    RewardCountMismatch { got: usize, expected: usize },
    #[error("old log-probabilities for completion {index} have {got} entries, expected {expected}")]
    LogProbLengthMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("log-probability {value} at completion {index} is positive")]
    PositiveLogProb { index: usize, value: f64 },
    #[error("rewards have not been assigned to this group")]
    RewardsUnset,
    #[error("malformed group record: {0}")]
    MalformedRecord(String),
}

/// An ordered, nonempty sequence of token ids.
///
/// Used both for prompts and for completions; validity against a vocabulary
/// size is checked by the policy at evaluation time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self, GroupError> {
        if tokens.is_empty() {
            return Err(GroupError::EmptyTokenSeq);
        }
        Ok(TokenSeq(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty sequences
    }

    pub fn max_token(&self) -> u32 {
        *self.0.iter().max().expect("nonempty")
    }

    /// The sequence extended by one token (prompt ⊕ generated prefix).
    pub fn extended(&self, token: u32) -> TokenSeq {
        let mut t = self.0.clone();
        t.push(token);
        TokenSeq(t)
    }
}

/// Subtract the group mean from every reward.
pub fn center_advantages(rewards: &[f64]) -> Result<Vec<f64>, GroupError> {
    if rewards.is_empty() {
        return Err(GroupError::EmptyGroup);
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Multiply every reward by a positive factor `phi`.
///
/// Centering the scaled rewards yields exactly `phi` times the centered
/// originals, which is what makes reward scale an interesting experimental
/// variable for the optimizer.
pub fn scale_rewards(rewards: &[f64], phi: f64) -> Result<Vec<f64>, GroupError> {
    if !(phi > 0.0) {
        return Err(GroupError::NonPositiveScale(phi));
    }
    Ok(rewards.iter().map(|r| phi * r).collect())
}

/// Population (divide-by-G) standard deviation of the group rewards.
///
/// Zero is a valid return for a degenerate group where all rewards coincide;
/// how weight rules that divide by σ(r) treat that case is decided in the
/// algorithm registry.
pub fn group_reward_std(rewards: &[f64]) -> Result<f64, GroupError> {
    if rewards.is_empty() {
        return Err(GroupError::EmptyGroup);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// A prompt plus `G` completions with rewards, centered advantages, and the
/// per-token log-probabilities frozen from the sampling-time policy.
///
/// Immutable after rewards are assigned; safe to share across concurrently
/// running experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampledGroup {
    prompt: TokenSeq,
    completions: Vec<TokenSeq>,
    old_logprobs: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
    reward_std: f64,
}

impl SampledGroup {
    /// Assemble a group from already-sampled parts. Rewards start unset.
    pub fn from_parts(
        prompt: TokenSeq,
        completions: Vec<TokenSeq>,
        old_logprobs: Vec<Vec<f64>>,
    ) -> Result<Self, GroupError> {
        if completions.is_empty() {
            return Err(GroupError::EmptyGroup);
        }
        if old_logprobs.len() != completions.len() {
            return Err(GroupError::RewardCountMismatch {
                got: old_logprobs.len(),
                expected: completions.len(),
            });
        }
        for (i, (c, lp)) in completions.iter().zip(&old_logprobs).enumerate() {
            if lp.len() != c.len() {
                return Err(GroupError::LogProbLengthMismatch {
                    index: i,
                    got: lp.len(),
                    expected: c.len(),
                });
            }
            if let Some(&bad) = lp.iter().find(|v| **v > 0.0) {
                return Err(GroupError::PositiveLogProb {
                    index: i,
                    value: bad,
                });
            }
        }
        Ok(SampledGroup {
            prompt,
            completions,
            old_logprobs,
            rewards: Vec::new(),
            advantages: Vec::new(),
            reward_std: 0.0,
        })
    }

    /// Assign rewards and derive advantages and σ(r).
    pub fn set_rewards(&mut self, rewards: &[f64]) -> Result<(), GroupError> {
        if rewards.len() != self.completions.len() {
            return Err(GroupError::RewardCountMismatch {
                got: rewards.len(),
                expected: self.completions.len(),
            });
        }
        self.advantages = center_advantages(rewards)?;
        self.reward_std = group_reward_std(rewards)?;
        self.rewards = rewards.to_vec();
        Ok(())
    }

    pub fn prompt(&self) -> &TokenSeq {
        &self.prompt
    }

    pub fn completions(&self) -> &[TokenSeq] {
        &self.completions
    }

    pub fn completion(&self, i: usize) -> &TokenSeq {
        &self.completions[i]
    }

    pub fn old_logprobs(&self) -> &[Vec<f64>] {
        &self.old_logprobs
    }

    pub fn group_size(&self) -> usize {
        self.completions.len()
    }

    pub fn has_rewards(&self) -> bool {
        !self.rewards.is_empty()
    }

    pub fn rewards(&self) -> Result<&[f64], GroupError> {
        if self.rewards.is_empty() {
            return Err(GroupError::RewardsUnset);
        }
        Ok(&self.rewards)
    }

    pub fn advantages(&self) -> Result<&[f64], GroupError> {
        if self.rewards.is_empty() {
            return Err(GroupError::RewardsUnset);
        }
        Ok(&self.advantages)
    }

    pub fn reward_std(&self) -> Result<f64, GroupError> {
        if self.rewards.is_empty() {
            return Err(GroupError::RewardsUnset);
        }
        Ok(self.reward_std)
    }

    /// Total token count Σ|o_i| across the group.
    pub fn total_len(&self) -> usize {
        self.completions.iter().map(|c| c.len()).sum()
    }

    /// A copy of this group with rewards scaled by `phi` and advantages
    /// recomputed from the scaled rewards.
    pub fn with_scaled_rewards(&self, phi: f64) -> Result<SampledGroup, GroupError> {
        let scaled = scale_rewards(self.rewards()?, phi)?;
        let mut g = self.clone();
        g.set_rewards(&scaled)?;
        Ok(g)
    }

    /// Check the structural invariants; the centering tolerance scales with
    /// the reward magnitude.
    pub fn validate(&self) -> Result<(), GroupError> {
        if self.has_rewards() {
            let scale = self
                .rewards
                .iter()
                .fold(1.0_f64, |m, r| m.max(r.abs()))
                * self.group_size() as f64;
            let sum: f64 = self.advantages.iter().sum();
            if sum.abs() > 1e-12 * scale {
                return Err(GroupError::MalformedRecord(format!(
                    "advantages sum to {sum}, expected 0"
                )));
            }
            if self.reward_std < 0.0 {
                return Err(GroupError::MalformedRecord("negative reward std".into()));
            }
        }
        for (i, (c, lp)) in self.completions.iter().zip(&self.old_logprobs).enumerate() {
            if lp.len() != c.len() {
                return Err(GroupError::LogProbLengthMismatch {
                    index: i,
                    got: lp.len(),
                    expected: c.len(),
                });
            }
        }
        Ok(())
    }

    /// Line-oriented record emission for experiment audit files.
    ///
    /// One `group` header line followed by one `completion` line per member:
    ///
    /// ```text
    /// group prompt=0,1 size=2
    /// completion tokens=2,3 reward=1 old_logprobs=-1.0986122886681098e0,-4.5e-2
    /// ```
    pub fn write_records(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            out,
            "group prompt={} size={}",
            join_u32(self.prompt.tokens()),
            self.group_size()
        )?;
        for i in 0..self.group_size() {
            let reward = if self.has_rewards() {
                format!(" reward={:e}", self.rewards[i])
            } else {
                String::new()
            };
            writeln!(
                out,
                "completion tokens={}{} old_logprobs={}",
                join_u32(self.completions[i].tokens()),
                reward,
                join_f64(&self.old_logprobs[i]),
            )?;
        }
        Ok(())
    }

    /// Parse one group back from the record format of [`write_records`].
    ///
    /// [`write_records`]: SampledGroup::write_records
    pub fn parse_records(lines: &[&str]) -> Result<SampledGroup, GroupError> {
        let bad = |m: &str| GroupError::MalformedRecord(m.to_string());
        let header = lines.first().ok_or_else(|| bad("missing group header"))?;
        let rest = header
            .strip_prefix("group prompt=")
            .ok_or_else(|| bad("missing `group` header"))?;
        let (prompt_str, size_str) = rest
            .split_once(" size=")
            .ok_or_else(|| bad("missing size field"))?;
        let prompt = TokenSeq::new(parse_u32_list(prompt_str)?)?;
        let size: usize = size_str
            .trim()
            .parse()
            .map_err(|_| bad("unparsable group size"))?;
        if lines.len() != size + 1 {
            return Err(bad("completion line count does not match group size"));
        }
        let mut completions = Vec::with_capacity(size);
        let mut rewards = Vec::new();
        let mut old_logprobs = Vec::with_capacity(size);
        for line in &lines[1..] {
            let rest = line
                .strip_prefix("completion tokens=")
                .ok_or_else(|| bad("missing `completion` line"))?;
            let (tokens_str, rest) = rest
                .split_once(' ')
                .ok_or_else(|| bad("truncated completion line"))?;
            completions.push(TokenSeq::new(parse_u32_list(tokens_str)?)?);
            let rest = if let Some(r) = rest.strip_prefix("reward=") {
                let (val, rest) = r
                    .split_once(' ')
                    .ok_or_else(|| bad("truncated completion line"))?;
                rewards.push(val.parse::<f64>().map_err(|_| bad("unparsable reward"))?);
                rest
            } else {
                rest
            };
            let lp_str = rest
                .strip_prefix("old_logprobs=")
                .ok_or_else(|| bad("missing old_logprobs field"))?;
            old_logprobs.push(parse_f64_list(lp_str)?);
        }
        let mut group = SampledGroup::from_parts(prompt, completions, old_logprobs)?;
        if !rewards.is_empty() {
            if rewards.len() != size {
                return Err(bad("rewards present on only some completions"));
            }
            group.set_rewards(&rewards)?;
        }
        Ok(group)
    }
}

fn join_u32(v: &[u32]) -> String {
    v.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_u32_list(s: &str) -> Result<Vec<u32>, GroupError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| GroupError::MalformedRecord(format!("bad token id `{p}`")))
        })
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, GroupError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| GroupError::MalformedRecord(format!("bad float `{p}`")))
        })
        .collect()
}

//! Registry of the ten published instantiations of the unified objective.
//!
//! Each entry fixes three things: the per-token weight rule `α_{i,t}`, the
//! ratio transform `s_{i,t}(θ)`, and the regularizer `R(θ)`. Symbols the
//! defining papers leave unspecified (masks, gating thresholds, per-token
//! coefficients) are exposed as hooks with runnable defaults:
//!
//! | name      | α_{i,t}                    | s_{i,t}              | R(θ)              |
//! |-----------|----------------------------|----------------------|-------------------|
//! | grpo-r1   | 1/(G·|o_i|·σ(r))           | token ratio          | KL                |
//! | grpo-v3.2 | M_{i,t}/(G·|o_i|)          | token ratio          | ratio-weighted KL |
//! | gspo      | 1/(G·|o_i|·σ(r))           | seq. geometric mean  | —                 |
//! | gtpo      | δ_i·λ_{i,t}/(G·|o_i|)      | token ratio          | entropy transport |
//! | dapo      | 1/(σ(r)·Σ|o_j|)            | token ratio          | —                 |
//! | cppo      | 1{|A_i|>γ}/(G·|o_i|·σ(r))  | token ratio          | KL                |
//! | dr-grpo   | 1/G                        | token ratio          | KL                |
//! | gpg       | α̂/(F_norm·Σ|o_j|)          | log π                | —                 |
//! | cispo     | M_{i,t}/(σ(r)·Σ|o_j|)      | sg[ratio]·log π      | —                 |
//! | gcpo      | 1/(σ(r)·G)                 | seq. product ratio   | —                 |
//!
//! Degenerate groups with σ(r) = 0 carry no learning signal (all advantages
//! are zero), so every σ-dividing weight is zeroed instead of dividing by
//! zero, and the training loop skips such groups with a warning.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::group::{GroupError, SampledGroup};
use crate::policy::{PolicyError, ToyPolicy};
use crate::surrogate::{
    ClipSpec, RatioKind, RegularizerKind, RegularizerSpec, SurrogateError,
};

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unknown algorithm `{0}`; valid names: {}", ALGORITHM_NAMES.join(", "))]
    UnknownAlgorithm(String),
    #[error(transparent)]
    Group(#[from] GroupError),
}

pub const ALGORITHM_NAMES: [&str; 10] = [
    "grpo-r1", "grpo-v3.2", "gspo", "gtpo", "dapo", "cppo", "dr-grpo", "gpg", "cispo", "gcpo",
];

/// The per-token weight rule α_{i,t}. Weights depend only on the sampled
/// group (never on θ), which is what makes the step-one simplifications of
/// the objective exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRule {
    /// `1/(G·|o_i|·σ(r))`
    GroupLengthStd,
    /// `1/(G·|o_i|)` (multiplied by the mask hook like every rule)
    MaskedGroupLength,
    /// `δ_i·λ_{i,t}/(G·|o_i|)`
    GtpoWeight,
    /// `1/(σ(r)·Σ_j|o_j|)`
    TotalLengthStd,
    /// `1{|A_i|>γ}/(G·|o_i|·σ(r))`
    GroupLengthStdGated,
    /// `1/G`
    PerGroup,
    /// `α̂/(F_norm·Σ_j|o_j|)`
    GpgNorm,
    /// `1/(σ(r)·Σ_j|o_j|)`
    MaskedTotalLengthStd,
    /// `1/(σ(r)·G)`
    GroupStd,
}

impl WeightRule {
    pub fn uses_sigma(&self) -> bool {
        matches!(
            self,
            WeightRule::GroupLengthStd
                | WeightRule::GroupLengthStdGated
                | WeightRule::TotalLengthStd
                | WeightRule::MaskedTotalLengthStd
                | WeightRule::GroupStd
        )
    }
}

pub type MaskHook = Arc<dyn Fn(&SampledGroup, usize, usize) -> f64 + Send + Sync>;
pub type CompletionHook = Arc<dyn Fn(&SampledGroup, usize) -> f64 + Send + Sync>;
pub type TokenHook = Arc<dyn Fn(&SampledGroup, usize, usize) -> f64 + Send + Sync>;
pub type EntropyHook =
    Arc<dyn Fn(&SampledGroup, &ToyPolicy, usize) -> Result<f64, PolicyError> + Send + Sync>;

/// User-pluggable functions for the under-specified symbols. All defaults
/// make every named algorithm runnable out of the box; hooks must be pure
/// functions of their inputs.
#[derive(Clone)]
pub struct Hooks {
    /// Binary token mask, applied multiplicatively to every weight rule.
    pub mask: MaskHook,
    /// Per-completion coefficient of the entropy-transport weights/regularizer.
    pub gtpo_delta: CompletionHook,
    /// Per-token coefficient of the entropy-transport weights/regularizer.
    pub gtpo_lambda: TokenHook,
    /// Override for the mean token entropy; `None` computes it from the
    /// policy.
    pub gtpo_mean_entropy: Option<EntropyHook>,
    /// Advantage-gating threshold γ; 0 disables the gate.
    pub cppo_gamma: f64,
    pub gpg_alpha_hat: f64,
    pub gpg_f_norm: f64,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks {
            mask: Arc::new(|_, _, _| 1.0),
            gtpo_delta: Arc::new(|_, _| 1.0),
            gtpo_lambda: Arc::new(|_, _, _| 1.0),
            gtpo_mean_entropy: None,
            cppo_gamma: 0.0,
            gpg_alpha_hat: 1.0,
            gpg_f_norm: 1.0,
        }
    }
}

impl fmt::Debug for Hooks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hooks")
            .field("cppo_gamma", &self.cppo_gamma)
            .field("gpg_alpha_hat", &self.gpg_alpha_hat)
            .field("gpg_f_norm", &self.gpg_f_norm)
            .field("gtpo_mean_entropy", &self.gtpo_mean_entropy.is_some())
            .finish_non_exhaustive()
    }
}

/// One fully specified algorithm: weights, ratio transform, clipping,
/// regularizer, and hooks.
#[derive(Debug, Clone)]
pub struct AlgoConfig {
    pub name: String,
    pub weights: WeightRule,
    pub ratio: RatioKind,
    pub clip: ClipSpec,
    pub regularizer: RegularizerSpec,
    pub hooks: Hooks,
}

impl AlgoConfig {
    pub fn with_beta(mut self, beta: f64) -> Self {
        self.regularizer.beta = beta;
        self
    }

    pub fn with_reference(mut self, reference: Arc<ToyPolicy>) -> Self {
        self.regularizer.reference = Some(reference);
        self
    }

    pub fn with_clip(mut self, clip: ClipSpec) -> Self {
        self.clip = clip;
        self
    }

    pub fn with_mask(mut self, mask: MaskHook) -> Self {
        self.hooks.mask = mask;
        self
    }
}

/// Build the configuration for one of the ten registered algorithms.
pub fn make_config(name: &str) -> Result<AlgoConfig, ZooError> {
    let clip = ClipSpec::default();
    let kl = |beta: f64| RegularizerSpec {
        kind: RegularizerKind::Kl,
        beta,
        reference: None,
    };
    let config = match name {
        "grpo-r1" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::GroupLengthStd,
            ratio: RatioKind::TokenLevel,
            clip,
            regularizer: kl(0.04),
            hooks: Hooks::default(),
        },
        "grpo-v3.2" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::MaskedGroupLength,
            ratio: RatioKind::TokenLevel,
            clip,
            regularizer: RegularizerSpec {
                kind: RegularizerKind::RatioWeightedKl,
                beta: 0.04,
                reference: None,
            },
            hooks: Hooks::default(),
        },
        "gspo" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::GroupLengthStd,
            ratio: RatioKind::SequenceGeometricMean,
            clip,
            regularizer: RegularizerSpec::none(),
            hooks: Hooks::default(),
        },
        "gtpo" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::GtpoWeight,
            ratio: RatioKind::TokenLevel,
            clip,
            regularizer: RegularizerSpec {
                kind: RegularizerKind::EntropyTransport,
                beta: 0.04,
                reference: None,
            },
            hooks: Hooks::default(),
        },
        "dapo" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::TotalLengthStd,
            ratio: RatioKind::TokenLevel,
            clip,
            regularizer: RegularizerSpec::none(),
            hooks: Hooks::default(),
        },
        "cppo" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::GroupLengthStdGated,
            ratio: RatioKind::TokenLevel,
            clip,
            regularizer: kl(0.04),
            hooks: Hooks::default(),
        },
        "dr-grpo" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::PerGroup,
            ratio: RatioKind::TokenLevel,
            clip,
            regularizer: kl(0.04),
            hooks: Hooks::default(),
        },
        // The log-policy transforms are not ratios near 1; clipping them
        // against [1-ε, 1+ε] would zero every negative-advantage token, so
        // these two rows run unclipped.
        "gpg" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::GpgNorm,
            ratio: RatioKind::LogPolicy,
            clip: ClipSpec::disabled(),
            regularizer: RegularizerSpec::none(),
            hooks: Hooks::default(),
        },
        "cispo" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::MaskedTotalLengthStd,
            ratio: RatioKind::DetachedRatioTimesLogPolicy,
            clip: ClipSpec::disabled(),
            regularizer: RegularizerSpec::none(),
            hooks: Hooks::default(),
        },
        "gcpo" => AlgoConfig {
            name: name.into(),
            weights: WeightRule::GroupStd,
            ratio: RatioKind::SequenceProduct,
            clip,
            regularizer: RegularizerSpec::none(),
            hooks: Hooks::default(),
        },
        other => return Err(ZooError::UnknownAlgorithm(other.to_string())),
    };
    Ok(config)
}

/// Human-readable row description for the CLI listing.
pub fn describe(name: &str) -> Result<[String; 4], ZooError> {
    let (alpha, ratio, reg) = match name {
        "grpo-r1" => ("1/(G·|o_i|·σ(r))", "token ratio", "KL"),
        "grpo-v3.2" => ("M_{i,t}/(G·|o_i|)", "token ratio", "ratio-weighted KL"),
        "gspo" => ("1/(G·|o_i|·σ(r))", "sequence geometric mean", "-"),
        "gtpo" => ("δ_i·λ_{i,t}/(G·|o_i|)", "token ratio", "entropy transport"),
        "dapo" => ("1/(σ(r)·Σ|o_j|)", "token ratio", "-"),
        "cppo" => ("1{|A_i|>γ}/(G·|o_i|·σ(r))", "token ratio", "KL"),
        "dr-grpo" => ("1/G", "token ratio", "KL"),
        "gpg" => ("α̂/(F_norm·Σ|o_j|)", "log-policy", "-"),
        "cispo" => ("M_{i,t}/(σ(r)·Σ|o_j|)", "detached ratio × log-policy", "-"),
        "gcpo" => ("1/(σ(r)·G)", "sequence product ratio", "-"),
        other => return Err(ZooError::UnknownAlgorithm(other.to_string())),
    };
    Ok([
        name.to_string(),
        alpha.to_string(),
        ratio.to_string(),
        reg.to_string(),
    ])
}

/// Per-token weights α_{i,t} for a group, with the mask hook applied and
/// σ-dividing rules zeroed on degenerate groups.
pub fn token_weights(
    group: &SampledGroup,
    config: &AlgoConfig,
) -> Result<Vec<Vec<f64>>, ZooError> {
    let g = group.group_size() as f64;
    let advantages = group.advantages()?;
    let sigma = group.reward_std()?;
    let total_len = group.total_len() as f64;
    let degenerate = config.weights.uses_sigma() && sigma == 0.0;
    if degenerate {
        log::warn!(
            "degenerate group (σ(r) = 0): zeroing {} weights",
            config.name
        );
    }
    let mut out = Vec::with_capacity(group.group_size());
    for i in 0..group.group_size() {
        let len = group.completion(i).len() as f64;
        let mut row = Vec::with_capacity(group.completion(i).len());
        for t in 0..group.completion(i).len() {
            let base = if degenerate {
                0.0
            } else {
                match config.weights {
                    WeightRule::GroupLengthStd => 1.0 / (g * len * sigma),
                    WeightRule::MaskedGroupLength => 1.0 / (g * len),
                    WeightRule::GtpoWeight => {
                        (config.hooks.gtpo_delta)(group, i)
                            * (config.hooks.gtpo_lambda)(group, i, t)
                            / (g * len)
                    }
                    WeightRule::TotalLengthStd => 1.0 / (sigma * total_len),
                    WeightRule::GroupLengthStdGated => {
                        if advantages[i].abs() > config.hooks.cppo_gamma {
                            1.0 / (g * len * sigma)
                        } else {
                            0.0
                        }
                    }
                    WeightRule::PerGroup => 1.0 / g,
                    WeightRule::GpgNorm => {
                        config.hooks.gpg_alpha_hat / (config.hooks.gpg_f_norm * total_len)
                    }
                    WeightRule::MaskedTotalLengthStd => 1.0 / (sigma * total_len),
                    WeightRule::GroupStd => 1.0 / (sigma * g),
                }
            };
            row.push(base * (config.hooks.mask)(group, i, t));
        }
        out.push(row);
    }
    Ok(out)
}

/// Per-token weights ω_{i,t} = α_{i,t}·s_{i,t} and their per-completion sums
/// Ω_i — the quantity that determines what the step-one objective actually
/// measures.
#[derive(Debug, Clone)]
pub struct WeightSummary {
    pub per_token: Vec<Vec<f64>>,
    pub cumulative: Vec<f64>,
}

pub fn cumulative_weights(
    group: &SampledGroup,
    config: &AlgoConfig,
    policy: &ToyPolicy,
) -> Result<WeightSummary, SurrogateError> {
    let alphas = token_weights(group, config)?;
    let ratios = crate::surrogate::ratio_values(group, policy, policy, config.ratio)?;
    let per_token: Vec<Vec<f64>> = alphas
        .iter()
        .zip(&ratios)
        .map(|(ar, sr)| ar.iter().zip(sr).map(|(a, s)| a * s).collect())
        .collect();
    let cumulative = per_token.iter().map(|row| row.iter().sum()).collect();
    Ok(WeightSummary {
        per_token,
        cumulative,
    })
}

/// What the advantage part of the objective reduces to at the first inner
/// step (all ratios 1), assuming default hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOneClass {
    /// Ω_i constant across completions: the advantage term cancels exactly.
    LengthNormalized,
    /// ω constant per token: the objective measures Σ A_i·|o_i|.
    ConstantPerToken,
    /// Anything else: the objective is G·Cov(A, Ω).
    General,
}

pub fn step_one_class(config: &AlgoConfig) -> StepOneClass {
    if !config.ratio.unit_at_step_one() {
        return StepOneClass::General;
    }
    match config.weights {
        WeightRule::GroupLengthStd
        | WeightRule::MaskedGroupLength
        | WeightRule::GtpoWeight
        | WeightRule::GroupLengthStdGated => StepOneClass::LengthNormalized,
        WeightRule::PerGroup
        | WeightRule::TotalLengthStd
        | WeightRule::MaskedTotalLengthStd
        | WeightRule::GroupStd => StepOneClass::ConstantPerToken,
        WeightRule::GpgNorm => StepOneClass::General,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::TokenSeq;

    fn seq(tokens: &[u32]) -> TokenSeq {
        TokenSeq::new(tokens.to_vec()).unwrap()
    }

    fn group_with_lengths(lengths: &[usize], rewards: &[f64]) -> SampledGroup {
        // distinct first tokens keep the completions unique
        let completions: Vec<TokenSeq> = lengths
            .iter()
            .enumerate()
            .map(|(i, len)| {
                let mut toks = vec![i as u32 % 2];
                toks.extend(std::iter::repeat(0).take(len - 1));
                seq(&toks)
            })
            .collect();
        let old_logprobs = completions
            .iter()
            .map(|c| vec![-0.5; c.len()])
            .collect();
        let mut g =
            SampledGroup::from_parts(seq(&[0]), completions, old_logprobs).unwrap();
        g.set_rewards(rewards).unwrap();
        g
    }

    #[test]
    fn registry_covers_all_names_and_rejects_unknown() {
        for name in ALGORITHM_NAMES {
            let config = make_config(name).unwrap();
            assert_eq!(config.name, name);
            describe(name).unwrap();
        }
        let err = make_config("ppo").unwrap_err();
        assert!(err.to_string().contains("grpo-r1"));
        assert!(err.to_string().contains("gcpo"));
    }

    #[test]
    fn grpo_r1_weights_match_row() {
        let group = group_with_lengths(&[2, 1], &[1.0, 0.0]); // G=2, σ=0.5
        let config = make_config("grpo-r1").unwrap();
        let w = token_weights(&group, &config).unwrap();
        assert!((w[0][0] - 1.0 / (2.0 * 2.0 * 0.5)).abs() < 1e-15);
        assert!((w[1][0] - 1.0 / (2.0 * 1.0 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn dapo_weights_match_row() {
        let group = group_with_lengths(&[2, 2], &[1.0, 0.0]); // Σ|o| = 4
        let config = make_config("dapo").unwrap();
        let w = token_weights(&group, &config).unwrap();
        for row in &w {
            for x in row {
                assert!((x - 1.0 / (0.5 * 4.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dr_grpo_weights_are_per_group() {
        let group = group_with_lengths(&[3, 1], &[1.0, 0.0]);
        let config = make_config("dr-grpo").unwrap();
        let w = token_weights(&group, &config).unwrap();
        for row in &w {
            for x in row {
                assert_eq!(*x, 0.5);
            }
        }
    }

    #[test]
    fn cumulative_weights_at_step_one() {
        let mut policy = ToyPolicy::new(2, 4).unwrap();
        let prompt = seq(&[0]);
        let group = {
            let completions = vec![seq(&[0, 0]), seq(&[0, 0, 0]), seq(&[1]), seq(&[0, 1])];
            for c in &completions {
                policy.ensure_completion_contexts(&prompt, c);
            }
            let old_logprobs = completions
                .iter()
                .map(|c| policy.log_prob(&prompt, c).unwrap())
                .collect();
            let mut g = SampledGroup::from_parts(prompt, completions, old_logprobs).unwrap();
            g.set_rewards(&[1.0, 0.0, 2.0, 1.0]).unwrap();
            g
        };
        // length-normalized rows: Ω_i constant
        let r1 = make_config("grpo-r1").unwrap();
        let summary = cumulative_weights(&group, &r1, &policy).unwrap();
        let sigma = group.reward_std().unwrap();
        for omega in &summary.cumulative {
            assert!((omega - 1.0 / (4.0 * sigma)).abs() < 1e-12);
        }
        // constant-per-token rows: Ω_i = |o_i|/G
        let dr = make_config("dr-grpo").unwrap();
        let summary = cumulative_weights(&group, &dr, &policy).unwrap();
        for (omega, c) in summary.cumulative.iter().zip(group.completions()) {
            assert!((omega - c.len() as f64 / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn step_one_classification() {
        use StepOneClass::*;
        let expect = [
            ("grpo-r1", LengthNormalized),
            ("grpo-v3.2", LengthNormalized),
            ("gspo", LengthNormalized),
            ("gtpo", LengthNormalized),
            ("dapo", ConstantPerToken),
            ("cppo", LengthNormalized),
            ("dr-grpo", ConstantPerToken),
            ("gpg", General),
            ("cispo", General),
            ("gcpo", ConstantPerToken),
        ];
        for (name, class) in expect {
            assert_eq!(
                step_one_class(&make_config(name).unwrap()),
                class,
                "{name}"
            );
        }
    }

    #[test]
    fn sigma_zero_zeroes_only_sigma_rules() {
        let group = group_with_lengths(&[2, 2], &[1.0, 1.0]);
        let r1 = make_config("grpo-r1").unwrap();
        for row in token_weights(&group, &r1).unwrap() {
            for w in row {
                assert_eq!(w, 0.0);
            }
        }
        let dr = make_config("dr-grpo").unwrap();
        for row in token_weights(&group, &dr).unwrap() {
            for w in row {
                assert_eq!(w, 0.5);
            }
        }
    }

    #[test]
    fn gpg_hooks_scale_weights() {
        let group = group_with_lengths(&[2, 2], &[1.0, 0.0]);
        let mut config = make_config("gpg").unwrap();
        config.hooks.gpg_alpha_hat = 3.0;
        config.hooks.gpg_f_norm = 2.0;
        let w = token_weights(&group, &config).unwrap();
        assert!((w[0][0] - 3.0 / (2.0 * 4.0)).abs() < 1e-15);
    }
}

//! The run configuration: one TOML file holding every knob of a session,
//! fully validated before execution, with unknown keys rejected. Command-line
//! flags override file values; the effective config is emitted alongside the
//! reports so a run can be archived and replayed.
//!
//! ```toml
//! algorithm = "grpo-r1"
//! seed = 7
//! output_dir = "reports"
//!
//! [policy]
//! vocab_size = 4
//! max_len = 3
//! prompt = [0]
//!
//! [group]
//! size = 4
//!
//! [objective]
//! inner_steps = 2
//! eps_low = 0.2
//! eps_up = 0.2
//! clip = true
//! # beta = 0.04            # omit to use the algorithm's default
//!
//! [optimizer]
//! lr = 0.05
//! beta1 = 0.9
//! beta2 = 0.95
//! eps = 1e-8
//! weight_decay = 0.0
//! convention = "standard"  # or "paper-literal"
//! direction = "ascent-on-objective"
//!
//! [reward]
//! kind = "random-seeded"   # length-based | token-presence | constant | random-seeded
//! seed = 0
//!
//! [hooks]
//! cppo_gamma = 0.0
//! gpg_alpha_hat = 1.0
//! gpg_f_norm = 1.0
//!
//! [experiments]
//! outer_iters = 8
//! phi = [0.1, 10.0, 1000.0]
//! scaling_steps = 50
//! overshoot_t = [10, 100, 1000]
//! overshoot_k_max = 8
//! gradcheck_instances = 100
//! prefix_instances = 100
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adamw::{AdamWHyper, Convention, Direction};
use crate::group::TokenSeq;
use crate::lab::SyntheticReward;
use crate::policy::ToyPolicy;
use crate::surrogate::ClipSpec;
use crate::zoo::{make_config, AlgoConfig, ALGORITHM_NAMES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algorithm: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub policy: PolicySection,
    pub group: GroupSection,
    pub objective: ObjectiveSection,
    pub optimizer: OptimizerSection,
    pub reward: SyntheticReward,
    pub hooks: HooksSection,
    pub experiments: ExperimentsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: "grpo-r1".into(),
            seed: 0,
            output_dir: None,
            policy: PolicySection::default(),
            group: GroupSection::default(),
            objective: ObjectiveSection::default(),
            optimizer: OptimizerSection::default(),
            reward: SyntheticReward::default(),
            hooks: HooksSection::default(),
            experiments: ExperimentsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub vocab_size: u32,
    pub max_len: usize,
    pub prompt: Vec<u32>,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            vocab_size: 4,
            max_len: 3,
            prompt: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupSection {
    pub size: usize,
}

impl Default for GroupSection {
    fn default() -> Self {
        GroupSection { size: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub inner_steps: usize,
    pub eps_low: f64,
    pub eps_up: f64,
    pub clip: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            inner_steps: 1,
            eps_low: 0.2,
            eps_up: 0.2,
            clip: true,
            beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub convention: Convention,
    pub direction: Direction,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HooksSection {
    pub cppo_gamma: f64,
    pub gpg_alpha_hat: f64,
    pub gpg_f_norm: f64,
}

impl Default for HooksSection {
    fn default() -> Self {
        HooksSection {
            cppo_gamma: 0.0,
            gpg_alpha_hat: 1.0,
            gpg_f_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentsSection {
    pub outer_iters: usize,
    pub phi: Vec<f64>,
    pub scaling_steps: usize,
    pub overshoot_t: Vec<u64>,
    pub overshoot_k_max: u64,
    pub gradcheck_instances: usize,
    pub prefix_instances: usize,
}

impl Default for ExperimentsSection {
    fn default() -> Self {
        ExperimentsSection {
            outer_iters: 8,
            phi: vec![0.1, 10.0, 1000.0],
            scaling_steps: 50,
            overshoot_t: vec![10, 100, 1000],
            overshoot_k_max: 8,
            gradcheck_instances: 100,
            prefix_instances: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn fingerprint(&self) -> String {
        crate::lab::fingerprint(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !ALGORITHM_NAMES.contains(&self.algorithm.as_str()) {
            return bad(format!(
                "unknown algorithm `{}`; valid names: {}",
                self.algorithm,
                ALGORITHM_NAMES.join(", ")
            ));
        }
        if self.policy.vocab_size < 2 {
            return bad(format!(
                "policy.vocab_size must be at least 2 (got {})",
                self.policy.vocab_size
            ));
        }
        if self.policy.max_len == 0 {
            return bad("policy.max_len must be at least 1".into());
        }
        if self.policy.prompt.is_empty() {
            return bad("policy.prompt must be nonempty".into());
        }
        if let Some(&t) = self
            .policy
            .prompt
            .iter()
            .find(|t| **t >= self.policy.vocab_size)
        {
            return bad(format!(
                "policy.prompt token {t} out of range for vocab_size {}",
                self.policy.vocab_size
            ));
        }
        if self.group.size < 2 {
            return bad(format!(
                "group.size must be at least 2 for centering (got {})",
                self.group.size
            ));
        }
        if self.objective.inner_steps == 0 {
            return bad("objective.inner_steps must be at least 1".into());
        }
        if 1.0 - self.objective.eps_low <= 0.0 {
            return bad(format!(
                "1 - eps_low must be positive (eps_low = {})",
                self.objective.eps_low
            ));
        }
        if self.objective.eps_up <= 0.0 {
            return bad(format!(
                "objective.eps_up must be positive (got {})",
                self.objective.eps_up
            ));
        }
        if let Some(beta) = self.objective.beta {
            if beta < 0.0 {
                return bad(format!("objective.beta must be nonnegative (got {beta})"));
            }
        }
        if self.optimizer.lr <= 0.0 {
            return bad(format!(
                "optimizer.lr must be positive (got {})",
                self.optimizer.lr
            ));
        }
        for (name, b) in [
            ("optimizer.beta1", self.optimizer.beta1),
            ("optimizer.beta2", self.optimizer.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1) (got {b})"));
            }
        }
        if self.optimizer.eps <= 0.0 {
            return bad(format!(
                "optimizer.eps must be positive (got {})",
                self.optimizer.eps
            ));
        }
        if self.optimizer.weight_decay < 0.0 {
            return bad(format!(
                "optimizer.weight_decay must be nonnegative (got {})",
                self.optimizer.weight_decay
            ));
        }
        if self.experiments.phi.iter().any(|p| *p <= 0.0) {
            return bad("experiments.phi entries must be positive".into());
        }
        if self.experiments.overshoot_t.iter().any(|t| *t < 2) {
            return bad("experiments.overshoot_t entries must be at least 2".into());
        }
        if self.experiments.gradcheck_instances == 0 || self.experiments.prefix_instances == 0 {
            return bad("experiment instance counts must be at least 1".into());
        }
        if self.hooks.cppo_gamma < 0.0 {
            return bad(format!(
                "hooks.cppo_gamma must be nonnegative (got {})",
                self.hooks.cppo_gamma
            ));
        }
        if self.hooks.gpg_f_norm == 0.0 {
            return bad("hooks.gpg_f_norm must be nonzero".into());
        }
        Ok(())
    }

    pub fn prompt_seq(&self) -> TokenSeq {
        TokenSeq::new(self.policy.prompt.clone()).expect("validated nonempty prompt")
    }

    pub fn build_policy(&self) -> Result<ToyPolicy, ConfigError> {
        ToyPolicy::new(self.policy.vocab_size, self.policy.max_len)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Algorithm config with the file's clip bounds, β override, and hook
    /// scalars applied. The clip toggle only disables clipping; algorithms
    /// registered as unclipped stay unclipped.
    pub fn build_algo_config(&self) -> Result<AlgoConfig, ConfigError> {
        let mut config =
            make_config(&self.algorithm).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let enabled = config.clip.enabled && self.objective.clip;
        config.clip = ClipSpec {
            eps_low: self.objective.eps_low,
            eps_up: self.objective.eps_up,
            enabled,
        };
        if let Some(beta) = self.objective.beta {
            config.regularizer.beta = beta;
        }
        config.hooks.cppo_gamma = self.hooks.cppo_gamma;
        config.hooks.gpg_alpha_hat = self.hooks.gpg_alpha_hat;
        config.hooks.gpg_f_norm = self.hooks.gpg_f_norm;
        Ok(config)
    }

    pub fn build_hyper(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.optimizer.lr,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            weight_decay: self.optimizer.weight_decay,
            convention: self.optimizer.convention,
            direction: self.optimizer.direction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let (_dir, path) = write_config("algorithm = \"dr-grpo\"\n");
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.algorithm, "dr-grpo");
        assert_eq!(config.policy.vocab_size, 4);
        assert_eq!(config.group.size, 4);
        assert_eq!(config.optimizer.beta2, 0.95);
        assert_eq!(config.reward, SyntheticReward::RandomSeeded { seed: 0 });
    }

    #[test]
    fn eps_low_invariant_violation_names_the_key() {
        let (_dir, path) = write_config(
            "algorithm = \"grpo-r1\"\n[objective]\neps_low = 1.5\n",
        );
        let err = RunConfig::load(&path).unwrap_err();
        assert!(
            err.to_string().contains("1 - eps_low must be positive"),
            "unexpected message: {err}"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_dir, path) = write_config("algorithm = \"grpo-r1\"\nbanana = 3\n");
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");
    }

    #[test]
    fn unknown_algorithm_lists_valid_names() {
        let (_dir, path) = write_config("algorithm = \"ppo\"\n");
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("grpo-r1"));
        assert!(err.to_string().contains("gcpo"));
    }

    #[test]
    fn effective_config_round_trips() {
        let (_dir, path) = write_config(
            "algorithm = \"dapo\"\nseed = 11\n[reward]\nkind = \"length-based\"\nslope = -1.0\noffset = 5.0\n",
        );
        let config = RunConfig::load(&path).unwrap();
        let emitted = config.to_toml_string().unwrap();
        let reloaded: RunConfig = toml::from_str(&emitted).unwrap();
        assert_eq!(config, reloaded);
        assert_eq!(config.fingerprint(), reloaded.fingerprint());
    }

    #[test]
    fn clip_toggle_cannot_enable_clipping_for_unclipped_rows() {
        let mut config = RunConfig {
            algorithm: "gpg".into(),
            ..RunConfig::default()
        };
        config.objective.clip = true;
        let algo = config.build_algo_config().unwrap();
        assert!(!algo.clip.enabled);
        config.algorithm = "grpo-r1".into();
        config.objective.clip = false;
        let algo = config.build_algo_config().unwrap();
        assert!(!algo.clip.enabled);
    }

    #[test]
    fn beta_override_applies() {
        let mut config = RunConfig::default();
        config.objective.beta = Some(0.25);
        assert_eq!(config.build_algo_config().unwrap().regularizer.beta, 0.25);
        config.objective.beta = None;
        assert_eq!(config.build_algo_config().unwrap().regularizer.beta, 0.04);
    }
}

//! Synthetic reward functions driving the experiments. All of them are
//! deterministic functions of the completion (and a seed), so experiment runs
//! replay exactly.

use serde::{Deserialize, Serialize};

use crate::group::{GroupError, SampledGroup, TokenSeq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticReward {
    /// `r = slope·|o| + offset` — the knob for length-bias scenarios.
    LengthBased { slope: f64, offset: f64 },
    /// Fixed payout depending on whether a token occurs in the completion.
    TokenPresence { token: u32, present: f64, absent: f64 },
    Constant { value: f64 },
    /// Uniform in [0, 1), hashed from the completion tokens and the seed.
    RandomSeeded { seed: u64 },
}

impl Default for SyntheticReward {
    fn default() -> Self {
        SyntheticReward::RandomSeeded { seed: 0 }
    }
}

impl SyntheticReward {
    pub fn reward(&self, completion: &TokenSeq) -> f64 {
        match self {
            SyntheticReward::LengthBased { slope, offset } => {
                slope * completion.len() as f64 + offset
            }
            SyntheticReward::TokenPresence {
                token,
                present,
                absent,
            } => {
                if completion.tokens().contains(token) {
                    *present
                } else {
                    *absent
                }
            }
            SyntheticReward::Constant { value } => *value,
            SyntheticReward::RandomSeeded { seed } => {
                let mut h = splitmix64(*seed ^ 0x6c62_272e_07bb_0142);
                for &t in completion.tokens() {
                    h = splitmix64(h ^ (t as u64 + 1));
                }
                (h >> 11) as f64 / (1u64 << 53) as f64
            }
        }
    }

    /// Score every completion of the group and install the rewards.
    pub fn assign(&self, group: &mut SampledGroup) -> Result<(), GroupError> {
        let rewards: Vec<f64> = group.completions().iter().map(|c| self.reward(c)).collect();
        group.set_rewards(&rewards)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[u32]) -> TokenSeq {
        TokenSeq::new(tokens.to_vec()).unwrap()
    }

    #[test]
    fn length_based_is_affine_in_length() {
        let r = SyntheticReward::LengthBased {
            slope: -1.0,
            offset: 5.0,
        };
        assert_eq!(r.reward(&seq(&[1])), 4.0);
        assert_eq!(r.reward(&seq(&[1, 2, 3])), 2.0);
    }

    #[test]
    fn token_presence() {
        let r = SyntheticReward::TokenPresence {
            token: 2,
            present: 1.0,
            absent: 0.0,
        };
        assert_eq!(r.reward(&seq(&[0, 2, 1])), 1.0);
        assert_eq!(r.reward(&seq(&[0, 1])), 0.0);
    }

    #[test]
    fn random_seeded_is_deterministic_and_bounded() {
        let r = SyntheticReward::RandomSeeded { seed: 9 };
        let a = r.reward(&seq(&[0, 1, 2]));
        let b = r.reward(&seq(&[0, 1, 2]));
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((0.0..1.0).contains(&a));
        // different completion, different seed -> different draws
        let c = r.reward(&seq(&[0, 1]));
        assert_ne!(a.to_bits(), c.to_bits());
        let d = SyntheticReward::RandomSeeded { seed: 10 }.reward(&seq(&[0, 1, 2]));
        assert_ne!(a.to_bits(), d.to_bits());
    }
}

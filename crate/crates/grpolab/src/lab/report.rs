//! Experiment reports: per-check measured/predicted pairs with pinned
//! tolerances, plus free-form recorded observations.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// One assertion: `pass` iff `|measured - predicted| <= tolerance` and both
/// values are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Where the predicted value comes from (closed form, analytic
    /// simplification, independent oracle, ...).
    pub source: String,
    pub measured: f64,
    pub predicted: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// A recorded quantity that is deliberately not asserted against anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub verdict: Verdict,
    pub checks: Vec<CheckResult>,
    pub observations: Vec<Observation>,
}

impl ExperimentReport {
    pub fn new(name: &str, seed: u64, config_fingerprint: String) -> Self {
        ExperimentReport {
            name: name.to_string(),
            seed,
            config_fingerprint,
            verdict: Verdict::Pass,
            checks: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn check(
        &mut self,
        name: &str,
        source: &str,
        measured: f64,
        predicted: f64,
        tolerance: f64,
    ) -> bool {
        let pass =
            measured.is_finite() && predicted.is_finite() && (measured - predicted).abs() <= tolerance;
        if !pass {
            self.verdict = Verdict::Fail;
        }
        self.checks.push(CheckResult {
            name: name.to_string(),
            source: source.to_string(),
            measured,
            predicted,
            tolerance,
            pass,
        });
        pass
    }

    /// Boolean assertion, encoded as a 0/1 check so it renders uniformly.
    pub fn check_that(&mut self, name: &str, source: &str, condition: bool) -> bool {
        self.check(name, source, if condition { 1.0 } else { 0.0 }, 1.0, 0.0)
    }

    pub fn observe(&mut self, name: &str, value: f64) {
        self.observations.push(Observation {
            name: name.to_string(),
            value,
        });
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// FNV-1a hash of a serializable value, hex-encoded; used to fingerprint the
/// effective configuration inside reports.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

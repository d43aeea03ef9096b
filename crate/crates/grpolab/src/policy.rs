//! Tabular autoregressive softmax policy with exact log-probabilities and
//! analytic score-function gradients.
//!
//! The policy is a map from a context (prompt ⊕ generated prefix) to a logit
//! vector over a small vocabulary. Contexts are materialized lazily with
//! zero-initialized logits, i.e. a context that has never been touched is a
//! uniform distribution. The flattened parameter vector θ enumerates logit
//! blocks with contexts sorted lexicographically by token ids, then logit
//! index; that order is what the optimizer's moment vectors align with.
//!
//! The score function of a softmax block is analytic:
//!
//! ```text
//! ∇_logits log π(a | ctx) = onehot(a) - softmax(logits)
//! ```
//!
//! which is what makes every objective gradient in this crate exactly
//! computable and checkable against finite differences.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::group::{GroupError, SampledGroup, TokenSeq};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("vocabulary must have at least 2 entries (got {0})")]
    VocabTooSmall(u32),
    #[error("max completion length must be at least 1")]
    ZeroMaxLen,
    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: u32 },
    #[error("completion length {got} exceeds max length {max}")]
    CompletionTooLong { got: usize, max: usize },
    #[error("context not materialized")]
    ContextNotMaterialized,
    #[error("group too small for centering (G = {0}, need at least 2)")]
    GroupTooSmall(usize),
    #[error("parameter vector length {got} does not match parameter count {expected}")]
    ParamLengthMismatch { got: usize, expected: usize },
    #[error("malformed checkpoint at line {line}: {message}")]
    MalformedCheckpoint { line: usize, message: String },
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// Tabular policy: `vocab_size` logits per materialized context.
///
/// The id `vocab_size - 1` is reserved as the end-of-sequence token;
/// generation stops when it is emitted or when `max_len` tokens have been
/// produced (in which case the completion is truncated without the
/// terminator).
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    vocab_size: u32,
    max_len: usize,
    lazy: bool,
    table: BTreeMap<Vec<u32>, Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(vocab_size: u32, max_len: usize) -> Result<Self, PolicyError> {
        if vocab_size < 2 {
            return Err(PolicyError::VocabTooSmall(vocab_size));
        }
        if max_len == 0 {
            return Err(PolicyError::ZeroMaxLen);
        }
        Ok(ToyPolicy {
            vocab_size,
            max_len,
            lazy: true,
            table: BTreeMap::new(),
        })
    }

    /// Disable the uniform fallback for unmaterialized contexts: reads on a
    /// table miss then fail with `ContextNotMaterialized`.
    pub fn with_strict_lookup(mut self) -> Self {
        self.lazy = false;
        self
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn eos_token(&self) -> u32 {
        self.vocab_size - 1
    }

    pub fn context_count(&self) -> usize {
        self.table.len()
    }

    pub fn param_count(&self) -> usize {
        self.table.len() * self.vocab_size as usize
    }

    /// Context keys in θ flattening order (lexicographic by token ids).
    pub fn context_keys(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.table.keys()
    }

    pub fn logits(&self, ctx: &[u32]) -> Option<&[f64]> {
        self.table.get(ctx).map(|v| v.as_slice())
    }

    /// Offset of a context's logit block in the flattened parameter vector.
    pub fn param_offset(&self, ctx: &[u32]) -> Option<usize> {
        if !self.table.contains_key(ctx) {
            return None;
        }
        Some(self.table.range::<[u32], _>(..ctx).count() * self.vocab_size as usize)
    }

    /// Flatten all logit blocks into one parameter vector.
    pub fn params(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        for block in self.table.values() {
            theta.extend_from_slice(block);
        }
        theta
    }

    /// Overwrite all logit blocks from a flattened parameter vector.
    pub fn set_params(&mut self, theta: &[f64]) -> Result<(), PolicyError> {
        if theta.len() != self.param_count() {
            return Err(PolicyError::ParamLengthMismatch {
                got: theta.len(),
                expected: self.param_count(),
            });
        }
        let v = self.vocab_size as usize;
        for (block, chunk) in self.table.values_mut().zip(theta.chunks_exact(v)) {
            block.copy_from_slice(chunk);
        }
        Ok(())
    }

    fn check_token(&self, token: u32) -> Result<(), PolicyError> {
        if token >= self.vocab_size {
            return Err(PolicyError::TokenOutOfRange {
                token,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    fn check_seq(&self, seq: &TokenSeq) -> Result<(), PolicyError> {
        self.check_token(seq.max_token())
    }

    /// Log-softmax over the vocabulary at `ctx`. Falls back to the uniform
    /// distribution (zero logits) for unmaterialized contexts unless strict
    /// lookup is enabled.
    pub fn log_dist(&self, ctx: &[u32]) -> Result<Vec<f64>, PolicyError> {
        match self.table.get(ctx) {
            Some(logits) => Ok(log_softmax(logits)),
            None if self.lazy => Ok(vec![
                -(self.vocab_size as f64).ln();
                self.vocab_size as usize
            ]),
            None => Err(PolicyError::ContextNotMaterialized),
        }
    }

    /// Softmax probabilities at `ctx`, with the same fallback as [`log_dist`].
    ///
    /// [`log_dist`]: ToyPolicy::log_dist
    pub fn dist(&self, ctx: &[u32]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.log_dist(ctx)?.iter().map(|lp| lp.exp()).collect())
    }

    /// Per-token log-probabilities of `completion` under this policy.
    pub fn log_prob(
        &self,
        prompt: &TokenSeq,
        completion: &TokenSeq,
    ) -> Result<Vec<f64>, PolicyError> {
        self.check_seq(prompt)?;
        self.check_seq(completion)?;
        if completion.len() > self.max_len {
            return Err(PolicyError::CompletionTooLong {
                got: completion.len(),
                max: self.max_len,
            });
        }
        let mut ctx = prompt.tokens().to_vec();
        let mut lps = Vec::with_capacity(completion.len());
        for &token in completion.tokens() {
            let dist = self.log_dist(&ctx)?;
            lps.push(dist[token as usize]);
            ctx.push(token);
        }
        Ok(lps)
    }

    /// Shannon entropy (nats) of the distribution at `ctx`.
    pub fn entropy(&self, ctx: &[u32]) -> Result<f64, PolicyError> {
        let lps = self.log_dist(ctx)?;
        Ok(-lps.iter().map(|lp| lp.exp() * lp).sum::<f64>())
    }

    /// Analytic gradient of `log π(token | ctx)` with respect to θ.
    ///
    /// Nonzero only on the logit block of `ctx`, where it equals
    /// `onehot(token) - softmax(logits)`. The context must be materialized so
    /// the result aligns with the parameter vector.
    pub fn grad_log_prob(&self, ctx: &[u32], token: u32) -> Result<GradVector, PolicyError> {
        self.check_token(token)?;
        let logits = self
            .table
            .get(ctx)
            .ok_or(PolicyError::ContextNotMaterialized)?;
        let offset = self.param_offset(ctx).expect("context present");
        let mut block: Vec<f64> = softmax(logits).iter().map(|p| -p).collect();
        block[token as usize] += 1.0;
        let mut grad = GradVector::zeros(self.param_count());
        grad.accumulate_block(ctx, offset, &block, 1.0);
        Ok(grad)
    }

    /// Score-function block `onehot(token) - softmax(logits)` without the
    /// surrounding dense vector; the context must be materialized.
    pub fn score_block(&self, ctx: &[u32], token: u32) -> Result<Vec<f64>, PolicyError> {
        self.check_token(token)?;
        let logits = self
            .table
            .get(ctx)
            .ok_or(PolicyError::ContextNotMaterialized)?;
        let mut block: Vec<f64> = softmax(logits).iter().map(|p| -p).collect();
        block[token as usize] += 1.0;
        Ok(block)
    }

    /// Insert a zero-logit block for `ctx` if absent.
    pub fn ensure_context(&mut self, ctx: &[u32]) {
        if !self.table.contains_key(ctx) {
            self.table
                .insert(ctx.to_vec(), vec![0.0; self.vocab_size as usize]);
        }
    }

    /// Materialize every context visited by `completion` under `prompt`.
    pub fn ensure_completion_contexts(&mut self, prompt: &TokenSeq, completion: &TokenSeq) {
        let mut ctx = prompt.tokens().to_vec();
        for &token in completion.tokens() {
            self.ensure_context(&ctx);
            ctx.push(token);
        }
    }

    /// Overwrite the logits of `ctx`, materializing it first.
    pub fn set_logits(&mut self, ctx: &[u32], logits: &[f64]) -> Result<(), PolicyError> {
        if logits.len() != self.vocab_size as usize {
            return Err(PolicyError::ParamLengthMismatch {
                got: logits.len(),
                expected: self.vocab_size as usize,
            });
        }
        self.table.insert(ctx.to_vec(), logits.to_vec());
        Ok(())
    }

    /// Sample `group_size` completions autoregressively; deterministic for a
    /// fixed seed. Contexts visited during sampling are materialized, and the
    /// per-token log-probabilities of the sampling-time policy are recorded
    /// in the returned group. Rewards are left unset.
    pub fn sample_group(
        &mut self,
        prompt: &TokenSeq,
        group_size: usize,
        seed: u64,
    ) -> Result<SampledGroup, PolicyError> {
        if group_size < 2 {
            return Err(PolicyError::GroupTooSmall(group_size));
        }
        self.check_seq(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut completions = Vec::with_capacity(group_size);
        let mut old_logprobs = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let mut ctx = prompt.tokens().to_vec();
            let mut tokens = Vec::new();
            let mut lps = Vec::new();
            for _ in 0..self.max_len {
                self.ensure_context(&ctx);
                let dist = self.log_dist(&ctx)?;
                let token = sample_index(&dist, rng.gen::<f64>());
                lps.push(dist[token]);
                tokens.push(token as u32);
                if token as u32 == self.eos_token() {
                    break;
                }
                ctx.push(token as u32);
            }
            completions.push(TokenSeq::new(tokens)?);
            old_logprobs.push(lps);
        }
        Ok(SampledGroup::from_parts(
            prompt.clone(),
            completions,
            old_logprobs,
        )?)
    }

    /// Argmax decode (ties broken toward the lower token id), materializing
    /// visited contexts.
    pub fn greedy_decode(&mut self, prompt: &TokenSeq) -> Result<TokenSeq, PolicyError> {
        self.check_seq(prompt)?;
        let mut ctx = prompt.tokens().to_vec();
        let mut tokens = Vec::new();
        for _ in 0..self.max_len {
            self.ensure_context(&ctx);
            let dist = self.log_dist(&ctx)?;
            let token = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32)
                .expect("nonempty vocabulary");
            tokens.push(token);
            if token == self.eos_token() {
                break;
            }
            ctx.push(token);
        }
        Ok(TokenSeq::new(tokens)?)
    }

    /// Write the checkpoint format: a header with the dimensions, then one
    /// line per context with the token sequence and the logits printed with
    /// 17 significant digits so they round-trip exactly.
    pub fn write_checkpoint(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "grpolab-policy v1")?;
        writeln!(out, "vocab_size {}", self.vocab_size)?;
        writeln!(out, "max_len {}", self.max_len)?;
        writeln!(out, "contexts {}", self.table.len())?;
        for (ctx, logits) in &self.table {
            write!(out, "ctx {}", ctx.len())?;
            for t in ctx {
                write!(out, " {t}")?;
            }
            write!(out, " :")?;
            for l in logits {
                write!(out, " {l:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(input: &mut impl BufRead) -> Result<Self, PolicyError> {
        let bad = |line: usize, message: &str| PolicyError::MalformedCheckpoint {
            line,
            message: message.to_string(),
        };
        let mut lines = Vec::new();
        for l in input.lines() {
            lines.push(l.map_err(|e| bad(lines.len() + 1, &e.to_string()))?);
        }
        if lines.first().map(|s| s.as_str()) != Some("grpolab-policy v1") {
            return Err(bad(1, "expected `grpolab-policy v1` magic"));
        }
        let field = |idx: usize, name: &str| -> Result<u64, PolicyError> {
            lines
                .get(idx)
                .and_then(|l| l.strip_prefix(name))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(idx + 1, &format!("expected `{name}<value>`")))
        };
        let vocab_size = field(1, "vocab_size ")? as u32;
        let max_len = field(2, "max_len ")? as usize;
        let contexts = field(3, "contexts ")? as usize;
        let mut policy = ToyPolicy::new(vocab_size, max_len)?;
        if lines.len() != 4 + contexts {
            return Err(bad(lines.len(), "context line count mismatch"));
        }
        for (i, line) in lines[4..].iter().enumerate() {
            let lineno = 5 + i;
            let rest = line
                .strip_prefix("ctx ")
                .ok_or_else(|| bad(lineno, "expected `ctx` line"))?;
            let mut parts = rest.split_whitespace();
            let n: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(lineno, "bad context length"))?;
            let mut ctx = Vec::with_capacity(n);
            for _ in 0..n {
                let t: u32 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(lineno, "bad context token"))?;
                ctx.push(t);
            }
            if parts.next() != Some(":") {
                return Err(bad(lineno, "expected `:` separator"));
            }
            let mut logits = Vec::with_capacity(vocab_size as usize);
            for _ in 0..vocab_size {
                let v: f64 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(lineno, "bad logit value"))?;
                logits.push(v);
            }
            if parts.next().is_some() {
                return Err(bad(lineno, "trailing fields"));
            }
            policy.table.insert(ctx, logits);
        }
        Ok(policy)
    }

    /// Every distribution must sum to 1; used by tests and the harness
    /// self-checks.
    pub fn validate(&self) -> Result<(), PolicyError> {
        for (ctx, logits) in &self.table {
            let total: f64 = softmax(logits).iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(PolicyError::MalformedCheckpoint {
                    line: 0,
                    message: format!("softmax at context {ctx:?} sums to {total}"),
                });
            }
        }
        Ok(())
    }
}

/// Dense gradient aligned with a policy's flattened parameter order, plus a
/// sparse view of which contexts were touched. Untouched entries are exactly
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    values: Vec<f64>,
    touched: BTreeMap<Vec<u32>, usize>,
}

impl GradVector {
    pub fn zeros(param_count: usize) -> Self {
        GradVector {
            values: vec![0.0; param_count],
            touched: BTreeMap::new(),
        }
    }

    /// Wrap a dense vector, deriving the touched set from nonzero blocks.
    pub fn from_dense(policy: &ToyPolicy, values: Vec<f64>) -> Result<Self, PolicyError> {
        if values.len() != policy.param_count() {
            return Err(PolicyError::ParamLengthMismatch {
                got: values.len(),
                expected: policy.param_count(),
            });
        }
        let v = policy.vocab_size() as usize;
        let mut touched = BTreeMap::new();
        for (i, ctx) in policy.context_keys().enumerate() {
            if values[i * v..(i + 1) * v].iter().any(|x| *x != 0.0) {
                touched.insert(ctx.clone(), i * v);
            }
        }
        Ok(GradVector { values, touched })
    }

    /// Add `scale * block` into the logit block of `ctx` at `offset`.
    pub fn accumulate_block(&mut self, ctx: &[u32], offset: usize, block: &[f64], scale: f64) {
        for (slot, b) in self.values[offset..offset + block.len()]
            .iter_mut()
            .zip(block)
        {
            *slot += scale * b;
        }
        self.touched.entry(ctx.to_vec()).or_insert(offset);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Contexts with accumulated (possibly zero-valued) blocks, in θ order.
    pub fn touched_contexts(&self) -> impl Iterator<Item = (&[u32], usize)> {
        self.touched.iter().map(|(k, off)| (k.as_slice(), *off))
    }

    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        for (k, off) in &other.touched {
            self.touched.entry(k.clone()).or_insert(*off);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, l| m.max(*l));
    let lse = max
        + logits
            .iter()
            .map(|l| (l - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|lp| lp.exp()).collect()
}

fn sample_index(log_dist: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, lp) in log_dist.iter().enumerate() {
        cum += lp.exp();
        if u < cum {
            return i;
        }
    }
    log_dist.len() - 1
}

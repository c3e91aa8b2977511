//! Reward shaping math for group-relative policy optimization.
//!
//! Everything here is a pure function over plain `f64` slices so that any
//! trainer (or the HTTP API) can use it without pulling in an ML runtime.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Groups whose reward standard deviation falls below this produce all-zero
/// advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Default symmetric clipping range for the surrogate objective.
pub const DEFAULT_CLIP_EPSILON: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum RlMathError {
    #[error("group must contain at least one reward")]
    EmptyGroup,
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("sequence {index}: new/old log-prob lengths differ ({new} vs {old})")]
    LengthMismatch { index: usize, new: usize, old: usize },
    #[error("sequence {0} has no tokens")]
    EmptySequence(usize),
    #[error("clip epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("pass@k domain error: {0}")]
    DomainError(String),
}

/// Rewards for one group of candidates sampled from the same prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewards {
    pub rewards: Vec<f64>,
}

impl GroupRewards {
    pub fn new(rewards: Vec<f64>) -> Result<Self, RlMathError> {
        if rewards.is_empty() {
            return Err(RlMathError::EmptyGroup);
        }
        if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(RlMathError::NonFiniteInput(format!("reward {bad}")));
        }
        Ok(Self { rewards })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Per-token log-probabilities of one sampled sequence under the current
/// policy and under the behaviour policy that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLogProbs {
    pub tokens_new: Vec<f64>,
    pub tokens_old: Vec<f64>,
}

impl SequenceLogProbs {
    pub fn new(tokens_new: Vec<f64>, tokens_old: Vec<f64>) -> Self {
        Self {
            tokens_new,
            tokens_old,
        }
    }

    fn validate(&self, index: usize) -> Result<(), RlMathError> {
        if self.tokens_new.len() != self.tokens_old.len() {
            return Err(RlMathError::LengthMismatch {
                index,
                new: self.tokens_new.len(),
                old: self.tokens_old.len(),
            });
        }
        if self.tokens_new.is_empty() {
            return Err(RlMathError::EmptySequence(index));
        }
        let finite = self
            .tokens_new
            .iter()
            .chain(&self.tokens_old)
            .all(|x| x.is_finite());
        if !finite {
            return Err(RlMathError::NonFiniteInput(format!(
                "log-probs of sequence {index}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon: f64,
}

impl ClipConfig {
    pub fn new(epsilon: f64) -> Result<Self, RlMathError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(RlMathError::InvalidEpsilon(epsilon));
        }
        Ok(Self { epsilon })
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_CLIP_EPSILON,
        }
    }
}

/// Standardizes each reward against its group: `(r - mean) / std`, with the
/// population standard deviation (divide by G).
///
/// Groups with `std < 1e-8` (every candidate scored the same) carry no
/// learning signal and map to exact zeros.
pub fn group_advantages(rewards: &GroupRewards) -> Vec<f64> {
    let values = &rewards.rewards;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = variance.sqrt();
    if std < DEGENERATE_STD {
        return vec![0.0; values.len()];
    }
    values.iter().map(|r| (r - mean) / std).collect()
}

/// Clipped surrogate objective averaged per token within a sequence and
/// then over the group. There is no KL penalty term.
///
/// Each entry pairs a sequence's log-probs with its (already computed)
/// advantage.
pub fn grpo_objective(
    groups: &[(SequenceLogProbs, f64)],
    clip: ClipConfig,
) -> Result<f64, RlMathError> {
    if groups.is_empty() {
        return Err(RlMathError::EmptyGroup);
    }
    let lower = 1.0 - clip.epsilon;
    let upper = 1.0 + clip.epsilon;
    let mut total = 0.0;
    for (index, (seq, advantage)) in groups.iter().enumerate() {
        seq.validate(index)?;
        if !advantage.is_finite() {
            return Err(RlMathError::NonFiniteInput(format!(
                "advantage of sequence {index}"
            )));
        }
        let per_token: f64 = seq
            .tokens_new
            .iter()
            .zip(&seq.tokens_old)
            .map(|(new, old)| {
                let ratio = (new - old).exp();
                let clipped = ratio.clamp(lower, upper);
                (ratio * advantage).min(clipped * advantage)
            })
            .sum();
        total += per_token / seq.tokens_new.len() as f64;
    }
    let value = total / groups.len() as f64;
    if !value.is_finite() {
        return Err(RlMathError::NonFiniteInput("objective overflowed".into()));
    }
    Ok(value)
}

/// Analytic gradient of [`grpo_objective`] with respect to every
/// `tokens_new` entry, shaped like the input.
///
/// At the clip kinks the one-sided derivative of the unclipped branch is
/// returned.
pub fn grpo_objective_grad(
    groups: &[(SequenceLogProbs, f64)],
    clip: ClipConfig,
) -> Result<Vec<Vec<f64>>, RlMathError> {
    if groups.is_empty() {
        return Err(RlMathError::EmptyGroup);
    }
    let g = groups.len() as f64;
    let lower = 1.0 - clip.epsilon;
    let upper = 1.0 + clip.epsilon;
    groups
        .iter()
        .enumerate()
        .map(|(index, (seq, advantage))| {
            seq.validate(index)?;
            let len = seq.tokens_new.len() as f64;
            Ok(seq
                .tokens_new
                .iter()
                .zip(&seq.tokens_old)
                .map(|(new, old)| {
                    let ratio = (new - old).exp();
                    let clipped = ratio.clamp(lower, upper);
                    // d/dnew of ratio*A is ratio*A; the clipped branch is flat.
                    let unclipped_active = ratio * advantage <= clipped * advantage;
                    if unclipped_active {
                        ratio * advantage / (len * g)
                    } else {
                        0.0
                    }
                })
                .collect())
        })
        .collect()
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)` from `n` samples of
/// which `c` passed.
///
/// When `C(n, k)` is exactly representable in an f64 the result is a single
/// correctly rounded division of integers. Larger cases fall back to the
/// product form `prod_{i=n-c+1}^{n} (1 - k/i)`, which never materializes a
/// binomial coefficient.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, RlMathError> {
    if c > n {
        return Err(RlMathError::DomainError(format!("c={c} exceeds n={n}")));
    }
    if k == 0 || k > n {
        return Err(RlMathError::DomainError(format!(
            "k={k} must satisfy 1 <= k <= n={n}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    const EXACT_LIMIT: u128 = 1 << 53;
    if let Some(total) = binomial(n, k).filter(|&t| t <= EXACT_LIMIT) {
        let missing = binomial(n - c, k).expect("smaller than total");
        return Ok((total - missing) as f64 / total as f64);
    }
    let mut miss = 1.0;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// `C(n, k)`, or None on u128 overflow.
fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k) as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step.
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

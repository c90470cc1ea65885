//! Sequence-level uncertainty, entropy and confidence primitives.
//!
//! All logarithms are natural logs, so uncertainty and entropy are in nats per
//! token and `exp(-uncertainty)` is the geometric-mean token probability.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Tolerance on the total mass of a probability vector.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Probabilities below this are clamped before taking a log.
const PROB_FLOOR: f64 = 1e-300;

/// One sampled generation for a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSample {
    pub query_id: String,
    pub sample_id: u64,
    /// Natural log of each chosen token's probability.
    pub token_logprobs: Vec<f64>,
    /// Full next-token distribution at every position, when logged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_distributions: Option<Vec<Vec<f64>>>,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    pub correct: bool,
}

impl ResponseSample {
    /// Checks the record invariants without modifying it.
    pub fn validate(&self) -> Result<()> {
        check_logprobs(&self.token_logprobs)?;
        if let Some(dists) = &self.step_distributions {
            if dists.len() != self.token_logprobs.len() {
                return Err(invalid(format!(
                    "step_distributions has {} positions but token_logprobs has {}",
                    dists.len(),
                    self.token_logprobs.len()
                )));
            }
            let vocab = dists.first().map(Vec::len).unwrap_or(0);
            for (t, d) in dists.iter().enumerate() {
                if d.len() != vocab {
                    return Err(invalid(format!(
                        "step_distributions[{t}] has {} entries, expected {vocab}",
                        d.len()
                    )));
                }
                check_distribution(d).map_err(|e| invalid(format!("step_distributions[{t}]: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn uncertainty(&self) -> Result<UncertaintyValue> {
        sequence_uncertainty(&self.token_logprobs)
    }

    /// Sequence entropy, available only when full distributions were logged.
    pub fn entropy(&self) -> Option<Result<EntropyValue>> {
        self.step_distributions.as_deref().map(sequence_entropy)
    }
}

/// Mean negative log-likelihood per token.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UncertaintyValue(f64);

impl UncertaintyValue {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(invalid(format!("uncertainty must be finite and >= 0, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Mean per-step Shannon entropy of a generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyValue {
    pub value: f64,
    pub vocab_size: usize,
}

impl EntropyValue {
    pub fn max_value(&self) -> f64 {
        (self.vocab_size as f64).ln()
    }
}

fn check_logprobs(logprobs: &[f64]) -> Result<()> {
    if logprobs.is_empty() {
        return Err(invalid("token_logprobs is empty"));
    }
    for (i, &lp) in logprobs.iter().enumerate() {
        if !lp.is_finite() {
            return Err(invalid(format!("token_logprobs[{i}] is not finite ({lp})")));
        }
        if lp > 0.0 {
            return Err(invalid(format!("token_logprobs[{i}] is positive ({lp})")));
        }
    }
    Ok(())
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(invalid(format!("distribution needs at least 2 entries, got {}", p.len())));
    }
    let mut total = 0.0;
    for (v, &x) in p.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(invalid(format!("entry {v} is negative or non-finite ({x})")));
        }
        total += x;
    }
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(invalid(format!("distribution sums to {total}, not 1")));
    }
    Ok(())
}

/// `-(1/T) * sum(logprobs)`.
pub fn sequence_uncertainty(logprobs: &[f64]) -> Result<UncertaintyValue> {
    check_logprobs(logprobs)?;
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    // -0.0 for an all-zero sequence
    Ok(UncertaintyValue((-mean).max(0.0)))
}

/// Shannon entropy of one distribution, with `0 ln 0 = 0`. No validation.
pub fn step_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Mean per-step entropy over a sequence of next-token distributions.
///
/// Each vector must sum to one within [`NORMALIZATION_TOL`]; vectors inside the
/// tolerance are renormalized exactly before use.
pub fn sequence_entropy(distributions: &[Vec<f64>]) -> Result<EntropyValue> {
    if distributions.is_empty() {
        return Err(invalid("no distributions supplied"));
    }
    let vocab_size = distributions[0].len();
    let mut total = 0.0;
    for (t, d) in distributions.iter().enumerate() {
        check_distribution(d).map_err(|e| invalid(format!("step {t}: {e}")))?;
        if d.len() != vocab_size {
            return Err(invalid(format!("step {t} has {} entries, expected {vocab_size}", d.len())));
        }
        let mass: f64 = d.iter().sum();
        let normalized: Vec<f64> = d.iter().map(|x| x / mass).collect();
        total += step_entropy(&normalized);
    }
    let value = (total / distributions.len() as f64).clamp(0.0, (vocab_size as f64).ln());
    Ok(EntropyValue { value, vocab_size })
}

/// `c = exp(-u)`, the geometric-mean token probability.
pub fn confidence_from_uncertainty(u: UncertaintyValue) -> f64 {
    (-u.0).exp()
}

/// Same as [`confidence_from_uncertainty`] for an unchecked raw value.
pub fn confidence_from_raw(u: f64) -> Result<f64> {
    UncertaintyValue::new(u).map(confidence_from_uncertainty)
}

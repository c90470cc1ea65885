use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signals::step_entropy;

/// How the prefix is summarized into the state that indexes a logit row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMode {
    /// One row per position; the prefix is ignored.
    #[default]
    Positional,
    /// One row per (position, previous token); position 0 uses state 0.
    PreviousToken,
}

/// Autoregressive softmax policy over a fixed vocabulary and horizon, stored
/// as an explicit logit table indexed by (position, state, token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocab: usize,
    horizon: usize,
    mode: StateMode,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(vocab: usize, horizon: usize, mode: StateMode) -> Result<Self> {
        if vocab < 2 || horizon < 1 {
            return Err(invalid(format!(
                "policy needs vocab >= 2 and horizon >= 1, got {vocab} and {horizon}"
            )));
        }
        let states = match mode {
            StateMode::Positional => 1,
            StateMode::PreviousToken => vocab,
        };
        Ok(Self {
            vocab,
            horizon,
            mode,
            logits: vec![0.0; horizon * states * vocab],
        })
    }

    pub fn from_logits(vocab: usize, horizon: usize, mode: StateMode, logits: Vec<f64>) -> Result<Self> {
        let mut p = Self::uniform(vocab, horizon, mode)?;
        if logits.len() != p.logits.len() {
            return Err(invalid(format!(
                "expected {} logits, got {}",
                p.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(invalid("logits must be finite"));
        }
        p.logits = logits;
        Ok(p)
    }

    /// Every state at position `t` puts `mass^(1/T)` on `path[t]` and spreads
    /// the rest evenly, so the path as a whole has probability `mass`.
    pub fn biased_toward(
        vocab: usize,
        horizon: usize,
        mode: StateMode,
        path: &[usize],
        mass: f64,
    ) -> Result<Self> {
        let mut p = Self::uniform(vocab, horizon, mode)?;
        p.check_tokens(path)?;
        if !(mass > 0.0 && mass < 1.0) {
            return Err(invalid(format!("path mass must lie in (0, 1), got {mass}")));
        }
        let q = mass.powf(1.0 / horizon as f64);
        let on = q.ln();
        let off = ((1.0 - q) / (vocab - 1) as f64).ln();
        for (t, &target) in path.iter().enumerate() {
            for s in 0..p.states_per_step() {
                let o = p.offset(t, s);
                for v in 0..vocab {
                    p.logits[o + v] = if v == target { on } else { off };
                }
            }
        }
        Ok(p)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_mode(&self) -> StateMode {
        self.mode
    }

    pub fn parameter_count(&self) -> usize {
        self.logits.len()
    }

    pub fn states_per_step(&self) -> usize {
        self.logits.len() / (self.horizon * self.vocab)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn same_shape(&self, other: &ToyPolicy) -> bool {
        self.vocab == other.vocab && self.horizon == other.horizon && self.mode == other.mode
    }

    /// Offset of the logit row for (position, state).
    pub fn offset(&self, t: usize, s: usize) -> usize {
        (t * self.states_per_step() + s) * self.vocab
    }

    /// State at position `t` given the token emitted at `t - 1`.
    pub fn state_at(&self, t: usize, previous: Option<usize>) -> usize {
        match (self.mode, t, previous) {
            (StateMode::Positional, _, _) | (_, 0, _) | (_, _, None) => 0,
            (StateMode::PreviousToken, _, Some(v)) => v,
        }
    }

    pub fn path_states(&self, tokens: &[usize]) -> Vec<usize> {
        (0..tokens.len())
            .map(|t| self.state_at(t, t.checked_sub(1).map(|i| tokens[i])))
            .collect()
    }

    pub fn probs(&self, t: usize, s: usize) -> Vec<f64> {
        let row = &self.logits[self.offset(t, s)..self.offset(t, s) + self.vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }

    pub fn log_probs(&self, t: usize, s: usize) -> Vec<f64> {
        let row = &self.logits[self.offset(t, s)..self.offset(t, s) + self.vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.iter().map(|z| z - lse).collect()
    }

    pub fn entropy_at(&self, t: usize, s: usize) -> f64 {
        step_entropy(&self.probs(t, s))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.horizon {
            return Err(invalid(format!(
                "path length {} outside 1..={}",
                tokens.len(),
                self.horizon
            )));
        }
        if let Some(v) = tokens.iter().find(|&&v| v >= self.vocab) {
            return Err(invalid(format!("token {v} outside vocabulary of {}", self.vocab)));
        }
        Ok(())
    }

    /// Per-step log-probabilities of a token path.
    pub fn step_logprobs(&self, tokens: &[usize]) -> Vec<f64> {
        let states = self.path_states(tokens);
        tokens
            .iter()
            .zip(&states)
            .enumerate()
            .map(|(t, (&v, &s))| self.log_probs(t, s)[v])
            .collect()
    }

    pub fn path_logprob(&self, tokens: &[usize]) -> f64 {
        self.step_logprobs(tokens).iter().sum()
    }

    pub fn path_prob(&self, tokens: &[usize]) -> f64 {
        self.path_logprob(tokens).exp()
    }

    /// Ancestral sample of a full-horizon path.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let s = self.state_at(t, tokens.last().copied());
            let p = self.probs(t, s);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = self.vocab - 1;
            for (v, &pv) in p.iter().enumerate() {
                acc += pv;
                if u < acc {
                    pick = v;
                    break;
                }
            }
            tokens.push(pick);
        }
        tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes() {
        let p = ToyPolicy::uniform(4, 3, StateMode::Positional).unwrap();
        assert_eq!(p.parameter_count(), 12);
        let p = ToyPolicy::uniform(4, 3, StateMode::PreviousToken).unwrap();
        assert_eq!(p.parameter_count(), 48);
        assert!(ToyPolicy::uniform(1, 3, StateMode::Positional).is_err());
        assert!(ToyPolicy::from_logits(2, 1, StateMode::Positional, vec![0.0; 3]).is_err());
    }

    #[test]
    fn biased_path_mass() {
        for mode in [StateMode::Positional, StateMode::PreviousToken] {
            let p = ToyPolicy::biased_toward(5, 3, mode, &[0, 4, 2], 0.7).unwrap();
            assert!((p.path_prob(&[0, 4, 2]) - 0.7).abs() < 1e-12);
            for t in 0..3 {
                for s in 0..p.states_per_step() {
                    assert!((p.probs(t, s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn previous_token_states() {
        let p = ToyPolicy::uniform(4, 3, StateMode::PreviousToken).unwrap();
        assert_eq!(p.path_states(&[2, 3, 1]), vec![0, 2, 3]);
        let p = ToyPolicy::uniform(4, 3, StateMode::Positional).unwrap();
        assert_eq!(p.path_states(&[2, 3, 1]), vec![0, 0, 0]);
    }

    #[test]
    fn uniform_path_logprob() {
        let p = ToyPolicy::uniform(4, 2, StateMode::Positional).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let path = p.sample_path(&mut rng);
            assert!((p.path_logprob(&path) - 2.0 * 0.25f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_probs_stable_for_large_logits() {
        let p = ToyPolicy::from_logits(3, 1, StateMode::Positional, vec![800.0, 0.0, -800.0]).unwrap();
        let lp = p.log_probs(0, 0);
        assert!(lp.iter().all(|x| x.is_finite() || *x == f64::NEG_INFINITY));
        assert!((p.probs(0, 0)[0] - 1.0).abs() < 1e-15);
    }
}

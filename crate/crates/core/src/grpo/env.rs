use serde::{Deserialize, Serialize};

use super::policy::{StateMode, ToyPolicy};
use crate::error::{invalid, Result};

/// Single-query environment with a sparse gold path and a refusal path the
/// reference policy prefers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefusalTrapEnv {
    pub vocab_size: usize,
    pub horizon: usize,
    #[serde(default)]
    pub state_mode: StateMode,
    /// Rewarded path; `None` makes the environment unsolvable.
    #[serde(default)]
    pub gold: Option<Vec<usize>>,
    pub refusal: Vec<usize>,
    /// Probability the reference policy assigns to the refusal path.
    pub p_ref_refusal: f64,
    /// Probability the initial policy assigns to the refusal path.
    pub p_init_refusal: f64,
    /// The gold path must start below `rarity_factor * (1/V)^T`.
    #[serde(default = "default_rarity")]
    pub rarity_factor: f64,
}

fn default_rarity() -> f64 {
    10.0
}

impl RefusalTrapEnv {
    pub fn validate(&self) -> Result<()> {
        let check_path = |name: &str, p: &[usize]| -> Result<()> {
            if p.len() != self.horizon {
                return Err(invalid(format!("{name} path has length {}, expected {}", p.len(), self.horizon)));
            }
            if p.iter().any(|&v| v >= self.vocab_size) {
                return Err(invalid(format!("{name} path uses a token outside the vocabulary")));
            }
            Ok(())
        };
        check_path("refusal", &self.refusal)?;
        if let Some(gold) = &self.gold {
            check_path("gold", gold)?;
            if gold == &self.refusal {
                return Err(invalid("gold and refusal paths must differ"));
            }
        }
        for (name, m) in [("p_ref_refusal", self.p_ref_refusal), ("p_init_refusal", self.p_init_refusal)] {
            if !(m > 0.0 && m < 1.0) {
                return Err(invalid(format!("{name} must lie in (0, 1), got {m}")));
            }
        }
        Ok(())
    }

    pub fn reference(&self) -> Result<ToyPolicy> {
        ToyPolicy::biased_toward(self.vocab_size, self.horizon, self.state_mode, &self.refusal, self.p_ref_refusal)
    }

    pub fn initial_policy(&self) -> Result<ToyPolicy> {
        ToyPolicy::biased_toward(self.vocab_size, self.horizon, self.state_mode, &self.refusal, self.p_init_refusal)
    }

    /// 1 for the gold path, 0 otherwise.
    pub fn reward(&self, tokens: &[usize]) -> f64 {
        match &self.gold {
            Some(g) if g.as_slice() == tokens => 1.0,
            _ => 0.0,
        }
    }

    pub fn rarity_bound(&self) -> f64 {
        self.rarity_factor * (1.0 / self.vocab_size as f64).powi(self.horizon as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> RefusalTrapEnv {
        RefusalTrapEnv {
            vocab_size: 4,
            horizon: 2,
            state_mode: StateMode::Positional,
            gold: Some(vec![1, 2]),
            refusal: vec![0, 0],
            p_ref_refusal: 0.9,
            p_init_refusal: 0.3,
            rarity_factor: 10.0,
        }
    }

    #[test]
    fn reward_rule() {
        let e = env();
        assert_eq!(e.reward(&[1, 2]), 1.0);
        assert_eq!(e.reward(&[0, 0]), 0.0);
        let unsolvable = RefusalTrapEnv { gold: None, ..env() };
        assert_eq!(unsolvable.reward(&[1, 2]), 0.0);
    }

    #[test]
    fn reference_mass() {
        let e = env();
        assert!((e.reference().unwrap().path_prob(&[0, 0]) - 0.9).abs() < 1e-12);
        assert!((e.initial_policy().unwrap().path_prob(&[0, 0]) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(env().validate().is_ok());
        assert!(RefusalTrapEnv { gold: Some(vec![0, 0]), ..env() }.validate().is_err());
        assert!(RefusalTrapEnv { refusal: vec![0], ..env() }.validate().is_err());
        assert!(RefusalTrapEnv { p_ref_refusal: 1.0, ..env() }.validate().is_err());
        assert!(RefusalTrapEnv { gold: Some(vec![4, 0]), ..env() }.validate().is_err());
    }
}

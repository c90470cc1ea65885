//! Loss components of the calibrated GRPO objective and their analytic
//! gradients with respect to the policy's logit table.
//!
//! Gradients share the layout of [`ToyPolicy::logits`]. For a softmax row
//! `p = softmax(z)` the identities used throughout are
//!
//! - `d log p_y / d z_j = [j == y] - p_j`
//! - `d KL(p || r) / d z_j = p_j (ln(p_j / r_j) - KL)`
//! - `d H(p) / d z_j = -p_j (ln p_j + H)`

use serde::{Deserialize, Serialize};

use super::policy::ToyPolicy;
use crate::error::{invalid, Result};
use crate::signals::step_entropy;

/// One sampled path with the per-step log-probabilities recorded at sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub states: Vec<usize>,
    /// Under the policy being optimized, at sampling time.
    pub logprobs: Vec<f64>,
    /// Under the frozen behavior snapshot.
    pub old_logprobs: Vec<f64>,
    /// Mean per-step entropy along the realized prefixes.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub context_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
}

impl TrajectoryGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Positive reward is the correctness signal.
    pub fn correctness(&self) -> Vec<bool> {
        self.rewards.iter().map(|&r| r > 0.0).collect()
    }

    /// Every (position, state) visited, with multiplicity.
    pub fn visits(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .flat_map(|tr| tr.states.iter().copied().enumerate())
            .collect()
    }
}

/// Scalar loss with its gradient over the logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(r - mean) / (std + delta)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], delta: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    // homogeneous groups carry no signal; avoid rounding noise in the mean
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards
        .iter()
        .map(|&r| (r - mean) / (std + delta))
        .collect()
}

/// Adds `coef * d log pi(tokens) / d z` into `grad`.
fn add_path_score(policy: &ToyPolicy, tokens: &[usize], states: &[usize], coef: f64, grad: &mut [f64]) {
    for (t, (&y, &s)) in tokens.iter().zip(states).enumerate() {
        let p = policy.probs(t, s);
        let o = policy.offset(t, s);
        for (v, pv) in p.iter().enumerate() {
            let indicator = if v == y { 1.0 } else { 0.0 };
            grad[o + v] += coef * (indicator - pv);
        }
    }
}

/// Clipped surrogate `-(1/G) sum_k min(r_k A_k, clip(r_k, 1-eps, 1+eps) A_k)`
/// with `r_k` recomputed under `policy` against the stored old log-probs.
pub fn pg_loss(
    policy: &ToyPolicy,
    group: &TrajectoryGroup,
    advantages: &[f64],
    epsilon: f64,
) -> Result<LossGrad> {
    if advantages.len() != group.len() {
        return Err(invalid(format!(
            "{} advantages for {} trajectories",
            advantages.len(),
            group.len()
        )));
    }
    let g = group.len() as f64;
    let mut grad = vec![0.0; policy.parameter_count()];
    let mut value = 0.0;
    for (tr, &adv) in group.trajectories.iter().zip(advantages) {
        let new_lp = policy.path_logprob(&tr.tokens);
        let old_lp: f64 = tr.old_logprobs.iter().sum();
        let ratio = (new_lp - old_lp).exp();
        let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
        let unclipped_term = ratio * adv;
        let clipped_term = clipped * adv;
        value -= unclipped_term.min(clipped_term) / g;
        // gradient flows only when the unclipped branch is the binding one
        if adv != 0.0 && unclipped_term <= clipped_term {
            add_path_score(policy, &tr.tokens, &tr.states, -adv * ratio / g, &mut grad);
        }
    }
    Ok(LossGrad { value, grad })
}

/// Exact per-step `KL(pi || ref)`, averaged over the visited (position, state) pairs.
pub fn kl_penalty(policy: &ToyPolicy, reference: &ToyPolicy, visits: &[(usize, usize)]) -> Result<LossGrad> {
    if !policy.same_shape(reference) {
        return Err(invalid("policy and reference differ in shape"));
    }
    let mut grad = vec![0.0; policy.parameter_count()];
    if visits.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let n = visits.len() as f64;
    let mut value = 0.0;
    for &(t, s) in visits {
        let p = policy.probs(t, s);
        let lp = policy.log_probs(t, s);
        let lr = reference.log_probs(t, s);
        let log_ratio: Vec<f64> = lp.iter().zip(&lr).map(|(a, b)| a - b).collect();
        let kl: f64 = p.iter().zip(&log_ratio).map(|(pv, d)| pv * d).sum();
        value += kl / n;
        let o = policy.offset(t, s);
        for v in 0..p.len() {
            grad[o + v] += p[v] * (log_ratio[v] - kl) / n;
        }
    }
    Ok(LossGrad { value, grad })
}

/// `(1/G) sum_k alpha_k H_k`, where `alpha_k` is `+1` for a correct path and
/// `-1` otherwise, and `H_k` is the path's mean per-step entropy.
pub fn calibration_from_entropies(entropies: &[f64], correct: &[bool]) -> f64 {
    let g = entropies.len() as f64;
    entropies
        .iter()
        .zip(correct)
        .map(|(h, &c)| if c { *h } else { -*h })
        .sum::<f64>()
        / g
}

/// Signed entropy calibration loss. Entropies are recomputed exactly under
/// `policy` along each realized prefix; no gradient flows through which
/// prefixes were visited.
pub fn calibration_loss(policy: &ToyPolicy, group: &TrajectoryGroup, correct: &[bool]) -> Result<LossGrad> {
    if correct.len() != group.len() {
        return Err(invalid(format!(
            "{} correctness flags for {} trajectories",
            correct.len(),
            group.len()
        )));
    }
    let g = group.len() as f64;
    let mut grad = vec![0.0; policy.parameter_count()];
    let mut entropies = Vec::with_capacity(group.len());
    for (tr, &ok) in group.trajectories.iter().zip(correct) {
        let alpha = if ok { 1.0 } else { -1.0 };
        let steps = tr.states.len() as f64;
        let mut h_path = 0.0;
        for (t, &s) in tr.states.iter().enumerate() {
            let p = policy.probs(t, s);
            let lp = policy.log_probs(t, s);
            let h = step_entropy(&p);
            h_path += h / steps;
            let o = policy.offset(t, s);
            for v in 0..p.len() {
                grad[o + v] += alpha / (g * steps) * (-p[v] * (lp[v] + h));
            }
        }
        entropies.push(h_path);
    }
    Ok(LossGrad {
        value: calibration_from_entropies(&entropies, correct),
        grad,
    })
}

/// Mean per-step entropy of `policy` along each trajectory's prefixes.
pub fn path_entropies(policy: &ToyPolicy, group: &TrajectoryGroup) -> Vec<f64> {
    group
        .trajectories
        .iter()
        .map(|tr| {
            tr.states
                .iter()
                .enumerate()
                .map(|(t, &s)| policy.entropy_at(t, s))
                .sum::<f64>()
                / tr.states.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::policy::StateMode;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0; 4], 1e-8), vec![0.0; 4]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 0.0);
        let expected = [1.7320, -0.5773, -0.5773, -0.5773];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-3, "{a:?}");
        }
        let shifted = group_advantages(&[4.0, 3.0, 3.0, 3.0], 0.0);
        for (x, y) in a.iter().zip(&shifted) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_two_token_closed_form() {
        let policy = ToyPolicy::uniform(2, 1, StateMode::Positional).unwrap();
        let reference =
            ToyPolicy::from_logits(2, 1, StateMode::Positional, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let kl = kl_penalty(&policy, &reference, &[(0, 0)]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl.value - expected).abs() < 1e-12);
        assert!((kl.value - 0.5108).abs() < 1e-4);

        let same = kl_penalty(&reference, &reference, &[(0, 0)]).unwrap();
        assert!(same.value.abs() < 1e-15);
        assert!(same.grad.iter().all(|g| g.abs() < 1e-15));

        let other = ToyPolicy::uniform(3, 1, StateMode::Positional).unwrap();
        assert!(kl_penalty(&policy, &other, &[(0, 0)]).is_err());
    }

    #[test]
    fn calibration_sign() {
        let h = [0.4, 0.9, 0.1];
        let c = [true, false, true];
        let base = calibration_from_entropies(&h, &c);
        let eps = 1e-6;
        for k in 0..3 {
            let mut bumped = h;
            bumped[k] += eps;
            let d = (calibration_from_entropies(&bumped, &c) - base) / eps;
            let expected = if c[k] { 1.0 / 3.0 } else { -1.0 / 3.0 };
            assert!((d - expected).abs() < 1e-6);
        }
    }
}

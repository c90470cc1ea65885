use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::RefusalTrapEnv;
use super::loss::{
    calibration_loss, group_advantages, kl_penalty, l2_norm, path_entropies, pg_loss, Trajectory,
    TrajectoryGroup,
};
use super::policy::ToyPolicy;
use crate::error::{invalid, Error, Result};
use crate::signals::sequence_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// KL weight.
    pub lambda1: f64,
    /// Calibration weight.
    pub lambda2: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub advantage_delta: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            lambda1: 0.001,
            lambda2: 0.001,
            learning_rate: 0.1,
            steps: 200,
            advantage_delta: 1e-8,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(invalid(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(invalid(format!("clip_epsilon must lie in (0, 1), got {}", self.clip_epsilon)));
        }
        if !(self.advantage_delta > 0.0) {
            return Err(invalid("advantage_delta must be > 0"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("lambda1 and lambda2 must be >= 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be finite and > 0"));
        }
        Ok(())
    }
}

/// Draws `g` paths from `policy`, which also serves as the frozen old policy.
pub fn sample_group<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    env: &RefusalTrapEnv,
    g: usize,
    context_id: u64,
    rng: &mut R,
) -> Result<TrajectoryGroup> {
    if g < 2 {
        return Err(invalid(format!("group size must be >= 2, got {g}")));
    }
    let mut trajectories = Vec::with_capacity(g);
    let mut rewards = Vec::with_capacity(g);
    for _ in 0..g {
        let tokens = policy.sample_path(rng);
        let states = policy.path_states(&tokens);
        let logprobs = policy.step_logprobs(&tokens);
        let dists: Vec<Vec<f64>> = states.iter().enumerate().map(|(t, &s)| policy.probs(t, s)).collect();
        let entropy = sequence_entropy(&dists)?.value;
        rewards.push(env.reward(&tokens));
        trajectories.push(Trajectory {
            tokens,
            states,
            old_logprobs: logprobs.clone(),
            logprobs,
            entropy,
        });
    }
    Ok(TrajectoryGroup {
        context_id,
        trajectories,
        rewards,
    })
}

/// Loss components and diagnostics of one update.
///
/// Losses and gradient norms are taken at the policy that sampled the group;
/// probabilities and entropies are exact under the updated policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss_pg: f64,
    pub loss_kl: f64,
    pub loss_cal: f64,
    pub loss_total: f64,
    pub n_correct: usize,
    /// `|lambda2 * grad L_cal|`.
    pub escape_lhs: f64,
    /// `|lambda1 * grad L_KL|`.
    pub escape_rhs: f64,
    /// `|grad L_pg + lambda1 * grad L_KL|`.
    pub flatten_rhs: f64,
    pub p_gold: Option<f64>,
    pub p_refusal: f64,
    pub mean_entropy_correct: Option<f64>,
    pub mean_entropy_incorrect: Option<f64>,
    /// Mean entropy over the group's visited (position, state) pairs.
    pub visited_entropy: f64,
    /// Raw total gradient, kept for inspection.
    #[serde(skip)]
    pub gradient: Vec<f64>,
}

fn mean_where(values: &[f64], mask: &[bool], want: bool) -> Option<f64> {
    let picked: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| m == want).map(|(v, _)| *v).collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

/// One plain gradient-descent step on `L_pg + lambda1 L_KL + lambda2 L_cal`.
pub fn total_step(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    env: &RefusalTrapEnv,
    group: &TrajectoryGroup,
    config: &TrainConfig,
    step: usize,
) -> Result<(ToyPolicy, StepReport)> {
    let advantages = group_advantages(&group.rewards, config.advantage_delta);
    let correct = group.correctness();
    let visits = group.visits();

    let pg = pg_loss(policy, group, &advantages, config.clip_epsilon)?;
    let kl = kl_penalty(policy, reference, &visits)?;
    let cal = calibration_loss(policy, group, &correct)?;

    let (l1, l2) = (config.lambda1, config.lambda2);
    let mut grad = vec![0.0; policy.parameter_count()];
    let mut pull = vec![0.0; policy.parameter_count()];
    let mut cal_scaled = vec![0.0; policy.parameter_count()];
    let mut kl_scaled = vec![0.0; policy.parameter_count()];
    for i in 0..grad.len() {
        kl_scaled[i] = l1 * kl.grad[i];
        cal_scaled[i] = l2 * cal.grad[i];
        pull[i] = pg.grad[i] + kl_scaled[i];
        grad[i] = pull[i] + cal_scaled[i];
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            step,
            detail: format!(
                "non-finite gradient at parameter {i} (pg {}, kl {}, cal {})",
                pg.grad[i], kl.grad[i], cal.grad[i]
            ),
        });
    }

    let mut updated = policy.clone();
    for (z, g) in updated.logits_mut().iter_mut().zip(&grad) {
        *z -= config.learning_rate * g;
    }
    if let Some(i) = updated.logits().iter().position(|z| !z.is_finite()) {
        return Err(Error::Numerical {
            step,
            detail: format!(
                "logit {i} became {} (gradient {}, learning rate {})",
                updated.logits()[i],
                grad[i],
                config.learning_rate
            ),
        });
    }

    let entropies = path_entropies(&updated, group);
    let visited_entropy =
        visits.iter().map(|&(t, s)| updated.entropy_at(t, s)).sum::<f64>() / visits.len() as f64;
    let report = StepReport {
        loss_pg: pg.value,
        loss_kl: kl.value,
        loss_cal: cal.value,
        loss_total: pg.value + l1 * kl.value + l2 * cal.value,
        n_correct: correct.iter().filter(|&&c| c).count(),
        escape_lhs: l2_norm(&cal_scaled),
        escape_rhs: l2_norm(&kl_scaled),
        flatten_rhs: l2_norm(&pull),
        p_gold: env.gold.as_deref().map(|g| updated.path_prob(g)),
        p_refusal: updated.path_prob(&env.refusal),
        mean_entropy_correct: mean_where(&entropies, &correct, true),
        mean_entropy_incorrect: mean_where(&entropies, &correct, false),
        visited_entropy,
        gradient: grad,
    };
    Ok((updated, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Calibration term disabled.
    Grpo,
    Cdkc,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Grpo => "grpo",
            Variant::Cdkc => "cdkc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Trapped,
    Escaped,
    Flattened,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerdictConfig {
    /// Gold-path probability that counts as escape.
    pub escape_gold_prob: f64,
    /// Trapped requires the final gold probability below this multiple of its start.
    pub trap_gold_factor: f64,
    /// Ceiling on refusal probability for a flattened verdict; defaults to its start.
    pub refusal_ceiling: Option<f64>,
    /// Number of leading steps summarized as "early".
    pub early_steps: usize,
}

impl Default for VerdictConfig {
    fn default() -> Self {
        Self {
            escape_gold_prob: 0.5,
            trap_gold_factor: 2.0,
            refusal_ceiling: None,
            early_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    #[serde(flatten)]
    pub report: StepReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub p_gold: Option<f64>,
    pub p_refusal: f64,
    /// Mean per-position entropy along the refusal path's states.
    pub entropy: f64,
}

impl PolicySnapshot {
    fn of(policy: &ToyPolicy, env: &RefusalTrapEnv) -> Self {
        let states = policy.path_states(&env.refusal);
        let entropy = states.iter().enumerate().map(|(t, &s)| policy.entropy_at(t, s)).sum::<f64>()
            / states.len() as f64;
        Self {
            p_gold: env.gold.as_deref().map(|g| policy.path_prob(g)),
            p_refusal: policy.path_prob(&env.refusal),
            entropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub variant: Variant,
    pub steps: usize,
    pub initial: PolicySnapshot,
    pub final_state: PolicySnapshot,
    pub max_entropy: f64,
    pub first_escape_step: Option<usize>,
    /// Fraction of steps with `escape_lhs > escape_rhs`.
    pub escape_condition_rate: Option<f64>,
    pub early_escape_condition_rate: Option<f64>,
    /// Fraction of steps with `escape_lhs > flatten_rhs`.
    pub flatten_condition_rate: Option<f64>,
    pub refusal_monotone_early: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrace {
    pub rows: Vec<TraceRow>,
    pub summary: ScenarioSummary,
}

fn rate(rows: &[TraceRow], pred: impl Fn(&StepReport) -> bool) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().filter(|r| pred(&r.report)).count() as f64 / rows.len() as f64)
}

/// Runs the seeded training loop and classifies its outcome.
///
/// The `grpo` variant forces `lambda2 = 0`; `cdkc` uses the configured value.
pub fn run_scenario(
    env: &RefusalTrapEnv,
    config: &TrainConfig,
    variant: Variant,
    verdict_config: &VerdictConfig,
) -> Result<ScenarioTrace> {
    env.validate()?;
    config.validate()?;
    let mut config = *config;
    if variant == Variant::Grpo {
        config.lambda2 = 0.0;
    }
    let reference = env.reference()?;
    let mut policy = env.initial_policy()?;
    if let Some(gold) = &env.gold {
        let p = policy.path_prob(gold);
        if p >= env.rarity_bound() {
            return Err(invalid(format!(
                "gold path starts at probability {p}, not below the rarity bound {}",
                env.rarity_bound()
            )));
        }
    }

    let initial = PolicySnapshot::of(&policy, env);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut rows = Vec::with_capacity(config.steps);
    let mut first_escape_step = None;
    for step in 1..=config.steps {
        let group = sample_group(&policy, env, config.group_size, step as u64, &mut rng)?;
        let (next, report) = total_step(&policy, &reference, env, &group, &config, step)?;
        if first_escape_step.is_none() && report.p_gold.is_some_and(|p| p > verdict_config.escape_gold_prob) {
            first_escape_step = Some(step);
        }
        rows.push(TraceRow { step, report });
        policy = next;
    }
    let final_state = PolicySnapshot::of(&policy, env);

    let early = &rows[..rows.len().min(verdict_config.early_steps)];
    let mut previous = initial.p_refusal;
    let mut refusal_monotone_early = !early.is_empty();
    for r in early {
        if r.report.p_refusal < previous {
            refusal_monotone_early = false;
        }
        previous = r.report.p_refusal;
    }

    let verdict = if rows.is_empty() {
        Verdict::Inconclusive
    } else {
        match (initial.p_gold, final_state.p_gold) {
            (Some(_), Some(_)) if first_escape_step.is_some() => Verdict::Escaped,
            (Some(g0), Some(g1))
                if final_state.p_refusal > initial.p_refusal && g1 < verdict_config.trap_gold_factor * g0 =>
            {
                Verdict::Trapped
            }
            (None, None)
                if final_state.entropy > initial.entropy
                    && final_state.p_refusal
                        <= verdict_config.refusal_ceiling.unwrap_or(initial.p_refusal) =>
            {
                Verdict::Flattened
            }
            _ => Verdict::Inconclusive,
        }
    };

    let summary = ScenarioSummary {
        variant,
        steps: rows.len(),
        max_entropy: (env.vocab_size as f64).ln(),
        first_escape_step,
        escape_condition_rate: rate(&rows, |r| r.escape_lhs > r.escape_rhs),
        early_escape_condition_rate: rate(early, |r| r.escape_lhs > r.escape_rhs),
        flatten_condition_rate: rate(&rows, |r| r.escape_lhs > r.flatten_rhs),
        refusal_monotone_early,
        verdict,
        initial,
        final_state,
    };
    Ok(ScenarioTrace { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::policy::StateMode;

    fn env(gold: Option<Vec<usize>>) -> RefusalTrapEnv {
        RefusalTrapEnv {
            vocab_size: 4,
            horizon: 2,
            state_mode: StateMode::Positional,
            gold,
            refusal: vec![0, 0],
            p_ref_refusal: 0.9,
            p_init_refusal: 0.5,
            rarity_factor: 10.0,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn uniform_group_logprobs() {
        let p = ToyPolicy::uniform(4, 2, StateMode::Positional).unwrap();
        let g = sample_group(&p, &env(Some(vec![1, 2])), 8, 0, &mut rng(1)).unwrap();
        assert_eq!(g.len(), 8);
        for tr in &g.trajectories {
            let total: f64 = tr.logprobs.iter().sum();
            assert!((total - 2.0 * 0.25f64.ln()).abs() < 1e-12);
            assert_eq!(tr.logprobs, tr.old_logprobs);
            assert!((tr.entropy - 4f64.ln()).abs() < 1e-12);
        }
        assert!(sample_group(&p, &env(None), 1, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn sharp_policy_on_gold_always_rewarded() {
        let p = ToyPolicy::biased_toward(4, 2, StateMode::Positional, &[1, 2], 1.0 - 1e-12).unwrap();
        let g = sample_group(&p, &env(Some(vec![1, 2])), 8, 0, &mut rng(5)).unwrap();
        assert_eq!(g.rewards, vec![1.0; 8]);
    }

    #[test]
    fn sampling_is_seeded() {
        let p = ToyPolicy::uniform(4, 2, StateMode::PreviousToken).unwrap();
        let e = env(Some(vec![1, 2]));
        let a = sample_group(&p, &e, 8, 0, &mut rng(9)).unwrap();
        let b = sample_group(&p, &e, 8, 0, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    fn mixed_group(policy: &ToyPolicy, e: &RefusalTrapEnv) -> TrajectoryGroup {
        let mut r = rng(2);
        loop {
            let g = sample_group(policy, e, 8, 0, &mut r).unwrap();
            if g.rewards.iter().any(|&x| x > 0.0) && g.rewards.contains(&0.0) {
                return g;
            }
        }
    }

    #[test]
    fn zero_lambdas_reduce_to_policy_gradient() {
        let e = env(Some(vec![1, 2]));
        let policy = ToyPolicy::uniform(4, 2, StateMode::Positional).unwrap();
        let reference = e.reference().unwrap();
        let group = mixed_group(&policy, &e);
        let cfg = TrainConfig { lambda1: 0.0, lambda2: 0.0, learning_rate: 0.1, ..Default::default() };
        let (_, report) = total_step(&policy, &reference, &e, &group, &cfg, 1).unwrap();
        let adv = group_advantages(&group.rewards, cfg.advantage_delta);
        let pg = pg_loss(&policy, &group, &adv, cfg.clip_epsilon).unwrap();
        assert_eq!(report.gradient, pg.grad);
        assert_eq!(report.loss_total, pg.value);
        assert!(pg.value.abs() < 1e-9, "r = 1 makes the loss -mean(A) = 0");
    }

    #[test]
    fn homogeneous_rewards_leave_only_kl() {
        let e = env(None);
        let policy = e.initial_policy().unwrap();
        let reference = e.reference().unwrap();
        let group = sample_group(&policy, &e, 8, 0, &mut rng(3)).unwrap();
        let cfg = TrainConfig { lambda1: 0.5, lambda2: 0.0, learning_rate: 0.1, ..Default::default() };
        let (next, report) = total_step(&policy, &reference, &e, &group, &cfg, 1).unwrap();
        let kl = kl_penalty(&policy, &reference, &group.visits()).unwrap();
        for ((z1, z0), g) in next.logits().iter().zip(policy.logits()).zip(&kl.grad) {
            assert_eq!(*z1, z0 - cfg.learning_rate * (cfg.lambda1 * g));
        }
        assert_eq!(report.loss_pg, 0.0);
    }

    fn mean_visited_entropy(policy: &ToyPolicy, group: &TrajectoryGroup) -> f64 {
        let e = path_entropies(policy, group);
        e.iter().sum::<f64>() / e.len() as f64
    }

    #[test]
    fn calibration_step_moves_entropy_by_sign() {
        for (gold, sharpen) in [(None, false), (Some(vec![0, 0]), true)] {
            let e = RefusalTrapEnv { refusal: vec![3, 3], ..env(gold.clone()) };
            let policy = ToyPolicy::biased_toward(4, 2, StateMode::Positional, &[0, 0], 0.6).unwrap();
            let group = TrajectoryGroup {
                context_id: 0,
                trajectories: (0..4)
                    .map(|_| Trajectory {
                        tokens: vec![0, 0],
                        states: vec![0, 0],
                        logprobs: policy.step_logprobs(&[0, 0]),
                        old_logprobs: policy.step_logprobs(&[0, 0]),
                        entropy: 0.0,
                    })
                    .collect(),
                rewards: vec![if sharpen { 1.0 } else { 0.0 }; 4],
            };
            let cfg = TrainConfig { lambda1: 0.0, lambda2: 1.0, learning_rate: 0.01, ..Default::default() };
            let (next, _) = total_step(&policy, &policy, &e, &group, &cfg, 1).unwrap();
            let (h0, h1) = (mean_visited_entropy(&policy, &group), mean_visited_entropy(&next, &group));
            if sharpen {
                assert!(h1 < h0);
            } else {
                assert!(h1 > h0);
            }
        }
    }

    #[test]
    fn rows_stay_normalized() {
        let e = env(Some(vec![1, 2]));
        let cfg = TrainConfig { learning_rate: 5.0, lambda1: 0.5, lambda2: 2.0, steps: 100, ..Default::default() };
        let reference = e.reference().unwrap();
        let mut policy = e.initial_policy().unwrap();
        let mut r = rng(4);
        for step in 0..cfg.steps {
            let g = sample_group(&policy, &e, cfg.group_size, step as u64, &mut r).unwrap();
            policy = total_step(&policy, &reference, &e, &g, &cfg, step).unwrap().0;
        }
        for t in 0..2 {
            let p = policy.probs(t, 0);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let e = env(None);
        let policy = e.initial_policy().unwrap();
        let group = sample_group(&policy, &e, 8, 0, &mut rng(0)).unwrap();
        let cfg = TrainConfig { lambda1: f64::INFINITY, ..Default::default() };
        match total_step(&policy, &e.reference().unwrap(), &e, &group, &cfg, 17) {
            Err(Error::Numerical { step, .. }) => assert_eq!(step, 17),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { clip_epsilon: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { advantage_delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda2: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { group_size: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_steps_inconclusive() {
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let t = run_scenario(&env(Some(vec![1, 2])), &cfg, Variant::Cdkc, &VerdictConfig::default()).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.summary.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn gold_must_start_rare() {
        let e = RefusalTrapEnv { rarity_factor: 0.01, ..env(Some(vec![1, 2])) };
        assert!(run_scenario(&e, &TrainConfig::default(), Variant::Grpo, &VerdictConfig::default()).is_err());
    }

    #[test]
    fn scenario_is_deterministic() {
        let cfg = TrainConfig { steps: 50, rng_seed: 8, lambda2: 1.0, ..Default::default() };
        let e = env(Some(vec![1, 2]));
        let a = run_scenario(&e, &cfg, Variant::Cdkc, &VerdictConfig::default()).unwrap();
        let b = run_scenario(&e, &cfg, Variant::Cdkc, &VerdictConfig::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

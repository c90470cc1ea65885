//! Finite-difference oracle shared by the gradient and acceptance tests.

use metacog::grpo::{
    calibration_loss, group_advantages, kl_penalty, pg_loss, StateMode, ToyPolicy, Trajectory, TrajectoryGroup,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
/// Components smaller than this (relative to the largest) are compared on
/// the largest component's scale.
const FLOOR: f64 = 1e-3;

pub fn random_policy(rng: &mut ChaCha8Rng) -> ToyPolicy {
    let v = rng.gen_range(2..=8);
    let t = rng.gen_range(1..=4);
    let mode = if rng.gen_bool(0.5) { StateMode::Positional } else { StateMode::PreviousToken };
    let n = ToyPolicy::uniform(v, t, mode).unwrap().parameter_count();
    let logits = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    ToyPolicy::from_logits(v, t, mode, logits).unwrap()
}

/// A group whose stored old log-probs are perturbed, so ratios differ from 1
/// and some trajectories fall in the clipped region.
pub fn random_group(policy: &ToyPolicy, rng: &mut ChaCha8Rng) -> TrajectoryGroup {
    let g = rng.gen_range(2..=6);
    let trajectories = (0..g)
        .map(|_| {
            let tokens = policy.sample_path(rng);
            let states = policy.path_states(&tokens);
            let logprobs = policy.step_logprobs(&tokens);
            let old_logprobs = logprobs.iter().map(|lp| lp + rng.gen_range(-0.3..0.3)).collect();
            Trajectory { tokens, states, logprobs, old_logprobs, entropy: 0.0 }
        })
        .collect();
    let rewards = (0..g).map(|_| if rng.gen_bool(0.4) { 1.0 } else { rng.gen_range(-1.0..0.5) }).collect();
    TrajectoryGroup { context_id: 0, trajectories, rewards }
}

fn finite_difference(policy: &ToyPolicy, f: impl Fn(&ToyPolicy) -> f64) -> Vec<f64> {
    (0..policy.parameter_count())
        .map(|i| {
            let mut up = policy.clone();
            up.logits_mut()[i] += H;
            let mut down = policy.clone();
            down.logits_mut()[i] -= H;
            (f(&up) - f(&down)) / (2.0 * H)
        })
        .collect()
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR * scale).max(1e-12))
        .fold(0.0, f64::max)
}

pub fn check_all(trials: u64) -> [f64; 3] {
    let mut worst = [0.0f64; 3];
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = random_policy(&mut rng);
        let mut reference = random_policy(&mut rng);
        while !reference.same_shape(&policy) {
            reference = random_policy(&mut rng);
        }
        let group = random_group(&policy, &mut rng);
        let adv = group_advantages(&group.rewards, 1e-8);
        let eps = 0.2;

        let pg = pg_loss(&policy, &group, &adv, eps).unwrap();
        let fd = finite_difference(&policy, |p| pg_loss(p, &group, &adv, eps).unwrap().value);
        worst[0] = worst[0].max(max_relative_error(&pg.grad, &fd));

        let visits = group.visits();
        let kl = kl_penalty(&policy, &reference, &visits).unwrap();
        let fd = finite_difference(&policy, |p| kl_penalty(p, &reference, &visits).unwrap().value);
        worst[1] = worst[1].max(max_relative_error(&kl.grad, &fd));

        let correct = group.correctness();
        let cal = calibration_loss(&policy, &group, &correct).unwrap();
        let fd = finite_difference(&policy, |p| calibration_loss(p, &group, &correct).unwrap().value);
        worst[2] = worst[2].max(max_relative_error(&cal.grad, &fd));
    }
    worst
}

//! Seeded corpora with planted parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::DecisionRecord;
use crate::signals::ResponseSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// One of `decay`, `calibrated`, `miscalibrated`, `regions`, `decisions`.
    pub law: String,
    /// Queries (decay, regions) or pairs (calibrated, miscalibrated).
    pub n: usize,
    /// Samples per query.
    pub k: usize,
    pub a: f64,
    pub b: f64,
    /// Query uncertainties are drawn from `U[0, u_max]`.
    pub u_max: f64,
    /// Tokens per generated response.
    pub tokens: usize,
    /// Accuracy deficit of the miscalibrated law: `P(correct) = max(c - shift, 0)`.
    pub shift: f64,
    /// Per-query accuracies for the regions law, cycled over queries.
    pub accuracies: Vec<f64>,
    /// `[tp, fp, fn, tn]` for the decisions law.
    pub counts: [u64; 4],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            law: "decay".into(),
            n: 10_000,
            k: 16,
            a: 0.8,
            b: 0.1,
            u_max: 3.0,
            tokens: 8,
            shift: 0.3,
            accuracies: vec![1.0, 0.9375, 0.5, 0.0625, 0.0],
            counts: [7974, 2026, 5870, 8965],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    Samples(Vec<ResponseSample>),
    Decisions(Vec<DecisionRecord>),
}

/// Lowest confidence drawn by the pair laws.
const MIN_CONFIDENCE: f64 = 0.05;

/// Token log-probs whose mean is exactly `-u` up to rounding.
fn token_logprobs<R: Rng>(u: f64, tokens: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..tokens).map(|_| rng.gen_range(0.5..1.5)).collect();
    let mean = w.iter().sum::<f64>() / tokens as f64;
    w.iter().map(|x| -u * x / mean).collect()
}

fn check(cfg: &SyntheticConfig) -> Result<()> {
    if cfg.tokens == 0 {
        return Err(invalid("tokens must be >= 1"));
    }
    match cfg.law.as_str() {
        "decay" => {
            if cfg.n == 0 || cfg.k == 0 {
                return Err(invalid("decay law needs n >= 1 and k >= 1"));
            }
            if !(cfg.u_max > 0.0 && cfg.u_max.is_finite()) {
                return Err(invalid("u_max must be finite and > 0"));
            }
            let lo = cfg.a * (-cfg.u_max).exp() + cfg.b;
            let hi = cfg.a + cfg.b;
            if !(0.0..=1.0).contains(&lo.min(hi)) || !(0.0..=1.0).contains(&lo.max(hi)) {
                return Err(invalid(format!(
                    "a*exp(-u)+b leaves [0, 1] on [0, {}] for a={}, b={}",
                    cfg.u_max, cfg.a, cfg.b
                )));
            }
        }
        "calibrated" | "miscalibrated" => {
            if cfg.n == 0 {
                return Err(invalid("pair laws need n >= 1"));
            }
            if !(0.0..=1.0).contains(&cfg.shift) {
                return Err(invalid("shift must lie in [0, 1]"));
            }
        }
        "regions" => {
            if cfg.n == 0 || cfg.k == 0 || cfg.accuracies.is_empty() {
                return Err(invalid("regions law needs n, k >= 1 and at least one accuracy"));
            }
            if let Some(a) = cfg.accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(invalid(format!("accuracy {a} outside [0, 1]")));
            }
        }
        "decisions" => {
            if cfg.counts.iter().sum::<u64>() == 0 {
                return Err(invalid("decision counts are all zero"));
            }
        }
        other => return Err(invalid(format!("unknown law '{other}'"))),
    }
    Ok(())
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    check(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match cfg.law.as_str() {
        "decay" => Corpus::Samples(decay_law(cfg, &mut rng)),
        "calibrated" => Corpus::Samples(pair_law(cfg, 0.0, &mut rng)),
        "miscalibrated" => Corpus::Samples(pair_law(cfg, cfg.shift, &mut rng)),
        "regions" => Corpus::Samples(regions_law(cfg, &mut rng)),
        "decisions" => Corpus::Decisions(decisions_law(cfg, &mut rng)),
        _ => unreachable!("checked above"),
    })
}

fn decay_law(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<ResponseSample> {
    let mut out = Vec::with_capacity(cfg.n * cfg.k);
    for q in 0..cfg.n {
        let u = rng.gen_range(0.0..=cfg.u_max);
        let p = cfg.a * (-u).exp() + cfg.b;
        for s in 0..cfg.k {
            out.push(ResponseSample {
                query_id: format!("q{q:06}"),
                sample_id: s as u64,
                token_logprobs: token_logprobs(u, cfg.tokens, rng),
                step_distributions: None,
                answer_text: None,
                correct: rng.gen_bool(p),
            });
        }
    }
    out
}

/// Systematic sampling in ascending confidence order: each pair is correct
/// with probability exactly `p_i`, and any run of neighbouring confidences
/// holds the expected number of correct pairs to within one.
fn systematic_draws(p: &[f64], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
    let mut out = vec![false; p.len()];
    let mut cum: f64 = rng.gen();
    for i in order {
        let before = cum.floor();
        cum += p[i];
        out[i] = cum.floor() > before;
    }
    out
}

fn pair_law(cfg: &SyntheticConfig, shift: f64, rng: &mut ChaCha8Rng) -> Vec<ResponseSample> {
    let conf: Vec<f64> = (0..cfg.n).map(|_| rng.gen_range(MIN_CONFIDENCE..1.0)).collect();
    let p: Vec<f64> = conf.iter().map(|c| (c - shift).max(0.0)).collect();
    let correct = systematic_draws(&p, rng);
    conf.iter()
        .zip(correct)
        .enumerate()
        .map(|(i, (&c, correct))| ResponseSample {
            query_id: format!("p{i:06}"),
            sample_id: 0,
            token_logprobs: token_logprobs(-c.ln(), cfg.tokens, rng),
            step_distributions: None,
            answer_text: None,
            correct,
        })
        .collect()
}

fn regions_law(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<ResponseSample> {
    let mut out = Vec::with_capacity(cfg.n * cfg.k);
    for q in 0..cfg.n {
        let acc = cfg.accuracies[q % cfg.accuracies.len()];
        let n_correct = (acc * cfg.k as f64).round() as usize;
        let mut flags: Vec<bool> = (0..cfg.k).map(|i| i < n_correct).collect();
        flags.shuffle(rng);
        let base_u = 0.1 + 2.0 * (1.0 - acc);
        for (s, correct) in flags.into_iter().enumerate() {
            let u = base_u * rng.gen_range(0.8..1.2);
            out.push(ResponseSample {
                query_id: format!("r{q:06}"),
                sample_id: s as u64,
                token_logprobs: token_logprobs(u, cfg.tokens, rng),
                step_distributions: None,
                answer_text: Some(if correct { format!("answer {q}") } else { format!("guess {q} {s}") }),
                correct,
            });
        }
    }
    out
}

fn decisions_law(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<DecisionRecord> {
    let [tp, fp, fn_, tn] = cfg.counts;
    let mut kinds: Vec<(bool, bool)> = Vec::new();
    for (n, answerable, abstained) in [(tp, true, false), (fp, false, false), (fn_, true, true), (tn, false, true)] {
        kinds.extend(std::iter::repeat_n((answerable, abstained), n as usize));
    }
    kinds.shuffle(rng);
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, (answerable, abstained))| {
            let (correct, uncertainty) = if abstained {
                (None, None)
            } else {
                let c: f64 = rng.gen_range(MIN_CONFIDENCE..1.0);
                (Some(rng.gen_bool(c)), Some(-c.ln()))
            };
            DecisionRecord {
                query_id: format!("d{i:06}"),
                answerable,
                abstained,
                correct,
                uncertainty,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(c: Corpus) -> Vec<ResponseSample> {
        match c {
            Corpus::Samples(s) => s,
            Corpus::Decisions(_) => panic!("expected samples"),
        }
    }

    #[test]
    fn decay_samples_share_query_uncertainty() {
        let cfg = SyntheticConfig { n: 20, k: 4, ..Default::default() };
        let s = samples(generate(&cfg, 1).unwrap());
        assert_eq!(s.len(), 80);
        for chunk in s.chunks(4) {
            let u0 = chunk[0].uncertainty().unwrap().value();
            for x in chunk {
                x.validate().unwrap();
                assert!((x.uncertainty().unwrap().value() - u0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_and_law_checked() {
        let cfg = SyntheticConfig { n: 50, ..Default::default() };
        assert_eq!(generate(&cfg, 7).unwrap(), generate(&cfg, 7).unwrap());
        assert_ne!(generate(&cfg, 7).unwrap(), generate(&cfg, 8).unwrap());
        let bad = SyntheticConfig { law: "zipf".into(), ..Default::default() };
        assert!(generate(&bad, 0).is_err());
        let bad = SyntheticConfig { a: 0.95, b: 0.1, ..Default::default() };
        assert!(generate(&bad, 0).is_err());
    }

    #[test]
    fn regions_accuracy_exact() {
        let cfg = SyntheticConfig { law: "regions".into(), n: 5, k: 16, ..Default::default() };
        let s = samples(generate(&cfg, 0).unwrap());
        let correct: Vec<usize> = s.chunks(16).map(|c| c.iter().filter(|x| x.correct).count()).collect();
        assert_eq!(correct, vec![16, 15, 8, 1, 0]);
    }

    #[test]
    fn systematic_draws_are_unbiased() {
        let p = [0.3, 0.9, 0.05, 0.5];
        let mut hits = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 40_000;
        for _ in 0..trials {
            for (h, c) in hits.iter_mut().zip(systematic_draws(&p, &mut rng)) {
                *h += usize::from(c);
            }
        }
        for (h, p) in hits.iter().zip(p) {
            assert!((*h as f64 / trials as f64 - p).abs() < 0.01, "{hits:?}");
        }
    }

    #[test]
    fn decision_counts() {
        let cfg = SyntheticConfig { law: "decisions".into(), counts: [3, 2, 1, 4], ..Default::default() };
        let Corpus::Decisions(d) = generate(&cfg, 0).unwrap() else { panic!() };
        let c = crate::metrics::ConfusionCounts::from_records(&d);
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 2, 1, 4));
        assert!(d.iter().all(|r| r.validate().is_ok()));
    }
}

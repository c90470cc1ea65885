//! Fitting the exponential decay of accuracy in uncertainty,
//! `E[acc | u] ~ a * exp(-u) + b`.
//!
//! Per-query means are reduced to equal-width bin centroids, and the two
//! parameters are estimated by Levenberg-Marquardt on the centroid residuals.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signals::{ResponseSample, UncertaintyValue};

/// Mean uncertainty and accuracy over the K samples of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAggregate {
    pub query_id: String,
    pub mean_uncertainty: f64,
    pub mean_accuracy: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCentroid {
    pub bin_index: usize,
    /// Mean uncertainty of the queries in the bin.
    pub phi: f64,
    /// Mean accuracy of the queries in the bin.
    pub psi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub a: f64,
    pub b: f64,
    pub centroids: Vec<BinCentroid>,
    pub rmse: f64,
    pub r_squared: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Weight each centroid by its query count (otherwise all weigh the same).
    pub count_weighted: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-10,
            count_weighted: true,
        }
    }
}

/// Groups samples by query (first-appearance order) and averages them.
pub fn aggregate_queries(samples: &[ResponseSample]) -> Result<Vec<QueryAggregate>> {
    if samples.is_empty() {
        return Err(invalid("no samples to aggregate"));
    }
    let mut groups: IndexMap<&str, (f64, usize, usize)> = IndexMap::new();
    for s in samples {
        let u = s.uncertainty()?.value();
        let e = groups.entry(s.query_id.as_str()).or_insert((0.0, 0, 0));
        e.0 += u;
        e.1 += usize::from(s.correct);
        e.2 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(id, (u_sum, correct, k))| QueryAggregate {
            query_id: id.to_string(),
            mean_uncertainty: u_sum / k as f64,
            mean_accuracy: correct as f64 / k as f64,
            k,
        })
        .collect())
}

/// Splits `[min u, max u]` into `m` equal-width bins (the last one closed)
/// and returns the centroid of every non-empty bin in bin order.
pub fn bin_equidistant(aggregates: &[QueryAggregate], m: usize) -> Result<Vec<BinCentroid>> {
    if aggregates.is_empty() {
        return Err(invalid("no aggregates to bin"));
    }
    let (lo, hi) = aggregates.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
        (lo.min(q.mean_uncertainty), hi.max(q.mean_uncertainty))
    });
    if hi <= lo {
        return Err(Error::DegenerateRange { value: lo });
    }
    bin_equidistant_in(aggregates, m, (lo, hi))
}

/// Like [`bin_equidistant`] over a fixed `[lo, hi]` range. Every aggregate must
/// fall inside the range.
pub fn bin_equidistant_in(
    aggregates: &[QueryAggregate],
    m: usize,
    (lo, hi): (f64, f64),
) -> Result<Vec<BinCentroid>> {
    if m < 2 {
        return Err(invalid(format!("bin count must be >= 2, got {m}")));
    }
    if aggregates.is_empty() {
        return Err(invalid("no aggregates to bin"));
    }
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return Err(Error::DegenerateRange { value: lo });
    }
    let width = (hi - lo) / m as f64;
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); m];
    for q in aggregates {
        let u = q.mean_uncertainty;
        if !(lo..=hi).contains(&u) {
            return Err(invalid(format!(
                "query {} has uncertainty {u} outside [{lo}, {hi}]",
                q.query_id
            )));
        }
        let idx = (((u - lo) / width).floor() as usize).min(m - 1);
        let s = &mut sums[idx];
        s.0 += u;
        s.1 += q.mean_accuracy;
        s.2 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.2 > 0)
        .map(|(i, (u, acc, n))| BinCentroid {
            bin_index: i,
            phi: u / n as f64,
            psi: acc / n as f64,
            count: n,
        })
        .collect())
}

/// `a * exp(-u) + b`, unclamped.
pub fn predict_decay(fit: &DecayFit, u: UncertaintyValue) -> f64 {
    fit.a * (-u.value()).exp() + fit.b
}

struct Problem {
    basis: Vec<f64>,
    psi: Vec<f64>,
    weight: Vec<f64>,
}

impl Problem {
    fn residuals(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.basis
            .iter()
            .zip(&self.psi)
            .zip(&self.weight)
            .map(move |((&e, &y), &w)| (e, y - a * e - b, w))
    }

    fn cost(&self, a: f64, b: f64) -> f64 {
        self.residuals(a, b).map(|(_, r, w)| w * r * r).sum()
    }

    /// Gradient of the cost and the Gauss-Newton matrix `J^T W J`.
    fn linearize(&self, a: f64, b: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        for (e, r, w) in self.residuals(a, b) {
            // d r / d a = -e, d r / d b = -1
            g[0] += -2.0 * w * r * e;
            g[1] += -2.0 * w * r;
            h[0][0] += w * e * e;
            h[0][1] += w * e;
            h[1][1] += w;
        }
        h[1][0] = h[0][1];
        (g, h)
    }
}

/// Levenberg-Marquardt fit of `psi ~ a * exp(-phi) + b` over the centroids.
///
/// Weights are normalized to sum to one, so the objective is a (weighted) mean
/// squared residual and scaling every count by the same factor changes nothing.
pub fn fit_decay(centroids: &[BinCentroid], config: &FitConfig) -> Result<DecayFit> {
    let mut distinct: Vec<f64> = centroids.iter().map(|c| c.phi).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if centroids.len() < 3 || distinct.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 centroids with distinct uncertainty, got {} ({} distinct)",
            centroids.len(),
            distinct.len()
        )));
    }
    if centroids.iter().any(|c| !c.phi.is_finite() || !c.psi.is_finite() || c.count == 0) {
        return Err(invalid("centroids must be finite with positive counts"));
    }
    let raw: Vec<f64> = centroids
        .iter()
        .map(|c| if config.count_weighted { c.count as f64 } else { 1.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    let problem = Problem {
        basis: centroids.iter().map(|c| (-c.phi).exp()).collect(),
        psi: centroids.iter().map(|c| c.psi).collect(),
        weight: raw.iter().map(|w| w / total).collect(),
    };

    let (psi_min, psi_max) = problem
        .psi
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let (mut a, mut b) = (psi_max - psi_min, psi_min);
    let mut cost = problem.cost(a, b);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let (mut grad, mut jtj) = problem.linearize(a, b);
    let mut grad_norm = grad[0].hypot(grad[1]);

    while grad_norm >= config.gradient_tolerance && iterations < config.max_iterations {
        iterations += 1;
        let mut stepped = false;
        for _ in 0..40 {
            let m00 = jtj[0][0] * (1.0 + lambda);
            let m11 = jtj[1][1] * (1.0 + lambda);
            let m01 = jtj[0][1];
            let det = m00 * m11 - m01 * m01;
            if det.abs() < f64::MIN_POSITIVE {
                lambda *= 10.0;
                continue;
            }
            // Solve M delta = -grad / 2
            let (r0, r1) = (-0.5 * grad[0], -0.5 * grad[1]);
            let da = (m11 * r0 - m01 * r1) / det;
            let db = (m00 * r1 - m01 * r0) / det;
            let candidate = problem.cost(a + da, b + db);
            if candidate <= cost {
                a += da;
                b += db;
                cost = candidate;
                lambda = (lambda / 10.0).max(1e-15);
                stepped = true;
                break;
            }
            lambda *= 10.0;
        }
        (grad, jtj) = problem.linearize(a, b);
        grad_norm = grad[0].hypot(grad[1]);
        if !stepped {
            break;
        }
    }

    let mean_psi: f64 = problem.psi.iter().zip(&problem.weight).map(|(y, w)| y * w).sum();
    let ss_tot: f64 = problem
        .psi
        .iter()
        .zip(&problem.weight)
        .map(|(y, w)| w * (y - mean_psi).powi(2))
        .sum();
    let ss_res = cost;
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= f64::EPSILON {
        1.0
    } else {
        0.0
    };

    Ok(DecayFit {
        a,
        b,
        centroids: centroids.to_vec(),
        rmse: ss_res.max(0.0).sqrt(),
        r_squared,
        iterations,
        converged: grad_norm < config.gradient_tolerance,
        gradient_norm: grad_norm,
    })
}

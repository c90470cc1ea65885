//! Decision-state counts over answerable/unanswerable questions and
//! expected calibration error over equal-mass confidence bins.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::regions::normalize_answer;

/// Marker phrase for an abstaining response.
pub const DEFAULT_ABSTAIN_MARKER: &str = "the answer is unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub query_id: String,
    pub answerable: bool,
    pub abstained: bool,
    /// Grade of the answer; absent when the model abstained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    /// Mean NLL of the response, when known; feeds the calibration report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
}

impl DecisionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.abstained && self.correct.is_some() {
            return Err(invalid(format!(
                "record {}: abstained responses cannot carry a grade",
                self.query_id
            )));
        }
        if let Some(u) = self.uncertainty {
            if !u.is_finite() || u < 0.0 {
                return Err(invalid(format!("record {}: uncertainty {u} is invalid", self.query_id)));
            }
        }
        Ok(())
    }
}

/// True if the normalized response contains any normalized marker.
pub fn is_abstention(response: &str, markers: &[String]) -> bool {
    let text = format!(" {} ", normalize_answer(response));
    markers.iter().any(|m| {
        let m = normalize_answer(m);
        !m.is_empty() && text.contains(&format!(" {m} "))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecisionState {
    TruePositive,
    FalseNegative,
    TrueNegative,
    FalsePositive,
}

pub fn classify_decision(record: &DecisionRecord) -> DecisionState {
    match (record.answerable, record.abstained) {
        (true, false) => DecisionState::TruePositive,
        (true, true) => DecisionState::FalseNegative,
        (false, true) => DecisionState::TrueNegative,
        (false, false) => DecisionState::FalsePositive,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionCounts {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a DecisionRecord>) -> Self {
        let mut c = Self::default();
        for r in records {
            c.add(classify_decision(r));
        }
        c
    }

    pub fn add(&mut self, state: DecisionState) {
        match state {
            DecisionState::TruePositive => self.tp += 1,
            DecisionState::FalseNegative => self.fn_ += 1,
            DecisionState::TrueNegative => self.tn += 1,
            DecisionState::FalsePositive => self.fp += 1,
        }
    }

    /// Counts merge by addition.
    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CognitiveReport {
    pub counts: ConfusionCounts,
    /// Answer reliability, `TP / (TP + FP)`.
    pub ar: Option<f64>,
    /// Knowledge elicitation, `TP / (TP + FN)`.
    pub kei: Option<f64>,
    /// Refusal reliability, `TN / (TN + FN)`.
    pub npv: Option<f64>,
    /// Harmonic mean of AR and KEI.
    pub cbs: Option<f64>,
    /// Share of correct decisions overall.
    pub cae: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `2 * ar * kei / (ar + kei)`, absent when the sum is zero.
pub fn harmonic_balance(ar: f64, kei: f64) -> Option<f64> {
    let s = ar + kei;
    (s > 0.0).then(|| 2.0 * ar * kei / s)
}

pub fn cognitive_metrics(counts: ConfusionCounts) -> Result<CognitiveReport> {
    if counts.total() == 0 {
        return Err(invalid("all decision counts are zero"));
    }
    let ConfusionCounts { tp, fn_, tn, fp } = counts;
    let ar = ratio(tp, tp + fp);
    let kei = ratio(tp, tp + fn_);
    let cbs = match (ar, kei) {
        (Some(a), Some(k)) => harmonic_balance(a, k),
        _ => None,
    };
    Ok(CognitiveReport {
        counts,
        ar,
        kei,
        npv: ratio(tn, tn + fn_),
        cbs,
        cae: ratio(tp + tn, counts.total()),
    })
}

/// Decision-state shares, as fractions, within each question type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorDistribution {
    /// (TP, FN) over answerable questions.
    pub answerable: Option<(f64, f64)>,
    /// (TN, FP) over unanswerable questions.
    pub unanswerable: Option<(f64, f64)>,
}

pub fn behavior_distribution(records: &[DecisionRecord]) -> BehaviorDistribution {
    let c = ConfusionCounts::from_records(records);
    let pair = |a: u64, b: u64| {
        let n = a + b;
        (n > 0).then(|| (a as f64 / n as f64, b as f64 / n as f64))
    };
    BehaviorDistribution {
        answerable: pair(c.tp, c.fn_),
        unanswerable: pair(c.tn, c.fp),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
    pub m: usize,
}

/// Sizes of `m` contiguous equal-mass bins over `n` items; larger bins first.
pub fn equal_mass_sizes(n: usize, m: usize) -> Vec<usize> {
    let (base, extra) = (n / m, n % m);
    (0..m).map(|i| base + usize::from(i < extra)).collect()
}

/// ECE over `m` equal-mass bins of ascending confidence.
///
/// Ties keep input order (stable sort), and when `n` is not a multiple of `m`
/// the first `n % m` bins hold one extra item.
pub fn ece_equal_mass(pairs: &[(f64, bool)], m: usize) -> Result<CalibrationReport> {
    if m == 0 {
        return Err(invalid("bin count must be >= 1"));
    }
    if pairs.len() < m {
        return Err(invalid(format!("{} predictions cannot fill {m} bins", pairs.len())));
    }
    if let Some((c, _)) = pairs.iter().find(|(c, _)| !(*c > 0.0 && *c <= 1.0)) {
        return Err(invalid(format!("confidence {c} outside (0, 1]")));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));

    let n = sorted.len() as f64;
    let mut bins = Vec::with_capacity(m);
    let mut weighted_gap = 0.0;
    let mut start = 0;
    for size in equal_mass_sizes(sorted.len(), m) {
        let chunk = &sorted[start..start + size];
        start += size;
        let conf = chunk.iter().map(|p| p.0).sum::<f64>() / size as f64;
        let acc = chunk.iter().filter(|p| p.1).count() as f64 / size as f64;
        weighted_gap += size as f64 * (acc - conf).abs();
        bins.push(CalibrationBin {
            count: size,
            mean_confidence: conf,
            mean_accuracy: acc,
        });
    }
    let ece = (weighted_gap / n).clamp(0.0, 1.0);
    Ok(CalibrationReport { ece, bins, m })
}

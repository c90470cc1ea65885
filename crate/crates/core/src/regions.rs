//! Behavior profiles and knowledge-region assignment.
//!
//! A query's K samples are summarized into a [`BehaviorProfile`]; a fixed
//! threshold rule on mean accuracy maps it to Mastered, Confused or Missing,
//! and each region gets its own augmentation strategy.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signals::ResponseSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub answer_text: Option<String>,
    pub uncertainty: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    pub query_id: String,
    pub gold_answer: Option<String>,
    /// Ordered by sample id.
    pub samples: Vec<ProfileSample>,
    pub mean_accuracy: f64,
    pub mean_uncertainty: f64,
}

/// Ordered from least to most knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KnowledgeRegion {
    Missing,
    Confused,
    Mastered,
}

impl KnowledgeRegion {
    pub const ALL: [KnowledgeRegion; 3] = [Self::Mastered, Self::Confused, Self::Missing];

    pub fn strategy(self) -> AugmentationStrategy {
        match self {
            Self::Missing => AugmentationStrategy::EpistemicFoundation,
            Self::Confused => AugmentationStrategy::StructuralDisambiguation,
            Self::Mastered => AugmentationStrategy::BoundaryExpansion,
        }
    }
}

impl fmt::Display for KnowledgeRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Missing => "Missing",
            Self::Confused => "Confused",
            Self::Mastered => "Mastered",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentationStrategy {
    /// Build the missing facts from retrieved evidence.
    EpistemicFoundation,
    /// Clarify and decompose an unstable question.
    StructuralDisambiguation,
    /// Extend a stable answer to related concepts.
    BoundaryExpansion,
}

impl AugmentationStrategy {
    /// Search template; `{tags}` is replaced by the comma-joined tags.
    pub fn search_template(self) -> &'static str {
        match self {
            Self::EpistemicFoundation => "definition and core facts of {tags}",
            Self::StructuralDisambiguation => "relations and distinctions between {tags}",
            Self::BoundaryExpansion => "comparisons and broader context of {tags}",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionThresholds {
    pub mastered_floor: f64,
    pub missing_ceiling: f64,
    /// Band by which the cuts may move for answer-consistent profiles.
    pub tolerance: f64,
}

/// Slack on threshold comparisons so that cuts like `0.8 - 0.1` stay inclusive.
const CUT_SLACK: f64 = 1e-12;

impl Default for RegionThresholds {
    fn default() -> Self {
        Self {
            mastered_floor: 0.80,
            missing_ceiling: 0.20,
            tolerance: 0.0,
        }
    }
}

impl RegionThresholds {
    pub fn validate(&self) -> Result<()> {
        let Self { mastered_floor: hi, missing_ceiling: lo, tolerance: t } = *self;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(invalid(format!(
                "thresholds need 0 <= missing_ceiling < mastered_floor <= 1, got {lo} and {hi}"
            )));
        }
        if !(t >= 0.0 && t < (hi - lo) / 2.0 - CUT_SLACK) {
            return Err(invalid(format!(
                "tolerance {t} must lie in [0, {})",
                (hi - lo) / 2.0
            )));
        }
        Ok(())
    }
}

/// Builds the profile for one query. Samples are reordered by `sample_id`.
pub fn build_profile(samples: &[ResponseSample], gold: Option<&str>) -> Result<BehaviorProfile> {
    let first = samples.first().ok_or_else(|| invalid("profile needs at least one sample"))?;
    if let Some(other) = samples.iter().find(|s| s.query_id != first.query_id) {
        return Err(invalid(format!(
            "mixed query ids in one profile: {} and {}",
            first.query_id, other.query_id
        )));
    }
    let mut ordered: Vec<&ResponseSample> = samples.iter().collect();
    ordered.sort_by_key(|s| s.sample_id);
    let profile_samples = ordered
        .into_iter()
        .map(|s| {
            Ok(ProfileSample {
                answer_text: s.answer_text.clone(),
                uncertainty: s.uncertainty()?.value(),
                correct: s.correct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = profile_samples.len() as f64;
    let mean_accuracy = profile_samples.iter().filter(|s| s.correct).count() as f64 / k;
    let mean_uncertainty = profile_samples.iter().map(|s| s.uncertainty).sum::<f64>() / k;
    Ok(BehaviorProfile {
        query_id: first.query_id.clone(),
        gold_answer: gold.map(str::to_string),
        samples: profile_samples,
        mean_accuracy,
        mean_uncertainty,
    })
}

/// True when every correct sample carries an answer and all of them
/// normalize to the same string.
pub fn answers_consistent(profile: &BehaviorProfile) -> bool {
    let mut normalized = profile
        .samples
        .iter()
        .filter(|s| s.correct)
        .map(|s| s.answer_text.as_deref().map(normalize_answer));
    let Some(Some(first)) = normalized.next() else {
        return false;
    };
    normalized.all(|n| n.as_deref() == Some(first.as_str()))
}

/// Threshold rule on mean accuracy.
pub fn assign_region(profile: &BehaviorProfile, thresholds: &RegionThresholds) -> KnowledgeRegion {
    let t = if thresholds.tolerance > 0.0 && answers_consistent(profile) {
        thresholds.tolerance
    } else {
        0.0
    };
    let acc = profile.mean_accuracy;
    if acc >= thresholds.mastered_floor - t - CUT_SLACK {
        KnowledgeRegion::Mastered
    } else if acc <= thresholds.missing_ceiling + t + CUT_SLACK {
        KnowledgeRegion::Missing
    } else {
        KnowledgeRegion::Confused
    }
}

/// Demotes Mastered profiles whose mean uncertainty is above the given
/// quantile of all profiles' mean uncertainty.
pub fn apply_uncertainty_veto(
    profiles: &[BehaviorProfile],
    regions: &mut [KnowledgeRegion],
    quantile: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(invalid(format!("veto quantile {quantile} outside [0, 1]")));
    }
    if profiles.len() != regions.len() {
        return Err(invalid("profiles and regions differ in length"));
    }
    if profiles.is_empty() {
        return Ok(());
    }
    let mut u: Vec<f64> = profiles.iter().map(|p| p.mean_uncertainty).collect();
    u.sort_by(f64::total_cmp);
    // nearest-rank quantile
    let rank = ((quantile * u.len() as f64).ceil() as usize).clamp(1, u.len());
    let cut = u[rank - 1];
    for (p, r) in profiles.iter().zip(regions.iter_mut()) {
        if *r == KnowledgeRegion::Mastered && p.mean_uncertainty > cut {
            *r = KnowledgeRegion::Confused;
        }
    }
    Ok(())
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop punctuation, collapse whitespace and drop leading articles.
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    let mut words: Vec<&str> = cleaned.split_whitespace().collect();
    while words.len() > 1 && ARTICLES.contains(&words[0]) {
        words.remove(0);
    }
    words.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeMode {
    #[default]
    Equality,
    /// The normalized gold appears as a whole-word span of the candidate.
    Containment,
}

pub fn grade_answer(candidate: &str, gold: &str, mode: GradeMode) -> Result<bool> {
    let g = normalize_answer(gold);
    if g.is_empty() {
        return Err(invalid("gold answer is empty after normalization"));
    }
    let c = normalize_answer(candidate);
    Ok(match mode {
        GradeMode::Equality => c == g,
        GradeMode::Containment => format!(" {c} ").contains(&format!(" {g} ")),
    })
}

/// Supplies cognitive tags for a profile.
pub trait TagExtractor {
    fn extract(&self, profile: &BehaviorProfile) -> Vec<String>;
}

/// Returns no tags; the search query falls back to the raw question.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoTags;

impl TagExtractor for NoTags {
    fn extract(&self, _profile: &BehaviorProfile) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationManifest {
    pub query_id: String,
    pub region: KnowledgeRegion,
    pub strategy: AugmentationStrategy,
    pub cognitive_tags: Vec<String>,
    pub search_query_template: String,
    pub search_query: String,
}

/// `raw_query` is the question text if known, otherwise the query id is used.
pub fn emit_manifest(
    profile: &BehaviorProfile,
    region: KnowledgeRegion,
    tags: &[String],
    raw_query: Option<&str>,
) -> AugmentationManifest {
    let strategy = region.strategy();
    let template = strategy.search_template().to_string();
    let search_query = if tags.is_empty() {
        raw_query.unwrap_or(&profile.query_id).to_string()
    } else {
        template.replace("{tags}", &tags.join(", "))
    };
    AugmentationManifest {
        query_id: profile.query_id.clone(),
        region,
        strategy,
        cognitive_tags: tags.to_vec(),
        search_query_template: template,
        search_query,
    }
}

/// The JSONL record written for each query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub query_id: String,
    pub region: KnowledgeRegion,
    pub strategy: AugmentationStrategy,
    pub cognitive_tags: Vec<String>,
    pub search_query: String,
}

impl From<&AugmentationManifest> for ManifestRecord {
    fn from(m: &AugmentationManifest) -> Self {
        Self {
            query_id: m.query_id.clone(),
            region: m.region,
            strategy: m.strategy,
            cognitive_tags: m.cognitive_tags.clone(),
            search_query: m.search_query.clone(),
        }
    }
}

//! Run configuration: one declarative file (TOML or JSON) with a section per
//! subcommand, overridable by flags and echoed into every report.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decay::FitConfig;
use crate::error::{Error, Result};
use crate::grpo::{RefusalTrapEnv, TrainConfig, Variant, VerdictConfig};
use crate::regions::RegionThresholds;
use crate::synthetic::SyntheticConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the scenario seed for `simulate`; defaults to 0 for `gen-synthetic`.
    pub seed: Option<u64>,
    pub lenient: bool,
    pub decay: DecayConfig,
    pub regions: RegionsConfig,
    pub metrics: MetricsConfig,
    pub simulate: SimulateConfig,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayConfig {
    /// Expected samples per query; mismatches only warn.
    pub k: usize,
    /// Number of equal-width bins.
    pub m: usize,
    /// Fixed binning range; defaults to the observed range.
    pub u_range: Option<[f64; 2]>,
    pub fit: FitConfig,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            k: 16,
            m: 100,
            u_range: None,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionsConfig {
    pub mastered_floor: f64,
    pub missing_ceiling: f64,
    pub tolerance: f64,
    /// Demote Mastered queries above this quantile of mean uncertainty.
    pub veto_quantile: Option<f64>,
}

impl Default for RegionsConfig {
    fn default() -> Self {
        let t = RegionThresholds::default();
        Self {
            mastered_floor: t.mastered_floor,
            missing_ceiling: t.missing_ceiling,
            tolerance: t.tolerance,
            veto_quantile: None,
        }
    }
}

impl RegionsConfig {
    pub fn thresholds(&self) -> RegionThresholds {
        RegionThresholds {
            mastered_floor: self.mastered_floor,
            missing_ceiling: self.missing_ceiling,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Equal-mass ECE bins.
    pub bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { bins: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Bundled scenario name or path to a scenario file.
    pub scenario: String,
    /// Inline scenario; takes precedence over `scenario` once resolved.
    pub inline: Option<ScenarioConfig>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scenario: "trap-cdkc".into(),
            inline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub variant: Variant,
    pub env: RefusalTrapEnv,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub verdict: VerdictConfig,
}

pub const BUNDLED_SCENARIOS: [(&str, &str); 3] = [
    ("trap-grpo", include_str!("../scenarios/trap-grpo.toml")),
    ("trap-cdkc", include_str!("../scenarios/trap-cdkc.toml")),
    ("flatten-cdkc", include_str!("../scenarios/flatten-cdkc.toml")),
];

fn config_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{what}: {e}"))
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err("scenario", e))
    }

    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED_SCENARIOS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml(text).expect("bundled scenarios parse"))
    }

    /// A bundled name, or a path to a TOML or JSON scenario file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some(s) = Self::bundled(name_or_path) {
            return Ok(s);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            let names: Vec<&str> = BUNDLED_SCENARIOS.iter().map(|(n, _)| *n).collect();
            return Err(Error::Config(format!(
                "no scenario file or bundled scenario named '{name_or_path}' (bundled: {})",
                names.join(", ")
            )));
        }
        let text = fs::read_to_string(path)?;
        if is_json(path) {
            serde_json::from_str(&text).map_err(|e| config_err("scenario", e))
        } else {
            Self::from_toml(&text)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

impl RunConfig {
    /// Reads a TOML or JSON config. A JSON report is accepted too, in which
    /// case its embedded `config` is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if is_json(path) {
            let mut value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| config_err("config", e))?;
            if value.get("tool").is_some() {
                value = value.get_mut("config").map(serde_json::Value::take).unwrap_or_default();
            }
            serde_json::from_value(value).map_err(|e| config_err("config", e))
        } else {
            toml::from_str(&text).map_err(|e| config_err("config", e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse_and_validate() {
        for (name, _) in BUNDLED_SCENARIOS {
            let s = ScenarioConfig::bundled(name).unwrap();
            assert_eq!(s.name, name);
            s.env.validate().unwrap();
            s.train.validate().unwrap();
        }
        assert!(ScenarioConfig::load("no-such-scenario").is_err());
    }

    #[test]
    fn trap_pair_differs_only_in_variant_and_budget() {
        let g = ScenarioConfig::bundled("trap-grpo").unwrap();
        let c = ScenarioConfig::bundled("trap-cdkc").unwrap();
        assert_eq!(g.env, c.env);
        assert_eq!(TrainConfig { steps: 0, ..g.train }, TrainConfig { steps: 0, ..c.train });
        assert_eq!((g.variant, c.variant), (Variant::Grpo, Variant::Cdkc));
    }

    #[test]
    fn toml_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        fs::write(&toml_path, "seed = 3\n[decay]\nm = 50\n[regions]\ntolerance = 0.1\n").unwrap();
        let c = RunConfig::load(&toml_path).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.decay.m, 50);
        assert_eq!(c.decay.k, 16);
        assert_eq!(c.regions.tolerance, 0.1);

        let json_path = dir.path().join("c.json");
        fs::write(&json_path, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&json_path).unwrap(), c);

        let report = serde_json::json!({"tool": "metacog", "config": c});
        fs::write(&json_path, report.to_string()).unwrap();
        assert_eq!(RunConfig::load(&json_path).unwrap(), c);

        fs::write(&toml_path, "bogus = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&toml_path), Err(Error::Config(_))));
    }
}

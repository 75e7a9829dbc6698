use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wfperf::error::{Error, Result};
use wfperf::search::{OracleSpec, SearchConfig, SyntheticSpaceConfig};
use wfperf::seeding::derive_seed;
use wfperf::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Hashing text embedder and structural feature provider.
    #[default]
    Local,
    /// The embedding service at `endpoint`, for both branches.
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    /// Embedding cache file for remote providers.
    pub cache: Option<PathBuf>,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Local,
            endpoint: None,
            cache: None,
            timeout_secs: 60,
            retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub workflows: usize,
    pub space: SyntheticSpaceConfig,
    pub oracle: OracleSpec,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            workflows: 400,
            space: SyntheticSpaceConfig::default(),
            oracle: OracleSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    pub samples_per_type: usize,
    /// Workflows kept out of the training QA file.
    pub holdout: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            samples_per_type: 3,
            holdout: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    pub budgets: Vec<u64>,
    pub runs: usize,
    pub cost_pred: u64,
    pub restart_after: usize,
    pub max_evaluations: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            budgets: vec![2_000, 20_000],
            runs: 5,
            cost_pred: s.cost_pred,
            restart_after: s.restart_after,
            max_evaluations: s.max_evaluations,
        }
    }
}

impl SearchSettings {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            cost_pred: self.cost_pred,
            restart_after: self.restart_after,
            max_evaluations: self.max_evaluations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            lambda: vec![0.0, 0.5, 1.0, 2.0],
            alpha: vec![0.1, 0.2, 0.4],
        }
    }
}

/// Everything a subcommand may read. Stage seeds are derived from `seed`
/// when the config is resolved, overwriting per-section seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub providers: ProviderConfig,
    pub synthetic: SyntheticConfig,
    pub qa: QaConfig,
    pub search: SearchSettings,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            dataset: None,
            checkpoint: None,
            out: None,
            train: TrainConfig::default(),
            providers: ProviderConfig::default(),
            synthetic: SyntheticConfig::default(),
            qa: QaConfig::default(),
            search: SearchSettings::default(),
            sweep: SweepSettings::default(),
        }
    }
}

/// Child seed for one pipeline stage.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    derive_seed(seed, stage)
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Derive stage seeds and validate every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = stage_seed(self.seed, "train");
        self.synthetic.space.seed = stage_seed(self.seed, "synthetic");
        self.synthetic.oracle.seed = stage_seed(self.seed, "oracle");
        self.train.validate()?;
        self.synthetic.space.validate()?;
        self.synthetic.oracle.validate()?;
        if self.qa.samples_per_type == 0 {
            return Err(Error::Config("qa.samples_per_type must be at least 1".into()));
        }
        if self.search.runs == 0 || self.search.budgets.is_empty() {
            return Err(Error::Config("search needs at least one run and one budget".into()));
        }
        if self.providers.kind == ProviderKind::Http && self.providers.endpoint.is_none() {
            return Err(Error::Config(
                "providers.kind = \"http\" needs an endpoint (--endpoint or WFPERF_ENDPOINT)".into(),
            ));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn search_seeds(&self) -> Vec<u64> {
        (0..self.search.runs)
            .map(|i| stage_seed(self.seed, &format!("search/{i}")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::default().resolve().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn section_keys_are_checked() {
        assert!(toml::from_str::<RunConfig>("[train]\nlamda = 1.0").is_err());
        let c: RunConfig = toml::from_str("seed = 3\n[train]\nd = 32").unwrap();
        assert_eq!(c.train.d, 32);
        assert_ne!(c.resolve().unwrap().train.seed, 0);
    }
}

//! Run configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stream::SynthSpec;
use crate::error::{CilError, Result};
use crate::inference::{EnergyMode, Strategy};
use crate::training::TrainConfig;

/// Where the task stream comes from. Exactly one source per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSource {
    Synthetic(SynthSpec),
    File { path: PathBuf },
}

impl Default for StreamSource {
    fn default() -> Self {
        StreamSource::Synthetic(SynthSpec::default())
    }
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}
fn default_true() -> bool {
    true
}
fn default_checkpoint_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub stream: StreamSource,
    /// Strategies evaluated on every step; the first one is the headline.
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_true")]
    pub use_adapters: bool,
    #[serde(default = "default_true")]
    pub use_mop: bool,
    #[serde(default)]
    pub energy_mode: EnergyMode,
    /// Not part of the report, so that runs in different directories
    /// produce identical reports.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    /// Write a checkpoint after every n-th task (and the last); 0 disables.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            stream: StreamSource::default(),
            strategies: default_strategies(),
            use_adapters: true,
            use_mop: true,
            energy_mode: EnergyMode::default(),
            output_dir: None,
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CilError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CilError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CilError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.strategies.is_empty() {
            return Err(CilError::Config("at least one strategy is required".into()));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(CilError::Config(format!("strategy {s} is listed twice")));
            }
        }
        if let StreamSource::Synthetic(spec) = &self.stream {
            spec.validate().map_err(|e| match e {
                CilError::InvalidArgument(m) => CilError::Config(m),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Short label for the ablation axes.
    pub fn variant_name(&self) -> &'static str {
        match (self.use_adapters, self.use_mop) {
            (false, false) => "zero-shot",
            (false, true) => "mop-only",
            (true, false) => "adapters-only",
            (true, true) => "full",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = RunConfig::from_toml_str(
            r#"
            strategies = ["max", "entropy"]
            use_mop = false
            [train]
            seed = 4
            num_projectors = 5
            [stream.synthetic]
            tasks = 3
            rho = 0.2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.strategies, vec![Strategy::Max, Strategy::Entropy]);
        assert!(!cfg.use_mop && cfg.use_adapters);
        assert_eq!(cfg.train.num_projectors, 5);
        assert_eq!(cfg.train.stage1_epochs, 30);
        match &cfg.stream {
            StreamSource::Synthetic(s) => assert_eq!((s.tasks, s.rho, s.dim), (3, 0.2, 64)),
            other => panic!("unexpected source {other:?}"),
        }
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_source() {
        let cfg = RunConfig::from_toml_str("[stream.file]\npath = \"data.cile\"\n").unwrap();
        assert_eq!(cfg.stream, StreamSource::File { path: "data.cile".into() });
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "strategies = []",
            "strategies = [\"entropy\", \"entropy\"]",
            "unknown_key = 1",
            "[train]\nlr = -1.0",
            "[stream.synthetic]\nrho = 2.0",
            "[stream.synthetic]\nseparation = 0.0",
            "[stream.synthetic]\n[stream.file]\npath = \"x\"",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(CilError::Config(_))), "{text}");
        }
    }
}

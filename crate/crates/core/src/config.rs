//! Pipeline configuration: one TOML file covering tracking, refinement,
//! loss weights, priors, and evaluation, with every field defaulting to the
//! built-in values. Precedence is defaults < config file < command-line
//! flags (applied by the CLI).

use crate::eval::EvalConfig;
use crate::losses::{LossWeights, Priors};
use crate::motion::TrackConfig;
use crate::refine::RefineConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse {
        path: std::path::PathBuf,
        msg: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub track: TrackConfig,
    pub refine: RefineConfig,
    pub weights: LossWeights,
    pub priors: Priors,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// The effective configuration as TOML, printed at startup so runs are
    /// reproducible from their logs.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Propagate the top-level seed into the tracker.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.track.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let parsed: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.weights, cfg.weights);
        assert_eq!(parsed.refine.n_views, cfg.refine.n_views);
        assert_eq!(parsed.eval.iou_threshold, cfg.eval.iou_threshold);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let parsed: PipelineConfig = toml::from_str(
            "seed = 7\n[weights]\nphoto = 5.0\n[refine]\nsteps = 10\n",
        )
        .unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.weights.photo, 5.0);
        assert_eq!(parsed.weights.sil, 1.0);
        assert_eq!(parsed.refine.steps, 10);
        assert_eq!(parsed.refine.n_views, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("nonsense = 1\n").is_err());
    }
}

//! Run configuration file (TOML). Every key is optional; missing keys take
//! their defaults, and command-line flags override both.
//!
//! ```toml
//! seed = 7
//!
//! [architecture]
//! backbone = "tiny_test"
//! head_width = 1024
//!
//! [training]
//! epochs_stage1 = 3
//! epochs_stage2 = 3
//! batch_size = 16
//!
//! [split]
//! numerator = 9
//! denominator = 10
//!
//! [service]
//! port = 5000
//! ```
//!
//! The top-level `seed` seeds undersampling, the split, weight
//! initialisation, dropout and shuffling; per-section `seed` keys are
//! overwritten by it.

use std::path::Path;

use re_tagger_core::{ArchitectureConfig, SplitSpec, TrainingConfig};
use re_tagger_service::ServiceConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub numerator: u64,
    pub denominator: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            numerator: 9,
            denominator: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub architecture: ArchitectureConfig,
    pub training: TrainingConfig,
    pub split: SplitConfig,
    pub service: ServiceConfig,
}

impl RunConfig {
    /// Defaults, or the file's values over the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::User(format!("invalid config {}: {e}", path.display())))
    }

    /// Propagates the top-level seed into every component.
    pub fn resolve_seed(&mut self) {
        self.architecture.seed = self.seed;
        self.training.seed = self.seed;
    }

    pub fn split_spec(&self) -> Result<SplitSpec, CliError> {
        Ok(SplitSpec::new(self.split.numerator, self.split.denominator, self.seed)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Internal(format!("serializing config: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::User(format!("cannot write {}: {e}", path.display())))
    }
}

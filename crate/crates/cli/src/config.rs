//! Run configuration: defaults, then the TOML file, then command-line flags.
//!
//! ```toml
//! version = 1
//!
//! [data]
//! layout = "synthetic_dir"   # refuge | drishti | rimone | synthetic_dir
//! roi_size = 128
//!
//! [synth]     # SyntheticDomainSpec
//! [model]     # architecture, base_channels, dropout_rate
//! [source]    # epochs, batch_size, lr, seed, augment, [source.augmentation]
//! [adapt]     # gamma, eta, mc_passes, lambda, epochs, ..., [adapt.contrastive]
//! [eval]      # threshold, postprocess, batch_size
//! ```
//!
//! Every table is optional and every key inside defaults. Unknown keys are
//! rejected.

use std::path::Path;

use gradcl::data::{DatasetLayout, SyntheticDomainSpec};
use gradcl::metrics::EvalConfig;
use gradcl::nn::{ModelConfig, SourceTrainConfig};
use gradcl::trainer::AdaptConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub layout: DatasetLayout,
    /// Square crop side applied when loading.
    pub roi_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            layout: DatasetLayout::SyntheticDir,
            roi_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataConfig,
    pub synth: SyntheticDomainSpec,
    pub model: ModelConfig,
    pub source: SourceTrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data: DataConfig::default(),
            synth: SyntheticDomainSpec::default(),
            model: ModelConfig::default(),
            source: SourceTrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossWeights, DEFAULT_CLASSES};
use crate::network::{ForwardOptions, FusionConfig, FusionMode};
use crate::ssm::{DiscretizeMode, ScanKernel};

/// Every key is optional and defaults as in [`RunConfig::default`]; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_layers: usize,
    pub k_blocks: usize,
    pub vss_counts: Vec<usize>,
    pub channels: Vec<usize>,
    pub patch_size: usize,
    pub overlap: usize,
    pub hidden: usize,
    pub mode: DiscretizeMode,
    pub seed: u64,
    pub skip_d: bool,
    /// Block length of the chunked scan.
    pub chunk: usize,
    pub fusion: FusionMode,
    pub provider_seed: u64,
    pub classes: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub ir: Option<PathBuf>,
    pub vis: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        let l = LossWeights::default();
        Self {
            n_layers: f.n_layers,
            k_blocks: f.k_blocks,
            vss_counts: f.vss_counts,
            channels: f.channels,
            patch_size: f.patch_size,
            overlap: f.overlap,
            hidden: f.hidden,
            mode: f.mode,
            seed: f.seed,
            skip_d: f.skip_d,
            chunk: 64,
            fusion: FusionMode::Cmsa,
            provider_seed: 0,
            classes: DEFAULT_CLASSES,
            alpha1: l.alpha1,
            alpha2: l.alpha2,
            alpha3: l.alpha3,
            ir: None,
            vis: None,
            weights: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            n_layers: self.n_layers,
            k_blocks: self.k_blocks,
            vss_counts: self.vss_counts.clone(),
            channels: self.channels.clone(),
            patch_size: self.patch_size,
            overlap: self.overlap,
            hidden: self.hidden,
            mode: self.mode,
            seed: self.seed,
            skip_d: self.skip_d,
        }
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            kernel: ScanKernel::Chunked(self.chunk),
            fusion: self.fusion,
            trace_delta: false,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion_config().validate()?;
        self.loss_weights().validate()?;
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
        Self::from_json(&text)
    }
}

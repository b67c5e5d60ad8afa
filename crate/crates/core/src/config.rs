//! Run configuration: one JSON document, every key optional, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterAblationFlags, ComponentToggles};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::pipeline::{AdapterConfig, CropParams, ModelConfig, TrainConfig};
use crate::synth::{SuiteConfig, XModality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Default dataset directory when the command line gives none.
    pub path: Option<String>,
    /// Restricts training and evaluation to sequences of this X modality.
    pub modality: Option<XModality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub adapters: AdapterConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalOptions,
    pub synth: SuiteConfig,
}

impl RunConfig {
    /// Parses JSON; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head.hidden == 0 {
            return Err(Error::Config("head.hidden must be positive".into()));
        }
        self.train.validate()?;
        self.synth.validate()?;
        let f: &AdapterAblationFlags = &self.adapters.flags;
        if self.adapters.components.mda && f.mda_branch_count() == 0 {
            return Err(Error::Config("adapters.flags: MDA needs at least one branch".into()));
        }
        if !(self.eval.pr_threshold >= 0.0) {
            return Err(Error::Config("eval.pr_threshold must be non-negative".into()));
        }
        self.model().map(|_| ())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            backbone: self.backbone,
            head_hidden: self.head.hidden,
            adapters: self.adapters.clone(),
        };
        crate::pipeline::count_params(&m)?;
        Ok(m)
    }

    pub fn crop(&self) -> CropParams {
        CropParams::new(self.backbone.template_size, self.backbone.search_size)
    }

    /// The effective configuration with every default filled in.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Whether any adapter family is attached.
    pub fn has_adapters(&self) -> bool {
        let c: ComponentToggles = self.adapters.components;
        c.any()
    }
}

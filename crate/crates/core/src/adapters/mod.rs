//! The three adapter families and their placement.
//!
//! * [`mda`]: modality-dependent, frequency-split bottleneck whose output is
//!   wired into the *other* modality's stream.
//! * [`cea`]: cross-modality entangled attention, shared by both branches,
//!   queried by a fused representation of the two modalities.
//! * [`ha`]: bottleneck on the fused search tokens in front of the head.

pub mod cea;
pub mod ha;
pub mod mda;
mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

pub use cea::{cea_forward, cea_param_count, init_cea, CeaTrace, CeaWeights};
pub use ha::{ha_forward, ha_param_count, init_ha, HaWeights};
pub use mda::{init_mda, mda_forward, mda_param_count, MdaTrace, MdaWeights, MdaWidths};
pub use schedule::{make_schedule, AdapterKind, PlacementSchedule};

/// Branch and variant switches mirroring the adapter ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterAblationFlags {
    pub mda_use_avg: bool,
    pub mda_use_max: bool,
    pub mda_use_dwconv: bool,
    pub cea_fusion_guided: bool,
    pub cea_use_conv: bool,
    pub cea_use_skip: bool,
}

impl Default for AdapterAblationFlags {
    fn default() -> Self {
        Self {
            mda_use_avg: true,
            mda_use_max: true,
            mda_use_dwconv: true,
            cea_fusion_guided: true,
            cea_use_conv: true,
            cea_use_skip: true,
        }
    }
}

impl AdapterAblationFlags {
    pub fn mda_branch_count(&self) -> usize {
        [self.mda_use_max, self.mda_use_dwconv, self.mda_use_avg]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

/// Which adapter families are attached at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentToggles {
    pub mda: bool,
    pub cea: bool,
    pub ha: bool,
}

impl Default for ComponentToggles {
    fn default() -> Self {
        Self {
            mda: true,
            cea: true,
            ha: true,
        }
    }
}

impl ComponentToggles {
    pub const NONE: Self = Self {
        mda: false,
        cea: false,
        ha: false,
    };

    pub fn any(&self) -> bool {
        self.mda || self.cea || self.ha
    }
}

/// Hidden widths of the three adapter types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDims {
    pub mda: usize,
    pub cea: usize,
    pub ha: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DimPreset {
    #[default]
    Tiny,
    Base,
    Large,
}

impl DimPreset {
    pub fn dims(self) -> AdapterDims {
        match self {
            DimPreset::Tiny => AdapterDims { mda: 8, cea: 8, ha: 8 },
            DimPreset::Base => AdapterDims { mda: 192, cea: 8, ha: 8 },
            DimPreset::Large => AdapterDims { mda: 192, cea: 192, ha: 192 },
        }
    }
}

impl std::str::FromStr for DimPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "base" => Ok(Self::Base),
            "large" => Ok(Self::Large),
            other => Err(Error::Config(format!("unknown adapter preset {other:?}"))),
        }
    }
}

/// LeCun-normal initialization for adapter projections.
pub(crate) fn lecun<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.trunc_normal(std)))
}

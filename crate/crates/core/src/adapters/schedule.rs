use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Mda,
    Cea,
}

/// Adapter kind per encoder layer (index 0 is layer 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementSchedule {
    kinds: Vec<AdapterKind>,
}

/// Layers (1-based) that carry CEA in the 12-layer default.
pub const DEFAULT_CEA_LAYERS: [usize; 3] = [4, 7, 10];

impl PlacementSchedule {
    pub fn from_kinds(kinds: Vec<AdapterKind>) -> Self {
        Self { kinds }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Kind at 1-based layer `l`.
    pub fn kind(&self, l: usize) -> AdapterKind {
        self.kinds[l - 1]
    }

    pub fn kinds(&self) -> &[AdapterKind] {
        &self.kinds
    }

    /// 1-based layers of the given kind.
    pub fn layers_of(&self, kind: AdapterKind) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == kind)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Default placement for 12 layers, or an explicit override covering every
/// layer. Any other layer count needs an override.
pub fn make_schedule(layers: usize, override_: Option<&[AdapterKind]>) -> Result<PlacementSchedule> {
    match override_ {
        Some(kinds) if kinds.len() == layers => Ok(PlacementSchedule::from_kinds(kinds.to_vec())),
        Some(kinds) => Err(Error::Config(format!(
            "schedule override covers {} layers, model has {layers}",
            kinds.len()
        ))),
        None if layers == 12 => Ok(PlacementSchedule::from_kinds(
            (1..=12)
                .map(|l| {
                    if DEFAULT_CEA_LAYERS.contains(&l) {
                        AdapterKind::Cea
                    } else {
                        AdapterKind::Mda
                    }
                })
                .collect(),
        )),
        None => Err(Error::Config(format!(
            "no default adapter schedule for {layers} layers; pass an explicit override"
        ))),
    }
}

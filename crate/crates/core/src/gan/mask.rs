use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::store::Group;

/// Discriminator fine-tuning mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DFinetuneMode {
    /// `V` and the latent head.
    Embed,
    /// Additionally `phi` and `psi`.
    Linear,
    /// Every parameter.
    All,
}

/// Generator fine-tuning mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GFinetuneMode {
    /// Per-block class embeddings only.
    Embed,
    /// Embeddings and the modulation maps.
    Linear,
}

impl DFinetuneMode {
    pub const ALL: [DFinetuneMode; 3] = [DFinetuneMode::Embed, DFinetuneMode::Linear, DFinetuneMode::All];

    pub fn groups(self) -> BTreeSet<Group> {
        match self {
            DFinetuneMode::Embed => [Group::Embed].into(),
            DFinetuneMode::Linear => [Group::Embed, Group::Linear].into(),
            DFinetuneMode::All => [Group::Embed, Group::Linear, Group::Backbone].into(),
        }
    }
}

impl GFinetuneMode {
    pub const ALL: [GFinetuneMode; 2] = [GFinetuneMode::Embed, GFinetuneMode::Linear];

    pub fn groups(self) -> BTreeSet<Group> {
        match self {
            GFinetuneMode::Embed => [Group::Embed].into(),
            GFinetuneMode::Linear => [Group::Embed, Group::Linear].into(),
        }
    }
}

impl FromStr for DFinetuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "embed" => Ok(DFinetuneMode::Embed),
            "linear" => Ok(DFinetuneMode::Linear),
            "all" => Ok(DFinetuneMode::All),
            other => Err(Error::Argument(format!("unknown dfm mode {other:?}; expected embed, linear or all"))),
        }
    }
}

impl FromStr for GFinetuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "embed" => Ok(GFinetuneMode::Embed),
            "linear" => Ok(GFinetuneMode::Linear),
            other => Err(Error::Argument(format!("unknown gfm mode {other:?}; expected embed or linear"))),
        }
    }
}

impl fmt::Display for DFinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DFinetuneMode::Embed => "embed",
            DFinetuneMode::Linear => "linear",
            DFinetuneMode::All => "all",
        })
    }
}

impl fmt::Display for GFinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GFinetuneMode::Embed => "embed",
            GFinetuneMode::Linear => "linear",
        })
    }
}

/// Trainable parameter groups of each network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub discriminator: BTreeSet<Group>,
    pub generator: BTreeSet<Group>,
}

impl TrainableMask {
    pub fn new(dfm: DFinetuneMode, gfm: GFinetuneMode) -> Self {
        TrainableMask { discriminator: dfm.groups(), generator: gfm.groups() }
    }

    /// Everything trainable, as in pre-training.
    pub fn everything() -> Self {
        let all: BTreeSet<Group> = [Group::Backbone, Group::Linear, Group::Embed].into();
        TrainableMask { discriminator: all.clone(), generator: all }
    }
}

/// Expands mode names (`embed`/`linear`/`all` for D, `embed`/`linear` for G).
pub fn expand_trainable_mask(dfm: &str, gfm: &str) -> Result<TrainableMask, Error> {
    Ok(TrainableMask::new(dfm.parse()?, gfm.parse()?))
}

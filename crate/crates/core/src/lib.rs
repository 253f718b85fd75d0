//! Source-free domain adaptation for two-class (optic cup, optic disc) fundus
//! segmentation.
//!
//! A segmentation model trained on a labeled source domain is adapted to an
//! unlabeled target domain. Pseudolabels from the frozen source model are
//! filtered by Monte Carlo dropout uncertainty and by distances to
//! class-specific prototypes built from Grad-CAM modulated features. A cosine
//! similarity term pushes the saliency-informed cup and disc embeddings apart.
//!
//! Channel convention everywhere: channel 0 is the cup, channel 1 the disc.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pseudolabel;
pub mod refine;
pub mod saliency;
pub mod tensor_io;
pub mod trainer;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Number of segmentation classes (cup, disc).
pub const NUM_CLASSES: usize = 2;

/// Tag stored in checkpoints and caches describing the channel layout.
pub const CHANNEL_CONVENTION: &str = "cup=0,disc=1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Cup,
    Disc,
}

impl ClassId {
    pub const ALL: [ClassId; 2] = [ClassId::Cup, ClassId::Disc];

    pub fn channel(self) -> usize {
        match self {
            ClassId::Cup => 0,
            ClassId::Disc => 1,
        }
    }

    pub fn from_channel(channel: usize) -> Result<Self> {
        match channel {
            0 => Ok(ClassId::Cup),
            1 => Ok(ClassId::Disc),
            other => Err(Error::invalid(format!("no class for channel {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Cup => "cup",
            ClassId::Disc => "disc",
        }
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

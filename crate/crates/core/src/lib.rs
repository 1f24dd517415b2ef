//! Knowledge-driven plexus tile classification.
//!
//! The pipeline runs from raw slide rasters to cross-validated metrics:
//!
//! * [`stain`]: Macenko stain normalization.
//! * [`tiler`]: downsampling, 224-px tiles at stride 112, mask labels and
//!   class-balanced sampling.
//! * [`store`]: embedding bags, concept sets and the KDVE binary format.
//! * [`head`]: the concept-attention classifier head and its exact gradient.
//! * [`optim`] and [`train`]: AdamW, warmup-cosine schedule, training loop.
//! * [`eval`] and [`cv`]: confusion metrics, ROC-AUC and grouped k-fold
//!   cross-validation.
//! * [`synth`]: deterministic synthetic slides and embedding bags.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod eval;
pub mod head;
pub mod image;
mod linalg;
pub mod optim;
mod par;
pub mod stain;
pub mod store;
pub mod synth;
pub mod tiler;
pub mod train;

pub use linalg::{percentile, symmetric_eigen3};

/// Binary tile label. Plexus is the positive class everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NoPlexus,
    Plexus,
}

impl Label {
    /// Class index used for logits and on-disk codes: no_plexus = 0, plexus = 1.
    pub fn index(self) -> usize {
        match self {
            Label::NoPlexus => 0,
            Label::Plexus => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::NoPlexus),
            1 => Some(Label::Plexus),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Plexus
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::NoPlexus => "no_plexus",
            Label::Plexus => "plexus",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "plexus" | "+" => Ok(Label::Plexus),
            "no_plexus" | "-" => Ok(Label::NoPlexus),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Derives a stream seed from a base seed and a textual key (FNV-1a, then a
/// splitmix64 finalizer) so that per-slide randomness never depends on
/// scheduling.
pub fn seed_for(base: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

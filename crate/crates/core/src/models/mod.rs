//! The four policy architectures: the double-branch network, its two
//! ablations, and the value-iteration-network baseline.

mod checkpoint;
mod network;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use network::{input_tensor, ForwardTrace, Network};

/// Number of action logits every architecture emits.
pub const ACTIONS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "dbnet")]
    DbNet,
    #[serde(rename = "b1net")]
    B1Net,
    #[serde(rename = "b2net")]
    B2Net,
    #[serde(rename = "vin")]
    Vin,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::DbNet, Arch::B1Net, Arch::B2Net, Arch::Vin];

    pub fn id(self) -> &'static str {
        match self {
            Arch::DbNet => "dbnet",
            Arch::B1Net => "b1net",
            Arch::B2Net => "b2net",
            Arch::Vin => "vin",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

/// Architecture id plus every width that determines the layer list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Input raster edge `M`.
    pub input_size: usize,
    /// Pixels per grid cell `l`; fixed at 4 by the two stride-2 pools.
    pub cell_size: usize,
    /// Reprocessed feature channels (A).
    pub feature_channels: usize,
    /// Global feature length from branch one (B).
    pub global_features: usize,
    /// Local feature length from branch two (C).
    pub local_features: usize,
    /// Value-iteration recurrences (vin only).
    pub vin_iterations: usize,
    /// Q channels of the value-iteration block (vin only).
    pub vin_q_channels: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch, input_size: usize) -> Self {
        ModelSpec {
            arch,
            input_size,
            cell_size: 4,
            feature_channels: 12,
            global_features: 10,
            local_features: 10,
            vin_iterations: 40,
            vin_q_channels: 10,
        }
    }

    pub fn with_vin_iterations(mut self, k: usize) -> Self {
        self.vin_iterations = k;
        self
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.cell_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.cell_size != 4 {
            return bad(format!("cell size must be 4 (two stride-2 pools), got {}", self.cell_size));
        }
        if self.input_size % 4 != 0 || self.input_size < 8 {
            return bad(format!("input size {} must be a multiple of 4 and at least 8", self.input_size));
        }
        if self.feature_channels == 0 || self.global_features == 0 || self.local_features == 0 {
            return bad("feature widths must be positive".into());
        }
        if self.arch == Arch::Vin && (self.vin_iterations == 0 || self.vin_q_channels == 0) {
            return bad("vin needs at least one iteration and one Q channel".into());
        }
        Ok(())
    }
}

/// Spec for an ablation of the double-branch network.
pub fn build_ablation(arch_id: &str, input_size: usize) -> Result<ModelSpec> {
    match arch_id.parse::<Arch>()? {
        a @ (Arch::B1Net | Arch::B2Net) => Ok(ModelSpec::new(a, input_size)),
        other => Err(Error::UnknownArch(format!("{other} is not an ablation"))),
    }
}

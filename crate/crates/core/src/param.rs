use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The terrain parameter maps consumed by the physics engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerrainParam {
    /// Sensed surface elevation, vegetation included.
    Geom,
    /// Load-bearing support height.
    Height,
    Stiffness,
    Damping,
    Friction,
}

impl TerrainParam {
    pub const ALL: [TerrainParam; 5] = [
        TerrainParam::Geom,
        TerrainParam::Height,
        TerrainParam::Stiffness,
        TerrainParam::Damping,
        TerrainParam::Friction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TerrainParam::Geom => "geom",
            TerrainParam::Height => "height",
            TerrainParam::Stiffness => "stiffness",
            TerrainParam::Damping => "damping",
            TerrainParam::Friction => "friction",
        }
    }

    pub(crate) fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for TerrainParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TerrainParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TerrainParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown terrain parameter `{s}`"))
    }
}

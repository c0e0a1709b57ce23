//! The versioned configuration file.
//!
//! One TOML file drives every command:
//!
//! ```toml
//! schema_version = 1
//!
//! [simulation]
//! epochs = 5000
//! seed = 42
//! hash_distribution = { concentration = 0.4 }
//!
//! [simulation.mutation]
//! mutability = 0.1
//!
//! [sweep]
//! replicates = 4
//! eps = { start = 0.0, stop = 0.3, count = 16 }
//!
//! [abandonment]
//! start = 0.0
//! stop = 0.3
//! count = 16
//! ```
//!
//! Every section and key is optional; omitted values take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Axis, SimConfig, SweepGrid};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub replicates: u32,
    pub eps: Axis,
    pub kappa: Axis,
    pub gamma: Axis,
}

impl Default for SweepSection {
    fn default() -> Self {
        let g = SweepGrid::default();
        Self {
            replicates: 4,
            eps: g.eps,
            kappa: g.kappa,
            gamma: g.gamma,
        }
    }
}

impl SweepSection {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            eps: self.eps,
            kappa: self.kappa,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub schema_version: u32,
    pub simulation: SimConfig,
    pub sweep: SweepSection,
    /// Mutability grid searched for the abandonment level.
    pub abandonment: Axis,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            simulation: SimConfig::default(),
            sweep: SweepSection::default(),
            abandonment: SweepGrid::default().eps,
        }
    }
}

impl FileConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: FileConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| locate(text, s.start))
                .unwrap_or_else(|| "<document>".to_string());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.simulation.validate()?;
        if self.sweep.replicates == 0 {
            return Err(Error::config("sweep.replicates", "must be at least 1"));
        }
        for (name, axis) in [
            ("sweep.eps", self.sweep.eps),
            ("sweep.kappa", self.sweep.kappa),
            ("sweep.gamma", self.sweep.gamma),
            ("abandonment", self.abandonment),
        ] {
            axis.validate()
                .map_err(|e| Error::config(name, e.to_string()))?;
        }
        Ok(())
    }
}

/// `line N, column M` of a byte offset.
fn locate(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    format!("line {line}, column {col}")
}

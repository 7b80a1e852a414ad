//! Scenario files: a run manifest, sweep axes and an output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runner::RunManifest;

/// Grids swept by the ablation and sweep drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub tau_hi: Vec<f64>,
    /// `[hidden, blocks]` pairs.
    pub plugin_sizes: Vec<[usize; 2]>,
    pub ordering_runs: usize,
    pub prefix_every: usize,
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes {
            tau_hi: vec![0.0, 0.1, 0.3, 0.5, 0.7],
            plugin_sizes: vec![[16, 1], [32, 1], [32, 2]],
            ordering_runs: 5,
            prefix_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sweep: SweepAxes,
    pub run: RunManifest,
}

const BUNDLED: [(&str, &str); 3] = [
    ("transition_gap", include_str!("../scenarios/transition_gap.toml")),
    ("benign", include_str!("../scenarios/benign.toml")),
    ("three_agent", include_str!("../scenarios/three_agent.toml")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

impl ScenarioFile {
    /// Parses and validates. Parse errors carry the offending key and line.
    pub fn parse(text: &str) -> Result<Self> {
        let s: ScenarioFile = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        s.run.validate()?;
        if s.sweep.ordering_runs < 2 || s.sweep.prefix_every == 0 {
            return Err(Error::config("sweep.ordering_runs must be >= 2 and sweep.prefix_every >= 1"));
        }
        Ok(s)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let text = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::config(format!("no bundled scenario {name:?}")))?;
        Self::parse(text)
    }

    /// Loads a file, or a bundled scenario when `path` names one and no such
    /// file exists.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            if let Some(name) = path.to_str().filter(|n| bundled_names().any(|b| b == *n)) {
                return Self::bundled(name);
            }
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

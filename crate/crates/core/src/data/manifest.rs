use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::edge_features::DistanceMetric;
use crate::error::Error;

/// JSON description of a dataset. Relative paths resolve against the
/// manifest's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// CSV: timestamp column, then `N·D` value columns (node-major blocks).
    pub signal: PathBuf,
    /// One `src dst` pair per line.
    pub edges: PathBuf,
    /// One `x y` pair per line, in node order.
    #[serde(default)]
    pub coords: Option<PathBuf>,
    /// Optional per-step integer environment labels (`t,label` CSV).
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Sampling interval, informational (e.g. "1h").
    #[serde(default)]
    pub interval: Option<String>,
    /// Train:val:test ratios; normalized to fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub metric: DistanceMetric,
    pub input_len: usize,
    pub horizon: usize,
    pub tau: usize,
    /// Channels per node.
    #[serde(default = "one")]
    pub features: usize,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_split() -> [f64; 3] {
    [4.0, 1.0, 1.0]
}

fn one() -> usize {
    1
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Split ratios rescaled to sum to 1.
    pub fn fractions(&self) -> [f64; 3] {
        let total: f64 = self.split.iter().sum();
        self.split.map(|r| r / total)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.split.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("split ratios must be positive, got {:?}", self.split)));
        }
        if self.input_len == 0 || self.horizon == 0 || self.features == 0 {
            return Err(Error::Config("input_len, horizon and features must be positive".into()));
        }
        if self.tau == 0 || self.input_len % self.tau != 0 {
            return Err(Error::Config(format!(
                "tau={} must divide input_len={}",
                self.tau, self.input_len
            )));
        }
        for (name, v) in [("sigma", self.sigma), ("kappa", self.kappa)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

//! Dataset ingestion, chronological windowing and the synthetic OoD generator.

mod loader;
mod manifest;
pub mod synth;
mod windows;

pub use loader::{load_dataset, parse_coords, parse_edge_list, parse_signal_csv, RawDataset};
pub use manifest::DatasetManifest;
pub use windows::{split_bounds, EdgeScaler, Normalizer, PreparedData, Split, SplitBounds, WindowBatch};

use serde::{Deserialize, Serialize};

/// Time-major array of node signals, `values[(t·N + n)·D + d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub len: usize,
    pub nodes: usize,
    pub features: usize,
    pub values: Vec<f64>,
}

impl Series {
    pub fn zeros(len: usize, nodes: usize, features: usize) -> Self {
        Self { len, nodes, features, values: vec![0.0; len * nodes * features] }
    }

    #[inline]
    pub fn index(&self, t: usize, n: usize, d: usize) -> usize {
        (t * self.nodes + n) * self.features + d
    }

    #[inline]
    pub fn get(&self, t: usize, n: usize, d: usize) -> f64 {
        self.values[self.index(t, n, d)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, n: usize, d: usize, v: f64) {
        let i = self.index(t, n, d);
        self.values[i] = v;
    }

    /// One channel of one node over `[start, end)`.
    pub fn channel(&self, n: usize, d: usize, start: usize, end: usize) -> Vec<f64> {
        (start..end).map(|t| self.get(t, n, d)).collect()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.len, self.nodes, self.features)
    }
}

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, RawDataset, Series};
use crate::edge_features::{assemble_edge_signal, edge_weights, EdgeFeatureConfig};
use crate::error::Error;
use crate::model::ModelDims;
use crate::tensor::NdArray;
use crate::topology::StGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn slot(self) -> usize {
        self as usize
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train|val|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Chronological split boundaries: train `[0, train_end)`, val
/// `[train_end, val_end)`, test `[val_end, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

impl SplitBounds {
    pub fn range(&self, s: Split) -> (usize, usize) {
        match s {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.len),
        }
    }
}

/// Boundaries at `floor(len · cumulative fraction)`.
pub fn split_bounds(len: usize, fractions: [f64; 3]) -> SplitBounds {
    let cut = |f: f64| (((len as f64) * f) + 1e-9).floor() as usize;
    let train_end = cut(fractions[0]).min(len);
    let val_end = cut(fractions[0] + fractions[1]).clamp(train_end, len);
    SplitBounds { train_end, val_end, len }
}

/// Per-node, per-channel z-score fitted on a prefix of the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population statistics over `[0, end)`; a zero spread falls back to 1.
    pub fn fit(s: &Series, end: usize) -> Self {
        let stride = s.nodes * s.features;
        let mut mean = vec![0.0; stride];
        let mut std = vec![0.0; stride];
        for c in 0..stride {
            let vals = (0..end).map(|t| s.values[t * stride + c]);
            let m = vals.clone().sum::<f64>() / end as f64;
            let var = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / end as f64;
            mean[c] = m;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    /// `c` is the flat channel index `n·D + d`.
    #[inline]
    pub fn normalize(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c]) / self.std[c]
    }

    #[inline]
    pub fn denormalize(&self, c: usize, v: f64) -> f64 {
        v * self.std[c] + self.mean[c]
    }

    pub fn apply(&self, s: &Series) -> Series {
        let stride = self.mean.len();
        let values = s.values.iter().enumerate().map(|(i, &v)| self.normalize(i % stride, v)).collect();
        Series { values, ..s.clone() }
    }

    /// De-normalize a `[.., N, D]` array in place.
    pub fn denormalize_array(&self, a: &mut NdArray) {
        let stride = self.mean.len();
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            *v = self.denormalize(i % stride, *v);
        }
    }
}

/// Per-column z-score of edge features, fitted on the training windows.
/// Batches carry scaled features; [`PreparedData::edge_signal`] stays raw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EdgeScaler {
    pub fn fit(signals: &[NdArray], width: usize) -> Self {
        let mut mean = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut n = 0.0;
        for s in signals {
            for row in s.data().chunks(width) {
                for (j, &v) in row.iter().enumerate() {
                    mean[j] += v;
                    sq[j] += v * v;
                }
                n += 1.0;
            }
        }
        let n = f64::max(n, 1.0);
        let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = s / n - m * m;
                if var > 1e-12 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        let w = self.mean.len();
        out.extend(row.iter().enumerate().map(|(i, v)| (v - self.mean[i % w]) / self.std[i % w]));
    }
}

/// One batch of windows.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `[B, T, N, D]`, normalized.
    pub x: NdArray,
    /// `[B, S, N, D]`, normalized.
    pub y: NdArray,
    /// `[B, S, N, D]`, original units.
    pub y_raw: NdArray,
    /// `[B, M, F′]`, standardized.
    pub edge: NdArray,
    /// Global index of each window's first input step.
    pub starts: Vec<usize>,
}

/// A dataset cut into normalized windows with precomputed edge signals.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub name: String,
    pub graph: StGraph,
    pub raw: Series,
    pub normalized: Series,
    pub timestamps: Vec<f64>,
    pub normalizer: Normalizer,
    pub edge_scaler: EdgeScaler,
    pub bounds: SplitBounds,
    pub edge_cfg: EdgeFeatureConfig,
    pub input_len: usize,
    pub horizon: usize,
    pub labels: Option<Vec<usize>>,
    starts: [Vec<usize>; 3],
    edge_signals: [Vec<NdArray>; 3],
}

impl PreparedData {
    pub fn new(raw: RawDataset, m: &DatasetManifest) -> Result<Self, Error> {
        let (t_in, s_out) = (m.input_len, m.horizon);
        let mut edge_cfg = match raw.graph.coords() {
            Some(c) => EdgeFeatureConfig::from_coords(c, m.metric, m.tau, t_in),
            None => EdgeFeatureConfig { sigma: 1.0, kappa: 1.0, tau: m.tau, window: t_in },
        };
        edge_cfg.sigma = m.sigma.unwrap_or(edge_cfg.sigma);
        edge_cfg.kappa = m.kappa.unwrap_or(edge_cfg.kappa);
        edge_cfg.validate()?;
        let history = edge_cfg.history();
        let len = raw.series.len;
        let bounds = split_bounds(len, m.fractions());

        let mut starts: [Vec<usize>; 3] = Default::default();
        for s in Split::ALL {
            let (lo, hi) = bounds.range(s);
            let first = lo.max(history);
            starts[s.slot()] = (first..).take_while(|&t| t + t_in + s_out <= hi).collect();
            if starts[s.slot()].is_empty() {
                let need = history + 3 * (t_in + s_out);
                return Err(Error::Window(format!(
                    "{s} split [{lo}, {hi}) yields no windows (T={t_in}, S={s_out}, history={history}); \
                     series length {len}, need roughly {need} or more",
                )));
            }
        }

        let normalizer = Normalizer::fit(&raw.series, bounds.train_end);
        let normalized = normalizer.apply(&raw.series);
        let weights = edge_weights(&raw.graph, m.metric, &edge_cfg);
        let mut edge_signals: [Vec<NdArray>; 3] = Default::default();
        for s in Split::ALL {
            edge_signals[s.slot()] = starts[s.slot()]
                .iter()
                .map(|&t| {
                    let per_node: Vec<Vec<f64>> =
                        (0..normalized.nodes).map(|n| normalized.channel(n, 0, t - history, t + t_in)).collect();
                    assemble_edge_signal(&raw.graph, &weights, &per_node, &edge_cfg)
                })
                .collect::<Result<_, _>>()?;
        }

        let edge_scaler = EdgeScaler::fit(&edge_signals[Split::Train.slot()], edge_cfg.width());
        Ok(Self {
            name: raw.name,
            edge_scaler,
            graph: raw.graph,
            raw: raw.series,
            normalized,
            timestamps: raw.timestamps,
            normalizer,
            bounds,
            edge_cfg,
            input_len: t_in,
            horizon: s_out,
            labels: raw.labels,
            starts,
            edge_signals,
        })
    }

    pub fn window_count(&self, s: Split) -> usize {
        self.starts[s.slot()].len()
    }

    pub fn starts(&self, s: Split) -> &[usize] {
        &self.starts[s.slot()]
    }

    pub fn edge_signal(&self, s: Split, i: usize) -> &NdArray {
        &self.edge_signals[s.slot()][i]
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            nodes: self.raw.nodes,
            input_len: self.input_len,
            horizon: self.horizon,
            in_features: self.raw.features,
            out_features: self.raw.features,
            edge_features: self.edge_cfg.width(),
        }
    }

    /// Environment label of a window: the label at its last input step.
    pub fn window_label(&self, s: Split, i: usize) -> Option<usize> {
        let t = self.starts[s.slot()][i] + self.input_len - 1;
        self.labels.as_ref().map(|l| l[t])
    }

    pub fn batch(&self, s: Split, indices: &[usize]) -> WindowBatch {
        let (t_in, s_out) = (self.input_len, self.horizon);
        let stride = self.raw.nodes * self.raw.features;
        let b = indices.len();
        let mut x = Vec::with_capacity(b * t_in * stride);
        let mut y = Vec::with_capacity(b * s_out * stride);
        let mut y_raw = Vec::with_capacity(b * s_out * stride);
        let mut edge = Vec::new();
        let mut starts = Vec::with_capacity(b);
        for &i in indices {
            let t0 = self.starts[s.slot()][i];
            starts.push(t0);
            x.extend_from_slice(&self.normalized.values[t0 * stride..(t0 + t_in) * stride]);
            let (y0, y1) = ((t0 + t_in) * stride, (t0 + t_in + s_out) * stride);
            y.extend_from_slice(&self.normalized.values[y0..y1]);
            y_raw.extend_from_slice(&self.raw.values[y0..y1]);
            self.edge_scaler.apply(self.edge_signals[s.slot()][i].data(), &mut edge);
        }
        let (n, d) = (self.raw.nodes, self.raw.features);
        let (m, w) = (self.graph.edge_count(), self.edge_cfg.width());
        WindowBatch {
            x: NdArray::new(vec![b, t_in, n, d], x).expect("window shape"),
            y: NdArray::new(vec![b, s_out, n, d], y).expect("window shape"),
            y_raw: NdArray::new(vec![b, s_out, n, d], y_raw).expect("window shape"),
            edge: NdArray::new(vec![b, m, w], edge).expect("edge shape"),
            starts,
        }
    }
}

//! Per-edge features: thresholded Gaussian distance weight, Pearson
//! correlation and time-delayed DTW distances.

use serde::{Deserialize, Serialize};

use crate::tensor::NdArray;
use crate::topology::{Coord, StGraph};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series too short: need at least {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("insufficient history for delayed window: need {need} steps, got {got}")]
    Windowing { need: usize, got: usize },
    #[error("invalid edge feature config: {0}")]
    Config(String),
}

/// Distance between two node positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// Great-circle distance in kilometres; `x` is longitude, `y` latitude (degrees).
    Haversine,
    #[default]
    Euclidean,
}

impl DistanceMetric {
    pub fn distance(&self, a: Coord, b: Coord) -> f64 {
        match self {
            DistanceMetric::Euclidean => ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt(),
            DistanceMetric::Haversine => {
                const EARTH_RADIUS_KM: f64 = 6371.0088;
                let (lat1, lat2) = (a.y.to_radians(), b.y.to_radians());
                let dlat = lat2 - lat1;
                let dlon = (b.x - a.x).to_radians();
                let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
                2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeFeatureConfig {
    /// Gaussian kernel bandwidth, in distance units.
    pub sigma: f64,
    /// Distance threshold beyond which the weight is zero.
    pub kappa: f64,
    /// Delay window size in steps.
    pub tau: usize,
    /// Input window length in steps.
    pub window: usize,
}

impl EdgeFeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.sigma > 0.0) || !(self.kappa > 0.0) {
            return Err(FeatureError::Config(format!(
                "sigma and kappa must be positive (sigma={}, kappa={})",
                self.sigma, self.kappa
            )));
        }
        if self.tau == 0 || self.window == 0 || self.window % self.tau != 0 {
            return Err(FeatureError::Config(format!(
                "tau={} must be >= 1 and divide the window length {}",
                self.tau, self.window
            )));
        }
        Ok(())
    }

    /// Number of delayed DTW components, `T / τ`.
    pub fn lags(&self) -> usize {
        self.window / self.tau
    }

    /// History needed before a window for the largest delay.
    pub fn history(&self) -> usize {
        self.lags() * self.tau
    }

    /// Feature width: weight, correlation, then one DTW value per lag.
    pub fn width(&self) -> usize {
        2 + self.lags()
    }

    /// Bandwidth = standard deviation of all pairwise node distances,
    /// threshold = their 90th percentile.
    pub fn from_coords(coords: &[Coord], metric: DistanceMetric, tau: usize, window: usize) -> Self {
        let mut d = Vec::new();
        for i in 0..coords.len() {
            for j in i + 1..coords.len() {
                d.push(metric.distance(coords[i], coords[j]));
            }
        }
        let (sigma, kappa) = if d.is_empty() {
            (1.0, 1.0)
        } else {
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
            d.sort_by(f64::total_cmp);
            let idx = ((0.9 * (d.len() - 1) as f64).round() as usize).min(d.len() - 1);
            (var.sqrt(), d[idx])
        };
        Self {
            sigma: if sigma > 0.0 { sigma } else { 1.0 },
            kappa: if kappa > 0.0 { kappa } else { 1.0 },
            tau,
            window,
        }
    }
}

pub fn gaussian_weight(dist: f64, cfg: &EdgeFeatureConfig) -> f64 {
    if dist <= cfg.kappa {
        (-(dist * dist) / (cfg.sigma * cfg.sigma)).exp()
    } else {
        0.0
    }
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, FeatureError> {
    if a.len() != b.len() {
        return Err(FeatureError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(FeatureError::TooShort { need: 2, got: a.len() });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Unconstrained DTW with absolute-difference cost, aligning both endpoints.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64, FeatureError> {
    if a.is_empty() || b.is_empty() {
        return Err(FeatureError::TooShort { need: 1, got: 0 });
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = (x - b[j - 1]).abs();
            cur[j] = cost + prev[j - 1].min(prev[j]).min(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// DTW between the source window and the target series delayed by `α·τ`
/// for `α = 1..=T/τ`.
///
/// `target` holds `history + T` steps; its last `T` steps align with `source`.
pub fn time_delay_dtw(source: &[f64], target: &[f64], cfg: &EdgeFeatureConfig) -> Result<Vec<f64>, FeatureError> {
    let t = cfg.window;
    if source.len() != t {
        return Err(FeatureError::LengthMismatch(source.len(), t));
    }
    let need = t + cfg.history();
    if target.len() < need {
        return Err(FeatureError::Windowing { need, got: target.len() });
    }
    let end = target.len();
    (1..=cfg.lags())
        .map(|alpha| {
            let stop = end - alpha * cfg.tau;
            dtw(source, &target[stop - t..stop])
        })
        .collect()
}

/// Static part of the edge features: one Gaussian weight per edge.
pub fn edge_weights(g: &StGraph, metric: DistanceMetric, cfg: &EdgeFeatureConfig) -> Vec<f64> {
    match g.coords() {
        Some(c) => g
            .edges()
            .iter()
            .map(|&(s, d)| gaussian_weight(metric.distance(c[s], c[d]), cfg))
            .collect(),
        None => vec![1.0; g.edge_count()],
    }
}

/// `[M, 2 + T/τ]` rows `[W, ρ, R(τ)…]` for one window.
///
/// `node_series[n]` holds `history + T` steps for node `n`.
pub fn assemble_edge_signal(
    g: &StGraph,
    weights: &[f64],
    node_series: &[Vec<f64>],
    cfg: &EdgeFeatureConfig,
) -> Result<NdArray, FeatureError> {
    cfg.validate()?;
    let t = cfg.window;
    let width = cfg.width();
    let mut data = Vec::with_capacity(g.edge_count() * width);
    for (e, &(src, dst)) in g.edges().iter().enumerate() {
        let (xs, xd) = (&node_series[src], &node_series[dst]);
        if xs.len() < t + cfg.history() {
            return Err(FeatureError::Windowing { need: t + cfg.history(), got: xs.len() });
        }
        let source = &xs[xs.len() - t..];
        let target_now = &xd[xd.len() - t..];
        data.push(weights[e]);
        data.push(pearson(source, target_now)?);
        data.extend(time_delay_dtw(source, xd, cfg)?);
    }
    Ok(NdArray::new(vec![g.edge_count(), width], data).expect("edge count > 0"))
}

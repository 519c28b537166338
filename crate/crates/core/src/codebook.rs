//! Environment codebook: nearest-neighbour quantization with a
//! straight-through gradient, soft assignment for inference, and the
//! two-term codebook loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{NdArray, ParamStore, Tensor, TensorError};

pub const CODEBOOK_PARAM: &str = "codebook.embeddings";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    Hard,
    Soft,
}

/// Per-row environment assignment, `[R, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvAssignment {
    pub mode: AssignmentMode,
    pub probs: NdArray,
}

impl EnvAssignment {
    pub fn argmax(&self) -> Vec<usize> {
        let k = self.probs.shape()[1];
        self.probs
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Shared `K × F` table of environment embeddings plus usage counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    pub usage: Vec<u64>,
}

impl Codebook {
    /// Rows drawn from `N(0, 1/F)`; with `identical` every row is the same draw.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, size: usize, dim: usize, identical: bool) -> Self {
        assert!(size >= 1, "codebook needs at least one entry");
        let std = (1.0 / dim as f64).sqrt();
        if identical {
            store.normal(CODEBOOK_PARAM, &[1, dim], std, rng);
            let row = store.get(CODEBOOK_PARAM).unwrap().data().to_vec();
            let data = (0..size).flat_map(|_| row.iter().copied()).collect();
            store.insert(CODEBOOK_PARAM, NdArray::new(vec![size, dim], data).unwrap());
        } else {
            store.normal(CODEBOOK_PARAM, &[size, dim], std, rng);
        }
        Self { size, dim, usage: vec![0; size] }
    }

    pub fn record(&mut self, assignments: &[usize]) {
        for &k in assignments {
            self.usage[k] += 1;
        }
    }
}

fn check_rows(h: &NdArray, e: &NdArray) -> Result<(), TensorError> {
    if e.rank() != 2 || e.shape()[0] == 0 {
        return Err(TensorError::Contract("empty codebook".into()));
    }
    if h.rank() != 2 || h.shape()[1] != e.shape()[1] {
        return Err(TensorError::Shape(format!(
            "features {:?} do not match codebook {:?}",
            h.shape(),
            e.shape()
        )));
    }
    Ok(())
}

/// Index of the nearest codebook row for every row of `h`; ties go to the lowest index.
pub fn nearest(h: &NdArray, e: &NdArray) -> Result<Vec<usize>, TensorError> {
    check_rows(h, e)?;
    let f = e.shape()[1];
    Ok(h
        .data()
        .chunks(f)
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (k, code) in e.data().chunks(f).enumerate() {
                let d: f64 = row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

/// Hard quantization. The output rows are exact copies of codebook rows;
/// the backward pass hands the gradient straight to `h_e`.
pub fn quantize_hard<'t>(h_e: Tensor<'t>, codebook: &NdArray) -> Result<(Tensor<'t>, EnvAssignment, Vec<usize>), TensorError> {
    let hv = h_e.value();
    let idx = nearest(&hv, codebook)?;
    let (k, f) = (codebook.shape()[0], codebook.shape()[1]);
    let mut rows = Vec::with_capacity(idx.len() * f);
    let mut onehot = vec![0.0; idx.len() * k];
    for (r, &i) in idx.iter().enumerate() {
        rows.extend_from_slice(&codebook.data()[i * f..(i + 1) * f]);
        onehot[r * k + i] = 1.0;
    }
    let quantized = h_e.straight_through(NdArray::new(hv.shape().to_vec(), rows)?)?;
    let assignment = EnvAssignment {
        mode: AssignmentMode::Hard,
        probs: NdArray::new(vec![idx.len(), k], onehot)?,
    };
    Ok((quantized, assignment, idx))
}

/// Soft assignment `q = softmax(-‖h − e_j‖² / temperature)` and the convex
/// combination `q · e`.
pub fn quantize_soft<'t>(
    h_e: Tensor<'t>,
    codebook: Tensor<'t>,
    temperature: f64,
) -> Result<(Tensor<'t>, Tensor<'t>), TensorError> {
    if !(temperature > 0.0) {
        return Err(TensorError::Contract(format!("temperature must be positive, got {temperature}")));
    }
    check_rows(&h_e.value(), &codebook.value())?;
    let (r, f) = (h_e.shape()[0], h_e.shape()[1]);
    let k = codebook.shape()[0];
    let diff = h_e.reshape(&[r, 1, f])?.sub(&codebook.reshape(&[1, k, f])?)?;
    let dist = diff.square().sum_axis(2)?;
    let q = dist.scale(-1.0 / temperature).softmax(1)?;
    let mixed = q.matmul(&codebook)?;
    Ok((mixed, q))
}

/// The two codebook loss terms, each a mean over rows of the squared
/// distance between `h_e` and its assigned code. The first reaches only the
/// codebook, the second only `h_e`; the caller weights the second by α.
pub fn codebook_loss_terms<'t>(
    h_e: Tensor<'t>,
    codebook: Tensor<'t>,
    assignments: &[usize],
) -> Result<(Tensor<'t>, Tensor<'t>), TensorError> {
    let selected = codebook.index_select(assignments)?;
    let commit_codes = h_e.detach().sub(&selected)?.square().sum_axis(1)?.mean();
    let commit_encoder = h_e.sub(&selected.detach())?.square().sum_axis(1)?.mean();
    Ok((commit_codes, commit_encoder))
}

/// `term1 + α·term2`.
pub fn codebook_loss<'t>(
    h_e: Tensor<'t>,
    codebook: Tensor<'t>,
    assignments: &[usize],
    alpha: f64,
) -> Result<Tensor<'t>, TensorError> {
    let (a, b) = codebook_loss_terms(h_e, codebook, assignments)?;
    a.add(&b.scale(alpha))
}

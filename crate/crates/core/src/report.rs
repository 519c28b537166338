//! JSON reports: codebook inspection, causal-strength export and a JSON
//! writer that prints every float with 17 significant digits.

use std::io;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::codebook::CODEBOOK_PARAM;
use crate::data::{PreparedData, Split};
use crate::deconfounder::{export_causal, CausalRow};
use crate::error::Error;
use crate::model::{CastModel, GraphContext, Mode};
use crate::tensor::{Binder, NdArray, ParamStore, Tape};

/// Pretty JSON with `{:.16e}` floats; non-finite values become `null`.
struct Sig17<'a>(PrettyFormatter<'a>);

impl Formatter for Sig17<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        if v.is_finite() {
            write!(w, "{v:.16e}")
        } else {
            w.write_all(b"null")
        }
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String, Error> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &std::path::Path, value: &T) -> Result<(), Error> {
    let mut text = to_json(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct CodebookReport {
    pub size: usize,
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub usage: Vec<u64>,
    /// Rows projected onto the two leading principal axes.
    pub pca: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
}

/// Codebook rows, usage counts and a 2-D principal-component projection.
pub fn codebook_report(params: &ParamStore, usage: &[u64]) -> Result<CodebookReport, Error> {
    let e = params
        .get(CODEBOOK_PARAM)
        .ok_or_else(|| Error::Checkpoint("checkpoint has no environment codebook (trained without it?)".into()))?;
    let (k, f) = (e.shape()[0], e.shape()[1]);
    let embeddings: Vec<Vec<f64>> = e.data().chunks(f).map(<[f64]>::to_vec).collect();
    let mean: Vec<f64> = (0..f).map(|j| embeddings.iter().map(|r| r[j]).sum::<f64>() / k as f64).collect();
    let centered = DMatrix::from_fn(k, f, |i, j| embeddings[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (k.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut pca = vec![[0.0; 2]; k];
    let mut explained = [0.0; 2];
    for (slot, &c) in order.iter().take(2).enumerate() {
        let mut axis = eig.eigenvectors.column(c).into_owned();
        // Fix the sign so the largest-magnitude loading is positive.
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis = -axis;
        }
        explained[slot] = eig.eigenvalues[c].max(0.0);
        for (i, row) in pca.iter_mut().enumerate() {
            row[slot] = centered.row(i).iter().zip(axis.iter()).map(|(a, b)| a * b).sum();
        }
    }
    Ok(CodebookReport { size: k, dim: f, embeddings, usage: usage.to_vec(), pca, explained_variance: explained })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct CausalReport {
    pub dataset: String,
    pub split: Split,
    pub rows: Vec<CausalRow>,
}

/// Causal strengths `[M, K_b]` for each requested window of a split.
pub fn causal_strengths(
    model: &CastModel,
    ctx: &GraphContext,
    params: &ParamStore,
    data: &PreparedData,
    split: Split,
    windows: &[usize],
) -> Result<Vec<NdArray>, Error> {
    let n = data.window_count(split);
    if let Some(&w) = windows.iter().find(|&&w| w >= n) {
        return Err(Error::Config(format!("window {w} out of range: {split} split has {n} windows")));
    }
    let m = ctx.graph.edge_count();
    let kb = model.config.gcn_depth;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(model.config.batch_size.max(1)) {
        let batch = data.batch(split, chunk);
        let tape = Tape::new();
        let b = Binder::new(&tape, params).frozen();
        let fwd = model.forward(&b, ctx, &batch.x, &batch.edge, Mode::Test)?;
        let values = fwd.strengths.value();
        for w in 0..chunk.len() {
            let slice = values.data()[w * m * kb..(w + 1) * m * kb].to_vec();
            out.push(NdArray::new(vec![m, kb], slice)?);
        }
    }
    Ok(out)
}

pub fn causal_report(
    model: &CastModel,
    ctx: &GraphContext,
    params: &ParamStore,
    data: &PreparedData,
    split: Split,
    windows: &[usize],
) -> Result<CausalReport, Error> {
    let values = causal_strengths(model, ctx, params, data, split, windows)?;
    let rows = windows.iter().zip(&values).flat_map(|(&w, v)| export_causal(v, &ctx.graph, w)).collect();
    Ok(CausalReport { dataset: data.name.clone(), split, rows })
}

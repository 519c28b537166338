//! Post-hoc diagnostics on a trained model: a fresh environment probe on
//! frozen surrogate features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PreparedData, Split};
use crate::error::Error;
use crate::model::{CastModel, GraphContext, Mode};
use crate::tensor::{Adam, Binder, Mlp, NdArray, ParamStore, Tape};
use crate::training::one_hot;

/// Frozen `Ĥ_i` rows for every window of a split, `[W·N, F]`, window-major.
pub fn surrogate_features(
    model: &CastModel,
    ctx: &GraphContext,
    params: &ParamStore,
    data: &PreparedData,
    split: Split,
) -> Result<NdArray, Error> {
    let n = data.window_count(split);
    let f = model.config.hidden_dim;
    let mut rows = Vec::with_capacity(n * model.dims.nodes * f);
    for chunk in (0..n).collect::<Vec<_>>().chunks(model.config.batch_size.max(1)) {
        let batch = data.batch(split, chunk);
        let tape = Tape::new();
        let b = Binder::new(&tape, params).frozen();
        let out = model.forward(&b, ctx, &batch.x, &batch.edge, Mode::Test)?;
        rows.extend_from_slice(out.surrogate.value().data());
    }
    Ok(NdArray::new(vec![n * model.dims.nodes, f], rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Majority-class rate on the held-out rows.
    pub chance: f64,
}

/// Train a fresh `[F, F, C]` classifier on a random 70% of the rows and
/// report accuracy on the remaining 30%. Features are standardized with
/// statistics from the training part.
pub fn probe_accuracy(features: &NdArray, labels: &[usize], seed: u64, steps: usize) -> Result<ProbeResult, Error> {
    let (rows, f) = (features.shape()[0], features.shape()[1]);
    if labels.len() != rows || rows < 4 {
        return Err(Error::Config(format!("probe needs one label per row and at least 4 rows, got {} / {rows}", labels.len())));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut rng);
    let cut = rows * 7 / 10;
    let (fit, held) = idx.split_at(cut);

    let gather = |ids: &[usize]| -> Vec<f64> { ids.iter().flat_map(|&i| features.data()[i * f..(i + 1) * f].iter().copied()).collect() };
    let (mut xf, mut xh) = (gather(fit), gather(held));
    for j in 0..f {
        let col: Vec<f64> = xf.iter().skip(j).step_by(f).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        for x in [&mut xf, &mut xh] {
            x.iter_mut().skip(j).step_by(f).for_each(|v| *v = (*v - mean) / sd);
        }
    }
    let xf = NdArray::new(vec![fit.len(), f], xf)?;
    let xh = NdArray::new(vec![held.len(), f], xh)?;
    let yf = one_hot(&fit.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);

    let mut store = ParamStore::default();
    let mlp = Mlp::new(&mut store, &mut rng, "probe", &[f, f, classes]);
    let mut adam = Adam::new(1e-2);
    for _ in 0..steps {
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let logp = mlp.forward(&b, tape.constant(xf.clone()))?.softmax(1)?.clamp_min(1e-12).ln();
        let loss = logp.mul(&tape.constant(yf.clone()))?.sum().scale(-1.0 / fit.len() as f64);
        let grads = b.collect(&tape.backward(loss)?);
        drop(b);
        adam.step(&mut store, &grads)?;
    }
    let tape = Tape::new();
    let b = Binder::new(&tape, &store);
    let scores = mlp.forward(&b, tape.constant(xh))?.value();
    let mut correct = 0;
    let mut counts = vec![0usize; classes];
    for (r, &i) in held.iter().enumerate() {
        let row = &scores.data()[r * classes..(r + 1) * classes];
        let pred = (0..classes).fold(0, |best, k| if row[k] > row[best] { k } else { best });
        correct += usize::from(pred == labels[i]);
        counts[labels[i]] += 1;
    }
    let n = held.len() as f64;
    Ok(ProbeResult { accuracy: correct as f64 / n, chance: *counts.iter().max().unwrap() as f64 / n })
}

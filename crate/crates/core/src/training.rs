//! Losses, the optimization loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{codebook_loss_terms, CODEBOOK_PARAM};
use crate::data::{PreparedData, Split, WindowBatch};
use crate::error::Error;
use crate::model::{CastModel, ForwardOutput, GraphContext, MiMode, Mode};
use crate::tensor::{Adam, Binder, NdArray, ParamStore, Tape, Tensor};

const PROB_FLOOR: f64 = 1e-12;

/// Mean absolute error, the Laplace negative log-likelihood up to a constant.
pub fn prediction_loss<'t>(pred: Tensor<'t>, target: &NdArray) -> Result<Tensor<'t>, Error> {
    if pred.shape() != target.shape() {
        return Err(Error::stage(
            "prediction loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let y = pred.tape().constant(target.clone());
    Ok(pred.sub(&y)?.abs().mean())
}

/// `mean_rows Σ_k z_k log ẑ_k` with `ẑ` clamped at 1e-12. No leading minus.
pub fn mi_loss<'t>(z: &NdArray, z_hat: Tensor<'t>) -> Result<Tensor<'t>, Error> {
    if z.shape() != z_hat.shape().as_slice() || z.rank() != 2 {
        return Err(Error::stage("mi loss", format!("z {:?} vs ẑ {:?}", z.shape(), z_hat.shape())));
    }
    let rows = z.shape()[0] as f64;
    let zt = z_hat.tape().constant(z.clone());
    Ok(z_hat.clamp_min(PROB_FLOOR).ln().mul(&zt)?.sum().scale(1.0 / rows))
}

/// Scalar loss values for one step. `total = prediction + codebook + β·mi`;
/// `classifier` is the separate cross-entropy of the adversarial wiring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prediction: f64,
    pub codebook: f64,
    pub mi: f64,
    pub total: f64,
    pub classifier: f64,
}

/// Differentiable pieces of the objective.
pub struct LossTerms<'t> {
    pub prediction: Tensor<'t>,
    pub codebook: Option<Tensor<'t>>,
    pub mi: Option<Tensor<'t>>,
    pub total: Tensor<'t>,
    pub classifier: Option<Tensor<'t>>,
    /// What backward runs on: `total` plus the classifier's own loss.
    pub objective: Tensor<'t>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            prediction: self.prediction.item(),
            codebook: self.codebook.map_or(0.0, |t| t.item()),
            mi: self.mi.map_or(0.0, |t| t.item()),
            total: self.total.item(),
            classifier: self.classifier.map_or(0.0, |t| t.item()),
        }
    }
}

pub fn total_loss<'t>(
    model: &CastModel,
    b: &Binder<'_, 't>,
    out: &ForwardOutput<'t>,
    target: &NdArray,
) -> Result<LossTerms<'t>, Error> {
    let cfg = &model.config;
    let prediction = prediction_loss(out.prediction, target)?;
    let (mut codebook, mut mi, mut classifier) = (None, None, None);
    let mut total = prediction;
    if let (Some(h_e), Some(z)) = (out.env_latent, &out.assignment) {
        let e = b.param(CODEBOOK_PARAM)?;
        let (t1, t2) = codebook_loss_terms(h_e, e, &out.codes)?;
        let l = t1.add(&t2.scale(cfg.alpha))?;
        total = total.add(&l)?;
        codebook = Some(l);
        if let Some(z_hat) = out.env_probs {
            // Targets are always the hard nearest-code assignment.
            let hard = one_hot(&out.codes, z.probs.shape()[1]);
            let l = mi_loss(&hard, z_hat)?;
            total = total.add(&l.scale(cfg.beta))?;
            mi = Some(l);
            if let Some(own) = out.classifier_probs {
                classifier = Some(mi_loss(&hard, own)?.neg());
            }
        }
    }
    let objective = match classifier {
        Some(c) if cfg.mi_mode == MiMode::Adversarial => total.add(&c)?,
        _ => total,
    };
    Ok(LossTerms { prediction, codebook, mi, total, classifier, objective })
}

pub fn one_hot(idx: &[usize], k: usize) -> NdArray {
    let mut data = vec![0.0; idx.len() * k];
    for (r, &i) in idx.iter().enumerate() {
        data[r * k + i] = 1.0;
    }
    NdArray::new(vec![idx.len(), k], data).expect("one-hot shape")
}

/// Owns parameters and optimizer state for one training run.
pub struct Trainer<'a> {
    pub model: &'a CastModel,
    pub ctx: &'a GraphContext,
    pub params: ParamStore,
    pub adam: Adam,
    pub usage: Vec<u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a CastModel, ctx: &'a GraphContext, params: ParamStore) -> Self {
        Self {
            adam: Adam::new(model.config.lr),
            usage: vec![0; model.config.codebook_size],
            model,
            ctx,
            params,
        }
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn step(&mut self, batch: &WindowBatch) -> Result<LossBreakdown, Error> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let out = self.model.forward(&b, self.ctx, &batch.x, &batch.edge, Mode::Train)?;
        let terms = total_loss(self.model, &b, &out, &batch.y)?;
        let losses = terms.breakdown();
        if !losses.total.is_finite() || !losses.classifier.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {losses:?}")));
        }
        let grads = tape.backward(terms.objective)?;
        let grads = b.collect(&grads);
        for &k in &out.codes {
            self.usage[k] += 1;
        }
        drop(b);
        self.adam.step(&mut self.params, &grads).map_err(|e| Error::Diverged(e.to_string()))?;
        Ok(losses)
    }
}

/// Aggregate error metrics in original units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based, inclusive step range.
    pub from: usize,
    pub to: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub windows: usize,
    pub mae: f64,
    pub rmse: f64,
    pub horizons: Vec<HorizonMetrics>,
}

/// MAE and RMSE over all entries.
pub fn mae_rmse(pred: &[f64], target: &[f64]) -> Metrics {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return Metrics::default();
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred
        .iter()
        .zip(target)
        .fold((0.0, 0.0), |(a, s), (p, t)| (a + (p - t).abs(), s + (p - t) * (p - t)));
    Metrics { mae: abs / n, rmse: (sq / n).sqrt() }
}

/// Three contiguous horizon buckets (1–8, 9–16, 17–24 for S = 24).
pub fn horizon_buckets(s: usize) -> Vec<(usize, usize)> {
    let k = s.min(3);
    (0..k).map(|i| (i * s / k, (i + 1) * s / k)).filter(|(a, b)| b > a).collect()
}

/// Run the model over a split with soft assignments; returns metrics and
/// the de-normalized predictions `[W, S, N, D]` flattened.
pub fn evaluate(
    model: &CastModel,
    ctx: &GraphContext,
    params: &ParamStore,
    data: &PreparedData,
    split: Split,
) -> Result<(EvalReport, Vec<f64>), Error> {
    let n_win = data.window_count(split);
    let bs = model.config.batch_size.max(1);
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for chunk in (0..n_win).collect::<Vec<_>>().chunks(bs) {
        let batch = data.batch(split, chunk);
        let tape = Tape::new();
        let b = Binder::new(&tape, params);
        let out = model.forward(&b.frozen(), ctx, &batch.x, &batch.edge, Mode::Test)?;
        let mut y = (*out.prediction.value()).clone();
        data.normalizer.denormalize_array(&mut y);
        preds.extend_from_slice(y.data());
        targets.extend_from_slice(batch.y_raw.data());
    }
    let dims = model.dims;
    let step = dims.nodes * dims.out_features;
    let overall = mae_rmse(&preds, &targets);
    let horizons = horizon_buckets(dims.horizon)
        .into_iter()
        .map(|(a, b)| {
            let (mut p, mut t) = (Vec::new(), Vec::new());
            for w in 0..n_win {
                let base = w * dims.horizon * step;
                p.extend_from_slice(&preds[base + a * step..base + b * step]);
                t.extend_from_slice(&targets[base + a * step..base + b * step]);
            }
            let m = mae_rmse(&p, &t);
            HorizonMetrics { from: a + 1, to: b, mae: m.mae, rmse: m.rmse }
        })
        .collect();
    Ok((EvalReport { split, windows: n_win, mae: overall.mae, rmse: overall.rmse, horizons }, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: LossBreakdown,
    pub val_mae: f64,
    pub val_rmse: f64,
}

/// Result of [`train`]: best-validation parameters plus the full history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub adam: Adam,
    pub usage: Vec<u64>,
    pub history: Vec<EpochRecord>,
    /// Per-step losses, in order.
    pub step_losses: Vec<LossBreakdown>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

/// Epoch loop with shuffled batches, per-epoch validation, best-checkpoint
/// retention and early stopping.
pub fn train(
    model: &CastModel,
    ctx: &GraphContext,
    params: ParamStore,
    data: &PreparedData,
) -> Result<TrainOutcome, Error> {
    let cfg = &model.config;
    let mut trainer = Trainer::new(model, ctx, params);
    let mut order: Vec<usize> = (0..data.window_count(Split::Train)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut best: Option<(f64, ParamStore, Adam, Vec<u64>, usize)> = None;
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut stale = 0;
    let mut steps = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut count = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch = data.batch(Split::Train, chunk);
            let l = trainer.step(&batch).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}, batch {bi}: {msg}")),
                other => other,
            })?;
            sum.prediction += l.prediction;
            sum.codebook += l.codebook;
            sum.mi += l.mi;
            sum.total += l.total;
            sum.classifier += l.classifier;
            step_losses.push(l);
            count += 1;
            steps += 1;
        }
        if count == 0 {
            break;
        }
        let c = count as f64;
        let mean = LossBreakdown {
            prediction: sum.prediction / c,
            codebook: sum.codebook / c,
            mi: sum.mi / c,
            total: sum.total / c,
            classifier: sum.classifier / c,
        };
        let (val, _) = evaluate(model, ctx, &trainer.params, data, Split::Val)?;
        history.push(EpochRecord { epoch, train_loss: mean, val_mae: val.mae, val_rmse: val.rmse });
        if best.as_ref().is_none_or(|b| val.mae < b.0) {
            best = Some((val.mae, trainer.params.clone(), trainer.adam.clone(), trainer.usage.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break 'epochs;
            }
        }
    }
    let (params, adam, usage, best_epoch) = match best {
        Some((_, p, a, u, e)) => (p, a, u, Some(e)),
        None => (trainer.params, trainer.adam, trainer.usage, None),
    };
    Ok(TrainOutcome { params, adam, usage, history, step_losses, best_epoch, steps })
}

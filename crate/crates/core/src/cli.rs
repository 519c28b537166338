//! Command-line surface. Exit codes: 0 success, 1 validation or usage
//! error, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::synth::{synthesize_ood, SyntheticScenario};
use crate::data::{load_dataset, DatasetManifest, PreparedData, Split};
use crate::error::Error;
use crate::model::{CastModel, GraphContext, ModelConfig};
use crate::report::{causal_report, codebook_report, write_json};
use crate::training::{evaluate, train, EvalReport};

#[derive(Debug, Parser)]
#[command(name = "cast", version, about = "Causal spatio-temporal graph forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin and metrics.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print MAE/RMSE overall and per horizon bucket.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset manifest; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write codebook embeddings, usage and a PCA projection as JSON.
    InspectCodebook {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-edge, per-layer causal strengths for one window as JSON.
    ExportCausal {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from a preset name or a scenario JSON file.
    Synth {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Seed override for presets.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Load and window a dataset, reporting any problem.
    ValidateData {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// `train --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn prepare(manifest_path: &Path) -> Result<PreparedData, Error> {
    let m = DatasetManifest::from_file(manifest_path)?;
    PreparedData::new(load_dataset(&m)?, &m)
}

struct Loaded {
    ck: Checkpoint,
    model: CastModel,
    ctx: GraphContext,
    data: PreparedData,
}

fn load_for_inference(checkpoint: &Path, manifest: Option<&Path>) -> Result<Loaded, Error> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let path = manifest
        .map(Path::to_path_buf)
        .or_else(|| ck.meta.manifest.clone())
        .ok_or_else(|| Error::Config("checkpoint records no manifest; pass --manifest".into()))?;
    let mut data = prepare(&path)?;
    if data.dims() != ck.meta.dims {
        return Err(Error::Config(format!(
            "dataset dimensions {:?} do not match checkpoint {:?}",
            data.dims(),
            ck.meta.dims
        )));
    }
    // Inference always uses the training normalization.
    data.normalizer = ck.meta.normalizer.clone();
    data.edge_scaler = ck.meta.edge_scaler.clone();
    let ctx = GraphContext::new(data.graph.clone(), ck.meta.config.laplacian_scale)?;
    Ok(Loaded { ck, model, ctx, data })
}

pub fn print_report(r: &EvalReport) {
    println!("split {} windows {}", r.split, r.windows);
    println!("MAE {:.3} RMSE {:.3}", r.mae, r.rmse);
    for h in &r.horizons {
        println!("steps {}-{} MAE {:.3} RMSE {:.3}", h.from, h.to, h.mae, h.rmse);
    }
}

fn run_command(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Train { config, output_dir } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let tc: TrainConfig =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            let base = config.parent().unwrap_or(Path::new(""));
            let manifest = absolute(&relative_to(base, &tc.manifest));
            let out_dir = output_dir.unwrap_or_else(|| relative_to(base, &tc.output_dir));
            let data = prepare(&manifest)?;
            let (model, params) = CastModel::new(tc.model.clone(), data.dims())?;
            let ctx = GraphContext::new(data.graph.clone(), tc.model.laplacian_scale)?;
            let outcome = train(&model, &ctx, params, &data)?;
            for r in &outcome.history {
                println!(
                    "epoch {} loss {:.6} (pre {:.6} cod {:.6} mi {:.6}) val MAE {:.4} RMSE {:.4}",
                    r.epoch,
                    r.train_loss.total,
                    r.train_loss.prediction,
                    r.train_loss.codebook,
                    r.train_loss.mi,
                    r.val_mae,
                    r.val_rmse
                );
            }
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let ck = Checkpoint {
                meta: CheckpointMeta {
                    config: tc.model,
                    dims: data.dims(),
                    dataset: data.name.clone(),
                    manifest: Some(manifest),
                    normalizer: data.normalizer.clone(),
                    edge_scaler: data.edge_scaler.clone(),
                    usage: outcome.usage.clone(),
                    best_epoch: outcome.best_epoch,
                    steps: outcome.steps,
                },
                params: outcome.params,
                adam: outcome.adam,
            };
            ck.save(&out_dir.join("checkpoint.bin"))?;
            write_json(&out_dir.join("metrics.json"), &outcome.history)?;
            let (report, _) = evaluate(&model, &ctx, &ck.params, &data, Split::Test)?;
            print_report(&report);
            println!("wrote {}", out_dir.join("checkpoint.bin").display());
        }
        Command::Eval { checkpoint, split, manifest, json } => {
            let split: Split = split.parse()?;
            let l = load_for_inference(&checkpoint, manifest.as_deref())?;
            let (report, _) = evaluate(&l.model, &l.ctx, &l.ck.params, &l.data, split)?;
            print_report(&report);
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Command::InspectCodebook { checkpoint, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            ck.model()?;
            write_json(&out, &codebook_report(&ck.params, &ck.meta.usage)?)?;
            println!("wrote {}", out.display());
        }
        Command::ExportCausal { checkpoint, window, split, manifest, out } => {
            let split: Split = split.parse()?;
            let l = load_for_inference(&checkpoint, manifest.as_deref())?;
            let report = causal_report(&l.model, &l.ctx, &l.ck.params, &l.data, split, &[window])?;
            write_json(&out, &report)?;
            println!("wrote {} rows to {}", report.rows.len(), out.display());
        }
        Command::Synth { scenario, out, seed } => {
            let sc = match SyntheticScenario::preset(&scenario, seed) {
                Some(sc) => sc,
                None => {
                    let p = Path::new(&scenario);
                    let text = std::fs::read_to_string(p).map_err(|e| {
                        Error::Config(format!("{scenario:?} is neither a preset (regime-shift, edge-perturb) nor a readable file: {e}"))
                    })?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{scenario}: {e}")))?
                }
            };
            let ds = synthesize_ood(&sc)?;
            ds.write_to_dir(&out)?;
            println!("wrote {} steps x {} nodes to {}", ds.series.len, ds.series.nodes, out.display());
        }
        Command::ValidateData { manifest } => {
            let data = prepare(&manifest)?;
            let d = data.dims();
            println!(
                "ok: {} steps, {} nodes, {} edges, edge features {}",
                data.raw.len,
                d.nodes,
                data.graph.edge_count(),
                d.edge_features
            );
            for s in Split::ALL {
                let (lo, hi) = data.bounds.range(s);
                println!("{s}: steps [{lo}, {hi}), {} windows", data.window_count(s));
            }
        }
    }
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

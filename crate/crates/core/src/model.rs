//! Full forecasting model: backbone → environment/entity split →
//! codebook quantization → edge deconfounder → predictor, plus the
//! environment classifier used by the mutual-information term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{self, Codebook, EnvAssignment, AssignmentMode, CODEBOOK_PARAM};
use crate::deconfounder::{BatchedEdges, Deconfounder};
use crate::disentangler::{to_node_major, Backbone, EntEncoder, EnvEncoder};
use crate::error::Error;
use crate::tensor::{Binder, Mlp, NdArray, ParamStore, Tensor};
use crate::topology::{build_boundary_1, hodge_laplacian_1, HodgeL1, StGraph};

/// How the classifier and the mutual-information term are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiMode {
    /// The MI term reaches only the feature extractor; the classifier is
    /// fit separately with cross-entropy on detached features.
    #[default]
    Adversarial,
    /// The MI term as written, with gradients into the classifier too.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width `F`.
    pub hidden_dim: usize,
    /// Number of environments `K`.
    pub codebook_size: usize,
    /// Laguerre polynomial order `U`.
    pub laguerre_order: usize,
    /// Message-passing depth `K_b`.
    pub gcn_depth: usize,
    /// Largest environment kernel is `2^kernel_exponent`.
    pub kernel_exponent: usize,
    /// Position embedding width `D_p`.
    pub position_dim: usize,
    pub backbone_layers: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub soft_temperature: f64,
    pub seed: u64,
    /// `false` drops the environment branch entirely (ablation).
    pub use_env: bool,
    pub mi_mode: MiMode,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub laplacian_scale: f64,
    pub identical_codebook_init: bool,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            codebook_size: 5,
            laguerre_order: 3,
            gcn_depth: 2,
            kernel_exponent: 3,
            position_dim: 4,
            backbone_layers: 2,
            alpha: 0.5,
            beta: 1.0,
            lr: 1e-3,
            batch_size: 16,
            epochs: 20,
            soft_temperature: 1.0,
            seed: 0,
            use_env: true,
            mi_mode: MiMode::Adversarial,
            patience: 10,
            laplacian_scale: 1.0,
            identical_codebook_init: false,
            max_steps: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, dims: &ModelDims) -> Result<(), Error> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("codebook_size", self.codebook_size),
            ("laguerre_order", self.laguerre_order),
            ("gcn_depth", self.gcn_depth),
            ("position_dim", self.position_dim),
            ("backbone_layers", self.backbone_layers),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.soft_temperature > 0.0 && self.laplacian_scale > 0.0) {
            return Err(Error::Config("lr, soft_temperature and laplacian_scale must be positive".into()));
        }
        if (1usize << self.kernel_exponent) > dims.input_len {
            return Err(Error::Config(format!(
                "largest environment kernel 2^{} exceeds window length {}",
                self.kernel_exponent, dims.input_len
            )));
        }
        Ok(())
    }
}

/// Data-dependent sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub edge_features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Hard nearest-neighbour quantization.
    Train,
    /// Soft assignment over the codebook.
    Test,
}

/// Graph plus its (optionally rescaled) edge Laplacian.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub graph: StGraph,
    pub l1: HodgeL1,
}

impl GraphContext {
    pub fn new(graph: StGraph, laplacian_scale: f64) -> Result<Self, Error> {
        let b1 = build_boundary_1(&graph)?;
        let l1 = hodge_laplacian_1(&b1).scaled(laplacian_scale);
        Ok(Self { graph, l1 })
    }
}

#[derive(Debug, Clone)]
pub struct CastModel {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub backbone: Backbone,
    pub env: Option<EnvEncoder>,
    pub codebook: Option<Codebook>,
    pub ent: EntEncoder,
    pub deconf: Deconfounder,
    pub predictor: Mlp,
    pub classifier: Option<Mlp>,
}

/// Everything the losses and diagnostics need from one forward pass.
pub struct ForwardOutput<'t> {
    /// `[B, S, N, D′]`, normalized units.
    pub prediction: Tensor<'t>,
    /// `H_e`, `[B·N, F]`.
    pub env_latent: Option<Tensor<'t>>,
    /// `Ĥ_e`, `[B·N, F]`.
    pub env_quantized: Option<Tensor<'t>>,
    pub assignment: Option<EnvAssignment>,
    /// Nearest-code index per row (argmax of the soft assignment in test mode).
    pub codes: Vec<usize>,
    /// `H_i`, `[B·N, F]`.
    pub entity: Tensor<'t>,
    /// `Ĥ_i`, `[B·N, F]`.
    pub surrogate: Tensor<'t>,
    /// Classifier output `ẑ` seen by the MI term, `[B·N, K]`.
    pub env_probs: Option<Tensor<'t>>,
    /// Classifier output on detached `Ĥ_i` (adversarial wiring only).
    pub classifier_probs: Option<Tensor<'t>>,
    /// `[B·M, K_b]`.
    pub strengths: Tensor<'t>,
}

impl CastModel {
    /// Build the model and a freshly initialized parameter store.
    pub fn new(config: ModelConfig, dims: ModelDims) -> Result<(Self, ParamStore), Error> {
        config.validate(&dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let f = config.hidden_dim;
        let backbone = Backbone::new(&mut store, &mut rng, dims.in_features, f, config.backbone_layers);
        let (env, codebook) = if config.use_env {
            (
                Some(EnvEncoder::new(&mut store, &mut rng, f, config.kernel_exponent)),
                Some(Codebook::new(&mut store, &mut rng, config.codebook_size, f, config.identical_codebook_init)),
            )
        } else {
            (None, None)
        };
        let ent = EntEncoder::new(&mut store, &mut rng, f);
        let deconf = Deconfounder::new(
            &mut store,
            &mut rng,
            dims.edge_features,
            f,
            config.laguerre_order,
            config.gcn_depth,
            dims.nodes,
            config.position_dim,
        );
        let pred_in = if config.use_env { 2 * f } else { f };
        let predictor = Mlp::new(
            &mut store,
            &mut rng,
            "predictor",
            &[pred_in, 2 * f, 2 * f, dims.horizon * dims.out_features],
        );
        predictor.zero_init_last(&mut store);
        let classifier = config
            .use_env
            .then(|| Mlp::new(&mut store, &mut rng, "classifier", &[f, f, f, config.codebook_size]));
        Ok((Self { config, dims, backbone, env, codebook, ent, deconf, predictor, classifier }, store))
    }

    pub fn is_classifier_param(name: &str) -> bool {
        name.starts_with("classifier.")
    }

    /// `x`: `[B, T, N, D]`; `edge_signal`: `[B, M, F′]`.
    pub fn forward<'s, 't>(
        &self,
        b: &Binder<'s, 't>,
        ctx: &GraphContext,
        x: &NdArray,
        edge_signal: &NdArray,
        mode: Mode,
    ) -> Result<ForwardOutput<'t>, Error> {
        let tape = b.tape();
        let xs = x.shape();
        let d = self.dims;
        if xs != [xs[0], d.input_len, d.nodes, d.in_features] {
            return Err(Error::stage("input", format!("expected [B, {}, {}, {}], got {xs:?}", d.input_len, d.nodes, d.in_features)));
        }
        let batch = xs[0];
        let m = ctx.graph.edge_count();
        if edge_signal.shape() != [batch, m, d.edge_features] {
            return Err(Error::stage(
                "edge signal",
                format!("expected [{batch}, {m}, {}], got {:?}", d.edge_features, edge_signal.shape()),
            ));
        }
        let rows = batch * d.nodes;
        let f = self.config.hidden_dim;

        let h = to_node_major(tape.constant(x.clone()))
            .and_then(|xn| self.backbone.forward(b, xn))
            .map_err(|e| Error::tensor("backbone", e))?;

        let mut env_latent = None;
        let mut env_quantized = None;
        let mut assignment = None;
        let mut codes = Vec::new();
        if let Some(env) = &self.env {
            let h_e = env.forward(b, h).map_err(|e| Error::tensor("environment encoder", e))?;
            let (q, z, idx) = match mode {
                Mode::Train => {
                    let table = b.store().get(CODEBOOK_PARAM).ok_or_else(|| Error::stage("codebook", "missing embeddings"))?;
                    codebook::quantize_hard(h_e, table).map_err(|e| Error::tensor("codebook", e))?
                }
                Mode::Test => {
                    let e = b.param(CODEBOOK_PARAM).map_err(|e| Error::tensor("codebook", e))?;
                    let (mixed, q) = codebook::quantize_soft(h_e, e, self.config.soft_temperature)
                        .map_err(|e| Error::tensor("codebook", e))?;
                    let z = EnvAssignment { mode: AssignmentMode::Soft, probs: (*q.value()).clone() };
                    let idx = z.argmax();
                    (mixed, z, idx)
                }
            };
            env_latent = Some(h_e);
            env_quantized = Some(q);
            assignment = Some(z);
            codes = idx;
        }

        let h_i = self.ent.forward(b, h).map_err(|e| Error::tensor("entity encoder", e))?;

        let edges = BatchedEdges::new(&ctx.graph, batch);
        let (strengths, surrogate) = (|| {
            let x_ed = tape.constant(edge_signal.clone());
            let h_ed = self.deconf.edge_encode(b, x_ed)?;
            let filtered = self.deconf.filter_causation(b, h_ed, &ctx.l1)?;
            let strengths = self.deconf.causal_strength(b, filtered)?.reshape(&[batch * m, self.config.gcn_depth])?;
            let h_ir = self.deconf.causal_gcn(b, h_i, strengths, &edges)?;
            let h_ia = self.deconf.position_branch(b)?;
            Ok((strengths, self.deconf.surrogate(h_ir, h_ia, batch)?))
        })()
        .map_err(|e| Error::tensor("deconfounder", e))?;

        let pred_in = match env_quantized {
            Some(q) => Tensor::concat(&[q, surrogate], 1).map_err(|e| Error::tensor("predictor", e))?,
            None => surrogate,
        };
        let prediction = self
            .predictor
            .forward(b, pred_in)
            .and_then(|y| y.reshape(&[batch, d.nodes, d.horizon, d.out_features]))
            .and_then(|y| y.permute(&[0, 2, 1, 3]))
            .map_err(|e| Error::tensor("predictor", e))?;

        let (env_probs, classifier_probs) = match &self.classifier {
            Some(cls) => (|| {
                match self.config.mi_mode {
                    MiMode::Adversarial => {
                        let frozen = b.frozen();
                        let probs = cls.forward(&frozen, surrogate)?.softmax(1)?;
                        let own = cls.forward(b, surrogate.detach())?.softmax(1)?;
                        Ok((Some(probs), Some(own)))
                    }
                    MiMode::Joint => Ok((Some(cls.forward(b, surrogate)?.softmax(1)?), None)),
                }
            })()
            .map_err(|e| Error::tensor("classifier", e))?,
            None => (None, None),
        };
        debug_assert_eq!(surrogate.shape(), vec![rows, f]);

        Ok(ForwardOutput {
            prediction,
            env_latent,
            env_quantized,
            assignment,
            codes,
            entity: h_i,
            surrogate,
            env_probs,
            classifier_probs,
            strengths,
        })
    }
}

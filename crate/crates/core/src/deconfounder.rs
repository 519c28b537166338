//! Edge-level causation filtering and causal-strength-gated message passing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Binder, Linear, Mlp, NdArray, ParamStore, Tensor, TensorError};
use crate::topology::{laguerre_apply, HodgeL1, StGraph};

pub const THETA_PARAM: &str = "deconf.theta";
pub const POSITION_PARAM: &str = "deconf.position";

/// Edge endpoints replicated over a batch of graphs laid out as `B` blocks of `N` rows.
#[derive(Debug, Clone)]
pub struct BatchedEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub rows: usize,
}

impl BatchedEdges {
    pub fn new(g: &StGraph, batch: usize) -> Self {
        let n = g.node_count();
        let mut src = Vec::with_capacity(batch * g.edge_count());
        let mut dst = Vec::with_capacity(batch * g.edge_count());
        for b in 0..batch {
            for &(s, d) in g.edges() {
                src.push(b * n + s);
                dst.push(b * n + d);
            }
        }
        Self { src, dst, rows: batch * n }
    }
}

#[derive(Debug, Clone)]
struct GcnLayer {
    self_map: Linear,
    message: Linear,
}

#[derive(Debug, Clone)]
pub struct Deconfounder {
    pub edge_encoder: Mlp,
    pub strength: Linear,
    gcn: Vec<GcnLayer>,
    pub position: Linear,
    pub hidden: usize,
    pub depth: usize,
}

/// Per-edge, per-layer strengths in (0, 1), `[B·M, K_b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalStrength {
    pub values: NdArray,
}

impl Deconfounder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        edge_features: usize,
        hidden: usize,
        laguerre_order: usize,
        depth: usize,
        nodes: usize,
        position_dim: usize,
    ) -> Self {
        assert!(laguerre_order >= 1 && depth >= 1);
        let edge_encoder = Mlp::new(store, rng, "deconf.edge", &[edge_features, hidden, hidden]);
        let mut theta = vec![0.0; laguerre_order];
        theta[0] = 1.0;
        for t in theta.iter_mut().skip(1) {
            *t = 0.1 * rng.random_range(-1.0..1.0);
        }
        store.insert(THETA_PARAM, NdArray::new(vec![laguerre_order], theta).unwrap());
        let strength = Linear::new(store, rng, "deconf.strength", hidden, depth, true);
        let gcn = (0..depth)
            .map(|k| GcnLayer {
                self_map: Linear::new(store, rng, &format!("deconf.gcn{k}.self"), hidden, hidden, true),
                message: Linear::new(store, rng, &format!("deconf.gcn{k}.msg"), hidden, hidden, false),
            })
            .collect();
        store.normal(POSITION_PARAM, &[nodes, position_dim], 1.0, rng);
        let position = Linear::new(store, rng, "deconf.position_proj", position_dim, hidden, true);
        Self { edge_encoder, strength, gcn, position, hidden, depth }
    }

    /// `[.., M, F′]` → `[.., M, F]`.
    pub fn edge_encode<'t>(&self, b: &Binder<'_, 't>, x_ed: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.edge_encoder.forward(b, x_ed)
    }

    /// Laguerre spectral filter over `[B, M, F]` edge representations.
    pub fn filter_causation<'t>(&self, b: &Binder<'_, 't>, h_ed: Tensor<'t>, l1: &HodgeL1) -> Result<Tensor<'t>, TensorError> {
        laguerre_apply(l1, h_ed, b.param(THETA_PARAM)?)
    }

    /// Sigmoid of a per-edge linear map, `[.., M, F]` → `[.., M, K_b]`.
    pub fn causal_strength<'t>(&self, b: &Binder<'_, 't>, filtered: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        Ok(self.strength.forward(b, filtered)?.sigmoid())
    }

    /// `K_b` rounds of message passing along edge direction; layer `k`
    /// weights messages by strength column `k`. ReLU between layers, none after the last.
    pub fn causal_gcn<'t>(
        &self,
        b: &Binder<'_, 't>,
        h_i: Tensor<'t>,
        strengths: Tensor<'t>,
        edges: &BatchedEdges,
    ) -> Result<Tensor<'t>, TensorError> {
        let ss = strengths.shape();
        if ss.len() != 2 || ss[0] != edges.src.len() || ss[1] != self.depth {
            return Err(TensorError::Shape(format!(
                "strengths {:?} do not match {} edges x {} layers",
                ss,
                edges.src.len(),
                self.depth
            )));
        }
        if h_i.shape()[0] != edges.rows {
            return Err(TensorError::Shape(format!(
                "entity features {:?} do not match {} node rows",
                h_i.shape(),
                edges.rows
            )));
        }
        let mut h = h_i;
        for (k, layer) in self.gcn.iter().enumerate() {
            let own = layer.self_map.forward(b, h)?;
            let weight = strengths.narrow(1, k, 1)?;
            let msgs = layer.message.forward(b, h.index_select(&edges.src)?)?.mul(&weight)?;
            let agg = msgs.index_add(&edges.dst, edges.rows)?;
            h = own.add(&agg)?;
            if k + 1 < self.gcn.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Static node term `P·W_p + b_p`, `[N, F]`.
    pub fn position_branch<'t>(&self, b: &Binder<'_, 't>) -> Result<Tensor<'t>, TensorError> {
        self.position.forward(b, b.param(POSITION_PARAM)?)
    }

    /// `Ĥ_ir + Ĥ_ia`, broadcasting the static branch over the batch.
    pub fn surrogate<'t>(&self, h_ir: Tensor<'t>, h_ia: Tensor<'t>, batch: usize) -> Result<Tensor<'t>, TensorError> {
        let (n, f) = (h_ia.shape()[0], h_ia.shape()[1]);
        h_ir.reshape(&[batch, n, f])?.add(&h_ia)?.reshape(&[batch * n, f])
    }
}

/// One JSON row of the causal-strength export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalRow {
    pub window_id: usize,
    pub src: usize,
    pub dst: usize,
    pub layer: usize,
    pub strength: f64,
}

/// Rows for one window; `values` is `[M, K_b]`.
pub fn export_causal(values: &NdArray, g: &StGraph, window_id: usize) -> Vec<CausalRow> {
    let depth = values.shape()[1];
    g.edges()
        .iter()
        .enumerate()
        .flat_map(|(e, &(src, dst))| {
            (0..depth).map(move |layer| CausalRow {
                window_id,
                src,
                dst,
                layer,
                strength: values.get(&[e, layer]),
            })
        })
        .collect()
}

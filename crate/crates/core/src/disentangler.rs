//! Backbone TCN and the environment / entity encoders.
//!
//! Latent sequences are stored node-major as `[B·N, F, T]` so every
//! temporal operator runs as one batched causal convolution; the public
//! helpers convert to and from the `[B, T, N, F]` layout.

use rand::Rng;

use crate::tensor::{Binder, LayerNorm, Linear, NdArray, ParamStore, SelfAttention, Tensor, TensorError};

fn conv_param<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cout: usize, cin: usize, k: usize) -> (String, String) {
    let w = format!("{name}.weight");
    let b = format!("{name}.bias");
    store.normal(&w, &[cout, cin, k], (1.0 / (cin * k) as f64).sqrt(), rng);
    store.zeros(&b, &[cout, 1]);
    (w, b)
}

fn conv<'t>(b: &Binder<'_, 't>, x: Tensor<'t>, w: &str, bias: &str, dilation: usize) -> Result<Tensor<'t>, TensorError> {
    x.conv1d(&b.param(w)?, dilation)?.add(&b.param(bias)?)
}

/// `[B, T, N, D]` → `[B·N, D, T]`.
pub fn to_node_major<'t>(x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Shape(format!("expected [B, T, N, D], got {s:?}")));
    }
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0] * s[2], s[3], s[1]])
}

/// `[B·N, F, T]` → `[B, T, N, F]`.
pub fn from_node_major<'t>(h: Tensor<'t>, batch: usize) -> Result<Tensor<'t>, TensorError> {
    let s = h.shape();
    let nodes = s[0] / batch;
    h.reshape(&[batch, nodes, s[1], s[2]])?.permute(&[0, 3, 1, 2])
}

#[derive(Debug, Clone)]
struct TcnLayer {
    weight: String,
    bias: String,
    dilation: usize,
    skip: Option<Linear>,
}

/// Stack of causal dilated convolutions (kernel 2, dilation doubling per
/// layer) with residual connections.
#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<TcnLayer>,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, in_dim: usize, hidden: usize, depth: usize) -> Self {
        let layers = (0..depth.max(1))
            .map(|l| {
                let cin = if l == 0 { in_dim } else { hidden };
                let (weight, bias) = conv_param(store, rng, &format!("backbone.{l}"), hidden, cin, 2);
                let skip = (cin != hidden)
                    .then(|| Linear::new(store, rng, &format!("backbone.{l}.skip"), cin, hidden, false));
                TcnLayer { weight, bias, dilation: 1 << l, skip }
            })
            .collect();
        Self { layers, in_dim, hidden }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Zero the last layer's convolution and bias.
    pub fn zero_last(&self, store: &mut ParamStore) {
        if let Some(l) = self.layers.last() {
            let shape = store.get(&l.weight).map(|w| w.shape().to_vec()).unwrap_or_default();
            store.insert(&l.weight, NdArray::zeros(&shape));
            store.zeros(&l.bias, &[self.hidden, 1]);
        }
    }

    /// `[B·N, D, T]` → `[B·N, F, T]`.
    pub fn forward<'t>(&self, b: &Binder<'_, 't>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let mut h = x;
        for layer in &self.layers {
            let y = conv(b, h, &layer.weight, &layer.bias, layer.dilation)?.relu();
            let res = match &layer.skip {
                Some(proj) => proj.forward(b, h.transpose_last()?)?.transpose_last()?,
                None => h,
            };
            h = y.add(&res)?;
        }
        Ok(h)
    }
}

/// Multi-scale convolutions (kernels `2^0..2^S_k`), temporal mean pooling
/// and a linear projection.
#[derive(Debug, Clone)]
pub struct EnvEncoder {
    convs: Vec<(String, String)>,
    proj: Linear,
}

impl EnvEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, hidden: usize, max_kernel_exp: usize) -> Self {
        let convs = (0..=max_kernel_exp)
            .map(|i| conv_param(store, rng, &format!("env.conv{i}"), hidden, hidden, 1 << i))
            .collect();
        let proj = Linear::new(store, rng, "env.proj", hidden * (max_kernel_exp + 1), hidden, true);
        Self { convs, proj }
    }

    /// `[B·N, F, T]` → `[B·N, F]`.
    pub fn forward<'t>(&self, b: &Binder<'_, 't>, h: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let parts = self
            .convs
            .iter()
            .map(|(w, bias)| conv(b, h, w, bias, 1))
            .collect::<Result<Vec<_>, _>>()?;
        let pooled = Tensor::concat(&parts, 1)?.mean_axis(2)?;
        self.proj.forward(b, pooled)
    }
}

/// Frequency branch (DFT → linear → inverse DFT) plus time branch
/// (self-attention → layer norm), summed, mean-pooled over time and projected.
#[derive(Debug, Clone)]
pub struct EntEncoder {
    spectral: Linear,
    attention: SelfAttention,
    norm: LayerNorm,
    proj: Linear,
    hidden: usize,
}

impl EntEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, hidden: usize) -> Self {
        Self {
            spectral: Linear::new(store, rng, "ent.spectral", 2 * hidden, 2 * hidden, true),
            attention: SelfAttention::new(store, rng, "ent.attn", hidden),
            norm: LayerNorm::new(store, "ent.norm", hidden),
            proj: Linear::new(store, rng, "ent.proj", hidden, hidden, true),
            hidden,
        }
    }

    /// Frequency branch alone, `[B·N, F, T]` → `[B·N, T, F]`.
    pub fn frequency_branch<'t>(&self, b: &Binder<'_, 't>, h: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let s = h.shape();
        let (rows, f, t) = (s[0], s[1], s[2]);
        let spec = h.to_complex()?.dft()?; // [R, F, T, 2]
        let stacked = spec.permute(&[0, 2, 3, 1])?.reshape(&[rows, t, 2 * f])?;
        let mixed = self.spectral.forward(b, stacked)?;
        let back = mixed.reshape(&[rows, t, 2, f])?.permute(&[0, 3, 1, 2])?.idft()?;
        back.real_part()?.transpose_last()
    }

    /// Time branch alone, `[B·N, F, T]` → `[B·N, T, F]`.
    pub fn time_branch<'t>(&self, b: &Binder<'_, 't>, h: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let seq = h.transpose_last()?;
        self.norm.forward(b, self.attention.forward(b, seq)?)
    }

    /// `[B·N, F, T]` → `[B·N, F]`.
    pub fn forward<'t>(&self, b: &Binder<'_, 't>, h: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        if h.shape().get(1) != Some(&self.hidden) {
            return Err(TensorError::Shape(format!(
                "entity encoder expects [R, {}, T], got {:?}",
                self.hidden,
                h.shape()
            )));
        }
        let fused = self.frequency_branch(b, h)?.add(&self.time_branch(b, h)?)?;
        self.proj.forward(b, fused.mean_axis(1)?)
    }
}

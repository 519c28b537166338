//! Named parameter storage and the small set of layers the model is built from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::array::NdArray;
use super::tape::{Gradients, Tape, Tensor};
use super::TensorError;

/// Ordered name → array map holding every learnable parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, NdArray>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NdArray)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.insert(name, NdArray::from_parts(shape.to_vec(), data));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, NdArray::zeros(shape));
    }
}

/// Binds parameters from a [`ParamStore`] onto a tape on first use.
///
/// A frozen binder records parameters as constants, so no gradient reaches
/// them through its sub-graph.
pub struct Binder<'s, 't> {
    tape: &'t Tape,
    store: &'s ParamStore,
    frozen: bool,
    bound: RefCell<BTreeMap<String, Tensor<'t>>>,
}

impl<'s, 't> Binder<'s, 't> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self { tape, store, frozen: false, bound: RefCell::new(BTreeMap::new()) }
    }

    /// Same store, parameters bound as constants.
    pub fn frozen(&self) -> Binder<'s, 't> {
        Self { tape: self.tape, store: self.store, frozen: true, bound: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Tensor<'t>, TensorError> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(*t);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))?
            .clone();
        let t = if self.frozen { self.tape.constant(value) } else { self.tape.var(value) };
        self.bound.borrow_mut().insert(name.to_string(), t);
        Ok(t)
    }

    /// Gradients of every parameter bound through this binder.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, NdArray> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, t)| grads.get(*t).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Affine map `x · W + b` over the last axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.normal(&weight, &[in_dim, out_dim], (1.0 / in_dim as f64).sqrt(), rng);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.zeros(&b, &[out_dim]);
            b
        });
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.zeros(&self.weight, &[self.in_dim, self.out_dim]);
        if let Some(b) = &self.bias {
            store.zeros(b, &[self.out_dim]);
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'_, 't>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let shape = x.shape();
        let last = *shape.last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(TensorError::Shape(format!(
                "linear `{}` expects last dim {}, got {:?}",
                self.weight, self.in_dim, shape
            )));
        }
        // flatten to rows so the weight is applied as one matrix product
        let rows = x.value().len() / last;
        let y = x.reshape(&[rows, last])?.matmul(&b.param(&self.weight)?)?;
        let y = match &self.bias {
            Some(bias) => y.add(&b.param(bias)?)?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }
}

/// Stack of linear layers with ReLU between them and no activation on the output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn zero_init_last(&self, store: &mut ParamStore) {
        if let Some(l) = self.layers.last() {
            l.zero_init(store);
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'_, 't>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(b, h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = format!("{name}.gain");
        let shift = format!("{name}.shift");
        store.insert(&gain, NdArray::full(&[dim], 1.0));
        store.zeros(&shift, &[dim]);
        Self { gain, shift, dim, eps: 1e-5 }
    }

    pub fn forward<'t>(&self, b: &Binder<'_, 't>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let axis = x.shape().len() - 1;
        let mean = x.mean_axis_keepdim(axis)?;
        let centered = x.sub(&mean)?;
        let var = centered.square().mean_axis_keepdim(axis)?;
        let normed = centered.div(&var.add_scalar(self.eps).sqrt())?;
        normed.mul(&b.param(&self.gain)?)?.add(&b.param(&self.shift)?)
    }
}

/// Single-head scaled dot-product self-attention over the second-to-last axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, true),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, true),
            dim,
        }
    }

    /// Attention weights `[.., T, T]` for input `[.., T, F]`.
    pub fn weights<'t>(&self, b: &Binder<'_, 't>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let q = self.query.forward(b, x)?;
        let k = self.key.forward(b, x)?;
        let scores = q.matmul(&k.transpose_last()?)?.scale(1.0 / (self.dim as f64).sqrt());
        let axis = scores.shape().len() - 1;
        scores.softmax(axis)
    }

    pub fn forward<'t>(&self, b: &Binder<'_, 't>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let attn = self.weights(b, x)?;
        let v = self.value.forward(b, x)?;
        attn.matmul(&v)
    }
}

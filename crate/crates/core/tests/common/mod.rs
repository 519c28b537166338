#![allow(dead_code)]

use cast_core::model::{CastModel, GraphContext, ModelConfig, ModelDims};
use cast_core::tensor::{NdArray, ParamStore, Tape, Tensor};
use cast_core::topology::StGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> NdArray {
    random(shape, rng).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

pub fn positive(shape: &[usize], rng: &mut impl Rng) -> NdArray {
    random(shape, rng).map(|x| x.abs() + 0.2)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
pub fn weighted<'t>(t: Tensor<'t>) -> Tensor<'t> {
    let n = t.value().len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect();
    let wt = t.tape().constant(NdArray::new(t.shape(), w).unwrap());
    t.mul(&wt).unwrap().sum()
}

/// Max relative error between tape gradients and central differences (eps 1e-5).
pub fn grad_check<F>(inputs: &[NdArray], f: F) -> f64
where
    F: for<'t> Fn(&[Tensor<'t>]) -> Tensor<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Tensor<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let grads = tape.backward(f(&vars)).unwrap();
    let eps = 1e-5;
    let eval = |xs: &[NdArray]| {
        let t = Tape::new();
        let vs: Vec<Tensor<'_>> = xs.iter().map(|x| t.constant(x.clone())).collect();
        f(&vs).item()
    };
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<NdArray>,
    pub f: for<'t> fn(&[Tensor<'t>]) -> Tensor<'t>,
}

macro_rules! case {
    ($name:expr, |$r:ident| $inputs:expr, |$v:ident| $body:expr) => {
        OpCase {
            name: $name,
            inputs: |$r: &mut ChaCha8Rng| $inputs,
            f: |$v: &[Tensor<'_>]| weighted($body),
        }
    };
}

/// Every differentiable tensor operation with an input generator.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("add (broadcast)", |r| vec![random(&[3, 4], r), random(&[4], r)], |v| v[0].add(&v[1]).unwrap()),
        case!("sub (broadcast)", |r| vec![random(&[2, 1, 4], r), random(&[3, 1], r)], |v| v[0].sub(&v[1]).unwrap()),
        case!("mul (broadcast)", |r| vec![random(&[3, 4], r), random(&[3, 1], r)], |v| v[0].mul(&v[1]).unwrap()),
        case!("div", |r| vec![random(&[3, 4], r), positive(&[4], r)], |v| v[0].div(&v[1]).unwrap()),
        case!("scale", |r| vec![random(&[5], r)], |v| v[0].scale(-1.7)),
        case!("neg", |r| vec![random(&[5], r)], |v| v[0].neg()),
        case!("add_scalar", |r| vec![random(&[5], r)], |v| v[0].add_scalar(0.3).square()),
        case!("relu", |r| vec![away_from_zero(&[3, 4], r)], |v| v[0].relu()),
        case!("sigmoid", |r| vec![random(&[3, 4], r)], |v| v[0].sigmoid()),
        case!("tanh", |r| vec![random(&[3, 4], r)], |v| v[0].tanh()),
        case!("exp", |r| vec![random(&[3, 4], r)], |v| v[0].exp()),
        case!("ln", |r| vec![positive(&[3, 4], r)], |v| v[0].ln()),
        case!("sqrt", |r| vec![positive(&[3, 4], r)], |v| v[0].sqrt()),
        case!("abs", |r| vec![away_from_zero(&[3, 4], r)], |v| v[0].abs()),
        case!("square", |r| vec![random(&[3, 4], r)], |v| v[0].square()),
        case!("clamp_min", |r| vec![away_from_zero(&[3, 4], r)], |v| v[0].clamp_min(0.0)),
        case!("matmul 2d", |r| vec![random(&[3, 4], r), random(&[4, 2], r)], |v| v[0].matmul(&v[1]).unwrap()),
        case!("matmul batched", |r| vec![random(&[2, 3, 4], r), random(&[2, 4, 5], r)], |v| v[0].matmul(&v[1]).unwrap()),
        case!("matmul shared rhs", |r| vec![random(&[2, 3, 4], r), random(&[4, 5], r)], |v| v[0].matmul(&v[1]).unwrap()),
        case!("sum", |r| vec![random(&[3, 4], r)], |v| v[0].sum().square()),
        case!("mean", |r| vec![random(&[3, 4], r)], |v| v[0].mean().square()),
        case!("sum_axis", |r| vec![random(&[2, 3, 4], r)], |v| v[0].sum_axis(1).unwrap()),
        case!("sum_axis_keepdim", |r| vec![random(&[2, 3, 4], r)], |v| v[0].sum_axis_keepdim(2).unwrap()),
        case!("mean_axis", |r| vec![random(&[2, 3, 4], r)], |v| v[0].mean_axis(0).unwrap()),
        case!("mean_axis_keepdim", |r| vec![random(&[2, 3, 4], r)], |v| v[0].mean_axis_keepdim(1).unwrap()),
        case!("reshape", |r| vec![random(&[2, 3, 4], r)], |v| v[0].reshape(&[6, 4]).unwrap()),
        case!("permute", |r| vec![random(&[2, 3, 4], r)], |v| v[0].permute(&[2, 0, 1]).unwrap()),
        case!("transpose_last", |r| vec![random(&[2, 3, 4], r)], |v| v[0].transpose_last().unwrap()),
        case!("concat", |r| vec![random(&[2, 3, 4], r), random(&[2, 2, 4], r)], |v| Tensor::concat(&[v[0], v[1]], 1).unwrap()),
        case!("narrow", |r| vec![random(&[2, 3, 4], r)], |v| v[0].narrow(2, 1, 2).unwrap()),
        case!("index_select", |r| vec![random(&[4, 3], r)], |v| v[0].index_select(&[1, 0, 1, 3]).unwrap()),
        case!("index_add", |r| vec![random(&[4, 3], r)], |v| v[0].index_add(&[2, 2, 0, 1], 3).unwrap()),
        case!("softmax", |r| vec![random(&[2, 3, 4], r)], |v| v[0].softmax(1).unwrap()),
        case!("conv1d d=1", |r| vec![random(&[2, 3, 9], r), random(&[2, 3, 2], r)], |v| v[0].conv1d(&v[1], 1).unwrap()),
        case!("conv1d d=2", |r| vec![random(&[2, 3, 9], r), random(&[2, 3, 3], r)], |v| v[0].conv1d(&v[1], 2).unwrap()),
        case!("conv1d d=4", |r| vec![random(&[1, 2, 12], r), random(&[3, 2, 2], r)], |v| v[0].conv1d(&v[1], 4).unwrap()),
        case!("to_complex", |r| vec![random(&[2, 5], r)], |v| v[0].to_complex().unwrap()),
        case!("real_part", |r| vec![random(&[2, 5, 2], r)], |v| v[0].real_part().unwrap()),
        case!("dft", |r| vec![random(&[2, 6, 2], r)], |v| v[0].dft().unwrap()),
        case!("idft", |r| vec![random(&[2, 7, 2], r)], |v| v[0].idft().unwrap()),
    ]
}

/// Worst relative error per op over `instances` random draws.
pub fn autodiff_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    op_cases()
        .into_iter()
        .map(|c| {
            let worst = (0..instances).map(|_| grad_check(&(c.inputs)(&mut r), c.f)).fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}

/// Random simple directed graph with every node touched where possible.
pub fn random_graph(r: &mut impl Rng, nodes: usize, edges: usize) -> StGraph {
    let mut pairs: Vec<(usize, usize)> =
        (0..nodes).flat_map(|s| (0..nodes).filter(move |&d| d != s).map(move |d| (s, d))).collect();
    let mut chosen = Vec::new();
    while chosen.len() < edges.min(pairs.len()) {
        let i = r.random_range(0..pairs.len());
        chosen.push(pairs.swap_remove(i));
    }
    StGraph::new(nodes, chosen).unwrap()
}

/// `D − A` built from edge endpoints; each directed edge adds one
/// undirected adjacency.
pub fn degree_minus_adjacency(g: &StGraph) -> Vec<Vec<f64>> {
    let n = g.node_count();
    let mut l = vec![vec![0.0; n]; n];
    for &(s, d) in g.edges() {
        l[s][s] += 1.0;
        l[d][d] += 1.0;
        l[s][d] -= 1.0;
        l[d][s] -= 1.0;
    }
    l
}

/// Small model on a 4-node graph with random inputs.
pub struct Fixture {
    pub model: CastModel,
    pub params: ParamStore,
    pub ctx: GraphContext,
    pub x: NdArray,
    pub edge: NdArray,
    pub y: NdArray,
}

pub fn fixture(config: ModelConfig, batch: usize, seed: u64) -> Fixture {
    let g = StGraph::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
    let dims = ModelDims { nodes: 4, input_len: 8, horizon: 3, in_features: 1, out_features: 1, edge_features: 4 };
    let (model, params) = CastModel::new(config, dims).unwrap();
    let ctx = GraphContext::new(g, 1.0).unwrap();
    let mut r = rng(seed);
    Fixture {
        x: random(&[batch, 8, 4, 1], &mut r),
        edge: random(&[batch, 5, 4], &mut r),
        y: random(&[batch, 3, 4, 1], &mut r),
        model,
        params,
        ctx,
    }
}

pub fn small_config() -> ModelConfig {
    ModelConfig { hidden_dim: 6, codebook_size: 3, kernel_exponent: 2, position_dim: 2, ..Default::default() }
}

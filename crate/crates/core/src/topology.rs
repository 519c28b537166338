//! Oriented incidence (boundary) operators, the node and edge Laplacians
//! built from them, and Laguerre-polynomial spectral filtering of edge signals.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::tensor::{NdArray, Tensor, TensorError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TopologyError {
    #[error("edge {id} is a self-loop on node {node}")]
    SelfLoop { id: usize, node: usize },
    #[error("edge {id} references node {node} but the graph has {count} nodes")]
    NodeOutOfRange { id: usize, node: usize, count: usize },
    #[error("duplicate edge {src}->{dst}")]
    Duplicate { src: usize, dst: usize },
    #[error("graph has no nodes")]
    Empty,
    #[error("{0}")]
    Numerical(String),
}

/// Planar or geographic node position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub x: f64,
    pub y: f64,
}

/// Directed graph with stable edge ids `0..M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    coords: Option<Vec<Coord>>,
}

impl StGraph {
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>) -> Result<Self, TopologyError> {
        if node_count == 0 {
            return Err(TopologyError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for (id, &(src, dst)) in edges.iter().enumerate() {
            for node in [src, dst] {
                if node >= node_count {
                    return Err(TopologyError::NodeOutOfRange { id, node, count: node_count });
                }
            }
            if src == dst {
                return Err(TopologyError::SelfLoop { id, node: src });
            }
            if !seen.insert((src, dst)) {
                return Err(TopologyError::Duplicate { src, dst });
            }
        }
        Ok(Self { node_count, edges, coords: None })
    }

    pub fn with_coords(mut self, coords: Vec<Coord>) -> Result<Self, TopologyError> {
        if coords.len() != self.node_count {
            return Err(TopologyError::NodeOutOfRange {
                id: 0,
                node: coords.len(),
                count: self.node_count,
            });
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn coords(&self) -> Option<&[Coord]> {
        self.coords.as_deref()
    }

    /// Edge-graph adjacency: edges sharing at least one endpoint.
    pub fn edge_neighbors(&self) -> Vec<Vec<usize>> {
        let m = self.edges.len();
        let mut out = vec![Vec::new(); m];
        for e in 0..m {
            let (a, b) = self.edges[e];
            for f in 0..m {
                if e == f {
                    continue;
                }
                let (c, d) = self.edges[f];
                if a == c || a == d || b == c || b == d {
                    out[e].push(f);
                }
            }
        }
        out
    }

    /// Breadth-first hop distance from `edge` in the edge graph; `usize::MAX` when unreachable.
    pub fn edge_hops(&self, edge: usize) -> Vec<usize> {
        let nbrs = self.edge_neighbors();
        let mut dist = vec![usize::MAX; self.edges.len()];
        let mut queue = std::collections::VecDeque::from([edge]);
        dist[edge] = 0;
        while let Some(e) = queue.pop_front() {
            for &f in &nbrs[e] {
                if dist[f] == usize::MAX {
                    dist[f] = dist[e] + 1;
                    queue.push_back(f);
                }
            }
        }
        dist
    }
}

/// Signed node-by-edge incidence matrix; column `j` holds `-1` at the
/// source of edge `j` and `+1` at its destination.
#[derive(Debug, Clone, PartialEq)]
pub struct Boundary1 {
    matrix: NdArray,
}

impl Boundary1 {
    pub fn matrix(&self) -> &NdArray {
        &self.matrix
    }

    pub fn node_count(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn edge_count(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Same operator with every orientation reversed.
    pub fn flipped(&self) -> Self {
        Self { matrix: self.matrix.map(|v| -v) }
    }
}

pub fn build_boundary_1(g: &StGraph) -> Result<Boundary1, TopologyError> {
    let (n, m) = (g.node_count(), g.edge_count());
    if m == 0 {
        return Err(TopologyError::Numerical("graph has no edges".into()));
    }
    let mut data = vec![0.0; n * m];
    for (j, &(src, dst)) in g.edges().iter().enumerate() {
        if src == dst {
            return Err(TopologyError::SelfLoop { id: j, node: src });
        }
        data[src * m + j] = -1.0;
        data[dst * m + j] = 1.0;
    }
    Ok(Boundary1 { matrix: NdArray::new(vec![n, m], data).expect("n, m > 0") })
}

/// Node Laplacian `∂₁∂₁ᵀ`.
pub fn graph_laplacian_0(b: &Boundary1) -> NdArray {
    b.matrix.matmul(&b.matrix.transposed()).expect("conformable")
}

/// Edge Laplacian with triangles dropped: `∂₁ᵀ∂₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct HodgeL1 {
    matrix: NdArray,
}

impl HodgeL1 {
    pub fn matrix(&self) -> &NdArray {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// `scale · L`; used to shrink the spectrum for numerical experiments.
    pub fn scaled(&self, scale: f64) -> Self {
        Self { matrix: self.matrix.map(|v| v * scale) }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let eig = SymmetricEigen::new(to_dmatrix(&self.matrix));
        let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

pub fn hodge_laplacian_1(b: &Boundary1) -> HodgeL1 {
    HodgeL1 { matrix: b.matrix.transposed().matmul(&b.matrix).expect("conformable") }
}

/// Learnable Laguerre expansion coefficients `θ_0..θ_{U-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaguerreCoeffs(pub Vec<f64>);

impl LaguerreCoeffs {
    pub fn order(&self) -> usize {
        self.0.len()
    }
}

/// `T_u(λ)` for every `u < order`, by the three-term recurrence.
pub fn laguerre_values(lambda: f64, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(order);
    if order == 0 {
        return out;
    }
    out.push(1.0);
    if order > 1 {
        out.push(1.0 - lambda);
    }
    for u in 1..order.saturating_sub(1) {
        let uf = u as f64;
        let next = ((2.0 * uf + 1.0 - lambda) * out[u] - uf * out[u - 1]) / (uf + 1.0);
        out.push(next);
    }
    out
}

/// `Σ_u θ_u T_u(L) H` on the tape, using only products `L·P`.
///
/// `h` is `[.., M, F]`; `theta` is `[U]`. Differentiable in both.
pub fn laguerre_apply<'t>(
    l: &HodgeL1,
    h: Tensor<'t>,
    theta: Tensor<'t>,
) -> Result<Tensor<'t>, TensorError> {
    let order = theta.shape()[0];
    if theta.shape().len() != 1 || order == 0 {
        return Err(TensorError::Contract(format!(
            "Laguerre coefficients must be a non-empty vector, got {:?}",
            theta.shape()
        )));
    }
    let hs = h.shape();
    if hs.len() < 2 || hs[hs.len() - 2] != l.size() {
        return Err(TensorError::Shape(format!(
            "edge signal {:?} does not match Laplacian of size {}",
            hs,
            l.size()
        )));
    }
    let lap = h.tape().constant(l.matrix.clone());
    let coef = |u: usize| theta.narrow(0, u, 1);
    let mut prev = h;
    let mut acc = prev.mul(&coef(0)?)?;
    if order == 1 {
        return Ok(acc);
    }
    let mut cur = h.sub(&lap.matmul(&h)?)?;
    acc = acc.add(&cur.mul(&coef(1)?)?)?;
    for u in 1..order - 1 {
        let uf = u as f64;
        let lp = lap.matmul(&cur)?;
        let next = cur
            .scale(2.0 * uf + 1.0)
            .sub(&lp)?
            .sub(&prev.scale(uf))?
            .scale(1.0 / (uf + 1.0));
        acc = acc.add(&next.mul(&coef(u + 1)?)?)?;
        prev = cur;
        cur = next;
    }
    Ok(acc)
}

fn to_dmatrix(a: &NdArray) -> DMatrix<f64> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    DMatrix::from_row_slice(r, c, a.data())
}

/// Dense filter `Σ_j h(λ_j) ψ_j ψ_jᵀ` from an explicit eigendecomposition of `L`,
/// with `h(λ) = Σ_u θ_u T_u(λ)`.
pub fn spectral_filter_matrix(l: &HodgeL1, theta: &LaguerreCoeffs) -> Result<NdArray, TopologyError> {
    if theta.order() == 0 {
        return Err(TopologyError::Numerical("empty Laguerre coefficients".into()));
    }
    let eig = SymmetricEigen::try_new(to_dmatrix(&l.matrix), f64::EPSILON, 10_000)
        .ok_or_else(|| TopologyError::Numerical("symmetric eigensolver did not converge".into()))?;
    let m = l.size();
    let mut out = DMatrix::<f64>::zeros(m, m);
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let response: f64 = laguerre_values(lambda, theta.order())
            .iter()
            .zip(&theta.0)
            .map(|(t, c)| t * c)
            .sum();
        let psi = eig.eigenvectors.column(j);
        out += response * psi * psi.transpose();
    }
    let data: Vec<f64> = (0..m).flat_map(|i| (0..m).map(move |k| (i, k))).map(|(i, k)| out[(i, k)]).collect();
    Ok(NdArray::new(vec![m, m], data).expect("square"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn triangle() -> StGraph {
        StGraph::new(3, vec![(0, 1), (1, 2), (2, 0)]).unwrap()
    }

    #[test]
    fn single_edge_column() {
        let g = StGraph::new(2, vec![(0, 1)]).unwrap();
        let b = build_boundary_1(&g).unwrap();
        assert_eq!(b.matrix().data(), &[-1.0, 1.0]);
        assert_eq!(graph_laplacian_0(&b).data(), &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(hodge_laplacian_1(&b).matrix().data(), &[2.0]);
    }

    #[test]
    fn triangle_columns_sum_to_zero() {
        let b = build_boundary_1(&triangle()).unwrap();
        for j in 0..3 {
            let col: f64 = (0..3).map(|i| b.matrix().get(&[i, j])).sum();
            assert_eq!(col, 0.0);
        }
        let l0 = graph_laplacian_0(&b);
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(l0.get(&[i, k]), if i == k { 2.0 } else { -1.0 });
            }
        }
    }

    #[test]
    fn four_node_example_up_to_orientation() {
        // nodes 0..3 with edges 0-1, 0-2, 1-2, 2-3 (a triangle with a tail)
        let g = StGraph::new(4, vec![(0, 1), (0, 2), (1, 2), (2, 3)]).unwrap();
        let b = build_boundary_1(&g).unwrap();
        #[rustfmt::skip]
        let expected = [
            -1.0, -1.0,  0.0,  0.0,
             1.0,  0.0, -1.0,  0.0,
             0.0,  1.0,  1.0, -1.0,
             0.0,  0.0,  0.0,  1.0,
        ];
        assert_eq!(b.matrix().data(), &expected);
        let flipped = b.flipped();
        assert_eq!(graph_laplacian_0(&flipped), graph_laplacian_0(&b));
        assert_eq!(hodge_laplacian_1(&flipped), hodge_laplacian_1(&b));
    }

    #[test]
    fn self_loop_rejected() {
        assert_eq!(
            StGraph::new(2, vec![(0, 1), (1, 1)]).unwrap_err(),
            TopologyError::SelfLoop { id: 1, node: 1 }
        );
    }

    #[test]
    fn shared_head_gives_positive_coupling() {
        // 0 -> 1 <- 2: both oriented into node 1
        let g = StGraph::new(3, vec![(0, 1), (2, 1)]).unwrap();
        let l1 = hodge_laplacian_1(&build_boundary_1(&g).unwrap());
        assert_eq!(l1.matrix().data(), &[2.0, 1.0, 1.0, 2.0]);
        // head-to-tail path 0 -> 1 -> 2 disagrees in orientation at node 1
        let g = StGraph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let l1 = hodge_laplacian_1(&build_boundary_1(&g).unwrap());
        assert_eq!(l1.matrix().data(), &[2.0, -1.0, -1.0, 2.0]);
    }

    #[test]
    fn second_laguerre_closed_form() {
        for lambda in [0.0, 0.5, 1.0, 2.7, 6.0] {
            let t = laguerre_values(lambda, 3);
            assert!((t[2] - (lambda * lambda - 4.0 * lambda + 2.0) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn laguerre_apply_low_orders() {
        let l1 = hodge_laplacian_1(&build_boundary_1(&triangle()).unwrap());
        let h = NdArray::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let tape = Tape::new();
        let hv = tape.constant(h.clone());
        let id = laguerre_apply(&l1, hv, tape.constant(NdArray::scalar(1.0))).unwrap();
        assert_eq!(*id.value(), h);
        let t1 = laguerre_apply(&l1, hv, tape.constant(NdArray::new(vec![2], vec![0.0, 1.0]).unwrap())).unwrap();
        let lh = l1.matrix().matmul(&h).unwrap();
        for ((a, x), y) in t1.value().data().iter().zip(h.data()).zip(lh.data()) {
            assert!((a - (x - y)).abs() < 1e-12);
        }
    }

    #[test]
    fn laguerre_diagonal_second_order() {
        let lambdas = [0.0, 1.0, 2.5, 4.0];
        let mut data = vec![0.0; 16];
        for (i, l) in lambdas.iter().enumerate() {
            data[i * 4 + i] = *l;
        }
        let l = HodgeL1 { matrix: NdArray::new(vec![4, 4], data).unwrap() };
        let tape = Tape::new();
        let h = tape.constant(NdArray::full(&[4, 1], 1.0));
        let theta = tape.constant(NdArray::new(vec![3], vec![0.0, 0.0, 1.0]).unwrap());
        let out = laguerre_apply(&l, h, theta).unwrap().value();
        for (i, l) in lambdas.iter().enumerate() {
            assert!((out.data()[i] - (l * l - 4.0 * l + 2.0) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_coefficients_rejected() {
        let l1 = hodge_laplacian_1(&build_boundary_1(&triangle()).unwrap());
        assert!(spectral_filter_matrix(&l1, &LaguerreCoeffs(vec![])).is_err());
    }

    #[test]
    fn spectral_filter_identity_and_diagonal() {
        let l1 = hodge_laplacian_1(&build_boundary_1(&triangle()).unwrap());
        let id = spectral_filter_matrix(&l1, &LaguerreCoeffs(vec![1.0])).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                assert!((id.get(&[i, k]) - if i == k { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let l = HodgeL1 { matrix: NdArray::new(vec![2, 2], vec![3.0, 0.0, 0.0, 0.5]).unwrap() };
        let f = spectral_filter_matrix(&l, &LaguerreCoeffs(vec![0.5, 2.0])).unwrap();
        assert!((f.get(&[0, 0]) - (0.5 + 2.0 * (1.0 - 3.0))).abs() < 1e-12);
        assert!((f.get(&[1, 1]) - (0.5 + 2.0 * 0.5)).abs() < 1e-12);
        assert!(f.get(&[0, 1]).abs() < 1e-12);
    }
}

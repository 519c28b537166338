use std::f64::consts::PI;
use std::rc::Rc;

use super::array::{
    broadcast_index_map, broadcast_shapes, gemm_nn, gemm_nt, gemm_tn, numel, NdArray,
};
use super::tape::{Node, Op, Tensor};
use super::TensorError;

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

/// (outer, axis_len, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn binary_forward(
    a: &NdArray,
    b: &NdArray,
    what: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<NdArray, TensorError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(NdArray::from_parts(a.shape().to_vec(), data));
    }
    let out_shape =
        broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| shape_err(what, a.shape(), b.shape()))?;
    let ma = broadcast_index_map(a.shape(), &out_shape);
    let mb = broadcast_index_map(b.shape(), &out_shape);
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
    Ok(NdArray::from_parts(out_shape, data))
}

/// Batch bookkeeping for broadcast matmul over leading dims.
struct MatmulPlan {
    p: usize,
    q: usize,
    r: usize,
    out_shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan, TensorError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul requires rank >= 2", a, b));
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if q != q2 {
        return Err(shape_err("matmul inner dimension", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shapes(ba, bb).ok_or_else(|| shape_err("matmul batch", a, b))?;
    let a_offsets = broadcast_index_map(ba, &batch).into_iter().map(|i| i * p * q).collect();
    let b_offsets = broadcast_index_map(bb, &batch).into_iter().map(|i| i * q * r).collect();
    let mut out_shape = batch;
    out_shape.push(p);
    out_shape.push(r);
    Ok(MatmulPlan { p, q, r, out_shape, a_offsets, b_offsets })
}

fn fill_dft(input: &[f64], out: &mut [f64], len: usize, inverse: bool) {
    // input/out: [len, 2] complex pairs
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = if inverse { 1.0 / len as f64 } else { 1.0 };
    let table: Vec<(f64, f64)> = (0..len)
        .map(|m| {
            let ang = 2.0 * PI * m as f64 / len as f64;
            (ang.cos(), sign * ang.sin())
        })
        .collect();
    for k in 0..len {
        let (mut re, mut im) = (0.0, 0.0);
        for n in 0..len {
            let (c, s) = table[(k * n) % len];
            let (xr, xi) = (input[2 * n], input[2 * n + 1]);
            re += xr * c - xi * s;
            im += xr * s + xi * c;
        }
        out[2 * k] = re * scale;
        out[2 * k + 1] = im * scale;
    }
}

pub(crate) fn dft_array(x: &NdArray, inverse: bool) -> NdArray {
    let shape = x.shape();
    let len = shape[shape.len() - 2];
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(2 * len).zip(out.chunks_mut(2 * len)) {
        fill_dft(src, dst, len, inverse);
    }
    NdArray::from_parts(shape.to_vec(), out)
}

fn softmax_array(x: &NdArray, axis: usize) -> NdArray {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; x.len()];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(d[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..n {
                let e = (d[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                out[base + k * inner] /= s;
            }
        }
    }
    NdArray::from_parts(x.shape().to_vec(), out)
}

impl<'t> Tensor<'t> {
    fn same_tape(&self, other: &Tensor<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "tensors belong to different tapes");
    }

    fn unary(&self, value: NdArray, op: Op) -> Tensor<'t> {
        self.tape.push(value, self.requires_grad(), op)
    }

    fn binary(
        &self,
        other: &Tensor<'t>,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor<'t>, TensorError> {
        self.same_tape(other);
        let v = binary_forward(&self.value(), &other.value(), what, f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, rg, op))
    }

    pub fn add(&self, other: &Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Tensor<'t> {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Tensor<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'t> {
        self.unary(self.value().map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Tensor<'t> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        self.unary(self.value().map(|x| 1.0 / (1.0 + (-x).exp())), Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Tensor<'t> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Tensor<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Tensor<'t> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Tensor<'t> {
        self.unary(self.value().map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn abs(&self) -> Tensor<'t> {
        self.unary(self.value().map(f64::abs), Op::Abs(self.id))
    }

    pub fn square(&self) -> Tensor<'t> {
        self.unary(self.value().map(|x| x * x), Op::Square(self.id))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor<'t> {
        self.unary(self.value().map(|x| x.max(floor)), Op::ClampMin(self.id, floor))
    }

    /// Matrix product over the last two axes, broadcasting leading axes.
    pub fn matmul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let plan = matmul_plan(a.shape(), b.shape())?;
        let (p, q, r) = (plan.p, plan.q, plan.r);
        let mut out = vec![0.0; numel(&plan.out_shape)];
        for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
            gemm_nn(
                &a.data()[ao..ao + p * q],
                &b.data()[bo..bo + q * r],
                &mut out[bi * p * r..(bi + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(NdArray::from_parts(plan.out_shape, out), rg, Op::MatMul(self.id, other.id)))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&self) -> Tensor<'t> {
        let s = self.value().data().iter().sum();
        self.unary(NdArray::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Tensor<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis_keepdim(&self, axis: usize) -> Result<Tensor<'t>, TensorError> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(TensorError::Shape(format!("axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &v.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        Ok(self.unary(NdArray::from_parts(shape, out), Op::SumAxis(self.id)))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<'t>, TensorError> {
        let kept = self.sum_axis_keepdim(axis)?;
        let mut shape = kept.shape();
        if shape.len() > 1 {
            shape.remove(axis);
        }
        kept.reshape(&shape)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<'t>, TensorError> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn mean_axis_keepdim(&self, axis: usize) -> Result<Tensor<'t>, TensorError> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis_keepdim(axis)?.scale(1.0 / n))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let v = self.value().reshaped(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank() || perm.iter().any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Shape(format!("invalid permutation {perm:?} for {:?}", v.shape())));
        }
        Ok(self.unary(v.permuted(perm), Op::Permute(self.id, perm.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<'t>, TensorError> {
        let r = self.value().rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let values: Vec<Rc<NdArray>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            NdArray::from_parts(shape, out),
            rg,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'t>, TensorError> {
        let v = self.value();
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(TensorError::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                v.shape()
            )));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(NdArray::from_parts(shape, out), Op::Narrow { input: self.id, axis, start }))
    }

    /// Gather rows along axis 0.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let v = self.value();
        let rows = v.shape()[0];
        let width = v.len() / rows;
        if indices.is_empty() {
            return Err(TensorError::Contract("index_select with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Shape(format!("row index {i} out of range for {:?}", v.shape())));
            }
            out.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        Ok(self.unary(
            NdArray::from_parts(shape, out),
            Op::IndexSelect { input: self.id, indices: Rc::new(indices.to_vec()) },
        ))
    }

    /// Scatter-add row `k` of `self` into output row `indices[k]`; output has `rows` rows.
    pub fn index_add(&self, indices: &[usize], rows: usize) -> Result<Tensor<'t>, TensorError> {
        let v = self.value();
        if indices.len() != v.shape()[0] || rows == 0 {
            return Err(TensorError::Shape(format!(
                "index_add of {:?} with {} indices into {rows} rows",
                v.shape(),
                indices.len()
            )));
        }
        let width = v.len() / v.shape()[0];
        let mut out = vec![0.0; rows * width];
        for (k, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::Shape(format!("target row {i} >= {rows}")));
            }
            for (d, s) in out[i * width..(i + 1) * width].iter_mut().zip(&v.data()[k * width..(k + 1) * width]) {
                *d += s;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows;
        Ok(self.unary(
            NdArray::from_parts(shape, out),
            Op::IndexAdd { input: self.id, indices: Rc::new(indices.to_vec()) },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t>, TensorError> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(TensorError::Shape(format!("softmax axis {axis} out of range for {:?}", v.shape())));
        }
        Ok(self.unary(softmax_array(&v, axis), Op::Softmax { input: self.id, axis }))
    }

    /// Causal dilated 1D convolution: `x` is `[B, C_in, L]`, `w` is
    /// `[C_out, C_in, k]`, output `[B, C_out, L]`. The last tap aligns with
    /// the current step; missing history is zero.
    pub fn conv1d(&self, w: &Tensor<'t>, dilation: usize) -> Result<Tensor<'t>, TensorError> {
        self.same_tape(w);
        let (xv, wv) = (self.value(), w.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(shape_err("conv1d", xs, ws));
        }
        if dilation == 0 {
            return Err(TensorError::Contract("conv1d dilation must be >= 1".into()));
        }
        let (b, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let pad = (k - 1) * dilation;
        if l + pad < (k - 1) * dilation + 1 {
            return Err(shape_err("conv1d kernel longer than padded input", xs, ws));
        }
        let (x, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; b * cout * l];
        for bi in 0..b {
            for o in 0..cout {
                let orow = &mut out[(bi * cout + o) * l..(bi * cout + o + 1) * l];
                for c in 0..cin {
                    let xrow = &x[(bi * cin + c) * l..(bi * cin + c + 1) * l];
                    for j in 0..k {
                        let wv = wd[(o * cin + c) * k + j];
                        let shift = (k - 1 - j) * dilation;
                        if shift >= l {
                            continue;
                        }
                        for (oo, xx) in orow[shift..].iter_mut().zip(&xrow[..l - shift]) {
                            *oo += wv * xx;
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad();
        Ok(self.tape.push(
            NdArray::from_parts(vec![b, cout, l], out),
            rg,
            Op::Conv1d { x: self.id, w: w.id, dilation },
        ))
    }

    /// Exact DFT along the second-to-last axis of a complex-pair tensor `[.., L, 2]`.
    pub fn dft(&self) -> Result<Tensor<'t>, TensorError> {
        self.dft_impl(false)
    }

    /// Inverse of [`Tensor::dft`], including the `1/L` factor.
    pub fn idft(&self) -> Result<Tensor<'t>, TensorError> {
        self.dft_impl(true)
    }

    fn dft_impl(&self, inverse: bool) -> Result<Tensor<'t>, TensorError> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 || s[s.len() - 1] != 2 {
            return Err(TensorError::Shape(format!("dft expects [.., L, 2], got {s:?}")));
        }
        Ok(self.unary(dft_array(&v, inverse), Op::Dft { input: self.id, inverse }))
    }

    /// Real tensor `[.., L]` to complex pairs `[.., L, 2]` with zero imaginary part.
    pub fn to_complex(&self) -> Result<Tensor<'t>, TensorError> {
        let mut shape = self.shape();
        shape.push(1);
        let re = self.reshape(&shape)?;
        let im = self.tape.constant(NdArray::zeros(&shape));
        let last = shape.len() - 1;
        Tensor::concat(&[re, im], last)
    }

    /// Real part of a complex-pair tensor `[.., L, 2]`.
    pub fn real_part(&self) -> Result<Tensor<'t>, TensorError> {
        let shape = self.shape();
        let last = shape.len() - 1;
        self.narrow(last, 0, 1)?.reshape(&shape[..last])
    }

    /// Forward value of `quantized`, backward routes the incoming gradient to
    /// `self` unchanged (straight-through estimator).
    pub fn straight_through(&self, quantized: NdArray) -> Result<Tensor<'t>, TensorError> {
        let v = self.value();
        if v.shape() != quantized.shape() {
            return Err(shape_err("straight_through", v.shape(), quantized.shape()));
        }
        Ok(self.unary(quantized, Op::StraightThrough(self.id)))
    }
}

fn elementwise(x: &NdArray, g: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    let data = x.data().iter().zip(g.data()).map(|(&xv, &gv)| f(xv, gv)).collect();
    NdArray::from_parts(x.shape().to_vec(), data)
}

/// Vector-Jacobian products of node `id` with upstream gradient `g`.
pub(crate) fn backward_op(nodes: &[Node], id: usize, g: &NdArray) -> Vec<(usize, NdArray)> {
    let val = |i: usize| -> &NdArray { &nodes[i].value };
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.reduce_to(val(*a).shape())), (*b, g.reduce_to(val(*b).shape()))],
        Op::Sub(a, b) => vec![
            (*a, g.reduce_to(val(*a).shape())),
            (*b, g.map(|x| -x).reduce_to(val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = binary_forward(g, bv, "mul", |x, y| x * y).expect("broadcast");
            let gb = binary_forward(g, av, "mul", |x, y| x * y).expect("broadcast");
            vec![(*a, ga.reduce_to(av.shape())), (*b, gb.reduce_to(bv.shape()))]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = binary_forward(g, bv, "div", |x, y| x / y).expect("broadcast");
            // d(a/b)/db = -out / b
            let t = binary_forward(g, out, "div", |x, y| -x * y).expect("broadcast");
            let gb = binary_forward(&t, bv, "div", |x, y| x / y).expect("broadcast");
            vec![(*a, ga.reduce_to(av.shape())), (*b, gb.reduce_to(bv.shape()))]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
            vec![(*a, NdArray::from_parts(val(*a).shape().to_vec(), g.data().to_vec()))]
        }
        Op::Relu(a) => vec![(*a, elementwise(val(*a), g, |x, gv| if x > 0.0 { gv } else { 0.0 }))],
        Op::Sigmoid(a) => vec![(*a, elementwise(out, g, |y, gv| gv * y * (1.0 - y)))],
        Op::Tanh(a) => vec![(*a, elementwise(out, g, |y, gv| gv * (1.0 - y * y)))],
        Op::Exp(a) => vec![(*a, elementwise(out, g, |y, gv| gv * y))],
        Op::Log(a) => vec![(*a, elementwise(val(*a), g, |x, gv| gv / x))],
        Op::Sqrt(a) => vec![(*a, elementwise(out, g, |y, gv| gv * 0.5 / y))],
        Op::Abs(a) => vec![(*a, elementwise(val(*a), g, |x, gv| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 }))],
        Op::Square(a) => vec![(*a, elementwise(val(*a), g, |x, gv| 2.0 * x * gv))],
        Op::ClampMin(a, floor) => {
            vec![(*a, elementwise(val(*a), g, |x, gv| if x > *floor { gv } else { 0.0 }))]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let plan = matmul_plan(av.shape(), bv.shape()).expect("validated in forward");
            let (p, q, r) = (plan.p, plan.q, plan.r);
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                let gs = &g.data()[bi * p * r..(bi + 1) * p * r];
                gemm_nt(gs, &bv.data()[bo..bo + q * r], &mut ga[ao..ao + p * q], p, q, r);
                gemm_tn(&av.data()[ao..ao + p * q], gs, &mut gb[bo..bo + q * r], p, q, r);
            }
            vec![
                (*a, NdArray::from_parts(av.shape().to_vec(), ga)),
                (*b, NdArray::from_parts(bv.shape().to_vec(), gb)),
            ]
        }
        Op::SumAll(a) => vec![(*a, NdArray::full(val(*a).shape(), g.item()))],
        Op::SumAxis(a) => {
            let target = val(*a).shape();
            let map = broadcast_index_map(g.shape(), target);
            let data = map.iter().map(|&j| g.data()[j]).collect();
            vec![(*a, NdArray::from_parts(target.to_vec(), data))]
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*a, g.permuted(&inv))]
        }
        Op::Concat(parts, axis) => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut res = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let ps = val(p).shape();
                let n = ps[*axis];
                let mut data = Vec::with_capacity(val(p).len());
                for o in 0..outer {
                    let from = (o * total + offset) * inner;
                    data.extend_from_slice(&g.data()[from..from + n * inner]);
                }
                offset += n;
                res.push((p, NdArray::from_parts(ps.to_vec(), data)));
            }
            res
        }
        Op::Narrow { input, axis, start } => {
            let ish = val(*input).shape();
            let (outer, n, inner) = split_axis(ish, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![0.0; val(*input).len()];
            for o in 0..outer {
                let to = (o * n + start) * inner;
                data[to..to + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, NdArray::from_parts(ish.to_vec(), data))]
        }
        Op::IndexSelect { input, indices } => {
            let ish = val(*input).shape();
            let width = val(*input).len() / ish[0];
            let mut data = vec![0.0; val(*input).len()];
            for (k, &i) in indices.iter().enumerate() {
                for (d, s) in data[i * width..(i + 1) * width].iter_mut().zip(&g.data()[k * width..(k + 1) * width]) {
                    *d += s;
                }
            }
            vec![(*input, NdArray::from_parts(ish.to_vec(), data))]
        }
        Op::IndexAdd { input, indices } => {
            let ish = val(*input).shape();
            let width = val(*input).len() / ish[0];
            let mut data = Vec::with_capacity(val(*input).len());
            for &i in indices.iter() {
                data.extend_from_slice(&g.data()[i * width..(i + 1) * width]);
            }
            vec![(*input, NdArray::from_parts(ish.to_vec(), data))]
        }
        Op::Softmax { input, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut data = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[base + k * inner] * y[base + k * inner]).sum();
                    for k in 0..n {
                        let j = base + k * inner;
                        data[j] = y[j] * (gd[j] - dot);
                    }
                }
            }
            vec![(*input, NdArray::from_parts(out.shape().to_vec(), data))]
        }
        Op::Conv1d { x, w, dilation } => {
            let (xv, wv) = (val(*x), val(*w));
            let (b, cin, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (cout, k) = (wv.shape()[0], wv.shape()[2]);
            let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            for bi in 0..b {
                for o in 0..cout {
                    let grow = &gd[(bi * cout + o) * l..(bi * cout + o + 1) * l];
                    for c in 0..cin {
                        let xoff = (bi * cin + c) * l;
                        for j in 0..k {
                            let shift = (k - 1 - j) * dilation;
                            if shift >= l {
                                continue;
                            }
                            let widx = (o * cin + c) * k + j;
                            let wvv = wd[widx];
                            let mut acc = 0.0;
                            let xrow = &xd[xoff..xoff + l - shift];
                            let gxrow = &mut gx[xoff..xoff + l - shift];
                            for ((gg, xx), gxx) in grow[shift..].iter().zip(xrow).zip(gxrow.iter_mut()) {
                                acc += gg * xx;
                                *gxx += wvv * gg;
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            vec![
                (*x, NdArray::from_parts(xv.shape().to_vec(), gx)),
                (*w, NdArray::from_parts(wv.shape().to_vec(), gw)),
            ]
        }
        Op::Dft { input, inverse } => {
            let len = g.shape()[g.rank() - 2] as f64;
            // The real form of the forward DFT transposes to L * inverse DFT.
            let back = dft_array(g, !inverse);
            let factor = if *inverse { 1.0 / len } else { len };
            vec![(*input, back.map(|x| x * factor))]
        }
    }
}

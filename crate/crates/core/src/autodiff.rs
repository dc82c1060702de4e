//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node and
//! returns a [`Var`] handle. Node order is a topological order, so
//! [`Graph::backward`] walks the tape once in reverse.
//!
//! Complex tensors use an interleaved trailing axis of length 2
//! (`[..., re/im]`).

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::rng;
use crate::spectral;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Square,
    Sqrt,
    Exp,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Var, Unary),
    Atan2(Var, Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    SumAll(Var),
    SumAxis(Var, usize),
    Dropout(Var, Vec<f64>),
    ComplexMatmul(Var, Var),
    Rfft(Var),
    Irfft(Var),
    Frames { x: Var, hop: usize },
    LstmCell { x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var, gates: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` under broadcasting (0 on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|d| {
            if d < off || shape[d - off] == 1 {
                0
            } else {
                own[d - off]
            }
        })
        .collect()
}

/// Visits every element of `shape` in row-major order, passing the flat
/// output index and one offset per stride set.
fn walk<const N: usize>(shape: &[usize], strides: [&[usize]; N], mut f: impl FnMut(usize, [usize; N])) {
    let nd = shape.len();
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    if nd == 0 {
        f(0, [0; N]);
        return;
    }
    let inner = shape[nd - 1];
    let step: [usize; N] = std::array::from_fn(|j| strides[j][nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut base = [0usize; N];
    let mut o = 0;
    loop {
        for i in 0..inner {
            f(o + i, std::array::from_fn(|j| base[j] + i * step[j]));
        }
        o += inner;
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for j in 0..N {
                base[j] += strides[j][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for j in 0..N {
                base[j] -= strides[j][d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct MatmulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let bad = || Error::shape("matmul", format!("cannot multiply {a:?} by {b:?}"));
    if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
        return Err(bad());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(bad());
    }
    match (a.len(), b.len()) {
        (2, 2) => Ok(MatmulDims { batch: 1, a_batched: false, b_batched: false, m, k, n }),
        // a batched left operand against a shared right matrix is one tall product
        (3, 2) => Ok(MatmulDims { batch: 1, a_batched: false, b_batched: false, m: a[0] * m, k, n }),
        (2, 3) => Ok(MatmulDims { batch: b[0], a_batched: false, b_batched: true, m, k, n }),
        _ => {
            if a[0] != b[0] {
                return Err(bad());
            }
            Ok(MatmulDims { batch: a[0], a_batched: true, b_batched: true, m, k, n })
        }
    }
}

fn unary_forward(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Scale(c) => c * x,
        Unary::Offset(c) => x + c,
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Exp => x.exp(),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
        Unary::Relu => x.max(0.0),
    }
}

/// Derivative given input `x` and output `y`.
fn unary_derivative(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Neg => -1.0,
        Unary::Scale(c) => c,
        Unary::Offset(_) => 1.0,
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Exp => y,
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Gelu => {
            let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient buffer of `v`, zero-initialized on first use.
fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(&src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can record the next step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
            return Ok((Tensor { shape: ta.shape.clone(), data }, self.rg(&[a, b])));
        }
        let out = broadcast_shape(&ta.shape, &tb.shape).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {:?} with {:?}", ta.shape, tb.shape))
        })?;
        let sa = broadcast_strides(&ta.shape, &out);
        let sb = broadcast_strides(&tb.shape, &out);
        let mut data = vec![0.0; out.iter().product()];
        walk(&out, [&sa, &sb], |o, [ia, ib]| data[o] = f(ta.data[ia], tb.data[ib]));
        Ok((Tensor { shape: out, data }, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    /// Elementwise `atan2(y, x)` of equally shaped tensors.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        if self.shape(y) != self.shape(x) {
            return Err(Error::shape(
                "atan2",
                format!("{:?} vs {:?}", self.shape(y), self.shape(x)),
            ));
        }
        let (t, rg) = self.binary("atan2", y, x, f64::atan2)?;
        Ok(self.push(t, Op::Atan2(y, x), rg))
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| unary_forward(u, v)).collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(t, Op::Unary(x, u), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Offset(c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// Matrix product over the last two axes. Supported ranks: 2x2, 3x2
    /// (shared right matrix), 2x3 (shared left matrix) and 3x3 with equal
    /// batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let d = matmul_dims(&sa, &sb)?;
        let out_shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![d.m, d.n],
            (3, 2) => vec![sa[0], sa[1], d.n],
            _ => vec![d.batch, d.m, d.n],
        };
        let mut data = vec![0.0; out_shape.iter().product()];
        let (ta, tb) = (&self.value(a).data, &self.value(b).data);
        for bi in 0..d.batch {
            let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
            let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
            gemm(
                d.m,
                d.k,
                d.n,
                &ta[ao..],
                (d.k, 1),
                &tb[bo..],
                (d.n, 1),
                &mut data[bi * d.m * d.n..],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Matmul(a, b), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let t = permuted(self.value(x), perm);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let nd = self.shape(x).len();
        if a0 >= nd || a1 >= nd {
            return Err(Error::shape("transpose", format!("axes ({a0}, {a1}) for rank {nd}")));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.len() {
            return Err(Error::shape("reshape", format!("{:?} into {shape:?}", tx.shape)));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: tx.data.clone(),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let shape0 = self.shape(*first).to_vec();
        if axis >= shape0.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", shape0.len())));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let same = s.len() == shape0.len()
                && s.iter().zip(&shape0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::shape("concat", format!("{s:?} does not match {shape0:?}")));
            }
            total += s[axis];
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = self.value(*v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = shape0;
        out_shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.value(x).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..shape[axis] {
                let base = (o * shape[axis] + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::SumAxis(x, axis), rg))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales
    /// survivors by `1/(1-p)`. The mask depends only on `seed`. Identity
    /// when `train` is false or `p` is zero.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut r = rng::seeded(seed);
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng::unit_f64(&mut r) < p { 0.0 } else { keep })
            .collect();
        let data = tx.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout(x, mask), rg))
    }

    /// Per-frequency complex channel contraction
    /// `out[b, o, k] = sum_i x[b, i, k] * w[i, o, k]` with `x` of shape
    /// `[B, Cin, K, 2]` and `w` of shape `[Cin, Cout, K, 2]`.
    pub fn complex_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != 2 || sw[3] != 2 || sx[1] != sw[0] || sx[2] != sw[2] {
            return Err(Error::shape("complex_matmul", format!("{sx:?} with {sw:?}")));
        }
        let (b, ci, k) = (sx[0], sx[1], sx[2]);
        let co = sw[1];
        let (tx, tw) = (&self.value(x).data, &self.value(w).data);
        let mut data = vec![0.0; b * co * k * 2];
        for bi in 0..b {
            for i in 0..ci {
                let xr = &tx[(bi * ci + i) * k * 2..][..k * 2];
                for o in 0..co {
                    let wr = &tw[(i * co + o) * k * 2..][..k * 2];
                    let out = &mut data[(bi * co + o) * k * 2..][..k * 2];
                    for q in 0..k {
                        let (a, bb) = (xr[2 * q], xr[2 * q + 1]);
                        let (c, d) = (wr[2 * q], wr[2 * q + 1]);
                        out[2 * q] += a * c - bb * d;
                        out[2 * q + 1] += a * d + bb * c;
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor { shape: vec![b, co, k, 2], data },
            Op::ComplexMatmul(x, w),
            rg,
        ))
    }

    /// Lowest `n_bins` DFT bins along the last axis: `[..., n]` to
    /// `[..., n_bins, 2]`.
    pub fn rfft(&mut self, x: Var, n_bins: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("rfft", "scalar input"))?;
        if n_bins == 0 || n_bins > n / 2 + 1 {
            return Err(Error::shape("rfft", format!("{n_bins} bins from length {n}")));
        }
        let rows = self.value(x).len() / n;
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(rows * n_bins * 2);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for r in 0..rows {
            for (b, v) in buf.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *b = Complex64::new(*v, 0.0);
            }
            spectral::fft_in_place(&mut buf);
            for c in &buf[..n_bins] {
                data.push(c.re);
                data.push(c.im);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n_bins;
        out_shape.push(2);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Rfft(x), rg))
    }

    /// Real signal of length `n` from one-sided bins `[..., K, 2]`; bins
    /// beyond `K` are zero and imaginary parts at DC and Nyquist are
    /// ignored. Scaled by `1/n`.
    pub fn irfft(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != 2 {
            return Err(Error::shape("irfft", format!("expected [..., K, 2], got {shape:?}")));
        }
        let k = shape[shape.len() - 2];
        if n == 0 || k > n / 2 + 1 {
            return Err(Error::shape("irfft", format!("{k} bins into length {n}")));
        }
        let rows = self.value(x).len() / (2 * k);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(rows * n);
        let mut bins = vec![Complex64::new(0.0, 0.0); k];
        for r in 0..rows {
            for (q, b) in bins.iter_mut().enumerate() {
                *b = Complex64::new(src[(r * k + q) * 2], src[(r * k + q) * 2 + 1]);
            }
            data.extend(spectral::irfft(&bins, n));
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(n);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Irfft(x), rg))
    }

    /// Overlapping frames along the last axis: `[..., T]` to
    /// `[..., M, n_fft]` with frame `m` starting at `m * hop`. A trailing
    /// partial frame is dropped.
    pub fn frames(&mut self, x: Var, n_fft: usize, hop: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let t = *shape.last().ok_or_else(|| Error::shape("frames", "scalar input"))?;
        if n_fft == 0 || hop == 0 || t < n_fft {
            return Err(Error::shape("frames", format!("n_fft {n_fft}, hop {hop} on length {t}")));
        }
        let m = spectral::frame_count(t, n_fft, hop);
        let rows = self.value(x).len() / t;
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(rows * m * n_fft);
        for r in 0..rows {
            for f in 0..m {
                let s = r * t + f * hop;
                data.extend_from_slice(&src[s..s + n_fft]);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = m;
        out_shape.push(n_fft);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Frames { x, hop }, rg))
    }

    /// Fused LSTM cell. Gate pre-activations are
    /// `x w_ih + h w_hh + b` split as `[i, f, g, o]` blocks of width `H`;
    /// `c' = f c + i g`, `h' = o tanh(c')`. Returns `[B, 2H]` holding
    /// `h'` then `c'`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let (sx, sh, sc) = (self.shape(x).to_vec(), self.shape(h).to_vec(), self.shape(c).to_vec());
        let (swi, swh, sb) = (self.shape(w_ih).to_vec(), self.shape(w_hh).to_vec(), self.shape(b).to_vec());
        let ok = sx.len() == 2
            && sh.len() == 2
            && sh == sc
            && sx[0] == sh[0]
            && swi == [sx[1], 4 * sh[1]]
            && swh == [sh[1], 4 * sh[1]]
            && sb == [4 * sh[1]];
        if !ok {
            return Err(Error::shape(
                "lstm_cell",
                format!("x {sx:?}, h {sh:?}, c {sc:?}, w_ih {swi:?}, w_hh {swh:?}, b {sb:?}"),
            ));
        }
        let (bsz, inp, hid) = (sx[0], sx[1], sh[1]);
        let g4 = 4 * hid;
        let mut gates = vec![0.0; bsz * g4];
        for r in 0..bsz {
            gates[r * g4..(r + 1) * g4].copy_from_slice(&self.value(b).data);
        }
        gemm(bsz, inp, g4, &self.value(x).data, (inp, 1), &self.value(w_ih).data, (g4, 1), &mut gates, 1.0);
        gemm(bsz, hid, g4, &self.value(h).data, (hid, 1), &self.value(w_hh).data, (g4, 1), &mut gates, 1.0);
        let c_prev = &self.value(c).data;
        let mut out = vec![0.0; bsz * 2 * hid];
        for r in 0..bsz {
            let row = &mut gates[r * g4..(r + 1) * g4];
            for j in 0..hid {
                let i = sigmoid(row[j]);
                let f = sigmoid(row[hid + j]);
                let gg = row[2 * hid + j].tanh();
                let o = sigmoid(row[3 * hid + j]);
                row[j] = i;
                row[hid + j] = f;
                row[2 * hid + j] = gg;
                row[3 * hid + j] = o;
                let cn = f * c_prev[r * hid + j] + i * gg;
                out[r * 2 * hid + hid + j] = cn;
                out[r * 2 * hid + j] = o * cn.tanh();
            }
        }
        let rg = self.rg(&[x, h, c, w_ih, w_hh, b]);
        Ok(self.push(
            Tensor { shape: vec![bsz, 2 * hid], data: out },
            Op::LstmCell { x, h, c, w_ih, w_hh, b, gates },
            rg,
        ))
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref()).map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Moves the gradient of `v` out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Back-propagates from scalar `loss`. Afterwards [`Graph::grad`]
    /// returns the accumulated gradient of every trainable leaf; interior
    /// gradients are released as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::LstmCell { x, h, c, w_ih, w_hh, b, gates } => {
                let (bsz, hid) = (self.shape(*h)[0], self.shape(*h)[1]);
                let inp = self.shape(*x)[1];
                let g4 = 4 * hid;
                let c_prev = &self.value(*c).data;
                let mut da = vec![0.0; bsz * g4];
                let mut dc_prev = vec![0.0; bsz * hid];
                for r in 0..bsz {
                    let act = &gates[r * g4..(r + 1) * g4];
                    for j in 0..hid {
                        let (i, f, gg, o) = (act[j], act[hid + j], act[2 * hid + j], act[3 * hid + j]);
                        let cn = out.data[r * 2 * hid + hid + j];
                        let tc = cn.tanh();
                        let gh = g[r * 2 * hid + j];
                        let dc = g[r * 2 * hid + hid + j] + gh * o * (1.0 - tc * tc);
                        let cp = c_prev[r * hid + j];
                        da[r * g4 + j] = dc * gg * i * (1.0 - i);
                        da[r * g4 + hid + j] = dc * cp * f * (1.0 - f);
                        da[r * g4 + 2 * hid + j] = dc * i * (1.0 - gg * gg);
                        da[r * g4 + 3 * hid + j] = gh * tc * o * (1.0 - o);
                        dc_prev[r * hid + j] = dc * f;
                    }
                }
                if needs(c) {
                    add_into(&mut grads[c.0], dc_prev);
                }
                if needs(x) {
                    let gx = grad_buf(grads, *x, bsz * inp);
                    gemm(bsz, g4, inp, &da, (g4, 1), &self.value(*w_ih).data, (1, g4), gx, 1.0);
                }
                if needs(h) {
                    let gh = grad_buf(grads, *h, bsz * hid);
                    gemm(bsz, g4, hid, &da, (g4, 1), &self.value(*w_hh).data, (1, g4), gh, 1.0);
                }
                if needs(w_ih) {
                    let gw = grad_buf(grads, *w_ih, inp * g4);
                    gemm(inp, bsz, g4, &self.value(*x).data, (1, inp), &da, (g4, 1), gw, 1.0);
                }
                if needs(w_hh) {
                    let gw = grad_buf(grads, *w_hh, hid * g4);
                    gemm(hid, bsz, g4, &self.value(*h).data, (1, hid), &da, (g4, 1), gw, 1.0);
                }
                if needs(b) {
                    let gb = grad_buf(grads, *b, g4);
                    for r in 0..bsz {
                        for (d, v) in gb.iter_mut().zip(&da[r * g4..(r + 1) * g4]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(a, 1.0), (b, sign)] {
                    if needs(v) {
                        let gv = self.unbroadcast(g, &out.shape, *v, |_, x| s * x);
                        add_into(&mut grads[v.0], gv);
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let div = matches!(node.op, Op::Div(..));
                let sa = broadcast_strides(&ta.shape, &out.shape);
                let sb = broadcast_strides(&tb.shape, &out.shape);
                if needs(a) {
                    let mut ga = vec![0.0; ta.len()];
                    walk(&out.shape, [&sa, &sb], |o, [ia, ib]| {
                        ga[ia] += if div { g[o] / tb.data[ib] } else { g[o] * tb.data[ib] };
                    });
                    add_into(&mut grads[a.0], ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0; tb.len()];
                    walk(&out.shape, [&sa, &sb], |o, [ia, ib]| {
                        gb[ib] += if div {
                            -g[o] * ta.data[ia] / (tb.data[ib] * tb.data[ib])
                        } else {
                            g[o] * ta.data[ia]
                        };
                    });
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Unary(x, u) => {
                let tx = self.value(*x);
                let gx = g
                    .iter()
                    .zip(&tx.data)
                    .zip(&out.data)
                    .map(|((g, x), y)| g * unary_derivative(*u, *x, *y))
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::Atan2(y, x) => {
                let (ty, tx) = (self.value(*y), self.value(*x));
                let r2: Vec<f64> = ty.data.iter().zip(&tx.data).map(|(a, b)| a * a + b * b).collect();
                if needs(y) {
                    let gy = (0..g.len())
                        .map(|j| if r2[j] > 0.0 { g[j] * tx.data[j] / r2[j] } else { 0.0 })
                        .collect();
                    add_into(&mut grads[y.0], gy);
                }
                if needs(x) {
                    let gx = (0..g.len())
                        .map(|j| if r2[j] > 0.0 { -g[j] * ty.data[j] / r2[j] } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = matmul_dims(&ta.shape, &tb.shape).expect("validated at construction");
                let (m, k, n) = (d.m, d.k, d.n);
                if needs(a) {
                    let mut ga = vec![0.0; ta.len()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * m * k } else { 0 };
                        let bo = if d.b_batched { bi * k * n } else { 0 };
                        // dA = G . B^T
                        gemm(m, n, k, &g[bi * m * n..], (n, 1), &tb.data[bo..], (1, n), &mut ga[ao..], 1.0);
                    }
                    add_into(&mut grads[a.0], ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0; tb.len()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * m * k } else { 0 };
                        let bo = if d.b_batched { bi * k * n } else { 0 };
                        // dB = A^T . G
                        gemm(k, m, n, &ta.data[ao..], (1, k), &g[bi * m * n..], (n, 1), &mut gb[bo..], 1.0);
                    }
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor {
                    shape: out.shape.clone(),
                    data: g.to_vec(),
                };
                add_into(&mut grads[x.0], permuted(&gt, &inv).data);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g.to_vec()),
            Op::Slice { x, axis, start } => {
                let shape = &self.value(*x).shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out.shape[*axis];
                // accumulate in place: a long unroll slices one input many times
                let gx = grad_buf(grads, *x, self.value(*x).len());
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    for (d, v) in gx[base..base + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += v;
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let outer: usize = out.shape[..*axis].iter().product();
                let inner: usize = out.shape[axis + 1..].iter().product();
                let total = out.shape[*axis];
                let mut offset = 0;
                for v in xs {
                    let len = self.shape(*v)[*axis];
                    if needs(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[s..s + len * inner]);
                        }
                        add_into(&mut grads[v.0], gv);
                    }
                    offset += len;
                }
            }
            Op::SumAll(x) => add_into(&mut grads[x.0], vec![g[0]; self.value(*x).len()]),
            Op::SumAxis(x, axis) => {
                let shape = &self.value(*x).shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    for a in 0..shape[*axis] {
                        let base = (o * shape[*axis] + a) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Dropout(x, mask) => {
                let gx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::ComplexMatmul(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (b, ci, k) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let co = tw.shape[1];
                let mut gx = needs(x).then(|| vec![0.0; tx.len()]);
                let mut gw = needs(w).then(|| vec![0.0; tw.len()]);
                for bi in 0..b {
                    for i in 0..ci {
                        let xo = (bi * ci + i) * k * 2;
                        for o in 0..co {
                            let wo = (i * co + o) * k * 2;
                            let go = (bi * co + o) * k * 2;
                            for q in 0..k {
                                let (gr, gi) = (g[go + 2 * q], g[go + 2 * q + 1]);
                                if let Some(gx) = gx.as_mut() {
                                    // g * conj(w)
                                    let (c, d) = (tw.data[wo + 2 * q], tw.data[wo + 2 * q + 1]);
                                    gx[xo + 2 * q] += gr * c + gi * d;
                                    gx[xo + 2 * q + 1] += gi * c - gr * d;
                                }
                                if let Some(gw) = gw.as_mut() {
                                    // conj(x) * g
                                    let (a, bb) = (tx.data[xo + 2 * q], tx.data[xo + 2 * q + 1]);
                                    gw[wo + 2 * q] += a * gr + bb * gi;
                                    gw[wo + 2 * q + 1] += a * gi - bb * gr;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
                if let Some(gw) = gw {
                    add_into(&mut grads[w.0], gw);
                }
            }
            Op::Rfft(x) => {
                let n = *self.value(*x).shape.last().unwrap();
                let k = out.shape[out.shape.len() - 2];
                let rows = self.value(*x).len() / n;
                let mut gx = Vec::with_capacity(rows * n);
                let mut buf = vec![Complex64::new(0.0, 0.0); n];
                for r in 0..rows {
                    buf.fill(Complex64::new(0.0, 0.0));
                    for q in 0..k {
                        buf[q] = Complex64::new(g[(r * k + q) * 2], g[(r * k + q) * 2 + 1]);
                    }
                    // dx_t = Re sum_k G_k e^{+i 2 pi k t / n}
                    spectral::ifft_in_place(&mut buf);
                    gx.extend(buf.iter().map(|c| c.re));
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Irfft(x) => {
                let n = *out.shape.last().unwrap();
                let k = self.value(*x).shape[self.value(*x).shape.len() - 2];
                let rows = out.len() / n;
                let inv_n = 1.0 / n as f64;
                let mut gx = Vec::with_capacity(rows * k * 2);
                let mut buf = vec![Complex64::new(0.0, 0.0); n];
                for r in 0..rows {
                    for (b, v) in buf.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *b = Complex64::new(*v, 0.0);
                    }
                    spectral::fft_in_place(&mut buf);
                    for (q, c) in buf[..k].iter().enumerate() {
                        let edge = q == 0 || (n % 2 == 0 && q == n / 2);
                        if edge {
                            gx.push(c.re * inv_n);
                            gx.push(0.0);
                        } else {
                            gx.push(2.0 * c.re * inv_n);
                            gx.push(2.0 * c.im * inv_n);
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Frames { x, hop } => {
                let t = *self.value(*x).shape.last().unwrap();
                let nf = out.shape[out.shape.len() - 1];
                let m = out.shape[out.shape.len() - 2];
                let rows = self.value(*x).len() / t;
                let mut gx = vec![0.0; rows * t];
                for r in 0..rows {
                    for f in 0..m {
                        let s = r * t + f * hop;
                        let src = &g[(r * m + f) * nf..][..nf];
                        for (d, v) in gx[s..s + nf].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
        }
    }

    /// Sums `g` (shaped like the output) back onto the shape of `v`.
    fn unbroadcast(&self, g: &[f64], out_shape: &[usize], v: Var, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        let tv = self.value(v);
        if tv.shape == out_shape {
            return g.iter().enumerate().map(|(i, x)| f(i, *x)).collect();
        }
        let sv = broadcast_strides(&tv.shape, out_shape);
        let mut gv = vec![0.0; tv.len()];
        walk(out_shape, [&sv], |o, [iv]| gv[iv] += f(o, g[o]));
        gv
    }
}

fn permuted(t: &Tensor, perm: &[usize]) -> Tensor {
    let own = contiguous_strides(&t.shape);
    let shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let mut data = vec![0.0; t.len()];
    walk(&shape, [&strides], |o, [i]| data[o] = t.data[i]);
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at every coordinate of every input.
    fn check_grad(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars).unwrap();
        g.backward(loss).unwrap();
        let h = 1e-5;
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
            let l = f(&mut g, &vars).unwrap();
            g.value(l).item()
        };
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for (j, t) in inputs.iter().enumerate() {
            let an = g.grad(vars[j]).unwrap();
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[j].data[i] += h;
                let mut minus = inputs.to_vec();
                minus[j].data[i] -= h;
                num.push((eval(&plus) - eval(&minus)) / (2.0 * h));
                ana.push(an.data[i]);
            }
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale <= tol, "relative gradient error {}", diff / scale);
    }

    /// Contracts an output with a fixed random weight so every element matters.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let w = g.constant(random(seed, g.shape(y)));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(random(1, &[5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(random(1, &[3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_errors_leave_no_node() {
        let mut g = Graph::new();
        let a = g.param(random(1, &[2, 3]));
        let b = g.param(random(2, &[4, 3]));
        let before = g.len();
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
        assert!(g.concat(&[a, b], 1).is_err());
        assert_eq!(g.len(), before);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(random(1, &[3]));
        let c = g.constant(random(2, &[3]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), g.value(c).data());
    }

    #[test]
    fn matmul_matches_naive_product() {
        let a = random(3, &[3, 4]);
        let b = random(4, &[4, 2]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let direct: f64 = (0..4).map(|k| a.data[i * 4 + k] * b.data[k * 2 + j]).sum();
                assert!((g.value(c).data[i * 2 + j] - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        check_grad(&[random(1, &[3, 4]), random(2, &[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 9)
        }, 1e-6);
        check_grad(&[random(3, &[2, 3]), random(4, &[2, 3, 5])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 9)
        }, 1e-6);
        check_grad(&[random(5, &[2, 4, 3]), random(6, &[3, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 9)
        }, 1e-6);
        check_grad(&[random(7, &[2, 4, 3]), random(8, &[2, 3, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 9)
        }, 1e-6);
    }

    #[test]
    fn broadcast_arithmetic_gradients() {
        let a = random(1, &[2, 3, 4]);
        let b = random(2, &[3, 1]);
        let pos = Tensor::new(vec![3, 1], random(3, &[3, 1]).data.iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        check_grad(&[a.clone(), b.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 4)
        }, 1e-7);
        check_grad(&[a.clone(), b.clone()], |g, v| {
            let y = g.sub(v[1], v[0])?;
            project(g, y, 4)
        }, 1e-7);
        check_grad(&[a.clone(), b], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 4)
        }, 1e-7);
        check_grad(&[a, pos], |g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 4)
        }, 1e-6);
    }

    #[test]
    fn pointwise_gradients() {
        let x = random(11, &[17]);
        let shifted = Tensor::new(vec![17], x.data.iter().map(|v| v + 0.05 * v.signum()).collect()).unwrap();
        type Un = fn(&mut Graph, Var) -> Var;
        let ops: [(&str, Un); 8] = [
            ("tanh", |g, v| g.tanh(v)),
            ("sigmoid", |g, v| g.sigmoid(v)),
            ("gelu", |g, v| g.gelu(v)),
            ("relu", |g, v| g.relu(v)),
            ("exp", |g, v| g.exp(v)),
            ("square", |g, v| g.square(v)),
            ("neg", |g, v| g.neg(v)),
            ("scale", |g, v| g.scale(v, -2.5)),
        ];
        for (name, op) in ops {
            let input = if name == "relu" { shifted.clone() } else { x.clone() };
            check_grad(&[input], |g, v| {
                let y = op(g, v[0]);
                project(g, y, 12)
            }, 1e-7);
        }
        let pos = Tensor::new(vec![17], x.data.iter().map(|v| v.abs() + 0.2).collect()).unwrap();
        check_grad(&[pos], |g, v| {
            let y = g.sqrt(v[0]);
            let y = g.add_scalar(y, 1.0);
            project(g, y, 12)
        }, 1e-7);
    }

    #[test]
    fn atan2_gradient() {
        check_grad(&[random(21, &[9]), random(22, &[9])], |g, v| {
            let y = g.atan2(v[0], v[1])?;
            project(g, y, 23)
        }, 1e-6);
    }

    #[test]
    fn structural_gradients() {
        let x = random(31, &[2, 3, 4]);
        check_grad(&[x.clone()], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            project(g, y, 1)
        }, 1e-8);
        check_grad(&[x.clone()], |g, v| {
            let y = g.reshape(v[0], &[6, 4])?;
            project(g, y, 1)
        }, 1e-8);
        check_grad(&[x.clone()], |g, v| {
            let y = g.slice(v[0], 2, 1, 2)?;
            project(g, y, 1)
        }, 1e-8);
        check_grad(&[x.clone(), random(32, &[2, 1, 4])], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            project(g, y, 1)
        }, 1e-8);
        check_grad(&[x.clone()], |g, v| {
            let y = g.sum_axis(v[0], 1)?;
            project(g, y, 1)
        }, 1e-8);
        check_grad(&[x.clone()], |g, v| {
            let y = g.mean(v[0]);
            let y = g.square(y);
            Ok(y)
        }, 1e-8);
        check_grad(&[random(33, &[2, 40])], |g, v| {
            let y = g.frames(v[0], 16, 8)?;
            project(g, y, 1)
        }, 1e-8);
    }

    #[test]
    fn permute_and_concat_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let t = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.value(t).data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(g.shape(t), &[3, 2]);
        let c = g.concat(&[x, x], 0).unwrap();
        assert_eq!(g.shape(c), &[4, 3]);
        let s = g.slice(c, 1, 1, 1).unwrap();
        assert_eq!(g.value(s).data(), &[2., 5., 2., 5.]);
        let f = g.frames(x, 2, 1).unwrap();
        assert_eq!(g.value(f).data(), &[1., 2., 2., 3., 4., 5., 5., 6.]);
    }

    #[test]
    fn dropout_behaviour() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1000], 1.0));
        let off = g.dropout(x, 0.2, false, 5).unwrap();
        assert_eq!(off, x);
        let a = g.dropout(x, 0.2, true, 5).unwrap();
        let b = g.dropout(x, 0.2, true, 5).unwrap();
        let c = g.dropout(x, 0.2, true, 6).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        let zeros = g.value(a).data().iter().filter(|v| **v == 0.0).count();
        assert!((150..250).contains(&zeros), "{zeros}");
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 1.25));
        check_grad(&[random(3, &[20])], |g, v| {
            let y = g.dropout(v[0], 0.3, true, 8)?;
            project(g, y, 1)
        }, 1e-8);
    }

    #[test]
    fn rfft_node_matches_spectral_rfft() {
        let x = random(41, &[2, 16]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let f = g.rfft(v, 9).unwrap();
        assert_eq!(g.shape(f), &[2, 9, 2]);
        for r in 0..2 {
            let direct = spectral::rfft(&x.data[r * 16..(r + 1) * 16], 16);
            for k in 0..9 {
                assert!((g.value(f).data[(r * 9 + k) * 2] - direct[k].re).abs() < 1e-12);
                assert!((g.value(f).data[(r * 9 + k) * 2 + 1] - direct[k].im).abs() < 1e-12);
            }
        }
        let back = g.irfft(f, 16).unwrap();
        for (a, b) in g.value(back).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_gradients() {
        for n in [16, 15] {
            check_grad(&[random(51, &[2, n])], |g, v| {
                let y = g.rfft(v[0], 5)?;
                project(g, y, 2)
            }, 1e-5);
            let k = n / 2 + 1;
            check_grad(&[random(52, &[2, k, 2])], |g, v| {
                let y = g.irfft(v[0], n)?;
                project(g, y, 2)
            }, 1e-5);
        }
    }

    #[test]
    fn spectral_chain_gradient() {
        check_grad(&[random(61, &[1, 2, 16]), random(62, &[2, 3, 5, 2])], |g, v| {
            let f = g.rfft(v[0], 5)?;
            let y = g.complex_matmul(f, v[1])?;
            let y = g.irfft(y, 16)?;
            project(g, y, 3)
        }, 1e-5);
    }

    #[test]
    fn complex_matmul_matches_complex_arithmetic() {
        let x = random(71, &[2, 3, 4, 2]);
        let w = random(72, &[3, 2, 4, 2]);
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.complex_matmul(vx, vw).unwrap();
        let c = |t: &Tensor, i: usize| Complex64::new(t.data[2 * i], t.data[2 * i + 1]);
        for b in 0..2 {
            for o in 0..2 {
                for k in 0..4 {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..3 {
                        acc += c(&x, (b * 3 + i) * 4 + k) * c(&w, (i * 2 + o) * 4 + k);
                    }
                    let got = c(g.value(y), (b * 2 + o) * 4 + k);
                    assert!((got - acc).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn lstm_cell_matches_gate_equations() {
        let (b, inp, hid) = (2, 3, 4);
        let ts = [
            random(91, &[b, inp]),
            random(92, &[b, hid]),
            random(93, &[b, hid]),
            random(94, &[inp, 4 * hid]),
            random(95, &[hid, 4 * hid]),
            random(96, &[4 * hid]),
        ];
        let mut g = Graph::new();
        let v: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let hc = g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
        for r in 0..b {
            let pre = |gate: usize, j: usize| {
                let col = gate * hid + j;
                let mut a = ts[5].data[col];
                for k in 0..inp {
                    a += ts[0].data[r * inp + k] * ts[3].data[k * 4 * hid + col];
                }
                for k in 0..hid {
                    a += ts[1].data[r * hid + k] * ts[4].data[k * 4 * hid + col];
                }
                a
            };
            let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
            for j in 0..hid {
                let c = sig(pre(1, j)) * ts[2].data[r * hid + j] + sig(pre(0, j)) * pre(2, j).tanh();
                let h = sig(pre(3, j)) * c.tanh();
                assert!((g.value(hc).data[r * 2 * hid + j] - h).abs() < 1e-14);
                assert!((g.value(hc).data[r * 2 * hid + hid + j] - c).abs() < 1e-14);
            }
        }
        check_grad(&ts, |g, v| {
            let y = g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])?;
            project(g, y, 97)
        }, 1e-6);
    }

    #[test]
    fn repeated_slices_accumulate() {
        check_grad(&[random(98, &[2, 6])], |g, v| {
            let a = g.slice(v[0], 1, 0, 3)?;
            let b = g.slice(v[0], 1, 2, 3)?;
            let y = g.mul(a, b)?;
            project(g, y, 99)
        }, 1e-8);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(random(81, &[3, 8]));
            let w = g.param(random(82, &[8, 8]));
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            let f = g.rfft(y, 3).unwrap();
            let s = g.square(f);
            let l = g.mean(s);
            g.backward(l).unwrap();
            (g.grad(x).unwrap(), g.grad(w).unwrap())
        };
        let (a, b) = run();
        let (c, d) = run();
        assert!(a.data().iter().zip(c.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(b.data().iter().zip(d.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_mlp_gradients_match_finite_differences(seed in 0u64..10_000, m in 1usize..4, k in 1usize..5) {
            check_grad(&[random(seed, &[m, k]), random(seed + 1, &[k, 3]), random(seed + 2, &[3])], |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add(h, v[2])?;
                let h = g.tanh(h);
                project(g, h, seed + 3)
            }, 1e-6);
        }

        #[test]
        fn irfft_inverts_rfft(seed in 0u64..10_000, n in 2usize..40) {
            let x = random(seed, &[n]);
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let f = g.rfft(v, n / 2 + 1).unwrap();
            let y = g.irfft(f, n).unwrap();
            for (a, b) in g.value(y).data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

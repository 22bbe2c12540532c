//! A small eager reverse-mode tape.
//!
//! Values are computed when an op is recorded. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid reverse topological order
//! because parents always precede their children.
//!
//! Leaves created with [`Tape::constant`] are detached: nothing flows into
//! them and they never appear in a [`GradientMap`].

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Div(Var, Var),
    DivideScalar(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    FrobeniusSq(Var),
    Log2(Var),
    TraceNormalize {
        x: Var,
        trace: f64,
    },
    Sum(Var),
    SumRows(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Reshape(Var),
    Select {
        x: Var,
        index: usize,
    },
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the trainable leaves.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cij, bpj) in ci.iter_mut().zip(bp) {
                *cij += aip * bpj;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh-approximated GELU.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Detached leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_node(value, op, rg))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn scalar_check(&self, v: Var, what: &str) -> Result<f64> {
        let t = self.value(v);
        if t.len() != 1 || t.rank() > 1 {
            return Err(shape_err(format!("{what} needs a scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(shape, data, op, &[a, b])
    }

    fn unary_map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a).map(f);
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, op, &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err(format!("matmul: [{m}, {k}] x [{k2}, {n}]")));
        }
        let c = matmul_raw(self.value(a).data(), m, k, self.value(b).data(), n);
        self.push(vec![m, n], c, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let t = transpose_raw(self.value(a).data(), m, n);
        self.push(vec![n, m], t, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Adds the vector `v: [n]` to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(v).shape() != [n] {
            return Err(shape_err(format!(
                "add_row: [{m}, {n}] + {:?}",
                self.value(v).shape()
            )));
        }
        let bias = self.value(v).data();
        let data = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        self.push(vec![m, n], data, Op::AddRow(a, v), &[a, v])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary_map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary_map(a, |x| c * x, Op::Scale(a, c))
    }

    /// Elementwise product of equal shapes.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        self.zip_map(a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    /// Alias of [`Tape::hadamard`] for non-matrix operands.
    pub fn mul_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.hadamard(a, b)
    }

    /// Elementwise quotient of equal shapes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Degenerate("division by zero".into()));
        }
        self.zip_map(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a / s` for a scalar node `s`.
    pub fn divide_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let d = self.scalar_check(s, "divide_scalar")?;
        if d == 0.0 {
            return Err(Error::Degenerate("division by zero scalar".into()));
        }
        let t = self.value(a).map(|x| x / d);
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, Op::DivideScalar(a, s), &[a, s])
    }

    /// Row-wise LayerNorm over the last axis of `x: [m, d]` with population
    /// variance: `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(shape_err(format!("layernorm: gain/bias must be [{d}]")));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        self.push(
            vec![m, d],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Unit-normalises each row of `x: [m, n]`. A row norm at or below
    /// `1e-12` is a degenerate-input error.
    pub fn l2norm_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nr <= 1e-12 {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            norms.push(nr);
            for j in 0..n {
                out[i * n + j] = row[j] / nr;
            }
        }
        self.push(vec![m, n], out, Op::L2NormRows { x, norms }, &[x])
    }

    /// `sum(a^2)` as a scalar.
    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(vec![], vec![s], Op::FrobeniusSq(a), &[a])
    }

    /// `log2(s)` of a positive scalar.
    pub fn log2_scalar(&mut self, s: Var) -> Result<Var> {
        let v = self.scalar_check(s, "log2_scalar")?;
        if v <= 0.0 {
            return Err(Error::Degenerate(format!("log2 of non-positive value {v:e}")));
        }
        self.push(vec![], vec![v.log2()], Op::Log2(s), &[s])
    }

    /// `A / tr(A)` for a square matrix.
    pub fn trace_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if m != n {
            return Err(shape_err(format!("trace_normalize: [{m}, {n}] is not square")));
        }
        let trace: f64 = (0..n).map(|i| self.value(a).data()[i * n + i]).sum();
        if trace.is_nan() || trace <= 1e-300 {
            return Err(Error::Degenerate(format!("trace {trace:e} is not positive")));
        }
        let data = self.value(a).data().iter().map(|v| v / trace).collect();
        self.push(vec![n, n], data, Op::TraceNormalize { x: a, trace }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `[m, n] -> [m]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let data = (0..m)
            .map(|i| self.value(a).data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        self.push(vec![m], data, Op::SumRows(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary_map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary_map(a, softplus, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary_map(a, gelu, Op::Gelu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, Op::Reshape(a), &[a])
    }

    /// Slice `index` of the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a).index_axis0(index)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, Op::Select { x: a, index }, &[a])
    }

    /// Stacks equal-shape nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("stack of zero tensors".into()));
        };
        let inner = self.value(first).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).len());
        for &p in parts {
            if self.value(p).shape() != inner.as_slice() {
                return Err(shape_err("stack: shapes differ".into()));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.push(shape, data, Op::Stack(parts.to_vec()), parts)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<GradientMap> {
        let rv = self.value(root);
        if rv.len() != 1 || rv.rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (parent, contrib) in self.local_grads(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = GradientMap::default();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if let (Some(g), Op::Leaf, true) = (g, &node.op, node.requires_grad) {
                out.grads
                    .insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(out)
    }

    /// Contributions of `node`'s output gradient `g` to each of its parents.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.value(v).data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    out.push((*a, matmul_raw(g, m, n, &bt, k)));
                }
                if needs(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    out.push((*b, matmul_raw(&at, k, m, g, n)));
                }
                out
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                vec![(*a, transpose_raw(g, n, m))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::AddRow(a, v) => {
                let n = self.value(*v).len();
                let mut col = vec![0.0; n];
                for row in g.chunks(n.max(1)) {
                    col.iter_mut().zip(row).for_each(|(c, r)| *c += r);
                }
                vec![(*a, g.to_vec()), (*v, col)]
            }
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| c * v).collect())],
            Op::Hadamard(a, b) => vec![
                (*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()),
            ],
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(y).map(|(g, y)| g / y).collect()),
                    (
                        *b,
                        g.iter()
                            .zip(x.iter().zip(y))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    ),
                ]
            }
            Op::DivideScalar(a, s) => {
                let d = val(*s)[0];
                let x = val(*a);
                let ds = -g.iter().zip(x).map(|(g, x)| g * x).sum::<f64>() / (d * d);
                vec![(*a, g.iter().map(|v| v / d).collect()), (*s, vec![ds])]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let gn = val(*gain);
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (i, is) in inv_std.iter().enumerate() {
                    let gr = &g[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gn[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gn[j];
                        dx[i * d + j] = is * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::L2NormRows { x, norms } => {
                let y = node.value.data();
                let n = y.len() / norms.len().max(1);
                let mut dx = vec![0.0; y.len()];
                for (i, nr) in norms.iter().enumerate() {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * dot) / nr;
                    }
                }
                vec![(*x, dx)]
            }
            Op::FrobeniusSq(a) => vec![(*a, val(*a).iter().map(|v| 2.0 * g[0] * v).collect())],
            Op::Log2(s) => vec![(*s, vec![g[0] / (val(*s)[0] * LN_2)])],
            Op::TraceNormalize { x, trace } => {
                let a = val(*x);
                let n = self.value(*x).shape()[0];
                let ga: f64 = g.iter().zip(a).map(|(g, a)| g * a).sum();
                let mut dx: Vec<f64> = g.iter().map(|v| v / trace).collect();
                for i in 0..n {
                    dx[i * n + i] -= ga / (trace * trace);
                }
                vec![(*x, dx)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::SumRows(a) => {
                let (_, n) = self.value(*a).dims2().unwrap();
                vec![(*a, g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect())]
            }
            Op::Sigmoid(a) => vec![(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            )],
            Op::Softplus(a) => vec![(
                *a,
                g.iter().zip(val(*a)).map(|(g, &x)| g * sigmoid(x)).collect(),
            )],
            Op::Gelu(a) => vec![(
                *a,
                g.iter().zip(val(*a)).map(|(g, &x)| g * gelu_grad(x)).collect(),
            )],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Select { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                let stride = g.len();
                dx[index * stride..(index + 1) * stride].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::Stack(parts) => {
                let stride = g.len() / parts.len();
                parts
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (p, g[i * stride..(i + 1) * stride].to_vec()))
                    .collect()
            }
        }
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate per work item.
pub fn numeric_gradient<F>(f: F, x: &Tensor, step: f64, exec: Exec) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64> + Sync + Send,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let coords = par::map_indexed(exec, x.len(), |i| -> Result<f64> {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (f(&plus)?, f(&minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value near coordinate {i}")));
        }
        Ok((fp - fm) / (2.0 * step))
    });
    let data = coords.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Evaluates the graph built by `f` on a fresh tape with `x` as the only
/// leaf; `trainable` controls whether `x` is recorded as a gradient leaf.
fn eval_scalar<F>(f: &F, x: &Tensor, trainable: bool) -> Result<(Tape, Var, Var)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = if trainable {
        tape.leaf(x.clone())
    } else {
        tape.constant(x.clone())
    };
    let root = f(&mut tape, leaf)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::Contract("checked function must return a scalar".into()));
    }
    Ok((tape, leaf, root))
}

/// Analytic gradient of the scalar graph `f` at `x` (zeros if `x` does not
/// reach the root).
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (tape, leaf, root) = eval_scalar(f, x, true)?;
    let grads = tape.backward(root)?;
    Ok(grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Compares the tape's gradient of `f` at `x` with central differences and
/// returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync + Send,
{
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(
        |p| eval_scalar(&f, p, false).map(|(t, _, r)| t.value(r).item()),
        x,
        step,
        Exec::default(),
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn m(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t(s: &mut Stream, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), s.normals(shape.iter().product())).unwrap()
    }

    #[test]
    fn record_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 2]);
        assert!(matches!(t.matmul(a, a), Err(Error::Shape(_))));

        let h = t.constant(m(&[2, 2], &[0.5, 0.0, 0.0, 0.5]));
        let f = t.frobenius_sq(h).unwrap();
        assert_eq!(t.value(f).item(), 0.5);

        let e = t.constant(Tensor::scalar(8.0));
        let l = t.log2_scalar(e).unwrap();
        assert_eq!(t.value(l).item(), 3.0);
    }

    #[test]
    fn frobenius_gradient_is_twice_input() {
        let x = m(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut t = Tape::new();
        let v = t.leaf(x);
        let r = t.frobenius_sq(v).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn log2_of_frobenius_gradient() {
        let x = m(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let f = |t: &mut Tape, v: Var| {
            let s = t.frobenius_sq(v)?;
            t.log2_scalar(s)
        };
        let g = analytic_gradient(&f, &x).unwrap();
        // 2 / (30 ln 2)
        assert!((g.data()[0] - 0.096_179_669_3).abs() < 1e-9);
        let num = numeric_gradient(
            |p| {
                let s: f64 = p.data().iter().map(|v| v * v).sum();
                Ok(s.log2())
            },
            &x,
            1e-6,
            Exec::Sequential,
        )
        .unwrap();
        assert!(max_relative_error(&g, &num) < 1e-7);
    }

    #[test]
    fn detached_leaves_are_absent() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[2], &[1.0, 2.0]));
        let b = t.constant(m(&[2], &[3.0, 4.0]));
        let p = t.hadamard(a, b).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(!g.contains(b));
        assert_eq!(g.len(), 1);
        assert!(!t.requires_grad(b));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[2], &[1.0, 2.0]));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_and_constant_checks() {
        let mut s = Stream::new(31, 0);
        let x = rand_t(&mut s, &[3, 4]);
        let err = finite_diff_check(|t, v| t.frobenius_sq(v), &x, 1e-6).unwrap();
        assert!(err < 1e-7, "{err}");
        let err = finite_diff_check(
            |t, _v| Ok(t.constant(Tensor::scalar(4.0))),
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
        assert!(finite_diff_check(|t, v| t.frobenius_sq(v), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_function_values_are_errors() {
        let x = m(&[1], &[1e-6]);
        // log2 of a value that the perturbation drives negative
        let r = finite_diff_check(
            |t, v| {
                let s = t.sum(v)?;
                t.log2_scalar(s)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn linearity_of_backward() {
        let mut s = Stream::new(32, 0);
        let x = rand_t(&mut s, &[3, 3]);
        let w = rand_t(&mut s, &[3, 3]);
        let (a, b) = (0.7, -1.3);
        let graph = |t: &mut Tape, v: Var, wa: f64, wb: f64| -> Result<Var> {
            let wv = t.constant(w.clone());
            let f = t.frobenius_sq(v)?;
            let h = t.hadamard(v, wv)?;
            let g = t.sum(h)?;
            let g = t.sigmoid(g)?;
            let fa = t.scale(f, wa)?;
            let gb = t.scale(g, wb)?;
            t.add(fa, gb)
        };
        let both = analytic_gradient(&|t: &mut Tape, v| graph(t, v, a, b), &x).unwrap();
        let f_only = analytic_gradient(&|t: &mut Tape, v| graph(t, v, 1.0, 0.0), &x).unwrap();
        let g_only = analytic_gradient(&|t: &mut Tape, v| graph(t, v, 0.0, 1.0), &x).unwrap();
        for i in 0..9 {
            let expect = a * f_only.data()[i] + b * g_only.data()[i];
            assert!((both.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_trace_gradient() {
        let mut s = Stream::new(33, 0);
        for _ in 0..10 {
            let a = rand_t(&mut s, &[3, 3]);
            let b = rand_t(&mut s, &[3, 3]);
            let x = rand_t(&mut s, &[3, 3]);
            // tr(A^T B X) = sum((A^T B)^T o X)
            let f = |t: &mut Tape, v: Var| {
                let av = t.constant(a.clone());
                let bv = t.constant(b.clone());
                let at = t.transpose(av)?;
                let atb = t.matmul(at, bv)?;
                let p = t.matmul(atb, v)?;
                let eye = t.constant(Tensor::identity(3));
                let d = t.hadamard(p, eye)?;
                t.sum(d)
            };
            let g = analytic_gradient(&f, &x).unwrap();
            // d tr(M X) / dX = M^T with M = A^T B
            let mut expect = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    let mij: f64 = (0..3).map(|k| a.data()[k * 3 + i] * b.data()[k * 3 + j]).sum();
                    expect[j * 3 + i] = mij;
                }
            }
            for i in 0..9 {
                assert!((g.data()[i] - expect[i]).abs() < 1e-12);
            }
        }
    }

    /// Random linear read-out `sum(W o op(x))` for per-op checks.
    fn readout(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let shape = t.value(y).shape().to_vec();
        let mut s = Stream::new(seed, 99);
        let w = t.constant(Tensor::new(shape.clone(), s.normals(shape.iter().product())).unwrap());
        let p = t.hadamard(y, w)?;
        t.sum(p)
    }

    fn check_op(name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var> + Sync + Send) {
        let err = finite_diff_check(
            |t, v| {
                let y = f(t, v)?;
                readout(t, y, 7)
            },
            x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{name}: max relative error {err:e}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut s = Stream::new(34, 0);
        for trial in 0..4 {
            let r = 1 + s.below(8);
            let c = 1 + s.below(8);
            let x = rand_t(&mut s, &[r, c]);
            let other = rand_t(&mut s, &[r, c]);
            let k = 1 + s.below(8);
            let right = rand_t(&mut s, &[c, k]);
            let row = rand_t(&mut s, &[c]);
            let gain = rand_t(&mut s, &[c]);
            let pos = other.map(|v| v.abs() + 0.5);
            let sq = rand_t(&mut s, &[c, c]);
            let psd = {
                let mut tt = Tape::new();
                let a = tt.constant(sq.clone());
                let at = tt.transpose(a).unwrap();
                let p = tt.matmul(a, at).unwrap();
                tt.value(p).map(|v| v + 0.0)
            };
            let _ = trial;

            check_op("matmul-left", &x, |t, v| {
                let b = t.constant(right.clone());
                t.matmul(v, b)
            });
            check_op("matmul-right", &right, |t, v| {
                let a = t.constant(x.clone());
                t.matmul(a, v)
            });
            check_op("transpose", &x, |t, v| t.transpose(v));
            check_op("add", &x, |t, v| {
                let o = t.constant(other.clone());
                t.add(v, o)
            });
            check_op("sub", &x, |t, v| {
                let o = t.constant(other.clone());
                t.sub(o, v)
            });
            check_op("add_row-matrix", &x, |t, v| {
                let b = t.constant(row.clone());
                t.add_row(v, b)
            });
            check_op("add_row-vector", &row, |t, v| {
                let a = t.constant(x.clone());
                t.add_row(a, v)
            });
            check_op("add_scalar", &x, |t, v| t.add_scalar(v, 2.5));
            check_op("scale", &x, |t, v| t.scale(v, -1.7));
            check_op("hadamard", &x, |t, v| {
                let o = t.constant(other.clone());
                t.hadamard(v, o)
            });
            check_op("mul_elementwise", &x, |t, v| t.mul_elementwise(v, v));
            check_op("div-num", &x, |t, v| {
                let d = t.constant(pos.clone());
                t.div(v, d)
            });
            check_op("div-den", &pos, |t, v| {
                let n = t.constant(x.clone());
                t.div(n, v)
            });
            check_op("divide_scalar", &x, |t, v| {
                let p = t.constant(pos.clone());
                let s = t.sum(p)?;
                t.divide_scalar(v, s)
            });
            check_op("divide_scalar-den", &pos, |t, v| {
                let n = t.constant(x.clone());
                let s = t.sum(v)?;
                t.divide_scalar(n, s)
            });
            if c >= 2 {
                check_op("layernorm-x", &x, |t, v| {
                    let g = t.constant(gain.clone());
                    let b = t.constant(row.clone());
                    t.layernorm(v, g, b, 1e-5)
                });
            }
            check_op("layernorm-gain", &gain, |t, v| {
                let xv = t.constant(x.clone());
                let b = t.constant(row.clone());
                t.layernorm(xv, v, b, 1e-5)
            });
            check_op("layernorm-bias", &row, |t, v| {
                let xv = t.constant(x.clone());
                let g = t.constant(gain.clone());
                t.layernorm(xv, g, v, 1e-5)
            });
            check_op("l2norm_rows", &x, |t, v| t.l2norm_rows(v));
            check_op("frobenius_sq", &x, |t, v| t.frobenius_sq(v));
            check_op("log2_scalar", &pos, |t, v| {
                let s = t.sum(v)?;
                t.log2_scalar(s)
            });
            check_op("trace_normalize", &psd, |t, v| t.trace_normalize(v));
            check_op("sum", &x, |t, v| t.sum(v));
            check_op("mean", &x, |t, v| t.mean(v));
            check_op("sum_rows", &x, |t, v| t.sum_rows(v));
            check_op("sigmoid", &x, |t, v| t.sigmoid(v));
            check_op("softplus", &x, |t, v| t.softplus(v));
            check_op("gelu", &x, |t, v| t.gelu(v));
            check_op("reshape", &x, |t, v| t.reshape(v, &[c, r]));
            check_op("select", &x, |t, v| t.select(v, r - 1));
            check_op("stack", &x, |t, v| {
                let o = t.constant(other.clone());
                t.stack(&[o, v, v])
            });
        }
    }

    #[test]
    fn layernorm_normalises_rows() {
        let mut t = Tape::new();
        let x = t.constant(m(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0]));
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.layernorm(x, g, b, 1e-5).unwrap();
        for row in t.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn degenerate_ops_error() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.l2norm_rows(z), Err(Error::Degenerate(_))));
        assert!(matches!(t.trace_normalize(z), Err(Error::Degenerate(_))));
        let s = t.sum(z).unwrap();
        assert!(matches!(t.log2_scalar(s), Err(Error::Degenerate(_))));
        assert!(matches!(t.divide_scalar(z, s), Err(Error::Degenerate(_))));
    }
}

//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its output
//! value and the inputs its backward rule needs. [`Graph::backward`] walks the
//! tape in reverse recorded order and returns the gradient of a scalar loss
//! with respect to every node that requires one. Graphs are built per step
//! and dropped afterwards, so nothing leaks between optimizer steps.
//!
//! Broadcasting for the binary elementwise ops is rightmost-aligned with
//! size-1 expansion only: shapes are compared from the last axis backwards
//! and each pair of extents must be equal or one of them must be 1. Missing
//! leading axes count as 1.

use crate::error::{Error, Result};

/// Arithmetic precision of a graph.
///
/// Storage is always `f64`. Under [`Precision::F32`] every op output is
/// rounded to the nearest `f32`, which reproduces single-precision results
/// for the elementwise primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Affine { w: Var, x: Var, b: Var },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, f64),
    LogSoftmax(Var),
    Log(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice { x: Var, start: usize },
    Row { table: Var, index: usize },
    Sum(Var),
    Mean(Var),
    Mask(Var, Vec<f64>),
    SmoothedCe { log_probs: Var, target: usize, smoothing: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recording tape.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Maps each flat output index to the flat index of an operand broadcast into `out`.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - shape.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    for _ in 0..total {
        idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for ax in (0..n).rev() {
            counter[ax] += 1;
            if counter[ax] < out[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    idx
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = ((v - max) / temperature).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

/// Sums a broadcast gradient back down to an operand's shape.
fn reduce_broadcast(g: &[f64], shape: &[usize], out: &[usize]) -> Vec<f64> {
    if shape == out {
        return g.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut r = vec![0.0; n];
    for (o, &i) in broadcast_index(shape, out).iter().enumerate() {
        r[i] += g[o];
    }
    r
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        if self.precision == Precision::F32 {
            for x in &mut data {
                *x = *x as f32 as f64;
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nodes outside the gradient path keep no backward information.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(name, &sa, &sb)?;
        let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&sa, &out);
            let ib = broadcast_index(&sb, &out);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok(self.push(out, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Scale(a, k), &[a])
    }

    /// Matrix product with numpy-style handling of 1-D operands:
    /// `[m,k]·[k,n]`, `[m,k]·[k]` and `[k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            _ => return Err(err()),
        };
        let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let data = matmul_raw(da, db, m, k, n);
        Ok(self.push(out_shape, data, Op::MatMul(a, b), &[a, b]))
    }

    /// `w·x + b` for `w: [o,i]`, `x: [i]`, `b: [o]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (sw, sx, sb) = (self.shape(w).to_vec(), self.shape(x).to_vec(), self.shape(b).to_vec());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::Shape {
                op: "affine",
                lhs: sw,
                rhs: sx,
            });
        }
        if sb != [sw[0]] {
            return Err(Error::Shape {
                op: "affine(bias)",
                lhs: sw,
                rhs: sb,
            });
        }
        let (o, i) = (sw[0], sw[1]);
        let (dw, dx, db) = (
            &self.nodes[w.0].value.data,
            &self.nodes[x.0].value.data,
            &self.nodes[b.0].value.data,
        );
        let data: Vec<f64> = (0..o)
            .map(|r| db[r] + dot(&dw[r * i..(r + 1) * i], dx))
            .collect();
        Ok(self.push(vec![o], data, Op::Affine { w, x, b }, &[w, x, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Softmax over the last axis of `exp(x/T)`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("softmax temperature must be positive, got {temperature}")));
        }
        let shape = self.shape(a).to_vec();
        let cols = shape[shape.len() - 1];
        let data = softmax_rows(&self.nodes[a.0].value.data, cols, temperature);
        Ok(self.push(shape, data, Op::Softmax(a, temperature), &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = shape[shape.len() - 1];
        let data = log_softmax_rows(&self.nodes[a.0].value.data, cols);
        self.push(shape, data, Op::LogSoftmax(a), &[a])
    }

    /// Concatenates 1-D vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![],
                });
            }
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let n = data.len();
        Ok(self.push(vec![n], data, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks equally sized 1-D vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::invalid("stack of zero rows"));
        };
        let s0 = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(rows.len() * s0[0]);
        for &r in rows {
            if self.shape(r) != s0.as_slice() || s0.len() != 1 {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: s0,
                    rhs: self.shape(r).to_vec(),
                });
            }
            data.extend_from_slice(&self.nodes[r.0].value.data);
        }
        Ok(self.push(vec![rows.len(), s0[0]], data, Op::Stack(rows.to_vec()), rows))
    }

    /// Elements `start..start+len` of a 1-D vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 || start + len > shape[0] || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let data = self.nodes[a.0].value.data[start..start + len].to_vec();
        Ok(self.push(vec![len], data, Op::Slice { x: a, start }, &[a]))
    }

    /// Embedding lookup: row `index` of a `[rows, cols]` table.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || index >= shape[0] {
            return Err(Error::Shape {
                op: "row",
                lhs: shape,
                rhs: vec![index],
            });
        }
        let data = self.nodes[table.0].value.row(index).to_vec();
        Ok(self.push(vec![shape[1]], data, Op::Row { table, index }, &[table]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = &self.nodes[a.0].value.data;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Multiplies by a fixed mask (used for inverted dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.nodes[a.0].value.len() {
            return Err(Error::Shape {
                op: "mask",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = self.nodes[a.0].value.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Mask(a, mask), &[a]))
    }

    /// Cross-entropy of a log-distribution against the label-smoothed target
    /// `(1-ε)·onehot(target) + ε/V`.
    pub fn smoothed_cross_entropy(&mut self, log_probs: Var, target: usize, smoothing: f64) -> Result<Var> {
        let shape = self.shape(log_probs).to_vec();
        if shape.len() != 1 || target >= shape[0] {
            return Err(Error::Shape {
                op: "smoothed_cross_entropy",
                lhs: shape,
                rhs: vec![target],
            });
        }
        let lp = &self.nodes[log_probs.0].value.data;
        let v = lp.len() as f64;
        let loss = -(1.0 - smoothing) * lp[target] - smoothing / v * lp.iter().sum::<f64>();
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SmoothedCe {
                log_probs,
                target,
                smoothing,
            },
            &[log_probs],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every node that requires a gradient and is reachable from `loss` gets
    /// a populated entry. Contributions from several paths are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    add_into(&mut grads[a.0], &reduce_broadcast(g, &val(*a).shape, &out.shape));
                }
                if needs(*b) {
                    let mut r = reduce_broadcast(g, &val(*b).shape, &out.shape);
                    if sign < 0.0 {
                        r.iter_mut().for_each(|x| *x = -*x);
                    }
                    add_into(&mut grads[b.0], &r);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let same = ta.shape == tb.shape;
                let (ia, ib) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_index(&ta.shape, &out.shape), broadcast_index(&tb.shape, &out.shape))
                };
                let pick = |idx: &Vec<usize>, t: &Tensor, o: usize| if same { t.data[o] } else { t.data[idx[o]] };
                if needs(*a) {
                    let full: Vec<f64> = (0..g.len()).map(|o| g[o] * pick(&ib, tb, o)).collect();
                    add_into(&mut grads[a.0], &reduce_broadcast(&full, &ta.shape, &out.shape));
                }
                if needs(*b) {
                    let full: Vec<f64> = (0..g.len()).map(|o| g[o] * pick(&ia, ta, o)).collect();
                    add_into(&mut grads[b.0], &reduce_broadcast(&full, &tb.shape, &out.shape));
                }
            }
            Op::Scale(a, k) => {
                let r: Vec<f64> = g.iter().map(|x| x * k).collect();
                add_into(&mut grads[a.0], &r);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = match (ta.shape.len(), tb.shape.len()) {
                    (2, 2) => (ta.shape[0], ta.shape[1], tb.shape[1]),
                    (2, 1) => (ta.shape[0], ta.shape[1], 1),
                    _ => (1, ta.shape[0], tb.shape[1]),
                };
                if needs(*a) {
                    // dA[i,p] = Σ_j g[i,j] B[p,j]
                    let mut r = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            r[i * k + p] = dot(gi, &tb.data[p * n..(p + 1) * n]);
                        }
                    }
                    add_into(&mut grads[a.0], &r);
                }
                if needs(*b) {
                    // dB[p,j] = Σ_i A[i,p] g[i,j]
                    let mut r = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            if aip != 0.0 {
                                for (dst, gv) in r[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *dst += aip * gv;
                                }
                            }
                        }
                    }
                    add_into(&mut grads[b.0], &r);
                }
            }
            Op::Affine { w, x, b } => {
                let (tw, tx) = (val(*w), val(*x));
                let (o, i) = (tw.shape[0], tw.shape[1]);
                if needs(*w) {
                    let mut r = vec![0.0; o * i];
                    for (row, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            for (dst, xv) in r[row * i..(row + 1) * i].iter_mut().zip(&tx.data) {
                                *dst = gr * xv;
                            }
                        }
                    }
                    add_into(&mut grads[w.0], &r);
                }
                if needs(*x) {
                    let mut r = vec![0.0; i];
                    for (row, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            for (dst, wv) in r.iter_mut().zip(&tw.data[row * i..(row + 1) * i]) {
                                *dst += gr * wv;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &r);
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sigmoid(a) => {
                let r: Vec<f64> = g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                add_into(&mut grads[a.0], &r);
            }
            Op::Tanh(a) => {
                let r: Vec<f64> = g.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                add_into(&mut grads[a.0], &r);
            }
            Op::Relu(a) => {
                let r: Vec<f64> = g
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &r);
            }
            Op::Log(a) => {
                let r: Vec<f64> = g.iter().zip(&val(*a).data).map(|(g, x)| g / x).collect();
                add_into(&mut grads[a.0], &r);
            }
            Op::Softmax(a, t) => {
                let cols = out.shape[out.shape.len() - 1];
                let mut r = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.data.chunks(cols)) {
                    let inner = dot(gr, yr);
                    r.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - inner) / t));
                }
                add_into(&mut grads[a.0], &r);
            }
            Op::LogSoftmax(a) => {
                let cols = out.shape[out.shape.len() - 1];
                let mut r = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.data.chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    r.extend(gr.iter().zip(yr).map(|(gv, y)| gv - y.exp() * total));
                }
                add_into(&mut grads[a.0], &r);
            }
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    if needs(*p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let mut r = vec![0.0; val(*x).len()];
                r[*start..*start + g.len()].copy_from_slice(g);
                add_into(&mut grads[x.0], &r);
            }
            Op::Row { table, index } => {
                let t = val(*table);
                let cols = t.shape[1];
                let slot = &mut grads[table.0];
                let d = slot.get_or_insert_with(|| vec![0.0; t.len()]);
                for (dst, gv) in d[index * cols..(index + 1) * cols].iter_mut().zip(g) {
                    *dst += gv;
                }
            }
            Op::Sum(a) => {
                let r = vec![g[0]; val(*a).len()];
                add_into(&mut grads[a.0], &r);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let r = vec![g[0] / n as f64; n];
                add_into(&mut grads[a.0], &r);
            }
            Op::Mask(a, m) => {
                let r: Vec<f64> = g.iter().zip(m).map(|(g, m)| g * m).collect();
                add_into(&mut grads[a.0], &r);
            }
            Op::SmoothedCe {
                log_probs,
                target,
                smoothing,
            } => {
                let v = val(*log_probs).len();
                let base = -smoothing / v as f64 * g[0];
                let mut r = vec![base; v];
                r[*target] -= (1.0 - smoothing) * g[0];
                add_into(&mut grads[log_probs.0], &r);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (dst, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *dst += aip * bv;
            }
        }
    }
    out
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `graph` as a gradient-requiring leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.param(t.clone())).collect())
    }

    /// Registers every tensor as a constant (inference, no gradients).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.constant(t.clone())).collect())
    }

    pub(crate) fn retain(&mut self, keep: impl Fn(&str) -> bool) -> Vec<Option<ParamId>> {
        let mut remap = Vec::with_capacity(self.len());
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (n, t) in self.names.drain(..).zip(self.tensors.drain(..)) {
            if keep(&n) {
                remap.push(Some(ParamId(names.len())));
                names.push(n);
                tensors.push(t);
            } else {
                remap.push(None);
            }
        }
        self.names = names;
        self.tensors = tensors;
        remap
    }
}

/// Graph handles for every tensor of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(Vec<Vec<f64>>);

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads(store.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    /// Adds `scale · grad(param)` for every bound parameter reached by the pass.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound, scale: f64) {
        for (dst, &v) in self.0.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += scale * x;
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id.0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.0.iter().map(Vec::as_slice)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.0.iter_mut()
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, k: f64) {
        for (a, b) in self.0.iter_mut().flatten().zip(other.0.iter().flatten()) {
            *a += k * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

/// Anything that owns a [`ParamStore`] and can be evaluated after perturbation.
pub trait Parameterized: Clone {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Parameterized for ParamStore {
    fn store(&self) -> &ParamStore {
        self
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Per-group result of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

/// Group key of a parameter name: its first path segment, plus the branch
/// segment (`b0`, `b1`, ...) when one follows.
pub fn param_group(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or_default();
    match parts.next() {
        Some(seg) if seg.starts_with('b') && seg[1..].chars().all(|c| c.is_ascii_digit()) && seg.len() > 1 => {
            format!("{head}.{seg}")
        }
        _ => head.to_string(),
    }
}

/// Compares analytic gradients against central finite differences for
/// every parameter element.
///
/// `f` returns the loss value and its analytic gradient. The relative error
/// of an element is `|g - ĝ| / max(|g|, |ĝ|, 1e-8)`.
pub fn grad_check<P, F>(params: &P, f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    P: Parameterized,
    F: Fn(&P) -> Result<(f64, ParamGrads)>,
{
    let (_, analytic) = f(params)?;
    let mut probe = params.clone();
    let mut groups: Vec<GroupCheck> = Vec::new();
    let ids: Vec<ParamId> = params.store().ids().collect();
    for id in ids {
        let group = param_group(params.store().name(id));
        let n = params.store().get(id).len();
        let mut worst = 0.0f64;
        for e in 0..n {
            let orig = probe.store().get(id).data()[e];
            probe.store_mut().get_mut(id).data_mut()[e] = orig + step;
            let (plus, _) = f(&probe)?;
            probe.store_mut().get_mut(id).data_mut()[e] = orig - step;
            let (minus, _) = f(&probe)?;
            probe.store_mut().get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let g = analytic.get(id)[e];
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        match groups.iter_mut().find(|c| c.group == group) {
            Some(c) => {
                c.elements += n;
                c.max_rel_error = c.max_rel_error.max(worst);
            }
            None => groups.push(GroupCheck {
                group,
                elements: n,
                max_rel_error: worst,
                passed: true,
            }),
        }
    }
    for g in &mut groups {
        g.passed = g.max_rel_error < tolerance;
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        groups,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(z, 1.0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        // independent scalar evaluation of e/(e+1) and 1/(e+1)
        let e = std::f64::consts::E;
        let z = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let s = g.softmax(z, 1.0).unwrap();
        assert!(close(g.value(s).data(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15));
        assert!((g.value(s).data()[0] - 0.7310586).abs() < 1e-7);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![3.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn log_softmax_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]));
        let lp = g.log_softmax(z);
        let picked = g.slice(lp, 2, 1).unwrap();
        let loss = g.sum(picked);
        let grads = g.backward(loss).unwrap();
        let p = softmax_rows(&[0.3, -1.2, 2.0, 0.1], 4, 1.0);
        let expected: Vec<f64> = p.iter().enumerate().map(|(i, q)| if i == 2 { 1.0 - q } else { -q }).collect();
        assert!(close(grads.get(z).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let v = g.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let s = g.add(m, v).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let col = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let s = g.mul(m, col).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let err = g.add(m, bad).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.constant(Tensor::vector(vec![0.1]));
        let y = g.scale(x, 3.0);
        let v = g.value(y).item();
        assert_eq!(v, v as f32 as f64);
        assert_eq!(v, (0.1f64 * 3.0) as f32 as f64);
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.7, -1.3, 2.1])).unwrap();
        let f = |p: &ParamStore| -> Result<(f64, ParamGrads)> {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let w = b.var(ParamId(0));
            let c = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
            let sq = g.mul(w, w)?;
            let lin = g.mul(w, c)?;
            let t = g.add(sq, lin)?;
            let loss = g.sum(t);
            let grads = g.backward(loss)?;
            let mut pg = ParamGrads::zeros(p);
            pg.accumulate(&grads, &b, 1.0);
            Ok((g.value(loss).item(), pg))
        };
        let report = grad_check(&store, f, 1e-4, 1e-10).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-10);
    }

    fn primitive_check(build: impl Fn(&mut Graph, &Bound) -> Result<Var>, store: &ParamStore) -> f64 {
        let f = |p: &ParamStore| -> Result<(f64, ParamGrads)> {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let loss = build(&mut g, &b)?;
            let grads = g.backward(loss)?;
            let mut pg = ParamGrads::zeros(p);
            pg.accumulate(&grads, &b, 1.0);
            Ok((g.value(loss).item(), pg))
        };
        grad_check(store, f, 1e-5, 1e-4).unwrap().max_rel_error
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut store = ParamStore::new();
        let a = store
            .insert("a", Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.9, -0.7, 0.1]).unwrap())
            .unwrap();
        let v = store.insert("v", Tensor::vector(vec![0.4, 0.25, -0.6])).unwrap();
        let c = store.insert("c", Tensor::vector(vec![0.05, -0.15])).unwrap();

        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &Bound) -> Result<Var>>)> = vec![
            ("matmul-mv", Box::new(move |g, b| {
                let y = g.matmul(b.var(a), b.var(v))?;
                let t = g.tanh(y);
                Ok(g.sum(t))
            })),
            ("matmul-vm", Box::new(move |g, b| {
                let y = g.matmul(b.var(c), b.var(a))?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            })),
            ("affine", Box::new(move |g, b| {
                let y = g.affine(b.var(a), b.var(v), b.var(c))?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            })),
            ("broadcast-add-mul", Box::new(move |g, b| {
                let y = g.add(b.var(a), b.var(v))?;
                let z = g.mul(y, b.var(v))?;
                let r = g.relu(z);
                Ok(g.mean(r))
            })),
            ("sub-softmax-T", Box::new(move |g, b| {
                let d = g.sub(b.var(v), b.var(v))?;
                let s = g.add(d, b.var(v))?;
                let p = g.softmax(s, 0.7)?;
                let w = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
                let q = g.mul(p, w)?;
                Ok(g.sum(q))
            })),
            ("log-softmax-rows", Box::new(move |g, b| {
                let l = g.log_softmax(b.var(a));
                let w = g.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0]).unwrap());
                let q = g.mul(l, w)?;
                Ok(g.sum(q))
            })),
            ("log-concat-slice-stack", Box::new(move |g, b| {
                let s = g.sigmoid(b.var(v));
                let l = g.log(s);
                let cat = g.concat(&[l, b.var(c)])?;
                let sl = g.slice(cat, 1, 3)?;
                let st = g.stack(&[sl, b.var(v)])?;
                let sq = g.mul(st, st)?;
                let sc = g.scale(sq, 0.5);
                Ok(g.sum(sc))
            })),
            ("row-smoothed-ce", Box::new(move |g, b| {
                let r = g.row(b.var(a), 1)?;
                let lp = g.log_softmax(r);
                g.smoothed_cross_entropy(lp, 2, 0.1)
            })),
            ("mask", Box::new(move |g, b| {
                let m = g.mask(b.var(v), vec![2.0, 0.0, 2.0])?;
                let t = g.tanh(m);
                Ok(g.sum(t))
            })),
        ];
        for (name, build) in cases {
            let err = primitive_check(build, &store);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::vector(vec![0.2, -0.4, 0.9])).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let t = g.tanh(b.var(w));
        let l1 = g.sum(t);
        let sq = g.mul(b.var(w), t).unwrap();
        let l2 = g.mean(sq);
        let a1 = g.scale(l1, 0.3);
        let a2 = g.scale(l2, -1.7);
        let combo = g.add(a1, a2).unwrap();

        let gc = g.backward(combo).unwrap();
        let g1 = g.backward(l1).unwrap();
        let g2 = g.backward(l2).unwrap();
        let combined = gc.get(b.var(w)).unwrap();
        for i in 0..3 {
            let lin = 0.3 * g1.get(b.var(w)).unwrap()[i] - 1.7 * g2.get(b.var(w)).unwrap()[i];
            assert!((combined[i] - lin).abs() < 1e-10);
        }
    }

    #[test]
    fn param_groups() {
        assert_eq!(param_group("encoder.l0.fwd.w_r"), "encoder");
        assert_eq!(param_group("decoder.b2.l0.w_r"), "decoder.b2");
        assert_eq!(param_group("output.b0.w"), "output.b0");
        assert_eq!(param_group("embedding"), "embedding");
        assert_eq!(param_group("attention.b"), "attention");
    }
}

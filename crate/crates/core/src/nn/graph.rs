//! Eager computation graph with reverse-mode gradients.
//!
//! Each operation computes its value immediately and records enough
//! structure for an exact analytic backward pass. Execution order is fixed
//! and single-threaded, so identical seeds and inputs give bitwise-identical
//! results.

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    /// `[m,n] + [n]`, broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `x + s` where `s` is a `[1]` node broadcast everywhere.
    AddScalarNode(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatCols(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    SoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    },
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<T>,
    },
    Variance(NodeId),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_kernel<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = Tensor::zeros(vec![m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        for kk in 0..k {
            let aik = ad[i * k + kk];
            if aik == T::ZERO {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            let orow = &mut od[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

fn softmax_rows_kernel<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let row = x.row(i);
        let mut mx = row[0];
        for &v in row {
            mx = mx.maximum(v);
        }
        let mut sum = T::ZERO;
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a].value.shape().to_vec(),
            rhs: self.nodes[b].value.shape().to_vec(),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.nodes[a].value.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *o += v;
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].value.cols();
        if self.nodes[row].value.len() != n {
            return Err(self.shape_err("add-row", x, row));
        }
        let mut out = self.nodes[x].value.clone();
        let rd = self.nodes[row].value.data().to_vec();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(&rd) {
                *o += v;
            }
        }
        let rg = self.needs(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn add_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.len() != 1 {
            return Err(self.shape_err("add-scalar", x, s));
        }
        let sv = self.nodes[s].value.item();
        let out = self.nodes[x].value.map(|v| v + sv);
        let rg = self.needs(&[x, s]);
        Ok(self.push(out, Op::AddScalarNode(x, s), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, T::from_f64(-1.0));
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let mut out = self.nodes[a].value.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *o *= v;
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.nodes[x].value.map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = matmul_kernel(av, bv);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.shape().len() != 2 {
            return Err(self.shape_err("transpose", x, x));
        }
        let (m, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j * m + i] = v.data()[i * n + j];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.nodes[x].value.clone().reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.rows() != bv.rows() {
            return Err(self.shape_err("concat-cols", a, b));
        }
        let (m, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(vec![m, ca + cb]);
        for i in 0..m {
            out.data_mut()[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(av.row(i));
            out.data_mut()[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(bv.row(i));
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Selects rows by index; duplicates allowed. Used for embedding lookup,
    /// pair building, and first-token gathering.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let (m, n) = (v.rows(), v.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Shape {
                op: "gather-rows",
                lhs: v.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut out = Tensor::zeros(vec![indices.len(), n]);
        for (r, &src) in indices.iter().enumerate() {
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(v.row(src));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), rg))
    }

    /// Embedding lookup is a row gather over the table.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.gather_rows(table, ids)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let (m, n) = (v.rows(), v.cols());
        if start + len > n {
            return Err(Error::Shape {
                op: "slice-cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Tensor::zeros(vec![m, len]);
        for i in 0..m {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&v.row(i)[start..start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start, len), rg))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let out = softmax_rows_kernel(&self.nodes[x].value);
        let rg = self.needs(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x]
            .value
            .map(|v| T::ONE / (T::ONE + (-v).exp()));
        let rg = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh_node(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(|v| v.tanh());
        let rg = self.needs(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(gelu_scalar);
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let n = self.nodes[x].value.cols();
        if self.nodes[gamma].value.len() != n || self.nodes[beta].value.len() != n {
            return Err(self.shape_err("layer-norm", x, gamma));
        }
        let eps = T::from_f64(eps);
        let xv = &self.nodes[x].value;
        let g = self.nodes[gamma].value.data().to_vec();
        let bta = self.nodes[beta].value.data().to_vec();
        let m = xv.rows();
        let mut out = Tensor::zeros(vec![m, n]);
        let inv_n = T::ONE / T::from_f64(n as f64);
        for i in 0..m {
            let row = xv.row(i);
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = T::ONE / (var + eps).sqrt();
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = (row[j] - mean) * inv_std * g[j] + bta[j];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::ZERO;
        for &v in self.nodes[x].value.data() {
            acc += v;
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(acc), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len();
        let mut acc = T::ZERO;
        for &v in self.nodes[x].value.data() {
            acc += v;
        }
        acc /= T::from_f64(n as f64);
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(acc), Op::Mean(x), rg)
    }

    /// `[m,n] -> [m,1]` row sums.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
        let mut out = Tensor::zeros(vec![m, 1]);
        for i in 0..m {
            let mut acc = T::ZERO;
            for &v in self.nodes[x].value.row(i) {
                acc += v;
            }
            out.data_mut()[i] = acc;
        }
        let _ = n;
        let rg = self.needs(&[x]);
        self.push(out, Op::RowSum(x), rg)
    }

    /// Mean cross-entropy over rows of logits, computed via log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[logits].value;
        let (m, n) = (v.rows(), v.cols());
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::Shape {
                op: "cross-entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut loss = T::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let row = v.row(i);
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let mut sum = T::ZERO;
            for &x in row {
                sum += (x - mx).exp();
            }
            loss += sum.ln() + mx - row[t];
        }
        loss /= T::from_f64(m as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits (numerically stable form).
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId> {
        let v = &self.nodes[logits].value;
        if targets.len() != v.len() {
            return Err(Error::Shape {
                op: "bce",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut loss = T::ZERO;
        for (&x, &y) in v.data().iter().zip(targets) {
            loss += x.maximum(T::ZERO) - x * y + (T::ONE + (-x.abs()).exp()).ln();
        }
        loss /= T::from_f64(targets.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Population variance of all elements.
    pub fn variance(&mut self, x: NodeId) -> NodeId {
        let d = self.nodes[x].value.data();
        let n = T::from_f64(d.len() as f64);
        let mut mean = T::ZERO;
        for &v in d {
            mean += v;
        }
        mean /= n;
        let mut var = T::ZERO;
        for &v in d {
            let c = v - mean;
            var += c * c;
        }
        var /= n;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(var), Op::Variance(x), rg)
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// `x @ w @ y^T`: pairwise bilinear scores between row sets.
    pub fn bilinear_form(&mut self, x: NodeId, w: NodeId, y: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        let yt = self.transpose(y)?;
        self.matmul(xw, yt)
    }

    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Numeric(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(T::ONE));
        for idx in (0..=root).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: NodeId, delta: Tensor<T>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(acc) => {
                for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: NodeId, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[*row].requires_grad {
                    let n = self.nodes[*row].value.len();
                    let mut rg = Tensor::zeros(self.nodes[*row].value.shape().to_vec());
                    for chunk in g.data().chunks(n) {
                        for (o, &v) in rg.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, rg);
                }
            }
            Op::AddScalarNode(x, s) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[*s].requires_grad {
                    let mut acc = T::ZERO;
                    for &v in g.data() {
                        acc += v;
                    }
                    self.accumulate(grads, *s, Tensor::scalar(acc));
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].requires_grad {
                    let mut da = g.clone();
                    for (o, &v) in da.data_mut().iter_mut().zip(self.nodes[*b].value.data()) {
                        *o *= v;
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = g.clone();
                    for (o, &v) in db.data_mut().iter_mut().zip(self.nodes[*a].value.data()) {
                        *o *= v;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, c) => {
                let dx = g.map(|v| v * *c);
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    // dA = g @ B^T
                    let (m, n) = (g.rows(), g.cols());
                    let k = av.cols();
                    let mut da = Tensor::zeros(vec![m, k]);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            if gij == T::ZERO {
                                continue;
                            }
                            let brow = &bv.data()[0..];
                            let darow = &mut da.data_mut()[i * k..(i + 1) * k];
                            for kk in 0..k {
                                darow[kk] += gij * brow[kk * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    // dB = A^T @ g
                    let (m, n) = (g.rows(), g.cols());
                    let k = av.cols();
                    let mut db = Tensor::zeros(vec![k, n]);
                    for i in 0..m {
                        let arow = av.row(i);
                        let grow = g.row(i);
                        for (kk, &aik) in arow.iter().enumerate() {
                            if aik == T::ZERO {
                                continue;
                            }
                            let dbrow = &mut db.data_mut()[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                dbrow[j] += aik * grow[j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (g.rows(), g.cols());
                let mut dx = Tensor::zeros(vec![n, m]);
                for i in 0..m {
                    for j in 0..n {
                        dx.data_mut()[j * m + i] = g.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g
                    .clone()
                    .reshaped(self.nodes[*x].value.shape().to_vec())
                    .expect("reshape backward");
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let m = g.rows();
                let ca = self.nodes[*a].value.cols();
                let cb = self.nodes[*b].value.cols();
                if self.nodes[*a].requires_grad {
                    let mut da = Tensor::zeros(vec![m, ca]);
                    for i in 0..m {
                        da.data_mut()[i * ca..(i + 1) * ca]
                            .copy_from_slice(&g.row(i)[0..ca]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = Tensor::zeros(vec![m, cb]);
                    for i in 0..m {
                        db.data_mut()[i * cb..(i + 1) * cb]
                            .copy_from_slice(&g.row(i)[ca..ca + cb]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GatherRows(x, indices) => {
                let n = self.nodes[*x].value.cols();
                let mut dx = Tensor::zeros(self.nodes[*x].value.shape().to_vec());
                for (r, &src) in indices.iter().enumerate() {
                    let grow = g.row(r);
                    let drow = &mut dx.data_mut()[src * n..(src + 1) * n];
                    for (o, &v) in drow.iter_mut().zip(grow) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start, len) => {
                let n = self.nodes[*x].value.cols();
                let m = g.rows();
                let mut dx = Tensor::zeros(self.nodes[*x].value.shape().to_vec());
                for i in 0..m {
                    dx.data_mut()[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mut dot = T::ZERO;
                    for j in 0..n {
                        dot += yr[j] * gr[j];
                    }
                    let dr = &mut dx.data_mut()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let mut dx = g.clone();
                for (o, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *o *= yv * (T::ONE - yv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let mut dx = g.clone();
                for (o, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *o *= T::ONE - yv * yv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[*x].value;
                let mut dx = g.clone();
                for (o, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= gelu_grad_scalar(v);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gamma].value.data();
                let (m, n) = (xv.rows(), xv.cols());
                let inv_n = T::ONE / T::from_f64(n as f64);
                let mut dx = Tensor::zeros(vec![m, n]);
                let mut dgamma = Tensor::zeros(self.nodes[*gamma].value.shape().to_vec());
                let mut dbeta = Tensor::zeros(self.nodes[*beta].value.shape().to_vec());
                for i in 0..m {
                    let row = xv.row(i);
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_n;
                    let mut var = T::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let inv_std = T::ONE / (var + *eps).sqrt();
                    let gr = g.row(i);
                    // dxhat, plus gamma/beta grads in the same sweep.
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    let mut xhat = vec![T::ZERO; n];
                    let mut dxhat = vec![T::ZERO; n];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = gr[j] * gv[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma.data_mut()[j] += gr[j] * xhat[j];
                        dbeta.data_mut()[j] += gr[j];
                    }
                    let dr = &mut dx.data_mut()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dr[j] = inv_std
                            * (dxhat[j] - inv_n * sum_dxhat - xhat[j] * inv_n * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Sum(x) => {
                let s = g.item();
                let dx = Tensor::full(self.nodes[*x].value.shape().to_vec(), s);
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.nodes[*x].value.len() as f64);
                let s = g.item() / n;
                let dx = Tensor::full(self.nodes[*x].value.shape().to_vec(), s);
                self.accumulate(grads, *x, dx);
            }
            Op::RowSum(x) => {
                let (m, n) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let gi = g.data()[i];
                    for v in dx.data_mut()[i * n..(i + 1) * n].iter_mut() {
                        *v = gi;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = &self.nodes[*logits].value;
                let probs = softmax_rows_kernel(lv);
                let (m, n) = (lv.rows(), lv.cols());
                let scale = g.item() / T::from_f64(m as f64);
                let mut dx = probs;
                for (i, &t) in targets.iter().enumerate() {
                    let dr = &mut dx.data_mut()[i * n..(i + 1) * n];
                    dr[t] -= T::ONE;
                    for v in dr.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = &self.nodes[*logits].value;
                let scale = g.item() / T::from_f64(targets.len() as f64);
                let mut dx = Tensor::zeros(lv.shape().to_vec());
                for ((o, &x), &y) in dx.data_mut().iter_mut().zip(lv.data()).zip(targets) {
                    let p = T::ONE / (T::ONE + (-x).exp());
                    *o = (p - y) * scale;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Variance(x) => {
                let d = self.nodes[*x].value.data();
                let n = T::from_f64(d.len() as f64);
                let mut mean = T::ZERO;
                for &v in d {
                    mean += v;
                }
                mean /= n;
                let two = T::from_f64(2.0);
                let s = g.item();
                let mut dx = Tensor::zeros(self.nodes[*x].value.shape().to_vec());
                for (o, &v) in dx.data_mut().iter_mut().zip(d) {
                    *o = two * (v - mean) / n * s;
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

/// Gradients keyed by node id after a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Projection weights for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl<T: Real> Graph<T> {
    /// Scaled dot-product attention with `heads` heads. `mask`, when given,
    /// is an additive `[Tq, Tk]` tensor (0 for visible, large negative for
    /// masked slots). Queries come from `q_in`, keys and values from
    /// `kv_in`, so the same routine serves self- and cross-attention.
    pub fn multi_head_attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        w: &AttentionWeights,
        heads: usize,
        mask: Option<NodeId>,
    ) -> Result<NodeId> {
        let d = self.value(q_in).cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Numeric(format!(
                "hidden size {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let q = self.affine(q_in, w.wq, w.bq)?;
        let k = self.affine(kv_in, w.wk, w.bk)?;
        let v = self.affine(kv_in, w.wv, w.bv)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut ctx: Option<NodeId> = None;
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, scale);
            let scores = match mask {
                Some(m) => self.add(scores, m)?,
                None => scores,
            };
            let attn = self.softmax_rows(scores);
            let ctx_h = self.matmul(attn, vh)?;
            ctx = Some(match ctx {
                None => ctx_h,
                Some(prev) => self.concat_cols(prev, ctx_h)?,
            });
        }
        let ctx = ctx.expect("at least one head");
        self.affine(ctx, w.wo, w.bo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.input(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.input(t(vec![2], vec![0.0, 0.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t(vec![1, 4], vec![0.3; 4]));
        let y = g.softmax_rows(x);
        for &p in g.value(y).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t(vec![2, 3], vec![1.0, -2.0, 0.5, 100.0, 100.0, -100.0]));
        let y = g.softmax_rows(x);
        for i in 0..2 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_identity_is_dot_product() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let y = g.input(t(vec![1, 3], vec![4.0, 5.0, 6.0]));
        let w = g.input(t(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let s = g.bilinear_form(x, w, y).unwrap();
        assert!((g.value(s).item() - 32.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 7.0]));
        let gamma = g.input(t(vec![4], vec![1.0; 4]));
        let beta = g.input(t(vec![4], vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta, 1e-9).unwrap();
        for i in 0..2 {
            let row = g.value(y).row(i);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_uniform_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t(vec![3, 9], vec![0.0; 27]));
        let loss = g.cross_entropy_logits(x, &[0, 4, 8]).unwrap();
        assert!((g.value(loss).item() - (9.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t(vec![4], vec![0.0; 4]));
        let loss = g.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((g.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_uniform_case() {
        // One row, uniform logits, one-hot target: gradient is p - y.
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(t(vec![1, 4], vec![0.0; 4]));
        let loss = g.cross_entropy_logits(x, &[2]).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for (j, &v) in gx.data().iter().enumerate() {
            let expected = if j == 2 { 0.25 - 1.0 } else { 0.25 };
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(t(vec![2, 3], vec![0.0; 6]));
        let b = g.input(t(vec![2, 2], vec![0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn variance_forward() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t(vec![2], vec![0.9, 0.5]));
        let v = g.variance(x);
        assert!((g.value(v).item() - 0.04).abs() < 1e-12);
    }
}

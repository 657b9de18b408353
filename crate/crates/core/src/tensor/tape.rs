use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it, and only until that tape runs `backward`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    MeanRows(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended in execution
/// order, so reverse index order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient for `v` into `t.grad`. A reachable leaf that
    /// received no signal still gets a zero buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    if cols == 0 {
        (0, 0)
    } else {
        (numel / cols, cols)
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a tensor as a leaf. It takes part in differentiation iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: [{m}x{k}] * [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// `x[..., n] + row[n]`, broadcasting over the leading dimensions.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.node(row).value.len() != cols {
            return Err(Error::dim(format!(
                "add_row: row of length {} against trailing extent {cols}",
                self.node(row).value.len()
            )));
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_exact_mut(cols.max(1)) {
            chunk.iter_mut().zip(r).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s as f32], Op::Sum(x), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let out = softmax_rows(self.value(x), cols);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044_715 * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim(format!(
                "layer_norm: affine parameters must have length {cols}"
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0f32; rows * cols];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs as f32;
            for c in 0..cols {
                let h = ((row[c] as f64 - mean) * rs) as f32;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Normalizes each vector along the last axis to unit L2 norm. Zero
    /// vectors map to zero with zero gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0f32; rows * cols];
        let mut norms = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            norms[r] = n as f32;
            if n > 0.0 {
                for c in 0..cols {
                    out[r * cols + c] = (row[c] as f64 / n) as f32;
                }
            }
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::L2Normalize { x, norms }, rg)
    }

    /// Mean over the rows of a matrix: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "mean_rows")?;
        if m == 0 {
            return Err(Error::dim("mean_rows over zero rows"));
        }
        let xv = self.value(x);
        let mut acc = vec![0.0f64; n];
        for r in 0..m {
            for c in 0..n {
                acc[c] += xv[r * n + c] as f64;
            }
        }
        let out = acc.iter().map(|&s| (s / m as f64) as f32).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![n], out, Op::MeanRows(x), rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("mse over empty tensors"));
        }
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![], vec![(s / n as f64) as f32], Op::Mse(a, b), rg))
    }

    /// Weighted cross entropy `Σ_i w_i · (−log softmax(logits_i)[y_i]) / B`.
    ///
    /// Normalizing by the batch size (not by `Σ w`) means a zero weight
    /// removes a sample's contribution without rescaling the others.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f32]) -> Result<Var> {
        let (b, c) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != b || weights.len() != b {
            return Err(Error::dim(format!(
                "cross_entropy: {b} rows but {} labels and {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} outside [0, {c})")));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Index("cross_entropy weights must be non-negative".into()));
        }
        let probs = softmax_rows(self.value(logits), c);
        let lv = self.value(logits);
        let mut total = 0.0f64;
        for i in 0..b {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = mx + row.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln();
            total += weights[i] as f64 * (lse - row[labels[i]] as f64);
        }
        let loss = (total / b as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::dim(format!(
                "slice_cols [{start}, {}) outside {n} columns",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let (m, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows of a matrix in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} outside {m} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let n = *self
            .shape(first)
            .last()
            .ok_or_else(|| Error::dim("concat_rows of scalars"))?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let s = self.shape(p);
            let (pm, pn) = match s {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                _ => return Err(Error::dim(format!("concat_rows: unsupported shape {s:?}"))),
            };
            if pn != n {
                return Err(Error::dim("concat_rows: column counts differ"));
            }
            m += pm;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Reverse pass from a scalar `loss`. Clears the tape afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Adds `delta` into the gradient slot of `v` if it needs one.
        let mut acc = |v: Var, delta: &dyn Fn(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|s| gemm_nt(g, bv, s, m, n, k));
                acc(*b, &|s| gemm_tn(av, g, s, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(*a, &|s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(x, row) => {
                let cols = nodes[row.0].value.len();
                acc(*x, &|s| add_into(s, g));
                acc(*row, &|s| {
                    let mut tmp = vec![0.0f64; cols];
                    for chunk in g.chunks_exact(cols.max(1)) {
                        tmp.iter_mut().zip(chunk).for_each(|(t, v)| *t += *v as f64);
                    }
                    s.iter_mut().zip(&tmp).for_each(|(o, t)| *o += *t as f32);
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = *node.shape.last().unwrap_or(&1);
                acc(*x, &|s| {
                    for (r, (yr, gr)) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate() {
                        let d: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        let d = d as f32;
                        for c in 0..cols {
                            s[r * cols + c] += yr[c] * (gr[c] - d);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &|s| {
                    for j in 0..s.len() {
                        let v = xv[j];
                        let t = (GELU_C * (v + 0.044_715 * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * v * v);
                        s[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = nodes[gamma.0].value.len();
                let gam = &nodes[gamma.0].value;
                acc(*x, &|s| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * cols;
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for c in 0..cols {
                            let dh = (g[base + c] * gam[c]) as f64;
                            m1 += dh;
                            m2 += dh * xhat[base + c] as f64;
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let dh = (g[base + c] * gam[c]) as f64;
                            s[base + c] += (*rs as f64 * (dh - m1 - xhat[base + c] as f64 * m2)) as f32;
                        }
                    }
                });
                acc(*gamma, &|s| {
                    let mut tmp = vec![0.0f64; cols];
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            tmp[c] += (gr[c] * hr[c]) as f64;
                        }
                    }
                    s.iter_mut().zip(&tmp).for_each(|(o, t)| *o += *t as f32);
                });
                acc(*beta, &|s| {
                    let mut tmp = vec![0.0f64; cols];
                    for gr in g.chunks_exact(cols) {
                        tmp.iter_mut().zip(gr).for_each(|(t, v)| *t += *v as f64);
                    }
                    s.iter_mut().zip(&tmp).for_each(|(o, t)| *o += *t as f32);
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let cols = *node.shape.last().unwrap_or(&1);
                acc(*x, &|s| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let base = r * cols;
                        let yr = &y[base..base + cols];
                        let gr = &g[base..base + cols];
                        let d: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        for c in 0..cols {
                            s[base + c] += ((gr[c] as f64 - yr[c] as f64 * d) / n as f64) as f32;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let inv = 1.0 / m as f32;
                acc(*x, &|s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += g[c] * inv;
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let k = 2.0 * g[0] / av.len() as f32;
                acc(*a, &|s| {
                    for j in 0..s.len() {
                        s[j] += k * (av[j] - bv[j]);
                    }
                });
                acc(*b, &|s| {
                    for j in 0..s.len() {
                        s[j] -= k * (av[j] - bv[j]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let c = nodes[logits.0].shape[1];
                let b = labels.len();
                acc(*logits, &|s| {
                    for i in 0..b {
                        let w = weights[i] * g[0] / b as f32;
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            s[i * c + j] += w * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let len = node.shape[1];
                acc(*x, &|s| {
                    for r in 0..m {
                        add_into(&mut s[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(*p, &|s| {
                        for r in 0..m {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = nodes[x.0].shape[1];
                acc(*x, &|s| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut s[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &|s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Row-wise softmax over the trailing extent `cols`.
pub fn softmax_rows(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    if cols == 0 {
        return out;
    }
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mx = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0f64;
        for (oc, &v) in o.iter_mut().zip(row) {
            let e = ((v - mx) as f64).exp();
            *oc = e as f32;
            z += e;
        }
        let inv = 1.0 / z;
        o.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
    }
    out
}

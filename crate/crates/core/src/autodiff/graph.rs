use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// `c ← a·b + beta·c` where `a` is logically `m × k` and `b` is `k × n`.
/// `trans_a` / `trans_b` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides address exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        query: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        heads: usize,
        scale: f64,
        weights: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    leaves: HashMap<Var, Vec<f64>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a leaf created with [`Graph::variable`].
    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: ParamId, grad: Vec<f64>) {
        self.params.insert(id, grad);
    }

    /// Indices of the recorded operations in the order backward visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }

    pub fn into_iter(self) -> impl Iterator<Item = (ParamId, Vec<f64>)> {
        self.params.into_iter()
    }
}

/// Computation tape for one forward pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_leaves: HashMap<(ParamId, bool), Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        let [r, c] = t.shape();
        self.push(r, c, t.into_values(), Op::Leaf, false)
    }

    /// Free leaf whose gradient is reported through [`Gradients::var`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let [r, c] = t.shape();
        self.push(r, c, t.into_values(), Op::Leaf, true)
    }

    /// Trainable parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.param_leaf(id, true)
    }

    /// Parameter read as a constant (frozen for this pass).
    pub fn frozen(&mut self, id: ParamId) -> Var {
        self.param_leaf(id, false)
    }

    fn param_leaf(&mut self, id: ParamId, requires_grad: bool) -> Var {
        if let Some(v) = self.param_leaves.get(&(id, requires_grad)) {
            return *v;
        }
        let t = self.store.get(id);
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert((id, requires_grad), v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(x) => x,
            Value::Param(id) => self.store.get(*id).values(),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let [r, c] = self.shape(v);
        Tensor::new(r, c, self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention weights recorded by [`Graph::attention`], laid out as
    /// `[row][head][source]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let [_, c] = self.shape(x);
        if self.shape(row) != [1, c] {
            return Err(Error::shape(
                op,
                format!("row operand {:?} for {:?}", self.shape(row), self.shape(x)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let [r, c] = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    /// `x + row`, the `1 × n` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_operand("add_row", x, row)?;
        let [r, c] = self.shape(x);
        let rv = self.value(row);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(r, c, out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let [r, c] = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    /// `x ⊙ row`, the `1 × n` row broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_operand("mul_row", x, row)?;
        let [r, c] = self.shape(x);
        let rv = self.value(row);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(rv).map(|(a, b)| a * b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(r, c, out, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let [r, c] = self.shape(x);
        let rg = self.rg(x);
        self.push(r, c, out, Op::Scale(x, s), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let [r, c] = self.shape(x);
        let rg = self.rg(x);
        self.push(r, c, out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let [r, c] = self.shape(x);
        let rg = self.rg(x);
        self.push(r, c, out, Op::Relu(x), rg)
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let [r, c] = self.shape(x);
        let rg = self.rg(x);
        Ok(self.push(r, c, out, Op::Dropout(x, mask), rg))
    }

    /// Per-row normalization (epsilon 1e-5) followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.row_operand("layer_norm", x, gain)?;
        self.row_operand("layer_norm", x, bias)?;
        let [r, c] = self.shape(x);
        if c == 0 {
            return Err(Error::shape("layer_norm", "zero features"));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `softmax(logits)` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(logits);
        if labels.len() != r {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("label {bad} outside 0..{c}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let top = argmax_first(row);
            let max = row[top];
            // z = 1 + rest; keeping rest separate preserves precision in ln
            let mut rest = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                if j != top {
                    rest += e;
                }
            }
            let z = 1.0 + rest;
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += rest.ln_1p() - (row[labels[i]] - max);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            1,
            1,
            vec![loss / r as f64],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Multi-head attention of one shared query row over a set of sources.
    ///
    /// `query` is `1 × d`; every key/value is `batch × d`. For each row and
    /// head the weights are `softmax_i(scale · q_h · k_{i,h})` and the output
    /// is `Σ_i w_i · v_{i,h}`, heads concatenated back to width `d`.
    pub fn attention(
        &mut self,
        query: Var,
        keys: &[Var],
        values: &[Var],
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        if keys.is_empty() {
            return Err(Error::Input("attention over an empty source set".into()));
        }
        if keys.len() != values.len() {
            return Err(Error::shape(
                "attention",
                format!("{} keys vs {} values", keys.len(), values.len()),
            ));
        }
        let [qr, d] = self.shape(query);
        if qr != 1 {
            return Err(Error::shape("attention", "query must be a single row"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible into {heads} heads")));
        }
        let [b, _] = self.shape(keys[0]);
        for v in keys.iter().chain(values) {
            if self.shape(*v) != [b, d] {
                return Err(Error::shape(
                    "attention",
                    format!("source {:?}, expected {:?}", self.shape(*v), [b, d]),
                ));
            }
        }
        let n = keys.len();
        let hw = d / heads;
        let q = self.value(query);
        let mut weights = vec![0.0; b * heads * n];
        let mut out = vec![0.0; b * d];
        let mut scores = vec![0.0; n];
        for r in 0..b {
            for h in 0..heads {
                let cols = h * hw..(h + 1) * hw;
                for (i, k) in keys.iter().enumerate() {
                    let kr = &self.value(*k)[r * d..(r + 1) * d];
                    scores[i] = scale
                        * cols.clone().map(|c| q[c] * kr[c]).sum::<f64>();
                }
                let w = &mut weights[(r * heads + h) * n..(r * heads + h + 1) * n];
                softmax_into(&scores, w);
                for (i, v) in values.iter().enumerate() {
                    let vr = &self.value(*v)[r * d..(r + 1) * d];
                    for c in cols.clone() {
                        out[r * d + c] += w[i] * vr[c];
                    }
                }
            }
        }
        let rg = self.rg(query) || keys.iter().chain(values).any(|v| self.rg(*v));
        Ok(self.push(
            b,
            d,
            out,
            Op::Attention {
                query,
                keys: keys.to_vec(),
                values: values.to_vec(),
                heads,
                scale,
                weights,
            },
            rg,
        ))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.backward_node(node, &g, &mut grads);
        }

        let mut out = Gradients {
            visited,
            ..Default::default()
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[idx]
                .take()
                .unwrap_or_else(|| vec![0.0; node.rows * node.cols]);
            match node.value {
                Value::Param(id) => {
                    out.params.insert(id, g);
                }
                Value::Owned(_) => {
                    out.leaves.insert(Var(idx), g);
                }
            }
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = cols;
                if self.rg(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.value(*b), true, da, 1.0);
                }
                if self.rg(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a), true, g, false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.rg(*row) {
                    let dr = slot(grads, *row, cols);
                    for gr in g.chunks(cols) {
                        add_into(dr, gr);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let da = slot(grads, *a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let db = slot(grads, *b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::MulRow(x, row) => {
                if self.rg(*x) {
                    let rv = self.value(*row);
                    let dx = slot(grads, *x, g.len());
                    for (dr, gr) in dx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, gi), m) in dr.iter_mut().zip(gr).zip(rv) {
                            *d += gi * m;
                        }
                    }
                }
                if self.rg(*row) {
                    let xv = self.value(*x);
                    let drow = slot(grads, *row, cols);
                    for (xr, gr) in xv.chunks(cols).zip(g.chunks(cols)) {
                        for ((d, gi), xi) in drow.iter_mut().zip(gr).zip(xr) {
                            *d += gi * xi;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = slot(grads, *x, g.len());
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }
            Op::Sigmoid(x) => {
                let y = match &node.value {
                    Value::Owned(y) => y,
                    Value::Param(_) => unreachable!(),
                };
                let dx = slot(grads, *x, g.len());
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = slot(grads, *x, g.len());
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let dx = slot(grads, *x, g.len());
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                if self.rg(*bias) {
                    let db = slot(grads, *bias, cols);
                    for gr in g.chunks(cols) {
                        add_into(db, gr);
                    }
                }
                if self.rg(*gain) {
                    let dg = slot(grads, *gain, cols);
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, gi), hi) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * hi;
                        }
                    }
                }
                if self.rg(*x) {
                    let gv = self.value(*gain);
                    let dx = slot(grads, *x, rows * cols);
                    let inv_c = 1.0 / cols as f64;
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..cols {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        for j in 0..cols {
                            let dh = gr[j] * gv[j];
                            dx[r * cols + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let [r, c] = self.shape(*logits);
                let s = g[0] / r as f64;
                let dl = slot(grads, *logits, r * c);
                for i in 0..r {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        dl[i * c + j] += s * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Attention {
                query,
                keys,
                values,
                heads,
                scale,
                weights,
            } => self.attention_backward(
                *query, keys, values, *heads, *scale, weights, rows, cols, g, grads,
            ),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        query: Var,
        keys: &[Var],
        values: &[Var],
        heads: usize,
        scale: f64,
        weights: &[f64],
        b: usize,
        d: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let n = keys.len();
        let hw = d / heads;
        let q = self.value(query);
        // d loss / d score, laid out like `weights`.
        let mut dscore = vec![0.0; b * heads * n];
        for r in 0..b {
            for h in 0..heads {
                let base = (r * heads + h) * n;
                let w = &weights[base..base + n];
                let mut dw = vec![0.0; n];
                for (i, v) in values.iter().enumerate() {
                    let vr = &self.value(*v)[r * d..(r + 1) * d];
                    dw[i] = (h * hw..(h + 1) * hw).map(|c| g[r * d + c] * vr[c]).sum();
                }
                let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    dscore[base + i] = w[i] * (dw[i] - dot);
                }
            }
        }
        for (i, v) in values.iter().enumerate() {
            if !self.rg(*v) {
                continue;
            }
            let dv = slot(grads, *v, b * d);
            for r in 0..b {
                for h in 0..heads {
                    let wi = weights[(r * heads + h) * n + i];
                    for c in h * hw..(h + 1) * hw {
                        dv[r * d + c] += wi * g[r * d + c];
                    }
                }
            }
        }
        for (i, k) in keys.iter().enumerate() {
            if !self.rg(*k) {
                continue;
            }
            let dk = slot(grads, *k, b * d);
            for r in 0..b {
                for h in 0..heads {
                    let ds = dscore[(r * heads + h) * n + i] * scale;
                    for c in h * hw..(h + 1) * hw {
                        dk[r * d + c] += ds * q[c];
                    }
                }
            }
        }
        if self.rg(query) {
            let mut dq = vec![0.0; d];
            for (i, k) in keys.iter().enumerate() {
                let kv = self.value(*k);
                for r in 0..b {
                    for h in 0..heads {
                        let ds = dscore[(r * heads + h) * n + i] * scale;
                        for c in h * hw..(h + 1) * hw {
                            dq[c] += ds * kv[r * d + c];
                        }
                    }
                }
            }
            add_into(slot(grads, query, d), &dq);
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

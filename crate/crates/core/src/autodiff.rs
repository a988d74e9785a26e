//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node replays the record in exact reverse
//! insertion order and returns the accumulated gradients. Graphs are rebuilt
//! for every step; parameters live outside the graph and are copied in as
//! leaves, so clearing a graph never touches them.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("values length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),
    #[error("empty operand in {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::BadLength {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    detail: format!("row of length {} among rows of length {cols}", row.len()),
                });
            }
            values.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    /// Row `r` of a matrix.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.values[r * cols..(r + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
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
    MatVec { w: Var, x: Var },
    Linear { x: Var, w: Var },
    AddRow { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddConst { x: Var },
    Relu { x: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Dot { a: Var, b: Var },
    Distance { a: Var, b: Var },
    RowMean { x: Var, rows: Vec<usize> },
    Concat { parts: Vec<Var> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.value(var).shape();
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got shape {shape:?}"),
            }),
        }
    }

    /// `W · x` for `W: [out × in]`, `x: [in]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (out, inp) = self.matrix_dims(w, "matvec")?;
        let xv = self.value(x);
        if xv.shape() != [inp] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                detail: format!("matrix is {out}x{inp} but vector has shape {:?}", xv.shape()),
            });
        }
        let wv = self.value(w).values();
        let xs = xv.values();
        let values = (0..out)
            .map(|o| dot(&wv[o * inp..(o + 1) * inp], xs))
            .collect();
        let rg = self.rg(&[w, x]);
        Ok(self.push(Tensor::vector(values), Op::MatVec { w, x }, rg))
    }

    /// Batched dense layer without bias: `X · Wᵀ` for `X: [b × in]`, `W: [out × in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (batch, inp) = self.matrix_dims(x, "linear")?;
        let (out, w_in) = self.matrix_dims(w, "linear")?;
        if inp != w_in {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                detail: format!("input has {inp} columns but weight expects {w_in}"),
            });
        }
        let xs = self.value(x).values();
        let ws = self.value(w).values();
        let mut values = Vec::with_capacity(batch * out);
        for r in 0..batch {
            let xr = &xs[r * inp..(r + 1) * inp];
            for o in 0..out {
                values.push(dot(xr, &ws[o * inp..(o + 1) * inp]));
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::matrix(batch, out, values)?, Op::Linear { x, w }, rg))
    }

    /// Adds `bias: [n]` to every row of `x: [b × n]` (or to `x: [n]`).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).len();
        let xv = self.value(x);
        if self.value(bias).shape().len() != 1 || xv.cols() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                detail: format!(
                    "bias shape {:?} against input shape {:?}",
                    self.value(bias).shape(),
                    xv.shape()
                ),
            });
        }
        let bs = self.value(bias).values();
        let values: Vec<f64> = xv
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bs[i % n])
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, values)?, Op::AddRow { x, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let values = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, values)?, Op::Add { a, b }, rg))
    }

    /// Sums any number of same-shaped nodes, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms.split_first().ok_or(AutodiffError::Empty("add_all"))?;
        rest.iter().try_fold(*first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let values = xv.values().iter().map(|v| v * factor).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            values,
        };
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    /// Adds a constant tensor of the same shape; the gradient passes through unchanged.
    pub fn add_const(&mut self, x: Var, offset: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != offset.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_const",
                detail: format!("{:?} vs {:?}", xv.shape(), offset.shape()),
            });
        }
        let values = xv
            .values()
            .iter()
            .zip(offset.values())
            .map(|(a, b)| a + b)
            .collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            values,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AddConst { x }, rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let values = xv.values().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            values,
        };
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("expected a vector of logits, got {:?}", lv.shape()),
            });
        }
        self.cross_entropy_impl(logits, vec![label])
    }

    /// Mean of `-log softmax(row)[label]` over the rows of `logits: [b × C]`.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, _) = self.matrix_dims(logits, "softmax_cross_entropy_rows")?;
        if rows != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy_rows",
                detail: format!("{rows} rows but {} labels", labels.len()),
            });
        }
        if rows == 0 {
            return Err(AutodiffError::Empty("softmax_cross_entropy_rows"));
        }
        self.cross_entropy_impl(logits, labels.to_vec())
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.cols();
        if classes == 0 {
            return Err(AutodiffError::Empty("softmax_cross_entropy"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange { label, classes });
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv.values()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + norm.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = total / labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
            rg,
        ))
    }

    /// Inner product of two same-length tensors (flattened).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                detail: format!("lengths {} and {}", av.len(), bv.len()),
            });
        }
        let v = dot(av.values(), bv.values());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot { a, b }, rg))
    }

    /// `‖a − b‖₂`; at coincident points the gradient is zero.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "euclidean_distance",
                detail: format!("lengths {} and {}", av.len(), bv.len()),
            });
        }
        let d = distance(av.values(), bv.values());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::Distance { a, b }, rg))
    }

    /// Mean of the selected rows of `x: [b × n]`, as a vector `[n]`.
    pub fn row_mean(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n_rows, cols) = self.matrix_dims(x, "row_mean")?;
        if rows.is_empty() {
            return Err(AutodiffError::Empty("row_mean"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_mean",
                detail: format!("row {r} out of {n_rows}"),
            });
        }
        let xs = self.value(x);
        let mut values = vec![0.0; cols];
        for &r in rows {
            for (acc, v) in values.iter_mut().zip(xs.row(r)) {
                *acc += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        values.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(values),
            Op::RowMean {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Flattens and concatenates nodes into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Empty("concat"));
        }
        let values: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).values().iter().copied())
            .collect();
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::vector(values),
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.shape().to_vec()));
        }
        if !out.item().is_finite() {
            return Err(AutodiffError::NonFiniteLoss(out.item()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatVec { w, x } => {
                    let wv = self.value(*w).values();
                    let xv = self.value(*x).values();
                    let inp = xv.len();
                    if self.requires_grad(*w) {
                        let gw = accum(&mut grads, *w, wv.len());
                        for (o, go) in g.iter().enumerate() {
                            for (j, xj) in xv.iter().enumerate() {
                                gw[o * inp + j] += go * xj;
                            }
                        }
                    }
                    if self.requires_grad(*x) {
                        let gx = accum(&mut grads, *x, inp);
                        for (o, go) in g.iter().enumerate() {
                            for (j, acc) in gx.iter_mut().enumerate() {
                                *acc += go * wv[o * inp + j];
                            }
                        }
                    }
                }
                Op::Linear { x, w } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let (batch, inp) = (xt.rows(), xt.cols());
                    let out = wt.rows();
                    let (xv, wv) = (xt.values(), wt.values());
                    if self.requires_grad(*w) {
                        let gw = accum(&mut grads, *w, wv.len());
                        for r in 0..batch {
                            let xr = &xv[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go != 0.0 {
                                    axpy(&mut gw[o * inp..(o + 1) * inp], go, xr);
                                }
                            }
                        }
                    }
                    if self.requires_grad(*x) {
                        let gx = accum(&mut grads, *x, xv.len());
                        for r in 0..batch {
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go != 0.0 {
                                    axpy(
                                        &mut gx[r * inp..(r + 1) * inp],
                                        go,
                                        &wv[o * inp..(o + 1) * inp],
                                    );
                                }
                            }
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    let n = self.value(*bias).len();
                    if self.requires_grad(*bias) {
                        let gb = accum(&mut grads, *bias, n);
                        for (k, gk) in g.iter().enumerate() {
                            gb[k % n] += gk;
                        }
                    }
                    if self.requires_grad(*x) {
                        add_into(accum(&mut grads, *x, g.len()), &g);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires_grad(*a) {
                        add_into(accum(&mut grads, *a, g.len()), &g);
                    }
                    if self.requires_grad(*b) {
                        add_into(accum(&mut grads, *b, g.len()), &g);
                    }
                }
                Op::Scale { x, factor } => {
                    let gx = accum(&mut grads, *x, g.len());
                    axpy(gx, *factor, &g);
                }
                Op::AddConst { x } => add_into(accum(&mut grads, *x, g.len()), &g),
                Op::Relu { x } => {
                    let xv = self.value(*x).values();
                    let gx = accum(&mut grads, *x, g.len());
                    for ((acc, gk), v) in gx.iter_mut().zip(&g).zip(xv) {
                        if *v > 0.0 {
                            *acc += gk;
                        }
                    }
                }
                Op::Sum { x } => {
                    let n = self.value(*x).len();
                    accum(&mut grads, *x, n).iter_mut().for_each(|v| *v += g[0]);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = self.value(*logits).cols();
                    let scale = g[0] / labels.len() as f64;
                    let gl = accum(&mut grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let k = r * classes + c;
                            let target = if c == label { 1.0 } else { 0.0 };
                            gl[k] += scale * (probs[k] - target);
                        }
                    }
                }
                Op::Dot { a, b } => {
                    if self.requires_grad(*a) {
                        let bv = self.value(*b).values();
                        axpy(accum(&mut grads, *a, bv.len()), g[0], bv);
                    }
                    if self.requires_grad(*b) {
                        let av = self.value(*a).values();
                        axpy(accum(&mut grads, *b, av.len()), g[0], av);
                    }
                }
                Op::Distance { a, b } => {
                    let d = node.value.item();
                    if d > 0.0 {
                        let av = self.value(*a).values();
                        let bv = self.value(*b).values();
                        let s = g[0] / d;
                        let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| s * (x - y)).collect();
                        if self.requires_grad(*a) {
                            add_into(accum(&mut grads, *a, diff.len()), &diff);
                        }
                        if self.requires_grad(*b) {
                            axpy(accum(&mut grads, *b, diff.len()), -1.0, &diff);
                        }
                    }
                }
                Op::RowMean { x, rows } => {
                    let xt = self.value(*x);
                    let cols = xt.cols();
                    let inv = 1.0 / rows.len() as f64;
                    let gx = accum(&mut grads, *x, xt.len());
                    for &r in rows {
                        axpy(&mut gx[r * cols..(r + 1) * cols], inv, &g);
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.requires_grad(*p) {
                            add_into(accum(&mut grads, *p, n), &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
            }
        }

        // Reachable or not, every trainable leaf reports a gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a trainable leaf. `None` for constants and interior nodes.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`], panicking if `var` is not a trainable leaf.
    pub fn wrt(&self, var: Var) -> &[f64] {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", var.0))
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in dst.iter_mut().zip(x) {
        *d += a * s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain Euclidean distance between two slices.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Checks analytic gradients of `build` against central finite differences.
///
/// `build` receives a fresh graph and one trainable leaf per entry of
/// `params`, and must return a scalar node.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&build, params)?;
    compare_with_finite_differences(&build, params, &analytic, eps)
}

/// Analytic gradient of `build` with respect to each parameter tensor.
pub fn analytic_gradients<F>(build: &F, params: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = build(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    Ok(vars.iter().map(|v| grads.wrt(*v).to_vec()).collect())
}

/// Compares supplied gradients with central differences of `build`.
pub fn compare_with_finite_differences<F>(
    build: &F,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| graph.constant(p.clone())).collect();
        let out = build(&mut graph, &vars)?;
        let v = graph.value(out);
        if v.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFiniteLoss(v));
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (p, grad) in analytic.iter().enumerate() {
        for (k, &analytic_k) in grad.iter().enumerate() {
            let orig = work[p].values[k];
            work[p].values[k] = orig + eps;
            let up = eval(&work)?;
            work[p].values[k] = orig - eps;
            let down = eval(&work)?;
            work[p].values[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic_k - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coordinates,
    })
}

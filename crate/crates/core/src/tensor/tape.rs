use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Gelu(usize),
    LayerNorm { x: usize, rstd: Vec<T> },
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<Option<usize>> },
    ConcatRows(Vec<usize>),
    Attention { q: usize, k: usize, v: usize, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    Im2colCausal { x: usize, batch: usize, seq: usize, kernel: usize },
    Sum(usize),
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Mse { pred: usize, target: usize },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Gelu(a) | Op::Reshape(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, .. } | Op::SliceCols { x, .. } | Op::GatherRows { x, .. } | Op::Im2colCausal { x, .. } => {
                vec![*x]
            }
            Op::ConcatRows(parts) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Mse { pred, target } => vec![*pred, *target],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and [`Tape::backward`] is a single reverse sweep.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: usize) -> &[T] {
        self.nodes[v].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let parents = op.parents();
        let needs_grad = match op {
            Op::Leaf | Op::Param(_) => value.requires_grad(),
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        if cfg!(debug_assertions) && !value.all_finite() {
            let inputs_finite = parents.iter().all(|&p| self.nodes[p].value.all_finite());
            assert!(!inputs_finite, "non-finite output from {op:?} on finite inputs");
        }
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; its gradient is never computed.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf)
    }

    /// Records a parameter. Gradients flow back into the store on
    /// [`Tape::backward`] when the stored tensor requires grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("stored tensor is well formed")
            .with_requires_grad(t.requires_grad());
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, n, p) = match (sa, sb) {
            ([m, n], [n2, p]) if n == n2 => (*m, *n, *p),
            _ => {
                return Err(Error::Shape(format!("matmul inner dimensions disagree: {sa:?} × {sb:?}")));
            }
        };
        let mut out = vec![T::zero(); m * p];
        T::gemm(m, n, p, self.data(a.0), false, self.data(b.0), false, T::zero(), &mut out);
        Ok(self.push(Tensor::new([m, p], out)?, Op::MatMul(a.0, b.0)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self.data(a.0).iter().zip(self.data(b.0)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.data(a.0).iter().map(|&x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a.0, s))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, what: &str) -> Result<(usize, usize)> {
        let (rows, cols) = self.value(a).rows_cols();
        if self.value(row).len() != cols || self.shape(a).is_empty() {
            return Err(Error::Shape(format!(
                "{what}: row of shape {:?} does not match trailing axis of {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        Ok((rows, cols))
    }

    /// `a + row`, broadcasting `row` over every leading index of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.row_broadcast(a, row, "add_row")?;
        let r = self.data(row.0);
        let data = self.data(a.0).iter().enumerate().map(|(i, &x)| x + r[i % cols]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a.0, row.0)))
    }

    /// `a ⊙ row`, broadcasting `row` over every leading index of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.row_broadcast(a, row, "mul_row")?;
        let r = self.data(row.0);
        let data = self.data(a.0).iter().enumerate().map(|(i, &x)| x * r[i % cols]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::MulRow(a.0, row.0)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
        let data =
            self.data(a.0).iter().map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh())).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a.0))
    }

    /// Normalizes every slice along the trailing axis to zero mean and unit
    /// population variance. No affine transform is applied.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let (rows, d) = self.value(a).rows_cols();
        if d == 0 || self.shape(a).is_empty() {
            return Err(Error::Shape(format!("layer_norm needs a non-empty trailing axis, got {:?}", self.shape(a))));
        }
        let x = self.data(a.0);
        let dn = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x: a.0, rstd }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a.0)))
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("slice_cols expects 2-d input, got {s:?}"))),
        };
        if start + len > cols {
            return Err(Error::Shape(format!("columns {start}..{} out of range for width {cols}", start + len)));
        }
        let x = self.data(a.0);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new([rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { x: a.0, start }))
    }

    /// Selects rows of a 2-d tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("gather_rows expects 2-d input, got {s:?}"))),
        };
        let x = self.data(a.0);
        let mut out = vec![T::zero(); idx.len() * cols];
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(Error::Index(format!("row {i} out of range for {rows} rows")));
                }
                out[o * cols..(o + 1) * cols].copy_from_slice(&x[i * cols..(i + 1) * cols]);
            }
        }
        let value = Tensor::new([idx.len(), cols], out)?;
        Ok(self.push(value, Op::GatherRows { x: a.0, idx: idx.to_vec() }))
    }

    /// Stacks 2-d tensors with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first().map(|&p| self.shape(p)) {
            Some([_, c]) => *c,
            _ => return Err(Error::shape("concat_rows needs at least one 2-d tensor")),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            match self.shape(p) {
                [r, c] if *c == cols => rows += r,
                s => return Err(Error::Shape(format!("concat_rows: {s:?} does not have width {cols}"))),
            }
            out.extend_from_slice(self.data(p.0));
        }
        let value = Tensor::new([rows, cols], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Multi-head causal self-attention over `[batch·seq, d]` projections.
    /// Position `t` attends to positions `≤ t` of its own sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let d = match self.shape(q) {
            [r, d] if *r == batch * seq => *d,
            s => return Err(Error::Shape(format!("attention expects [{}, d], got {s:?}", batch * seq))),
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.data(q.0), self.data(k.0), self.data(v.0));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        *s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        z = z + *s;
                    }
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[p_base + i * seq + j] = p;
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        o.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + p * x);
                    }
                }
            }
        }
        let value = Tensor::new([batch * seq, d], out)?;
        Ok(self.push(value, Op::Attention { q: q.0, k: k.0, v: v.0, batch, seq, heads, probs }))
    }

    /// Causal im2col: row `(b, t)` holds `x[b, t-j, :]` for `j in 0..kernel`
    /// (zeros before the sequence start), lag-major.
    pub fn im2col_causal(&mut self, x: Var, batch: usize, seq: usize, kernel: usize) -> Result<Var> {
        let c = match self.shape(x) {
            [r, c] if *r == batch * seq => *c,
            s => return Err(Error::Shape(format!("im2col expects [{}, c], got {s:?}", batch * seq))),
        };
        if kernel == 0 || seq < kernel {
            return Err(Error::Shape(format!("sequence length {seq} shorter than kernel {kernel}")));
        }
        let xd = self.data(x.0);
        let w = kernel * c;
        let mut out = vec![T::zero(); batch * seq * w];
        for b in 0..batch {
            for t in 0..seq {
                for j in 0..kernel.min(t + 1) {
                    let src = &xd[(b * seq + t - j) * c..][..c];
                    out[(b * seq + t) * w + j * c..][..c].copy_from_slice(src);
                }
            }
        }
        let value = Tensor::new([batch * seq, w], out)?;
        Ok(self.push(value, Op::Im2colCausal { x: x.0, batch, seq, kernel }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a.0).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        self.cross_entropy_masked(logits, &targets)
    }

    /// Softmax cross-entropy averaged over rows whose target is `Some`.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, classes) = match self.shape(logits) {
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("cross-entropy expects [batch, classes], got {s:?}"))),
        };
        if targets.len() != rows {
            return Err(Error::Shape(format!("{} targets for {rows} rows of logits", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::Index(format!("label {bad} outside [0, {classes})")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Degenerate("every target is masked".into()));
        }
        let x = self.data(logits.0);
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            if let Some(t) = targets[r] {
                total = total + (z.ln() - (row[t] - max));
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        let op = Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, count };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let n = self.value(pred).len();
        if n == 0 {
            return Err(Error::shape("mse of empty tensors"));
        }
        let s: T = self.data(pred.0).iter().zip(self.data(target.0)).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let loss = s / T::from_usize(n).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred: pred.0, target: target.0 }))
    }

    /// Reverse sweep from a scalar `loss`, adding parameter gradients into
    /// `store`. Repeated calls accumulate until the store is zeroed.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, store);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore<T>) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let t = store.get_mut(*id);
                if t.requires_grad() {
                    t.accumulate_grad(g);
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape_of(a)[0], self.shape_of(a)[1]);
                let n = self.shape_of(b)[1];
                if self.wants(a) {
                    let da = slot(grads, a, m * k);
                    T::gemm(m, n, k, g, false, self.data(b), true, T::one(), da);
                }
                if self.wants(b) {
                    let db = slot(grads, b, k * n);
                    T::gemm(k, m, n, self.data(a), true, g, false, T::one(), db);
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(p) {
                        add_into(slot(grads, p, g.len()), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.wants(b) {
                    slot(grads, b, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x);
                }
            }
            &Op::Mul(a, b) => {
                let (xa, xb) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let d = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        d[j] = d[j] + g[j] * xb[j];
                    }
                }
                if self.wants(b) {
                    let d = slot(grads, b, g.len());
                    for j in 0..g.len() {
                        d[j] = d[j] + g[j] * xa[j];
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * s);
                }
            }
            &Op::AddRow(a, row) => {
                if self.wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.wants(row) {
                    let cols = self.data(row).len();
                    let d = slot(grads, row, cols);
                    for (j, &x) in g.iter().enumerate() {
                        d[j % cols] = d[j % cols] + x;
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let r = self.data(row);
                let cols = r.len();
                if self.wants(a) {
                    let d = slot(grads, a, g.len());
                    for (j, &x) in g.iter().enumerate() {
                        d[j] = d[j] + x * r[j % cols];
                    }
                }
                if self.wants(row) {
                    let xa = self.data(a);
                    let d = slot(grads, row, cols);
                    for (j, &x) in g.iter().enumerate() {
                        d[j % cols] = d[j % cols] + x * xa[j];
                    }
                }
            }
            &Op::Gelu(a) => {
                if self.wants(a) {
                    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                    let three = T::lit(3.0);
                    let x = self.data(a);
                    let d = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        let v = x[j];
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        let dy = half * (T::one() + t) + half * v * dt;
                        d[j] = d[j] + g[j] * dy;
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.wants(*x) {
                    let dcols = *self.shape_of(*x).last().unwrap();
                    let dn = T::from_usize(dcols).unwrap();
                    let d = slot(grads, *x, g.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * dcols..(r + 1) * dcols];
                        let yy = &y[r * dcols..(r + 1) * dcols];
                        let mean_g = gy.iter().copied().sum::<T>() / dn;
                        let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..dcols {
                            let v = &mut d[r * dcols + j];
                            *v = *v + rs * (gy[j] - mean_g - yy[j] * mean_gy);
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if self.wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
            }
            &Op::SliceCols { x, start } => {
                if self.wants(x) {
                    let cols = self.shape_of(x)[1];
                    let len = node.value.shape()[1];
                    let rows = node.value.shape()[0];
                    let d = slot(grads, x, rows * cols);
                    for r in 0..rows {
                        for c in 0..len {
                            let v = &mut d[r * cols + start + c];
                            *v = *v + g[r * len + c];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let cols = self.shape_of(*x)[1];
                    let d = slot(grads, *x, self.data(*x).len());
                    for (o, src) in idx.iter().enumerate() {
                        if let Some(s) = *src {
                            add_into(&mut d[s * cols..(s + 1) * cols], &g[o * cols..(o + 1) * cols]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.data(p).len();
                    if self.wants(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, grads, (*q, *k, *v), (*batch, *seq, *heads), probs);
            }
            &Op::Im2colCausal { x, batch, seq, kernel } => {
                if self.wants(x) {
                    let c = self.shape_of(x)[1];
                    let w = kernel * c;
                    let d = slot(grads, x, batch * seq * c);
                    for b in 0..batch {
                        for t in 0..seq {
                            for j in 0..kernel.min(t + 1) {
                                let src = &g[(b * seq + t) * w + j * c..][..c];
                                add_into(&mut d[(b * seq + t - j) * c..][..c], src);
                            }
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    let n = self.data(a).len();
                    slot(grads, a, n).iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if self.wants(*logits) {
                    let classes = self.shape_of(*logits)[1];
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let d = slot(grads, *logits, probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            let v = &mut d[r * classes + c];
                            *v = *v + (probs[r * classes + c] - onehot) * scale;
                        }
                    }
                }
            }
            &Op::Mse { pred, target } => {
                let (p, t) = (self.data(pred), self.data(target));
                let scale = T::lit(2.0) * g[0] / T::from_usize(p.len()).unwrap();
                if self.wants(pred) {
                    let d = slot(grads, pred, p.len());
                    for j in 0..p.len() {
                        d[j] = d[j] + (p[j] - t[j]) * scale;
                    }
                }
                if self.wants(target) {
                    let d = slot(grads, target, p.len());
                    for j in 0..p.len() {
                        d[j] = d[j] - (p[j] - t[j]) * scale;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (usize, usize, usize),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[T],
    ) {
        let d = self.shape_of(q)[1];
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let n = batch * seq * d;
        let mut dq = vec![T::zero(); n];
        let mut dk = vec![T::zero(); n];
        let mut dv = vec![T::zero(); n];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                    let prow = &probs[p_base + i * seq..][..seq];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        dot = dot + dp[j] * prow[j];
                        let dvj = &mut dv[(b * seq + j) * d + h * dh..][..dh];
                        dvj.iter_mut().zip(gi).for_each(|(o, &x)| *o = *o + prow[j] * x);
                    }
                    let qi_off = (b * seq + i) * d + h * dh;
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj_off = (b * seq + j) * d + h * dh;
                        for c in 0..dh {
                            dq[qi_off + c] = dq[qi_off + c] + ds * kd[kj_off + c];
                            dk[kj_off + c] = dk[kj_off + c] + ds * qd[qi_off + c];
                        }
                    }
                }
            }
        }
        for (p, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(p) {
                add_into(slot(grads, p, n), &buf);
            }
        }
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut [T] {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

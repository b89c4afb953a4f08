//! Reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends a node holding its output value and whatever it needs to
//! replay the local derivative. Nodes are only ever appended, so the node vector is
//! already in topological order and [`Tape::backward`] is a single reverse sweep.

use super::float::{matmul_into, Float};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize, cols: usize },
    Scale { x: usize, c: T },
    Gelu { x: usize },
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<T>, cols: usize },
    Embedding { table: usize, ids: Vec<usize>, cols: usize },
    GatherRows { x: usize, idx: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize, cols: usize },
    Sum { x: usize },
    Mean { x: usize },
    Softmax { x: usize, outer: usize, axis: usize, inner: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    GatherCols { x: usize, idx: Vec<usize>, cols_in: usize, k: usize },
    GatherElems { x: usize, idx: Vec<usize> },
    MulRows { x: usize, s: usize, cols: usize },
    ScatterAddRows { parts: Vec<(usize, Vec<usize>)>, cols: usize },
    Attention { q: usize, k: usize, v: usize, geom: AttnGeometry, probs: Vec<T> },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeometry {
    batch: usize,
    seq: usize,
    heads: usize,
    width: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward sweep, indexed by tape position.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to `var`, or `None` when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Writes parameter gradients into `store`; parameters not reached get an all-zero grad.
    pub fn write_params(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        store.zero_grads();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                let t = store.tensor_mut(*id);
                let mut acc = t.grad().expect("zeroed above").to_vec();
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
                t.set_grad(acc).expect("same length");
            }
        }
    }
}

fn check_finite<T: Float>(op: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

fn accum<'g, T: Float>(grads: &'g mut [Option<Vec<T>>], j: usize, len: usize) -> &'g mut [T] {
    grads[j].get_or_insert_with(|| vec![T::zero(); len])
}

fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &str, value: Tensor<T>, node_op: Op<T>, requires_grad: bool) -> Result<Var> {
        check_finite(op, value.data())?;
        self.nodes.push(Node { value, op: node_op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| Error::shape(op, format!("expected rank-2 operand, got {:?}", self.shape(v))))
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Differentiable input (gradient available through [`Gradients::get`]).
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Records a parameter from `store`; frozen parameters are recorded without gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let mut value = store.tensor(id).clone();
        value.clear_grad();
        self.push(store.name(id), value, Op::Param(id), store.is_trainable(id))
    }

    /// Records every parameter of `store`, returning handles indexed by [`ParamId`].
    pub fn params(&mut self, store: &ParamStore<T>) -> Result<Vec<Var>> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.data(a), false, self.data(b), false, &mut out, m, k, n, false);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", Tensor::new(shape, out)?, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x - *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", Tensor::new(shape, out)?, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a.0, b.0), rg)
    }

    /// Adds a length-`cols` bias to every row of an `rows×cols` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("add_bias", x)?;
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_bias", format!("bias {:?} for {rows}x{cols}", self.shape(bias))));
        }
        let b = self.data(bias);
        let out: Vec<T> = self.data(x).chunks(cols).flat_map(|row| row.iter().zip(b).map(|(v, c)| *v + *c)).collect();
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", Tensor::new(vec![rows, cols], out)?, Op::AddBias { x: x.0, bias: bias.0, cols }, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|v| *v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { x: x.0, c }, rg)
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|v| gelu(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu { x: x.0 }, rg)
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.dims2("rms_norm", x)?;
        if self.shape(gain) != [cols] {
            return Err(Error::shape("rms_norm", format!("gain {:?} for width {cols}", self.shape(gain))));
        }
        let g = self.data(gain);
        let mut out = Vec::with_capacity(rows * cols);
        let mut inv_rms = Vec::with_capacity(rows);
        let n = T::of(cols as f64);
        for row in self.data(x).chunks(cols) {
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / n;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(v, gg)| *v * r * *gg));
        }
        let rg = self.rg(x) || self.rg(gain);
        self.push(
            "rms_norm",
            Tensor::new(vec![rows, cols], out)?,
            Op::RmsNorm { x: x.0, gain: gain.0, inv_rms, cols },
            rg,
        )
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = self.dims2("embedding", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("token id {bad} out of range for vocabulary of {vocab}")));
        }
        let t = self.data(table);
        let out: Vec<T> = ids.iter().flat_map(|&i| t[i * cols..(i + 1) * cols].iter().copied()).collect();
        let rg = self.rg(table);
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::Embedding { table: table.0, ids: ids.to_vec(), cols },
            rg,
        )
    }

    /// Selects rows `idx` of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("gather_rows", x)?;
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let d = self.data(x);
        let out: Vec<T> = idx.iter().flat_map(|&i| d[i * cols..(i + 1) * cols].iter().copied()).collect();
        let rg = self.rg(x);
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows { x: x.0, idx: idx.to_vec(), cols },
            rg,
        )
    }

    /// Concatenates matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of zero parts"))?;
        let (_, cols) = self.dims2("concat_rows", *first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("width {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_rows", x)?;
        if start + len > rows {
            return Err(Error::shape("slice_rows", format!("{start}..{} of {rows}", start + len)));
        }
        let out = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        self.push("slice_rows", Tensor::new(vec![len, cols], out)?, Op::SliceRows { x: x.0, start, cols }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s: T = self.data(x).iter().copied().sum::<T>() / T::of(n as f64);
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean { x: x.0 }, rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let axis_len = shape[axis];
        if axis_len == 0 {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        check_finite("softmax input", self.data(x))?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * axis_len + a) * inner + i;
                let max = (0..axis_len).map(|a| d[at(a)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for a in 0..axis_len {
                    let e = (d[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..axis_len {
                    out[at(a)] = out[at(a)] / z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            "softmax",
            Tensor::new(shape, out)?,
            Op::Softmax { x: x.0, outer, axis: axis_len, inner },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` over the masked-in rows of `logits` (`T×V`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy with every position masked out"));
        }
        let d = self.data(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::invalid(format!("target id {} out of range for {vocab} classes", targets[r])));
            }
            let row = &d[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|v| (*v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[targets[r]];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (*v - log_z).exp();
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            rg,
        )
    }

    /// Per-row column gather: `out[r, j] = x[r, idx[r*k + j]]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("gather_cols", x)?;
        if idx.len() != rows * k {
            return Err(Error::shape("gather_cols", format!("{} indices for {rows}x{k}", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&c| c >= cols) {
            return Err(Error::shape("gather_cols", format!("column {bad} of {cols}")));
        }
        let d = self.data(x);
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &c)| d[(i / k) * cols + c]).collect();
        let rg = self.rg(x);
        self.push(
            "gather_cols",
            Tensor::new(vec![rows, k], out)?,
            Op::GatherCols { x: x.0, idx: idx.to_vec(), cols_in: cols, k },
            rg,
        )
    }

    /// Flat-index gather into a rank-1 tensor.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let d = self.data(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= d.len()) {
            return Err(Error::shape("gather_elems", format!("index {bad} of {}", d.len())));
        }
        let out: Vec<T> = idx.iter().map(|&i| d[i]).collect();
        let rg = self.rg(x);
        self.push("gather_elems", Tensor::new(vec![idx.len()], out)?, Op::GatherElems { x: x.0, idx: idx.to_vec() }, rg)
    }

    /// Scales row `r` of `x` by `s[r]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("mul_rows", x)?;
        if self.shape(s) != [rows] {
            return Err(Error::shape("mul_rows", format!("scales {:?} for {rows} rows", self.shape(s))));
        }
        let sc = self.data(s);
        let out: Vec<T> = self
            .data(x)
            .chunks(cols.max(1))
            .zip(sc)
            .flat_map(|(row, c)| row.iter().map(move |v| *v * *c))
            .collect();
        let rg = self.rg(x) || self.rg(s);
        self.push("mul_rows", Tensor::new(vec![rows, cols], out)?, Op::MulRows { x: x.0, s: s.0, cols }, rg)
    }

    /// Sums each part's rows into the listed destination rows of a zero `rows×cols` matrix.
    pub fn scatter_add_rows(&mut self, parts: &[(Var, Vec<usize>)], rows: usize, cols: usize) -> Result<Var> {
        let mut out = vec![T::zero(); rows * cols];
        for (p, dest) in parts {
            let (r, c) = self.dims2("scatter_add_rows", *p)?;
            if c != cols || r != dest.len() {
                return Err(Error::shape("scatter_add_rows", format!("part {r}x{c} with {} destinations", dest.len())));
            }
            if let Some(bad) = dest.iter().find(|&&d| d >= rows) {
                return Err(Error::shape("scatter_add_rows", format!("destination {bad} of {rows}")));
            }
            let d = self.data(*p);
            for (src, &dst) in d.chunks(cols.max(1)).zip(dest) {
                out[dst * cols..(dst + 1) * cols].iter_mut().zip(src).for_each(|(o, v)| *o += *v);
            }
        }
        let rg = parts.iter().any(|(p, _)| self.rg(*p));
        self.push(
            "scatter_add_rows",
            Tensor::new(vec![rows, cols], out)?,
            Op::ScatterAddRows { parts: parts.iter().map(|(p, d)| (p.0, d.clone())).collect(), cols },
            rg,
        )
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(batch*seq)×width`; row `b*seq + t` is position `t` of sequence `b`.
    /// Position `t` attends to positions `0..=t` of its own sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.dims2("causal_attention", q)?;
        if self.shape(k) != [rows, width] || self.shape(v) != [rows, width] {
            return Err(Error::shape("causal_attention", "q, k, v must share a shape".to_string()));
        }
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("{rows}x{width} with batch {batch}, seq {seq}, heads {heads}"),
            ));
        }
        let geom = AttnGeometry { batch, seq, heads, width };
        let dh = width / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * width + col..][..dh];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(b * seq + j) * width + col..][..dh];
                        *s = qi.iter().zip(kj).map(|(a, c)| *a * *c).sum::<T>() * scale;
                        max = max.max(*s);
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut z = T::zero();
                    for j in 0..=i {
                        p[j] = (scores[j] - max).exp();
                        z += p[j];
                    }
                    let o = &mut out[(b * seq + i) * width + col..][..dh];
                    for j in 0..=i {
                        p[j] = p[j] / z;
                        let vj = &vd[(b * seq + j) * width + col..][..dh];
                        o.iter_mut().zip(vj).for_each(|(acc, val)| *acc += p[j] * *val);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            "causal_attention",
            Tensor::new(vec![rows, width], out)?,
            Op::Attention { q: q.0, k: k.0, v: v.0, geom, probs },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward, then write parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        grads.write_params(self, store);
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let da = accum(grads, *a, m * k);
                    matmul_into(g, false, val(*b), true, da, m, n, k, true);
                }
                if rg(*b) {
                    let db = accum(grads, *b, k * n);
                    matmul_into(val(*a), true, g, false, db, k, m, n, true);
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if rg(j) {
                        accum(grads, j, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += *x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accum(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += *x);
                }
                if rg(*b) {
                    accum(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d -= *x);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let other = val(*b);
                    accum(grads, *a, g.len()).iter_mut().zip(g.iter().zip(other)).for_each(|(d, (x, o))| *d += *x * *o);
                }
                if rg(*b) {
                    let other = val(*a);
                    accum(grads, *b, g.len()).iter_mut().zip(g.iter().zip(other)).for_each(|(d, (x, o))| *d += *x * *o);
                }
            }
            Op::AddBias { x, bias, cols } => {
                if rg(*x) {
                    accum(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += *v);
                }
                if rg(*bias) {
                    let db = accum(grads, *bias, *cols);
                    for row in g.chunks(*cols) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                    }
                }
            }
            Op::Scale { x, c } => {
                if rg(*x) {
                    accum(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += *v * *c);
                }
            }
            Op::Gelu { x } => {
                if rg(*x) {
                    let xs = val(*x);
                    accum(grads, *x, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(xs))
                        .for_each(|(d, (v, xv))| *d += *v * gelu_grad(*xv));
                }
            }
            Op::RmsNorm { x, gain, inv_rms, cols } => {
                let cols = *cols;
                let xs = val(*x);
                let gs = val(*gain);
                if rg(*x) {
                    let n = T::of(cols as f64);
                    let dx = accum(grads, *x, xs.len());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xs[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = xr.iter().zip(gr).zip(gs).map(|((xv, gv), gg)| *xv * *gv * *gg).sum();
                        let coef = inv * inv * inv * dot / n;
                        for c in 0..cols {
                            dx[r * cols + c] += inv * gs[c] * gr[c] - coef * xr[c];
                        }
                    }
                }
                if rg(*gain) {
                    let dg = accum(grads, *gain, cols);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xs[r * cols + c] * inv;
                        }
                    }
                }
            }
            Op::Embedding { table, ids, cols } => {
                if rg(*table) {
                    let len = self.nodes[*table].value.len();
                    let dt = accum(grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * cols..(id + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, v)| *d += *v);
                    }
                }
            }
            Op::GatherRows { x, idx, cols } => {
                if rg(*x) {
                    let len = self.nodes[*x].value.len();
                    let dx = accum(grads, *x, len);
                    for (r, &src) in idx.iter().enumerate() {
                        dx[src * cols..(src + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, v)| *d += *v);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if rg(p) {
                        accum(grads, p, len).iter_mut().zip(&g[offset..offset + len]).for_each(|(d, v)| *d += *v);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start, cols } => {
                if rg(*x) {
                    let len = self.nodes[*x].value.len();
                    let dx = accum(grads, *x, len);
                    dx[start * cols..start * cols + g.len()].iter_mut().zip(g).for_each(|(d, v)| *d += *v);
                }
            }
            Op::Sum { x } => {
                if rg(*x) {
                    let len = self.nodes[*x].value.len();
                    accum(grads, *x, len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if rg(*x) {
                    let len = self.nodes[*x].value.len();
                    let share = g[0] / T::of(len as f64);
                    accum(grads, *x, len).iter_mut().for_each(|d| *d += share);
                }
            }
            Op::Softmax { x, outer, axis, inner } => {
                if rg(*x) {
                    let y = node.value.data();
                    let dx = accum(grads, *x, y.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |a: usize| (o * axis + a) * inner + i;
                            let dot: T = (0..*axis).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..*axis {
                                dx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                if rg(*logits) {
                    let vocab = probs.len() / targets.len();
                    let scale = g[0] / T::of(*count as f64);
                    let dl = accum(grads, *logits, probs.len());
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..vocab {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[r * vocab + c] += (probs[r * vocab + c] - onehot) * scale;
                        }
                    }
                }
            }
            Op::GatherCols { x, idx, cols_in, k } => {
                if rg(*x) {
                    let len = self.nodes[*x].value.len();
                    let dx = accum(grads, *x, len);
                    for (i, &c) in idx.iter().enumerate() {
                        dx[(i / k) * cols_in + c] += g[i];
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if rg(*x) {
                    let len = self.nodes[*x].value.len();
                    let dx = accum(grads, *x, len);
                    for (i, &src) in idx.iter().enumerate() {
                        dx[src] += g[i];
                    }
                }
            }
            Op::MulRows { x, s, cols } => {
                let cols = *cols;
                if rg(*x) {
                    let sc = val(*s);
                    let dx = accum(grads, *x, g.len());
                    for (r, c) in sc.iter().enumerate() {
                        dx[r * cols..(r + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, v)| *d += *v * *c);
                    }
                }
                if rg(*s) {
                    let xs = val(*x);
                    let ds = accum(grads, *s, xs.len() / cols.max(1));
                    for (r, d) in ds.iter_mut().enumerate() {
                        *d += xs[r * cols..(r + 1) * cols].iter().zip(&g[r * cols..(r + 1) * cols]).map(|(a, b)| *a * *b).sum::<T>();
                    }
                }
            }
            Op::ScatterAddRows { parts, cols } => {
                for (p, dest) in parts {
                    if rg(*p) {
                        let dp = accum(grads, *p, dest.len() * cols);
                        for (r, &dst) in dest.iter().enumerate() {
                            dp[r * cols..(r + 1) * cols].iter_mut().zip(&g[dst * cols..(dst + 1) * cols]).for_each(|(d, v)| *d += *v);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.attention_backward(*q, *k, *v, *geom, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        geom: AttnGeometry,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttnGeometry { batch, seq, heads, width } = geom;
        let dh = width / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qd = self.nodes[q].value.data();
        let kd = self.nodes[k].value.data();
        let vd = self.nodes[v].value.data();
        let n = qd.len();
        let mut dq = vec![T::zero(); n];
        let mut dk = vec![T::zero(); n];
        let mut dv = vec![T::zero(); n];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let go = &g[(b * seq + i) * width + col..][..dh];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        let vj = &vd[(b * seq + j) * width + col..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(a, c)| *a * *c).sum();
                        dot += p[j] * dp[j];
                        let dvj = &mut dv[(b * seq + j) * width + col..][..dh];
                        dvj.iter_mut().zip(go).for_each(|(d, x)| *d += p[j] * *x);
                    }
                    let qi = &qd[(b * seq + i) * width + col..][..dh];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &kd[(b * seq + j) * width + col..][..dh];
                        let dqi = &mut dq[(b * seq + i) * width + col..][..dh];
                        dqi.iter_mut().zip(kj).for_each(|(d, x)| *d += ds * *x);
                        let dkj = &mut dk[(b * seq + j) * width + col..][..dh];
                        dkj.iter_mut().zip(qi).for_each(|(d, x)| *d += ds * *x);
                    }
                }
            }
        }
        for (j, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[j].requires_grad {
                accum(grads, j, n).iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0f64)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let s = tape.softmax(a, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = tape.constant(t(&[2], &[2.0, 1.0])).unwrap();
        let s = tape.softmax(b, 0).unwrap();
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        let want = [e2 / (e2 + e1), e1 / (e2 + e1)];
        for (v, w) in tape.value(s).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
        assert!((want[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::<f64>::zeros(vec![2, 0])).unwrap();
        assert!(tape.softmax(e, 1).is_err());
        assert!(tape.softmax(e, 2).is_err());
        assert!(tape.constant(t(&[2], &[f64::NAN, 1.0])).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 2.0, 1.0, 0.0])).unwrap();
        let s = tape.softmax(a, 0).unwrap();
        let d = tape.value(s).data().to_vec();
        for c in 0..3 {
            assert!((d[c] + d[3 + c] - 1.0).abs() < 1e-12);
        }
        assert!((d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::<f64>::zeros(vec![3, 16])).unwrap();
        let ce = tape.cross_entropy(l, &[1, 2, 3], &[true, true, true]).unwrap();
        assert!((tape.value(ce).item() - 16f64.ln()).abs() < 1e-12);
        assert!((16f64.ln() - 2.7726).abs() < 1e-4);

        let mut v = vec![0.0; 8];
        v[5] = 30.0;
        let l = tape.constant(t(&[1, 8], &v)).unwrap();
        let ce = tape.cross_entropy(l, &[5], &[true]).unwrap();
        assert!(tape.value(ce).item() < 1e-9);

        assert!(tape.cross_entropy(l, &[5], &[false]).is_err());
        assert!(tape.cross_entropy(l, &[8], &[true]).is_err());
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let base = [0.1, -0.3, 0.7, 0.2, 0.5, -1.0];
        let mut changed = base;
        changed[3] = 9.0;
        changed[4] = -4.0;
        let mut out = Vec::new();
        for data in [base, changed] {
            let mut tape = Tape::new();
            let l = tape.input(t(&[2, 3], &data)).unwrap();
            let ce = tape.cross_entropy(l, &[2, 0], &[true, false]).unwrap();
            let g = tape.backward(ce).unwrap();
            out.push((tape.value(ce).item(), g.get(l).unwrap().to_vec()));
        }
        assert_eq!(out[0].0, out[1].0);
        assert_eq!(&out[0].1[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let logits = [0.3, -1.2, 2.0, 0.5, 0.0, 0.1, -0.4, 1.5];
        let targets = [2, 3];
        let mut tape = Tape::new();
        let l = tape.input(t(&[2, 4], &logits)).unwrap();
        let ce = tape.cross_entropy(l, &targets, &[true, true]).unwrap();
        let g = tape.backward(ce).unwrap();
        let grad = g.get(l).unwrap();
        for r in 0..2 {
            let row = &logits[r * 4..(r + 1) * 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..4 {
                let p = row[c].exp() / z;
                let want = (p - if c == targets[r] { 1.0 } else { 0.0 }) / 2.0;
                assert!((grad[r * 4 + c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn unreached_parameter_gets_zero_grad() {
        let mut store = ParamStore::new();
        let used = store.insert("used", t(&[2], &[1.0, 2.0])).unwrap();
        let unused = store.insert("unused", t(&[2], &[3.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, used).unwrap();
        let _ = tape.param(&store, unused).unwrap();
        let s = tape.sum(u).unwrap();
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.tensor(used).grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(store.tensor(unused).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_checks_fail_fast() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = tape.input(t(&[2, 3], &[0.0; 6])).unwrap();
        assert!(tape.matmul(a, b).is_err());
        let c = tape.input(t(&[3], &[0.0; 3])).unwrap();
        assert!(tape.add(a, c).is_err());
        assert!(tape.add_bias(a, b).is_err());
        assert!(tape.gather_rows(a, &[2]).is_err());
        assert!(tape.embedding(a, &[5]).is_err());
    }

    #[test]
    fn attention_single_position_returns_value() {
        let mut tape = Tape::new();
        let q = tape.input(t(&[1, 4], &[0.3, -0.1, 2.0, 1.0])).unwrap();
        let k = tape.input(t(&[1, 4], &[1.0, 0.5, -0.2, 0.0])).unwrap();
        let v = tape.input(t(&[1, 4], &[7.0, -3.0, 0.25, 1.5])).unwrap();
        let o = tape.causal_attention(q, k, v, 1, 1, 2).unwrap();
        assert_eq!(tape.value(o).data(), tape.value(v).data());
    }
}

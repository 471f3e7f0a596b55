//! Tape-based reverse-mode differentiation.
//!
//! Values are computed eagerly as ops are recorded, so the tape doubles as the
//! forward pass. `backward` walks the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a gradient leaf.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, NumericsError, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MulConst(Var, Arc<Tensor<T>>),
    MatMul(Var, Var),
    Transpose(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<T>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    Reshape(Var),
    CrossEntropy(Var, Vec<Option<usize>>, Tensor<T>, usize),
    BceWithLogits(Var, Tensor<T>, Vec<T>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation graph for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    training: bool,
    rng: RefCell<Option<ChaCha8Rng>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            training: false,
            rng: RefCell::new(None),
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            training: true,
            rng: RefCell::new(Some(rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&self, t: Arc<Tensor<T>>) -> Var {
        self.push_shared(t, Op::Leaf, false)
    }

    /// Gradient leaf.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf_shared(&self, t: Arc<Tensor<T>>) -> Var {
        self.push_shared(t, Op::Leaf, true)
    }

    // ---- elementwise --------------------------------------------------

    fn binary_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va.shape(), vb.shape()));
        }
        let out = va.zip_map(&vb, f);
        Ok(self.push(out, make(a, b), self.needs(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a[i, j] + row[j]` for a matrix `a` and a vector `row`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        if vr.numel() != c {
            return Err(mismatch("add_row", va.shape(), vr.shape()));
        }
        let mut out = (*va).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vr.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow(a, row), self.needs(&[a, row])))
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        if vr.numel() != c {
            return Err(mismatch("mul_row", va.shape(), vr.shape()));
        }
        let mut out = (*va).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vr.data()[i % c];
        }
        Ok(self.push(out, Op::MulRow(a, row), self.needs(&[a, row])))
    }

    /// `a[i, j] * col[i]` where `col` has one entry per row of `a`.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var, NumericsError> {
        let (va, vc) = (self.value(a), self.value(col));
        let (r, c) = (va.rows(), va.cols());
        if vc.numel() != r {
            return Err(mismatch("mul_col", va.shape(), vc.shape()));
        }
        let mut out = (*va).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vc.data()[i / c.max(1)];
        }
        Ok(self.push(out, Op::MulCol(a, col), self.needs(&[a, col])))
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var, NumericsError> {
        let (va, vs) = (self.value(a), self.value(s));
        if vs.numel() != 1 {
            return Err(mismatch("scale_by", va.shape(), vs.shape()));
        }
        let k = vs.item();
        Ok(self.push(va.map(|x| x * k), Op::ScaleBy(a, s), self.needs(&[a, s])))
    }

    pub fn scale(&self, a: Var, k: T) -> Var {
        let va = self.value(a);
        self.push(va.map(|x| x * k), Op::Scale(a, k), self.needs(&[a]))
    }

    /// Adds a constant tensor (e.g. an attention mask).
    pub fn add_const(&self, a: Var, c: &Tensor<T>) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(mismatch("add_const", va.shape(), c.shape()));
        }
        Ok(self.push(va.zip_map(c, |x, y| x + y), Op::Shift(a), self.needs(&[a])))
    }

    pub fn mul_const(&self, a: Var, c: Arc<Tensor<T>>) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(mismatch("mul_const", va.shape(), c.shape()));
        }
        let out = va.zip_map(&c, |x, y| x * y);
        Ok(self.push(out, Op::MulConst(a, c), self.needs(&[a])))
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Var {
        let va = self.value(a);
        let out = va.map(|x| unary_forward(kind, x));
        self.push(out, Op::Unary(a, kind), self.needs(&[a]))
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    /// Inverted dropout: scales kept activations by `1/(1-p)` in training,
    /// identity otherwise.
    pub fn dropout(&self, a: Var, p: f64) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let shape = self.shape(a);
        let n: usize = shape.iter().product();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = {
            let mut rng = self.rng.borrow_mut();
            let rng = rng.as_mut().expect("training graph carries an rng");
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        };
        self.mul_const(a, Arc::new(Tensor::new(shape, mask)?))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(&vb)?;
        Ok(self.push(out, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.transpose(), Op::Transpose(a), self.needs(&[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let out = va
            .reshaped(shape)
            .map_err(|_| mismatch("reshape", va.shape(), shape))?;
        Ok(self.push(out, Op::Reshape(a), self.needs(&[a])))
    }

    // ---- normalisation ------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut out = (*va).clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a), self.needs(&[a]))
    }

    /// Zero-mean, unit-variance rows (no affine terms).
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let n = T::of(c as f64);
        let eps = T::of(eps);
        let mut out = (*va).clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNormRows(a, inv_std), self.needs(&[a]))
    }

    // ---- indexing -----------------------------------------------------

    /// Rows `a[idx[0]], a[idx[1]], ...`.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(invalid("gather_rows", format!("row {i} out of {r}")));
            }
            out.extend_from_slice(va.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), self.needs(&[a])))
    }

    /// `out[idx[e]] += a[e]` into `n` rows.
    pub fn scatter_add_rows(&self, a: Var, idx: &[usize], n: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let c = va.cols();
        if idx.len() != va.rows() {
            return Err(mismatch("scatter_add_rows", va.shape(), &[idx.len()]));
        }
        let mut out = vec![T::zero(); n * c];
        for (e, &t) in idx.iter().enumerate() {
            if t >= n {
                return Err(invalid("scatter_add_rows", format!("target {t} out of {n}")));
            }
            for j in 0..c {
                out[t * c + j] += va.data()[e * c + j];
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::ScatterAddRows(a, idx.to_vec()), self.needs(&[a])))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(
        &self,
        a: Var,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if segments.len() != r {
            return Err(mismatch("segment_softmax", va.shape(), &[segments.len()]));
        }
        if let Some(&s) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(invalid("segment_softmax", format!("segment {s} out of {n_segments}")));
        }
        let mut max = vec![T::neg_infinity(); n_segments * c];
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let v = va.data()[e * c + j];
                if v > max[s * c + j] {
                    max[s * c + j] = v;
                }
            }
        }
        let mut out = vec![T::zero(); r * c];
        let mut sum = vec![T::zero(); n_segments * c];
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let v = (va.data()[e * c + j] - max[s * c + j]).exp();
                out[e * c + j] = v;
                sum[s * c + j] += v;
            }
        }
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..c {
                out[e * c + j] /= sum[s * c + j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            t,
            Op::SegmentSoftmax(a, segments.to_vec(), n_segments),
            self.needs(&[a]),
        ))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(invalid("concat_cols", "no inputs"));
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let r = values[0].rows();
        for v in &values {
            if v.rows() != r {
                return Err(mismatch("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &values {
                out.extend_from_slice(v.row(i));
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), self.needs(parts)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(invalid("concat_rows", "no inputs"));
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let c = values[0].cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.cols() != c {
                return Err(mismatch("concat_rows", values[0].shape(), v.shape()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), self.needs(parts)))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if start > end || end > c {
            return Err(invalid("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&va.row(i)[start..end]);
        }
        let t = Tensor::new(vec![r, w], out)?;
        Ok(self.push(t, Op::SliceCols(a, start, end), self.needs(&[a])))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if start > end || end > r {
            return Err(invalid("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let t = Tensor::new(vec![end - start, c], va.data()[start * c..end * c].to_vec())?;
        Ok(self.push(t, Op::SliceRows(a, start, end), self.needs(&[a])))
    }

    // ---- reductions and losses ---------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Tensor::scalar(va.sum()), Op::SumAll(a), self.needs(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = T::of(va.numel().max(1) as f64);
        self.push(Tensor::scalar(va.sum() / n), Op::MeanAll(a), self.needs(&[a]))
    }

    /// Per-row sums as an `r × 1` column.
    pub fn row_sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols().max(1);
        let out: Vec<T> = va.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let r = out.len();
        self.push(
            Tensor::new(vec![r, 1], out).expect("row count"),
            Op::RowSum(a),
            self.needs(&[a]),
        )
    }

    /// Mean next-token negative log-likelihood over rows with a target.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumericsError> {
        let vl = self.value(logits);
        let (r, c) = (vl.rows(), vl.cols());
        if targets.len() != r {
            return Err(mismatch("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let mut probs = (*vl).clone();
        let mut total = T::zero();
        let mut count = 0;
        for (i, row) in probs.data_mut().chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            if let Some(t) = targets[i] {
                if t >= c {
                    return Err(invalid("cross_entropy", format!("target {t} out of {c}")));
                }
                total += lse - row[t];
                count += 1;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        if count == 0 {
            return Err(invalid("cross_entropy", "no targets"));
        }
        let loss = total / T::of(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs, count),
            self.needs(&[logits]),
        ))
    }

    /// Mean binary cross-entropy over all entries with per-column
    /// positive-class weights.
    pub fn bce_with_logits(
        &self,
        logits: Var,
        targets: &Tensor<T>,
        pos_weight: &[T],
    ) -> Result<Var, NumericsError> {
        let vl = self.value(logits);
        if vl.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", vl.shape(), targets.shape()));
        }
        let c = vl.cols();
        if pos_weight.len() != c {
            return Err(mismatch("bce_with_logits", vl.shape(), &[pos_weight.len()]));
        }
        let mut total = T::zero();
        for (i, (&x, &y)) in vl.data().iter().zip(targets.data()).enumerate() {
            let w = pos_weight[i % c];
            total += w * y * softplus(-x) + (T::one() - y) * softplus(x);
        }
        let loss = total / T::of(vl.numel().max(1) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, targets.clone(), pos_weight.to_vec()),
            self.needs(&[logits]),
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Gradients of a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(invalid("backward", format!("output shape {:?} is not scalar", v.shape())));
        }
        self.backward_from(loss, Tensor::new(v.shape().to_vec(), vec![T::one()])?)
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>, NumericsError> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.shape() != seed.shape() {
            return Err(mismatch("backward", nodes[out.0].value.shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients aligned with a parameter store's entries.
    pub fn for_bound(&self, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound.vars().iter().map(|&v| self.wrt(v).cloned()).collect()
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_forward<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Gelu => {
            let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            T::of(0.5) * x * (T::one() + inner.tanh())
        }
        Unary::Relu => x.max(T::zero()),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
    }
}

fn unary_derivative<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Gelu => {
            let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            let t = inner.tanh();
            let d_inner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
            T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * d_inner
        }
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Exp => y,
        Unary::Log => T::one() / x,
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    g: Tensor<T>,
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<(), NumericsError> {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.clone();
    let needs = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, g.zip_map(&val(*b), |x, y| x * y));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.zip_map(&val(*a), |x, y| x * y));
            }
        }
        Op::AddRow(a, row) => {
            accumulate(nodes, grads, *a, g.clone());
            if needs(*row) {
                let vr = val(*row);
                let c = g.cols();
                let mut acc = vec![T::zero(); c];
                for (k, &x) in g.data().iter().enumerate() {
                    acc[k % c] += x;
                }
                accumulate(nodes, grads, *row, Tensor::new(vr.shape().to_vec(), acc)?);
            }
        }
        Op::MulRow(a, row) => {
            let (va, vr) = (val(*a), val(*row));
            let c = g.cols();
            if needs(*a) {
                let mut ga = g.clone();
                for (k, x) in ga.data_mut().iter_mut().enumerate() {
                    *x *= vr.data()[k % c];
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*row) {
                let mut acc = vec![T::zero(); c];
                for (k, (&x, &y)) in g.data().iter().zip(va.data()).enumerate() {
                    acc[k % c] += x * y;
                }
                accumulate(nodes, grads, *row, Tensor::new(vr.shape().to_vec(), acc)?);
            }
        }
        Op::MulCol(a, col) => {
            let (va, vc) = (val(*a), val(*col));
            let c = g.cols().max(1);
            if needs(*a) {
                let mut ga = g.clone();
                for (k, x) in ga.data_mut().iter_mut().enumerate() {
                    *x *= vc.data()[k / c];
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*col) {
                let mut acc = vec![T::zero(); vc.numel()];
                for (k, (&x, &y)) in g.data().iter().zip(va.data()).enumerate() {
                    acc[k / c] += x * y;
                }
                accumulate(nodes, grads, *col, Tensor::new(vc.shape().to_vec(), acc)?);
            }
        }
        Op::ScaleBy(a, s) => {
            let (va, vs) = (val(*a), val(*s));
            let k = vs.item();
            if needs(*a) {
                accumulate(nodes, grads, *a, g.map(|x| x * k));
            }
            if needs(*s) {
                let dot: T = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).sum();
                accumulate(nodes, grads, *s, Tensor::new(vs.shape().to_vec(), vec![dot])?);
            }
        }
        Op::Scale(a, k) => {
            let k = *k;
            accumulate(nodes, grads, *a, g.map(|x| x * k));
        }
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MulConst(a, c) => accumulate(nodes, grads, *a, g.zip_map(c, |x, y| x * y)),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if needs(*a) {
                // dA = dC · Bᵀ
                let mut out = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), false, vb.data(), true, &mut out, false);
                accumulate(nodes, grads, *a, Tensor::new(va.shape().to_vec(), out)?);
            }
            if needs(*b) {
                // dB = Aᵀ · dC
                let mut out = vec![T::zero(); k * n];
                T::gemm(k, m, n, va.data(), true, g.data(), false, &mut out, false);
                accumulate(nodes, grads, *b, Tensor::new(vb.shape().to_vec(), out)?);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Reshape(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, g.reshaped(va.shape())?);
        }
        Op::Unary(a, kind) => {
            let va = val(*a);
            let y = &node.value;
            let mut ga = g.clone();
            for ((d, &x), &yv) in ga.data_mut().iter_mut().zip(va.data()).zip(y.data()) {
                *d *= unary_derivative(*kind, x, yv);
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let c = y.cols().max(1);
            let mut ga = g.clone();
            for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                let dot: T = grow.iter().zip(yrow).map(|(&x, &p)| x * p).sum();
                for (x, &p) in grow.iter_mut().zip(yrow) {
                    *x = p * (*x - dot);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LayerNormRows(a, inv_std) => {
            let y = &node.value;
            let c = y.cols().max(1);
            let n = T::of(c as f64);
            let mut ga = g.clone();
            for (r, (grow, yrow)) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)).enumerate() {
                let mean_g = grow.iter().copied().sum::<T>() / n;
                let mean_gy = grow.iter().zip(yrow).map(|(&x, &p)| x * p).sum::<T>() / n;
                for (x, &p) in grow.iter_mut().zip(yrow) {
                    *x = inv_std[r] * (*x - mean_g - p * mean_gy);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::GatherRows(a, idx) => {
            let va = val(*a);
            let c = va.cols();
            let mut out = vec![T::zero(); va.numel()];
            for (e, &r) in idx.iter().enumerate() {
                for j in 0..c {
                    out[r * c + j] += g.data()[e * c + j];
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(va.shape().to_vec(), out)?);
        }
        Op::ScatterAddRows(a, idx) => {
            let va = val(*a);
            let c = va.cols();
            let mut out = Vec::with_capacity(va.numel());
            for &t in idx {
                out.extend_from_slice(&g.data()[t * c..(t + 1) * c]);
            }
            accumulate(nodes, grads, *a, Tensor::new(va.shape().to_vec(), out)?);
        }
        Op::SegmentSoftmax(a, segments, n_segments) => {
            let y = &node.value;
            let c = y.cols();
            let mut dots = vec![T::zero(); n_segments * c];
            for (e, &s) in segments.iter().enumerate() {
                for j in 0..c {
                    dots[s * c + j] += g.data()[e * c + j] * y.data()[e * c + j];
                }
            }
            let mut ga = g.clone();
            for (e, &s) in segments.iter().enumerate() {
                for j in 0..c {
                    let k = e * c + j;
                    ga.data_mut()[k] = y.data()[k] * (g.data()[k] - dots[s * c + j]);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::ConcatCols(parts) => {
            let r = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let vp = val(p);
                let w = vp.cols();
                if needs(p) {
                    let mut out = Vec::with_capacity(r * w);
                    for row in 0..r {
                        out.extend_from_slice(&g.data()[row * total + offset..row * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(vp.shape().to_vec(), out)?);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let c = g.cols();
            let mut offset = 0;
            for &p in parts {
                let vp = val(p);
                let n = vp.rows() * c;
                if needs(p) {
                    let out = g.data()[offset..offset + n].to_vec();
                    accumulate(nodes, grads, p, Tensor::new(vp.shape().to_vec(), out)?);
                }
                offset += n;
            }
        }
        Op::SliceCols(a, start, end) => {
            let va = val(*a);
            let (r, c) = (va.rows(), va.cols());
            let w = end - start;
            let mut out = vec![T::zero(); r * c];
            for row in 0..r {
                out[row * c + start..row * c + end].copy_from_slice(&g.data()[row * w..(row + 1) * w]);
            }
            accumulate(nodes, grads, *a, Tensor::new(va.shape().to_vec(), out)?);
        }
        Op::SliceRows(a, start, end) => {
            let va = val(*a);
            let c = va.cols();
            let mut out = vec![T::zero(); va.numel()];
            out[start * c..end * c].copy_from_slice(g.data());
            accumulate(nodes, grads, *a, Tensor::new(va.shape().to_vec(), out)?);
        }
        Op::SumAll(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(va.shape(), g.item()));
        }
        Op::MeanAll(a) => {
            let va = val(*a);
            let k = g.item() / T::of(va.numel().max(1) as f64);
            accumulate(nodes, grads, *a, Tensor::full(va.shape(), k));
        }
        Op::RowSum(a) => {
            let va = val(*a);
            let c = va.cols().max(1);
            let out: Vec<T> = (0..va.numel()).map(|k| g.data()[k / c]).collect();
            accumulate(nodes, grads, *a, Tensor::new(va.shape().to_vec(), out)?);
        }
        Op::CrossEntropy(logits, targets, probs, count) => {
            let c = probs.cols();
            let scale = g.item() / T::of(*count as f64);
            let mut out = vec![T::zero(); probs.numel()];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    for j in 0..c {
                        out[r * c + j] = probs.data()[r * c + j] * scale;
                    }
                    out[r * c + t] -= scale;
                }
            }
            accumulate(nodes, grads, *logits, Tensor::new(probs.shape().to_vec(), out)?);
        }
        Op::BceWithLogits(logits, targets, pos_weight) => {
            let vl = val(*logits);
            let c = vl.cols();
            let scale = g.item() / T::of(vl.numel().max(1) as f64);
            let out: Vec<T> = vl
                .data()
                .iter()
                .zip(targets.data())
                .enumerate()
                .map(|(k, (&x, &y))| {
                    let w = pos_weight[k % c];
                    let s = sigmoid(x);
                    (s * (w * y + T::one() - y) - w * y) * scale
                })
                .collect();
            accumulate(nodes, grads, *logits, Tensor::new(vl.shape().to_vec(), out)?);
        }
    }
    Ok(())
}

use super::{Bound, Graph, NumericsError, ParamId, ParamStore, Scalar, SeedStream, Tensor, Var};

/// Affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        group: &str,
        seeds: &SeedStream,
    ) -> Result<Self, NumericsError> {
        let weight = store.insert_uniform(format!("{name}.weight"), &[input, output], input, group, seeds)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[output]), group)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        group: &str,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[width], T::one()), group)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[width]), group)?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let n = g.layer_norm_rows(x, self.eps);
        let scaled = g.mul_row(n, p.var(self.gain))?;
        g.add_row(scaled, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        count: usize,
        width: usize,
        group: &str,
        seeds: &SeedStream,
    ) -> Result<Self, NumericsError> {
        // fan-in 1 would give unit-scale rows; keep them modest.
        let table = store.insert_uniform(format!("{name}.table"), &[count, width], width, group, seeds)?;
        Ok(Self { table, count, width })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, ids: &[usize]) -> Result<Var, NumericsError> {
        g.gather_rows(p.var(self.table), ids)
    }
}

/// Causal mask for `n` positions: `0` on and below the diagonal, a large
/// negative value above it. `blocked_keys` are masked for every query.
pub fn causal_mask<T: Scalar>(n: usize, blocked_keys: &[usize]) -> Tensor<T> {
    let neg = T::of(-1e9);
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            if j > i {
                data[i * n + j] = neg;
            }
        }
        for &j in blocked_keys {
            if j < n {
                data[i * n + j] = neg;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Splits `width` into `heads` equal slices.
pub fn head_width(width: usize, heads: usize) -> Result<usize, NumericsError> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(NumericsError::HeadsDoNotDivide { width, heads });
    }
    Ok(width / heads)
}

/// Scaled dot-product attention for every head.
///
/// `q` is `m × width`, `k`/`v` are `n × width`; `mask`, when given, is an
/// additive `m × n` tensor. Returns the concatenated head outputs and the
/// per-head attention weight matrices.
pub fn multi_head_attention<T: Scalar>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, Vec<Var>), NumericsError> {
    let width = g.shape(q).last().copied().unwrap_or(0);
    let dk = head_width(width, heads)?;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, (h + 1) * dk)?;
        let kh = g.slice_cols(k, h * dk, (h + 1) * dk)?;
        let vh = g.slice_cols(v, h * dk, (h + 1) * dk)?;
        let scores = g.scale(g.matmul(qh, g.transpose(kh))?, scale);
        let scores = match mask {
            Some(m) => g.add_const(scores, m)?,
            None => scores,
        };
        let w = g.softmax_rows(scores);
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    Ok((g.concat_cols(&outs)?, weights))
}

/// Self-attention block with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        group: &str,
        seeds: &SeedStream,
    ) -> Result<Self, NumericsError> {
        head_width(width, heads)?;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, true, group, seeds)?,
            key: Linear::new(store, &format!("{name}.key"), width, width, true, group, seeds)?,
            value: Linear::new(store, &format!("{name}.value"), width, width, true, group, seeds)?,
            output: Linear::new(store, &format!("{name}.output"), width, width, true, group, seeds)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var, Vec<Var>), NumericsError> {
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let (ctx, w) = multi_head_attention(g, q, k, v, self.heads, mask)?;
        Ok((self.output.forward(g, p, ctx)?, w))
    }
}

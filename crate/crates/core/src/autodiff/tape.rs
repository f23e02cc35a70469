use super::kernels::{gelu, gelu_derivative, gemm, softmax_in_place};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Square(Var),
    Exp(Var),
    Gelu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
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
    Cosine {
        u: Var,
        v: Var,
    },
    CosineRows {
        a: Var,
        b: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    PrependRows {
        x: Var,
        row: Var,
        group: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | AddTiled(a, b)
            | MulScalar(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Square(a) | Exp(a) | Gelu(a) | Reshape(a) | Sum(a)
            | Mean(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            SoftmaxCe { logits, .. } => vec![*logits],
            Cosine { u, v } => vec![*u, *v],
            CosineRows { a, b } => vec![*a, *b],
            NormalizeRows { x, .. } => vec![*x],
            Attention { qkv, .. } => vec![*qkv],
            Embedding { table, .. } => vec![*table],
            PrependRows { x, row, .. } => vec![*x, *row],
            GatherRows { x, .. } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    binding: Option<usize>,
}

/// Gradient buffers produced by one backward traversal, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of materialized gradient buffers.
    pub fn materialized(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and a single reverse sweep visits each node once. Backward does not
/// consume the tape; replaying it yields identical gradients.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("tape values are well-formed")
    }

    fn push_leaf(&mut self, t: &Tensor, requires_grad: bool, binding: Option<usize>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad,
            binding,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t, t.requires_grad(), None)
    }

    /// Records `t` as a leaf tagged with `key`, so its gradient can be
    /// routed back to the owning parameter after backward.
    pub fn bind(&mut self, t: &Tensor, key: usize) -> Var {
        self.push_leaf(t, t.requires_grad(), Some(key))
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t, false, None)
    }

    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t, true, None)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            binding: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", [m, k], [k2, n]),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    /// Elementwise product of two same-shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds a `[n]` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match rows of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            add_into(row, b);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias)))
    }

    /// Adds an `[n×d]` pattern to each consecutive group of `n` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, pattern: Var) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "add_tiled")?;
        let (n, d2) = self.matrix_dims(pattern, "add_tiled")?;
        if d != d2 || rows % n != 0 {
            return Err(Error::dim(
                "add_tiled",
                format!("cannot tile {:?} over {:?}", self.shape(pattern), self.shape(x)),
            ));
        }
        let p = self.value(pattern);
        let mut out = self.value(x).to_vec();
        for group in out.chunks_mut(n * d) {
            add_into(group, p);
        }
        Ok(self.push(vec![rows, d], out, Op::AddTiled(x, pattern)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", format!("{:?} is not a scalar", self.shape(s))));
        }
        let f = self.item(s);
        let out = self.value(x).iter().map(|v| v * f).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalar(x, s)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v * v).collect();
        self.push(self.shape(x).to_vec(), out, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Exp(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(x))
    }

    /// Normalizes each length-`d` row of `x` to zero mean and unit variance,
    /// then applies `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match last dimension of {:?}",
                    self.shape(gain),
                    self.shape(bias),
                    self.shape(x)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: k,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        Ok(self.push(
            Vec::new(),
            vec![loss / b as f64],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Cosine similarity between two vectors of equal length.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u).len() != 1 {
            return Err(Error::dim(
                "cosine_similarity",
                format!("expected vectors, got {:?}", self.shape(u)),
            ));
        }
        self.same_shape(u, v, "cosine_similarity")?;
        let c = cosine(self.value(u), self.value(v))?;
        Ok(self.push(Vec::new(), vec![c], Op::Cosine { u, v }))
    }

    /// Row-wise cosine similarity of two `[r×d]` matrices, giving `[r]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, d) = self.matrix_dims(a, "cosine_rows")?;
        self.same_shape(a, b, "cosine_rows")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..r)
            .map(|i| cosine(&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(vec![r], out, Op::CosineRows { a, b }))
    }

    /// Scales every row of `x` to unit L2 norm. Non-finite rows pass
    /// through as NaN so a caller's loss check can report them.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.matrix_dims(x, "normalize_rows")?;
        let xs = self.value(x);
        let mut out = xs.to_vec();
        let mut norms = Vec::with_capacity(r);
        for (i, row) in out.chunks_mut(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::degenerate("normalize_rows", format!("row {i} has norm {n}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(vec![r, d], out, Op::NormalizeRows { x, norms }))
    }

    /// Multi-head scaled-dot-product self-attention.
    ///
    /// `qkv` is `[groups*seq × 3d]` with queries, keys and values packed
    /// along columns; each consecutive block of `seq` rows is an independent
    /// sequence. Returns `[groups*seq × d]`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        let (rows, three_d) = self.matrix_dims(qkv, "attention")?;
        if three_d % 3 != 0 || seq == 0 || rows % seq != 0 || heads == 0 {
            return Err(Error::dim(
                "attention",
                format!("qkv {:?} incompatible with seq {seq}", self.shape(qkv)),
            ));
        }
        let d = three_d / 3;
        if d % heads != 0 {
            return Err(Error::dim("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let groups = rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv);
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; groups * heads * seq * seq];
        for g in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * seq * seq..(g * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &src[(g * seq + i) * three_d + h * dh..][..dh];
                    let limit = if causal { i + 1 } else { seq };
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for j in 0..limit {
                        let kj = &src[(g * seq + j) * three_d + d + h * dh..][..dh];
                        prow[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(&mut prow[..limit]);
                    let oi = &mut out[(g * seq + i) * d + h * dh..][..dh];
                    for j in 0..limit {
                        let vj = &src[(g * seq + j) * three_d + 2 * d + h * dh..][..dh];
                        let w = prow[j];
                        oi.iter_mut().zip(vj).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
        }
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Attention {
                qkv,
                seq,
                heads,
                causal,
                probs,
            },
        ))
    }

    /// Looks up rows of a `[vocab×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::dim("embedding", "no ids"));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inserts the `[d]` vector `row` before every group of `group` rows.
    pub fn prepend_rows(&mut self, x: Var, row: Var, group: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "prepend_rows")?;
        if self.shape(row) != [d] || group == 0 || rows % group != 0 {
            return Err(Error::dim(
                "prepend_rows",
                format!("cannot prepend {:?} to groups of {group} in {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let groups = rows / group;
        let (xs, rv) = (self.value(x), self.value(row));
        let mut out = Vec::with_capacity((rows + groups) * d);
        for chunk in xs.chunks(group * d) {
            out.extend_from_slice(rv);
            out.extend_from_slice(chunk);
        }
        Ok(self.push(vec![rows + groups, d], out, Op::PrependRows { x, row, group }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = self.matrix_dims(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "no rows requested"));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_seeded(&[(loss, &[1.0])])
    }

    /// Reverse sweep seeded with explicit output gradients. Seeds on the same
    /// node are summed.
    pub fn backward_seeded(&self, seeds: &[(Var, &[f64])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for &(v, seed) in seeds {
            let node = &self.nodes[v.0];
            if seed.len() != node.value.len() {
                return Err(Error::dim(
                    "backward",
                    format!("seed of length {} for shape {:?}", seed.len(), node.shape),
                ));
            }
            if node.requires_grad {
                add_into(slot(&mut grads, v, seed.len()), seed);
                top = top.max(v.0 + 1);
            }
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Bound leaves with materialized gradients, in recording order.
    pub fn bound_gradients<'a>(&self, grads: &'a Gradients) -> Vec<(usize, &'a [f64])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| Some((n.binding?, grads.grads[i].as_deref()?)))
            .collect()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let bv = self.value(*b);
                    gemm(m, n, k, g, false, bv, true, slot(grads, *a, m * k), 1.0);
                }
                if needs(*b) {
                    let av = self.value(*a);
                    gemm(k, m, n, av, true, g, false, slot(grads, *b, k * n), 1.0);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let dst = slot(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    slot(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b);
                    slot(grads, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (s, y))| *d += s * y);
                }
                if needs(*b) {
                    let av = self.value(*a);
                    slot(grads, *b, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (s, x))| *d += s * x);
                }
            }
            Op::AddBias(x, bias) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if needs(*bias) {
                    let n = numel(*bias);
                    let dst = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(dst, row);
                    }
                }
            }
            Op::AddTiled(x, p) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if needs(*p) {
                    let n = numel(*p);
                    let dst = slot(grads, *p, n);
                    for group in g.chunks(n) {
                        add_into(dst, group);
                    }
                }
            }
            Op::Scale(x, f) => {
                if needs(*x) {
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += f * s);
                }
            }
            Op::MulScalar(x, s) => {
                if needs(*x) {
                    let f = self.item(*s);
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += f * v);
                }
                if needs(*s) {
                    let ds: f64 = g.iter().zip(self.value(*x)).map(|(a, b)| a * b).sum();
                    slot(grads, *s, 1)[0] += ds;
                }
            }
            Op::Square(x) => {
                if needs(*x) {
                    let xv = self.value(*x);
                    slot(grads, *x, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(d, (s, v))| *d += 2.0 * v * s);
                }
            }
            Op::Exp(x) => {
                if needs(*x) {
                    slot(grads, *x, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(&node.value))
                        .for_each(|(d, (s, y))| *d += s * y);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xv = self.value(*x);
                    slot(grads, *x, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(d, (s, &v))| *d += s * gelu_derivative(v));
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    slot(grads, *x, numel(*x)).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = numel(*x);
                    let s = g[0] / n as f64;
                    slot(grads, *x, n).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = numel(*gain);
                if needs(*gain) {
                    let dst = slot(grads, *gain, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dst[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if needs(*bias) {
                    let dst = slot(grads, *bias, d);
                    for grow in g.chunks(d) {
                        add_into(dst, grow);
                    }
                }
                if needs(*x) {
                    let gv = self.value(*gain);
                    let dst = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut dst[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let s = g[0] / b as f64;
                    let dst = slot(grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dst[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Cosine { u, v } => {
                let (uv, vv) = (self.value(*u), self.value(*v));
                let c = node.value[0];
                let (du, dv) = cosine_grads(uv, vv, c, g[0]);
                if needs(*u) {
                    add_into(slot(grads, *u, uv.len()), &du);
                }
                if needs(*v) {
                    add_into(slot(grads, *v, vv.len()), &dv);
                }
            }
            Op::CosineRows { a, b } => {
                let d = self.shape(*a)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for r in 0..g.len() {
                    let s = r * d..(r + 1) * d;
                    let (gu, gv) = cosine_grads(&av[s.clone()], &bv[s.clone()], node.value[r], g[r]);
                    da[s.clone()].copy_from_slice(&gu);
                    db[s].copy_from_slice(&gv);
                }
                if needs(*a) {
                    add_into(slot(grads, *a, da.len()), &da);
                }
                if needs(*b) {
                    add_into(slot(grads, *b, db.len()), &db);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if needs(*x) {
                    let d = node.shape[1];
                    let dst = slot(grads, *x, g.len());
                    for (r, n) in norms.iter().enumerate() {
                        let y = &node.value[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[r * d + j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                seq,
                heads,
                causal,
                probs,
            } => {
                if needs(*qkv) {
                    let (seq, heads) = (*seq, *heads);
                    let src = self.value(*qkv);
                    let three_d = self.shape(*qkv)[1];
                    let d = three_d / 3;
                    let dh = d / heads;
                    let groups = src.len() / three_d / seq;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let dst = slot(grads, *qkv, src.len());
                    let mut dp = vec![0.0; seq];
                    for gr in 0..groups {
                        for h in 0..heads {
                            let p = &probs[(gr * heads + h) * seq * seq..][..seq * seq];
                            for i in 0..seq {
                                let limit = if *causal { i + 1 } else { seq };
                                let go = &g[(gr * seq + i) * d + h * dh..][..dh];
                                let prow = &p[i * seq..i * seq + limit];
                                for j in 0..limit {
                                    let vrow = (gr * seq + j) * three_d + 2 * d + h * dh;
                                    let vj = &src[vrow..vrow + dh];
                                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    let w = prow[j];
                                    dst[vrow..vrow + dh]
                                        .iter_mut()
                                        .zip(go)
                                        .for_each(|(o, s)| *o += w * s);
                                }
                                let dot: f64 = prow.iter().zip(&dp[..limit]).map(|(a, b)| a * b).sum();
                                let qrow = (gr * seq + i) * three_d + h * dh;
                                for j in 0..limit {
                                    let ds = prow[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow = (gr * seq + j) * three_d + d + h * dh;
                                    for t in 0..dh {
                                        dst[qrow + t] += ds * src[krow + t];
                                        dst[krow + t] += ds * src[qrow + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = self.shape(*table)[1];
                    let dst = slot(grads, *table, numel(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dst[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::PrependRows { x, row, group } => {
                let d = numel(*row);
                let stride = (group + 1) * d;
                if needs(*row) {
                    let dst = slot(grads, *row, d);
                    for chunk in g.chunks(stride) {
                        add_into(dst, &chunk[..d]);
                    }
                }
                if needs(*x) {
                    let dst = slot(grads, *x, numel(*x));
                    for (chunk, out) in g.chunks(stride).zip(dst.chunks_mut(group * d)) {
                        add_into(out, &chunk[d..]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if needs(*x) {
                    let d = self.shape(*x)[1];
                    let dst = slot(grads, *x, numel(*x));
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut dst[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
        }
    }
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu2: f64 = u.iter().map(|x| x * x).sum();
    let nv2: f64 = v.iter().map(|x| x * x).sum();
    if nu2 == 0.0 || nv2 == 0.0 {
        return Err(Error::degenerate("cosine_similarity", "zero-norm input"));
    }
    // sqrt(x·x) == x in IEEE arithmetic, so identical inputs give exactly 1.
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu2 * nv2).sqrt())
}

fn cosine_grads(u: &[f64], v: &[f64], c: f64, g: f64) -> (Vec<f64>, Vec<f64>) {
    let nu2: f64 = u.iter().map(|x| x * x).sum();
    let nv2: f64 = v.iter().map(|x| x * x).sum();
    let inv = 1.0 / (nu2 * nv2).sqrt();
    let du = u.iter().zip(v).map(|(a, b)| g * (b * inv - c * a / nu2)).collect();
    let dv = v.iter().zip(u).map(|(b, a)| g * (a * inv - c * b / nv2)).collect();
    (du, dv)
}

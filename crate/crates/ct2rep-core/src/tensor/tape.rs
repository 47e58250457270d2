use super::params::{ParamId, ParamStore};
use super::{Result, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Scale { a: usize, c: f64 },
    Gelu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize, axis: usize },
    SoftmaxCausal { a: usize },
    LayerNormPerRow { x: usize, gamma: usize, beta: usize, eps: f64 },
    Transpose { a: usize },
    Reshape { a: usize },
    BroadcastRows { v: usize },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    GatherRows { a: usize, indices: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
    source: Option<ParamId>,
}

/// Define-by-run computation tape.
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// C[m,n] = A[m,k] @ B[k,n], row-major.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` pass, if this node participates.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite value emitted by op {op:?}"
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
            source: None,
        });
        TensorId(id)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Constant input (no gradient tracked).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        assert_eq!(data.len(), numel(&shape), "leaf: data/shape mismatch");
        self.push(data, shape, false, Op::Leaf)
    }

    /// Input that participates in differentiation (not bound to a store).
    pub fn leaf_grad(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        assert_eq!(data.len(), numel(&shape), "leaf_grad: data/shape mismatch");
        self.push(data, shape, true, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; `scatter_grads` writes back to it.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> TensorId {
        let p = store.get(pid);
        let id = self.push(p.data.clone(), p.shape.clone(), true, Op::Leaf);
        self.nodes[id.0].source = Some(pid);
        id
    }

    // ── Elementwise and linear ops ──────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: opname,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(data, shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// `a[n,d] + bias[d]`, broadcast over rows.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[bias.0].shape);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (n, d) = (sa[0], sa[1]);
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..n {
            for j in 0..d {
                data[r * d + j] += self.nodes[bias.0].data[j];
            }
        }
        let rg = self.needs_grad(&[a.0, bias.0]);
        Ok(self.push(data, vec![n, d], rg, Op::AddBias { a: a.0, bias: bias.0 }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Scale { a: a.0, c })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Gelu { a: a.0 })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Sigmoid { a: a.0 })
    }

    /// Max-stabilized softmax along `axis`; each slice sums to 1.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let data = softmax_fwd(&self.nodes[a.0].data, &shape, axis);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::Softmax { a: a.0, axis }))
    }

    /// Row-wise softmax over a square score matrix restricted to columns
    /// `0..=row`; entries above the diagonal are exactly zero, so position t
    /// attends only to positions <= t.
    pub fn softmax_causal(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(TensorError::InvalidArgument {
                op: "softmax_causal",
                message: format!("expected square matrix, got {shape:?}"),
            });
        }
        let n = shape[0];
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let row = &src[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                denom += e;
            }
            for j in 0..=i {
                data[i * n + j] /= denom;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::SoftmaxCausal { a: a.0 }))
    }

    /// Layer norm over the last axis with per-row scale/shift matrices.
    /// `x`, `gamma`, `beta` all share shape `[n, d]`.
    pub fn layer_norm_per_row(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        for other in [gamma, beta] {
            if self.nodes[other.0].shape != sx {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_per_row",
                    lhs: sx.clone(),
                    rhs: self.nodes[other.0].shape.clone(),
                });
            }
        }
        if sx.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm_per_row",
                message: format!("expected 2-D input, got {sx:?}"),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm_per_row",
                message: format!("eps must be positive, got {eps}"),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let xs = &self.nodes[x.0].data[r * d..(r + 1) * d];
            let gs = &self.nodes[gamma.0].data[r * d..(r + 1) * d];
            let bs = &self.nodes[beta.0].data[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (xs[j] - mean) * inv_std * gs[j] + bs[j];
            }
        }
        let rg = self.needs_grad(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            sx,
            rg,
            Op::LayerNormPerRow {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    /// Layer norm over the last axis: `x[n,d]` with shared `gamma[d]`,
    /// `beta[d]`. Implemented on the per-row kernel so conditional variants
    /// reduce to this bit-exactly when their deltas are zero.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                message: format!("expected 2-D input, got {sx:?}"),
            });
        }
        for other in [gamma, beta] {
            let so = &self.nodes[other.0].shape;
            if so.len() != 1 || so[0] != sx[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: so.clone(),
                });
            }
        }
        let n = sx[0];
        let g = self.broadcast_rows(gamma, n)?;
        let b = self.broadcast_rows(beta, n)?;
        self.layer_norm_per_row(x, g, b, eps)
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                message: format!("expected 2-D input, got {s:?}"),
            });
        }
        let (n, d) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = src[i * d + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, vec![d, n], rg, Op::Transpose { a: a.0 }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[a.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::Reshape { a: a.0 }))
    }

    /// `v[d]` replicated into `[n, d]`.
    pub fn broadcast_rows(&mut self, v: TensorId, n: usize) -> Result<TensorId> {
        let s = self.nodes[v.0].shape.clone();
        if s.len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "broadcast_rows",
                message: format!("expected 1-D input, got {s:?}"),
            });
        }
        let d = s[0];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&self.nodes[v.0].data);
        }
        let rg = self.nodes[v.0].requires_grad;
        Ok(self.push(data, vec![n, d], rg, Op::BroadcastRows { v: v.0 }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 || start + len > s[0] {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                message: format!("rows {start}..{} out of shape {s:?}", start + len),
            });
        }
        let d = s[1];
        let data = self.nodes[a.0].data[start * d..(start + len) * d].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, vec![len, d], rg, Op::SliceRows { a: a.0, start }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                message: format!("cols {start}..{} out of shape {s:?}", start + len),
            });
        }
        let (n, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&self.nodes[a.0].data[r * d + start..r * d + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, vec![n, len], rg, Op::SliceCols { a: a.0, start }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat_rows",
                message: "no parts".into(),
            });
        }
        let d = self.nodes[parts[0].0].shape.last().copied().unwrap_or(0);
        let mut rows = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * d);
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(data, vec![rows, d], rg, Op::ConcatRows { parts: ids }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat_cols",
                message: "no parts".into(),
            });
        }
        let n = self.nodes[parts[0].0].shape[0];
        let mut width = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            width += s[1];
        }
        let mut data = vec![0.0; n * width];
        let mut col0 = 0;
        for p in parts {
            let d = self.nodes[p.0].shape[1];
            for r in 0..n {
                data[r * width + col0..r * width + col0 + d]
                    .copy_from_slice(&self.nodes[p.0].data[r * d..(r + 1) * d]);
            }
            col0 += d;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(data, vec![n, width], rg, Op::ConcatCols { parts: ids }))
    }

    /// Gather rows of `a[n,d]` by index (used for embedding lookup and for
    /// reordering between spatial-major and temporal-major layouts).
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                message: format!("expected 2-D input, got {s:?}"),
            });
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                message: format!("row index {bad} out of range for {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.nodes[a.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            data,
            vec![indices.len(), d],
            rg,
            Op::GatherRows {
                a: a.0,
                indices: indices.to_vec(),
            },
        ))
    }

    // ── Reductions and loss ─────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Mean { a: a.0 })
    }

    /// Mean negative log-likelihood over unmasked rows of `logits[n,v]`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                message: format!(
                    "logits {s:?} with {} targets and {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let (n, v) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                message: format!("target {bad} out of vocabulary {v}"),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                message: "all positions masked".into(),
            });
        }
        let mut total = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = &self.nodes[logits.0].data[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[targets[r]];
        }
        let loss = total / count as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each recorded op is visited exactly
    /// once; gradients accumulate additively across fan-out.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any tracked tensor; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            self.apply_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    /// Accumulate leaf gradients into their bound parameters.
    pub fn scatter_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(pid), Some(grad)) = (node.source, node.grad.as_ref()) {
                store.accumulate_grad(pid, grad);
            }
        }
    }

    fn accum(&mut self, target: usize, delta: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].data.len();
        let grad = self.nodes[target].grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn apply_backward(&mut self, i: usize, grad: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let mut da = vec![0.0; m * k];
                    let bdat = &self.nodes[b].data;
                    for r in 0..m {
                        let grow = &grad[r * n..(r + 1) * n];
                        let darow = &mut da[r * k..(r + 1) * k];
                        for p in 0..k {
                            let brow = &bdat[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            darow[p] = s;
                        }
                    }
                    self.accum(a, &da);
                }
                if self.nodes[b].requires_grad {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let mut db = vec![0.0; k * n];
                    let adat = &self.nodes[a].data;
                    for r in 0..m {
                        let arow = &adat[r * k..(r + 1) * k];
                        let grow = &grad[r * n..(r + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += av * grow[j];
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, grad);
                self.accum(b, grad);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, grad);
                let neg: Vec<f64> = grad.iter().map(|&g| -g).collect();
                self.accum(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accum(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accum(b, &db);
                }
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                let d = self.nodes[bias].data.len();
                self.accum(a, grad);
                if self.nodes[bias].requires_grad {
                    let mut db = vec![0.0; d];
                    for (idx, &g) in grad.iter().enumerate() {
                        db[idx % d] += g;
                    }
                    self.accum(bias, &db);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = grad.iter().map(|&g| g * c).collect();
                self.accum(a, &da);
            }
            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(&g, &x)| g * gelu_bwd(x))
                    .collect();
                self.accum(a, &da);
            }
            Op::Tanh { a } => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&g, &t)| g * (1.0 - t * t))
                    .collect();
                self.accum(a, &da);
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect();
                self.accum(a, &da);
            }
            Op::Softmax { a, axis } => {
                let (a, axis) = (*a, *axis);
                let shape = self.nodes[i].shape.clone();
                let out = &self.nodes[i].data;
                let axis_len = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut da = vec![0.0; out.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let mut dot = 0.0;
                        for t in 0..axis_len {
                            let f = o * axis_len * inner + t * inner + r;
                            dot += grad[f] * out[f];
                        }
                        for t in 0..axis_len {
                            let f = o * axis_len * inner + t * inner + r;
                            da[f] = out[f] * (grad[f] - dot);
                        }
                    }
                }
                self.accum(a, &da);
            }
            Op::SoftmaxCausal { a } => {
                let a = *a;
                let n = self.nodes[i].shape[0];
                let out = &self.nodes[i].data;
                let mut da = vec![0.0; n * n];
                for r in 0..n {
                    let mut dot = 0.0;
                    for j in 0..=r {
                        dot += grad[r * n + j] * out[r * n + j];
                    }
                    for j in 0..=r {
                        da[r * n + j] = out[r * n + j] * (grad[r * n + j] - dot);
                    }
                }
                self.accum(a, &da);
            }
            Op::LayerNormPerRow { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let shape = self.nodes[i].shape.clone();
                let (n, d) = (shape[0], shape[1]);
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; n * d];
                let mut dbeta = vec![0.0; n * d];
                for r in 0..n {
                    let xs = &self.nodes[x].data[r * d..(r + 1) * d];
                    let gs = &self.nodes[gamma].data[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gs).map(|(&g, &gm)| g * gm).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgamma[r * d + j] = grow[j] * xhat[j];
                        dbeta[r * d + j] = grow[j];
                        dx[r * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accum(x, &dx);
                self.accum(gamma, &dgamma);
                self.accum(beta, &dbeta);
            }
            Op::Transpose { a } => {
                let a = *a;
                let s = self.nodes[i].shape.clone();
                let (n, d) = (s[0], s[1]);
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        da[j * n + r] = grad[r * d + j];
                    }
                }
                self.accum(a, &da);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.accum(a, grad);
            }
            Op::BroadcastRows { v } => {
                let v = *v;
                let d = self.nodes[v].data.len();
                let mut dv = vec![0.0; d];
                for (idx, &g) in grad.iter().enumerate() {
                    dv[idx % d] += g;
                }
                self.accum(v, &dv);
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let d = self.nodes[a].shape[1];
                let mut da = vec![0.0; self.nodes[a].data.len()];
                da[start * d..start * d + grad.len()].copy_from_slice(grad);
                self.accum(a, &da);
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let (n, d) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let w = self.nodes[i].shape[1];
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..w {
                        da[r * d + start + j] = grad[r * w + j];
                    }
                }
                self.accum(a, &da);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut row0 = 0;
                for p in parts {
                    let rows = self.nodes[p].shape[0];
                    let d = self.nodes[p].shape[1];
                    let slice = grad[row0 * d..(row0 + rows) * d].to_vec();
                    self.accum(p, &slice);
                    row0 += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let n = self.nodes[i].shape[0];
                let width = self.nodes[i].shape[1];
                let mut col0 = 0;
                for p in parts {
                    let d = self.nodes[p].shape[1];
                    let mut dp = vec![0.0; n * d];
                    for r in 0..n {
                        dp[r * d..(r + 1) * d]
                            .copy_from_slice(&grad[r * width + col0..r * width + col0 + d]);
                    }
                    self.accum(p, &dp);
                    col0 += d;
                }
            }
            Op::GatherRows { a, indices } => {
                let a = *a;
                let indices = indices.clone();
                let d = self.nodes[a].shape[1];
                let mut da = vec![0.0; self.nodes[a].data.len()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..d {
                        da[src * d + j] += grad[r * d + j];
                    }
                }
                self.accum(a, &da);
            }
            Op::Sum { a } => {
                let a = *a;
                let da = vec![grad[0]; self.nodes[a].data.len()];
                self.accum(a, &da);
            }
            Op::Mean { a } => {
                let a = *a;
                let n = self.nodes[a].data.len();
                let da = vec![grad[0] / n as f64; n];
                self.accum(a, &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let (n, v) = (self.nodes[logits].shape[0], self.nodes[logits].shape[1]);
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut da = vec![0.0; n * v];
                for r in 0..n {
                    if !mask[r] {
                        continue;
                    }
                    let row = &self.nodes[logits].data[r * v..(r + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for j in 0..v {
                        let soft = exps[j] / denom;
                        let tgt = if j == targets[r] { 1.0 } else { 0.0 };
                        da[r * v + j] = grad[0] * (soft - tgt) / count;
                    }
                }
                self.accum(logits, &da);
            }
        }
    }
}

fn softmax_fwd(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for r in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for t in 0..axis_len {
                max = max.max(data[o * axis_len * inner + t * inner + r]);
            }
            let mut denom = 0.0;
            for t in 0..axis_len {
                let f = o * axis_len * inner + t * inner + r;
                let e = (data[f] - max).exp();
                out[f] = e;
                denom += e;
            }
            for t in 0..axis_len {
                out[o * axis_len * inner + t * inner + r] /= denom;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

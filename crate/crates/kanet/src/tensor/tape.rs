//! Wengert tape: ops recorded during the forward pass, gradients from one
//! reverse sweep. Node indices are the topological order — every node's
//! parents precede it, and backward visits each node exactly once.

use crate::error::{KanetError, Result};
use crate::tensor::{Scalar, Tensor};

/// Denominator clamp for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Variance epsilon for layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;
/// Clamp applied inside log for cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

const GELU_COEF: f64 = 0.044715;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    BiasAdd { a: VarId, bias: VarId },
    Scale { a: VarId, c: T },
    Gelu { a: VarId },
    SoftmaxRows { a: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, mean: Vec<T>, inv_std: Vec<T> },
    MeanRows { a: VarId },
    ConcatRows { parts: Vec<VarId> },
    ConcatCols { parts: Vec<VarId> },
    SliceCols { a: VarId, start: usize, len: usize },
    SliceRows { a: VarId, start: usize, len: usize },
    Transpose { a: VarId },
    Cosine { a: VarId, b: VarId, norm_a: T, norm_b: T },
    CosineMatrix { f: VarId, w: VarId, f_norms: Vec<T>, w_norms: Vec<T> },
    CrossEntropy { probs: VarId, labels: Vec<usize> },
    Sum { a: VarId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records the forward computation of one training step (or, with no
/// trainable leaves, a plain evaluation). Single-threaded by design;
/// independent forward passes each own their tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf tensor. Only `requires_grad` leaves (and nodes
    /// computed from them) receive gradient storage during backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a frozen input: no gradient ever flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any
    /// was stored.
    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.value(a).as_matrix()?;
        let (k2, n) = self.value(b).as_matrix()?;
        if k != k2 {
            return Err(KanetError::shape(
                "matmul",
                format!("inner dims {k} vs {k2}"),
            ));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Matmul { a, b }, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(KanetError::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    /// Adds a 1-D bias of length `c` to every row of an `r x c` tensor.
    pub fn bias_add(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (r, c) = self.value(a).as_matrix()?;
        if self.value(bias).numel() != c {
            return Err(KanetError::shape(
                "bias_add",
                format!("bias len {} vs {} cols", self.value(bias).numel(), c),
            ));
        }
        let bias_data = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in 0..r {
            for col in 0..c {
                data[row * c + col] += bias_data[col];
            }
        }
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::BiasAdd { a, bias }, needs))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: VarId, c: T) -> Result<VarId> {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale { a, c }, needs))
    }

    /// GELU activation (tanh form).
    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu { a }, needs))
    }

    /// Numerically stabilized softmax over the last dimension; a 1-D input
    /// is one row. Rows always sum to 1 and entries are strictly positive.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        if self.value(a).numel() == 0 {
            return Err(KanetError::Argument("softmax of empty tensor".into()));
        }
        let (r, c) = self.value(a).as_matrix()?;
        let mut data = self.value(a).data().to_vec();
        for row in 0..r {
            softmax_row_inplace(&mut data[row * c..(row + 1) * c]);
        }
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SoftmaxRows { a }, needs))
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layernorm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        let (r, c) = self.value(x).as_matrix()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(KanetError::shape(
                "layernorm",
                format!(
                    "gamma/beta len {}/{} vs {} cols",
                    self.value(gamma).numel(),
                    self.value(beta).numel(),
                    c
                ),
            ));
        }
        let eps = T::from_f64(LAYERNORM_EPS);
        let inv_c = T::one() / T::from_f64(c as f64);
        let xv = self.value(x).data().to_vec();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![T::zero(); r * c];
        let mut means = Vec::with_capacity(r);
        let mut inv_stds = Vec::with_capacity(r);
        for row in 0..r {
            let xr = &xv[row * c..(row + 1) * c];
            let mean = xr.iter().fold(T::zero(), |s, &v| s + v) * inv_c;
            let var = xr.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_c;
            let inv_std = T::one() / (var + eps).sqrt();
            for col in 0..c {
                let xhat = (xr[col] - mean) * inv_std;
                out[row * c + col] = gv[col] * xhat + bv[col];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, mean: means, inv_std: inv_stds },
            needs,
        ))
    }

    /// Column-wise mean over rows: `r x c` -> `1 x c`.
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId> {
        let (r, c) = self.value(a).as_matrix()?;
        if r == 0 {
            return Err(KanetError::Argument("mean_rows of zero rows".into()));
        }
        let inv_r = T::one() / T::from_f64(r as f64);
        let av = self.value(a).data();
        let mut out = vec![T::zero(); c];
        for row in 0..r {
            for col in 0..c {
                out[col] += av[row * c + col];
            }
        }
        for v in out.iter_mut() {
            *v *= inv_r;
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows { a }, needs))
    }

    /// Stacks 1-D or 2-D parts with equal column counts into one matrix.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(KanetError::Argument("concat_rows of nothing".into()));
        }
        let (_, c0) = self.value(parts[0]).as_matrix()?;
        let mut total_rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).as_matrix()?;
            if c != c0 {
                return Err(KanetError::shape(
                    "concat_rows",
                    format!("column mismatch {c} vs {c0}"),
                ));
            }
            total_rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![total_rows, c0], data)?,
            Op::ConcatRows { parts: parts.to_vec() },
            needs,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(KanetError::Argument("concat_cols of nothing".into()));
        }
        let (r0, _) = self.value(parts[0]).as_matrix()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).as_matrix()?;
            if r != r0 {
                return Err(KanetError::shape(
                    "concat_cols",
                    format!("row mismatch {r} vs {r0}"),
                ));
            }
            widths.push(c);
            total_cols += c;
        }
        let mut data = vec![T::zero(); r0 * total_cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for row in 0..r0 {
                data[row * total_cols + offset..row * total_cols + offset + w]
                    .copy_from_slice(&pv[row * w..(row + 1) * w]);
            }
            offset += w;
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![r0, total_cols], data)?,
            Op::ConcatCols { parts: parts.to_vec() },
            needs,
        ))
    }

    /// Copies `len` columns starting at `start`.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let (r, c) = self.value(a).as_matrix()?;
        if start + len > c {
            return Err(KanetError::shape(
                "slice_cols",
                format!("slice {start}..{} of {c} columns", start + len),
            ));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&av[row * c + start..row * c + start + len]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { a, start, len },
            needs,
        ))
    }

    /// Copies `len` contiguous rows starting at `start`.
    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let (r, c) = self.value(a).as_matrix()?;
        if start + len > r {
            return Err(KanetError::shape(
                "slice_rows",
                format!("slice {start}..{} of {r} rows", start + len),
            ));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows { a, start, len },
            needs,
        ))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let (r, c) = self.value(a).as_matrix()?;
        let av = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for row in 0..r {
            for col in 0..c {
                data[col * r + row] = av[row * c + col];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose { a }, needs))
    }

    /// Cosine similarity of two equal-length vectors, denominator clamped
    /// at 1e-12 (zero vectors yield 0, not an error).
    pub fn cosine(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).numel() != self.value(b).numel() || self.value(a).numel() == 0 {
            return Err(KanetError::shape(
                "cosine",
                format!("{} vs {} elements", self.value(a).numel(), self.value(b).numel()),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let norm_a = av.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
        let norm_b = bv.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
        let dot = av.iter().zip(bv).fold(T::zero(), |s, (&x, &y)| s + x * y);
        let denom = (norm_a * norm_b).max(T::from_f64(COSINE_EPS));
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::scalar(dot / denom),
            Op::Cosine { a, b, norm_a, norm_b },
            needs,
        ))
    }

    /// Pairwise cosine similarities between rows of `f` (`n x d`) and rows
    /// of `w` (`m x d`), yielding `n x m`. Same clamp as [`Tape::cosine`].
    pub fn cosine_matrix(&mut self, f: VarId, w: VarId) -> Result<VarId> {
        let (n, d) = self.value(f).as_matrix()?;
        let (m, d2) = self.value(w).as_matrix()?;
        if d != d2 {
            return Err(KanetError::shape(
                "cosine_matrix",
                format!("feature dims {d} vs {d2}"),
            ));
        }
        let fv = self.value(f).data();
        let wv = self.value(w).data();
        let f_norms: Vec<T> = (0..n)
            .map(|i| fv[i * d..(i + 1) * d].iter().fold(T::zero(), |s, &v| s + v * v).sqrt())
            .collect();
        let w_norms: Vec<T> = (0..m)
            .map(|j| wv[j * d..(j + 1) * d].iter().fold(T::zero(), |s, &v| s + v * v).sqrt())
            .collect();
        let eps = T::from_f64(COSINE_EPS);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let fr = &fv[i * d..(i + 1) * d];
            for j in 0..m {
                let wr = &wv[j * d..(j + 1) * d];
                let dot = fr.iter().zip(wr).fold(T::zero(), |s, (&x, &y)| s + x * y);
                out[i * m + j] = dot / (f_norms[i] * w_norms[j]).max(eps);
            }
        }
        let needs = self.needs(&[f, w]);
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            Op::CosineMatrix { f, w, f_norms, w_norms },
            needs,
        ))
    }

    /// Mean negative log-likelihood over a batch of probability rows.
    /// Logs are clamped at 1e-12.
    pub fn cross_entropy(&mut self, probs: VarId, labels: &[usize]) -> Result<VarId> {
        let (b, c) = self.value(probs).as_matrix()?;
        if labels.len() != b {
            return Err(KanetError::shape(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(KanetError::Argument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let pv = self.value(probs).data();
        let clamp = T::from_f64(LOG_CLAMP);
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            debug_assert!(
                {
                    let sum: T = pv[i * c..(i + 1) * c].iter().fold(T::zero(), |s, &v| s + v);
                    (sum - T::one()).abs() < T::from_f64(1e-4)
                },
                "cross_entropy expects probability rows"
            );
            total += -(pv[i * c + y].max(clamp)).ln();
        }
        let mean = total / T::from_f64(b as f64);
        let needs = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy { probs, labels: labels.to_vec() },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let total = self.value(a).data().iter().fold(T::zero(), |s, &v| s + v);
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { a }, needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate by summation
    /// when a node feeds several consumers; nodes that do not need a
    /// gradient receive no storage.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(KanetError::Argument(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            // Nothing trainable upstream; vacuously done.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(grad) = self.grads[i].clone() else { continue };
            self.propagate(i, &grad)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: VarId, contrib: &[T]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, &c) in g.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, idx: usize, grad: &[T]) -> Result<()> {
        // Ops are moved out to appease the borrow checker, then restored.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).as_matrix()?;
                let (_, n) = self.value(*b).as_matrix()?;
                if self.nodes[a.0].needs_grad {
                    let da = matmul_nt(grad, self.value(*b).data(), m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = matmul_tn(self.value(*a).data(), grad, m, k, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::BiasAdd { a, bias } => {
                self.accumulate(*a, grad);
                if self.nodes[bias.0].needs_grad {
                    let (r, c) = self.value(*a).as_matrix()?;
                    let mut db = vec![T::zero(); c];
                    for row in 0..r {
                        for col in 0..c {
                            db[col] += grad[row * c + col];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<T> = grad.iter().map(|&g| g * *c).collect();
                self.accumulate(*a, &da);
            }
            Op::Gelu { a } => {
                if self.nodes[a.0].needs_grad {
                    let da: Vec<T> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| g * gelu_bwd(x))
                        .collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = self.nodes[idx].value.as_matrix()?;
                    let y = self.nodes[idx].value.data();
                    let mut da = vec![T::zero(); r * c];
                    for row in 0..r {
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &grad[row * c..(row + 1) * c];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                        for col in 0..c {
                            da[row * c + col] = yr[col] * (gr[col] - dot);
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (r, c) = self.value(*x).as_matrix()?;
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gamma).data().to_vec();
                let inv_c = T::one() / T::from_f64(c as f64);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); r * c];
                    for row in 0..r {
                        let xr = &xv[row * c..(row + 1) * c];
                        let gr = &grad[row * c..(row + 1) * c];
                        let (mu, istd) = (mean[row], inv_std[row]);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for col in 0..c {
                            let xhat = (xr[col] - mu) * istd;
                            let dxhat = gr[col] * gv[col];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for col in 0..c {
                            let xhat = (xr[col] - mu) * istd;
                            let dxhat = gr[col] * gv[col];
                            dx[row * c + col] = istd
                                * (dxhat - sum_dxhat * inv_c - xhat * sum_dxhat_xhat * inv_c);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                if self.nodes[gamma.0].needs_grad {
                    let mut dg = vec![T::zero(); c];
                    for row in 0..r {
                        let xr = &xv[row * c..(row + 1) * c];
                        let gr = &grad[row * c..(row + 1) * c];
                        let (mu, istd) = (mean[row], inv_std[row]);
                        for col in 0..c {
                            dg[col] += gr[col] * (xr[col] - mu) * istd;
                        }
                    }
                    self.accumulate(*gamma, &dg);
                }
                if self.nodes[beta.0].needs_grad {
                    let mut db = vec![T::zero(); c];
                    for row in 0..r {
                        for col in 0..c {
                            db[col] += grad[row * c + col];
                        }
                    }
                    self.accumulate(*beta, &db);
                }
            }
            Op::MeanRows { a } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = self.value(*a).as_matrix()?;
                    let inv_r = T::one() / T::from_f64(r as f64);
                    let mut da = vec![T::zero(); r * c];
                    for row in 0..r {
                        for col in 0..c {
                            da[row * c + col] = grad[col] * inv_r;
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.nodes[p.0].needs_grad {
                        let dp = grad[offset..offset + n].to_vec();
                        self.accumulate(p, &dp);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total_cols: usize = {
                    let (_, tc) = self.nodes[idx].value.as_matrix()?;
                    tc
                };
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = self.value(p).as_matrix()?;
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![T::zero(); r * w];
                        for row in 0..r {
                            dp[row * w..(row + 1) * w].copy_from_slice(
                                &grad[row * total_cols + offset..row * total_cols + offset + w],
                            );
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = self.value(*a).as_matrix()?;
                    let mut da = vec![T::zero(); r * c];
                    for row in 0..r {
                        da[row * c + start..row * c + start + len]
                            .copy_from_slice(&grad[row * len..(row + 1) * len]);
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = self.value(*a).as_matrix()?;
                    let mut da = vec![T::zero(); r * c];
                    da[start * c..(start + len) * c].copy_from_slice(grad);
                    self.accumulate(*a, &da);
                }
            }
            Op::Transpose { a } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = self.value(*a).as_matrix()?;
                    // grad has shape c x r; transpose it back.
                    let mut da = vec![T::zero(); r * c];
                    for row in 0..c {
                        for col in 0..r {
                            da[col * c + row] = grad[row * r + col];
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::Cosine { a, b, norm_a, norm_b } => {
                let g = grad[0];
                let cos = self.nodes[idx].value.item();
                let eps = T::from_f64(COSINE_EPS);
                let denom = (*norm_a * *norm_b).max(eps);
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if self.nodes[a.0].needs_grad {
                    let na2 = (*norm_a * *norm_a).max(eps);
                    let da: Vec<T> = av
                        .iter()
                        .zip(&bv)
                        .map(|(&x, &y)| g * (y / denom - cos * x / na2))
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let nb2 = (*norm_b * *norm_b).max(eps);
                    let db: Vec<T> = av
                        .iter()
                        .zip(&bv)
                        .map(|(&x, &y)| g * (x / denom - cos * y / nb2))
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::CosineMatrix { f, w, f_norms, w_norms } => {
                let (n, d) = self.value(*f).as_matrix()?;
                let (m, _) = self.value(*w).as_matrix()?;
                let eps = T::from_f64(COSINE_EPS);
                let fv = self.value(*f).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                let out = self.nodes[idx].value.data().to_vec();
                if self.nodes[f.0].needs_grad {
                    let mut df = vec![T::zero(); n * d];
                    for i in 0..n {
                        let fr = &fv[i * d..(i + 1) * d];
                        let nf2 = (f_norms[i] * f_norms[i]).max(eps);
                        for j in 0..m {
                            let g = grad[i * m + j];
                            if g == T::zero() {
                                continue;
                            }
                            let denom = (f_norms[i] * w_norms[j]).max(eps);
                            let cos = out[i * m + j];
                            let wr = &wv[j * d..(j + 1) * d];
                            for t in 0..d {
                                df[i * d + t] += g * (wr[t] / denom - cos * fr[t] / nf2);
                            }
                        }
                    }
                    self.accumulate(*f, &df);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); m * d];
                    for j in 0..m {
                        let wr = &wv[j * d..(j + 1) * d];
                        let nw2 = (w_norms[j] * w_norms[j]).max(eps);
                        for i in 0..n {
                            let g = grad[i * m + j];
                            if g == T::zero() {
                                continue;
                            }
                            let denom = (f_norms[i] * w_norms[j]).max(eps);
                            let cos = out[i * m + j];
                            let fr = &fv[i * d..(i + 1) * d];
                            for t in 0..d {
                                dw[j * d + t] += g * (fr[t] / denom - cos * wr[t] / nw2);
                            }
                        }
                    }
                    self.accumulate(*w, &dw);
                }
            }
            Op::CrossEntropy { probs, labels } => {
                if self.nodes[probs.0].needs_grad {
                    let (b, c) = self.value(*probs).as_matrix()?;
                    let pv = self.value(*probs).data();
                    let clamp = T::from_f64(LOG_CLAMP);
                    let g = grad[0];
                    let inv_b = T::one() / T::from_f64(b as f64);
                    let mut dp = vec![T::zero(); b * c];
                    for (i, &y) in labels.iter().enumerate() {
                        let p = pv[i * c + y];
                        if p > clamp {
                            dp[i * c + y] = -g * inv_b / p;
                        }
                    }
                    self.accumulate(*probs, &dp);
                }
            }
            Op::Sum { a } => {
                if self.nodes[a.0].needs_grad {
                    let da = vec![grad[0]; self.value(*a).numel()];
                    self.accumulate(*a, &da);
                }
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

/// In-place stabilized softmax of one row: exp(v - max v) / sum.
pub fn softmax_row_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * k * (T::one() + three * c * x * x)
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] * B^T where B is [k,n]
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    }
    out
}

/// C[k,n] = A^T * B where A is [m,k], B is [m,n]
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

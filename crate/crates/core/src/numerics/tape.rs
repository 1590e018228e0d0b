//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward calls append nodes; [`Tape::backward`] walks them once in reverse,
//! accumulating gradients into intermediate buffers and, at parameter leaves,
//! into the owning [`ParamStore`]. Forward values are never mutated.

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tensor::{
    gelu_grad_scalar, gelu_scalar, matmul_nn, matmul_nt, matmul_tn, softmax_slice, Real, Tensor,
};
use super::NumericsError;

/// Additive pre-softmax penalty for causally masked attention slots. Large
/// enough that the masked weight underflows to exactly zero, small enough
/// to stay finite.
const CAUSAL_MASK_PENALTY: Real = -1.0e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    AddBias { a: NodeId, bias: NodeId },
    MulElem(NodeId, NodeId),
    Scale { a: NodeId, factor: Real },
    Sum(NodeId),
    MatmulNN { a: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    CausalMask(NodeId),
    LayerNormRows {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // (mean, inv_std) per row, captured at forward time
        cache: Vec<(Real, Real)>,
    },
    GatherRows { table: NodeId, indices: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    Dropout { a: NodeId, mask: Vec<Real> },
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        // softmax rows for masked positions, zeros elsewhere
        probs: Tensor,
        scored: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward computation. Create a fresh tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter leaf; backward accumulates into its gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::Shape(format!(
                "add of mismatched shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), values)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a rank-1 bias across every row of a rank-2 tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape().len() != 2 || tb.shape().len() != 1 || ta.cols() != tb.shape()[0] {
            return Err(NumericsError::Shape(format!(
                "bias of shape {:?} does not broadcast over {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut values = ta.values().to_vec();
        for i in 0..m {
            for j in 0..n {
                values[i * n + j] += tb.values()[j];
            }
        }
        let t = Tensor::new(vec![m, n], values)?;
        Ok(self.push(t, Op::AddBias { a, bias }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::Shape(format!(
                "elementwise product of mismatched shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), values)?;
        Ok(self.push(t, Op::MulElem(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: Real) -> NodeId {
        let values = self.value(a).values().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), values).expect("same shape");
        self.push(t, Op::Scale { a, factor })
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: Real = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let t = matmul_nn(self.value(a), self.value(b))?;
        Ok(self.push(t, Op::MatmulNN { a, b }))
    }

    /// A · Bᵀ; the second operand is stored row-major untransposed, which is
    /// the layout of both attention keys and the tied output embedding.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let t = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(t, Op::MatmulNT { a, b }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let values = self.value(a).values().iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), values).expect("same shape");
        self.push(t, Op::Gelu(a))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(NumericsError::Shape(format!(
                "softmax_rows needs rank 2, got {:?}",
                ta.shape()
            )));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_slice(&ta.values()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::SoftmaxRows(a)))
    }

    /// Adds a large negative penalty to every strictly-upper-triangular
    /// entry, so a following row softmax assigns those slots exactly zero.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || ta.rows() != ta.cols() {
            return Err(NumericsError::Shape(format!(
                "causal mask needs a square matrix, got {:?}",
                ta.shape()
            )));
        }
        let n = ta.rows();
        let mut values = ta.values().to_vec();
        for i in 0..n {
            for j in (i + 1)..n {
                values[i * n + j] += CAUSAL_MASK_PENALTY;
            }
        }
        let t = Tensor::new(vec![n, n], values)?;
        Ok(self.push(t, Op::CausalMask(a)))
    }

    /// Per-row layer normalization with affine parameters, epsilon 1e-5.
    pub fn layer_norm_rows(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NumericsError> {
        const EPS: Real = 1e-5;
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(NumericsError::Shape(format!(
                "layer norm needs rank 2, got {:?}",
                ta.shape()
            )));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(NumericsError::Shape(format!(
                "layer norm affine shapes {:?}/{:?} do not match width {n}",
                tg.shape(),
                tb.shape()
            )));
        }
        let mut cache = Vec::with_capacity(m);
        let mut values = vec![0.0; m * n];
        {
            let xa = self.value(a).values();
            let g = self.value(gamma).values().to_vec();
            let b = self.value(beta).values().to_vec();
            for i in 0..m {
                let row = &xa[i * n..(i + 1) * n];
                let mean = row.iter().sum::<Real>() / n as Real;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / n as Real;
                let inv_std = 1.0 / (var + EPS).sqrt();
                cache.push((mean, inv_std));
                for j in 0..n {
                    values[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], values)?;
        Ok(self.push(t, Op::LayerNormRows { a, gamma, beta, cache }))
    }

    /// Selects rows of `table` by index; the embedding lookup.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, NumericsError> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(NumericsError::Shape(format!(
                "gather table needs rank 2, got {:?}",
                tt.shape()
            )));
        }
        let (rows, n) = (tt.rows(), tt.cols());
        let mut values = Vec::with_capacity(indices.len() * n);
        for &idx in indices {
            if idx >= rows {
                return Err(NumericsError::Validation(format!(
                    "gather index {idx} out of range for table with {rows} rows"
                )));
            }
            values.extend_from_slice(&tt.values()[idx * n..(idx + 1) * n]);
        }
        let t = Tensor::new(vec![indices.len(), n], values)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Validation("concat of zero tensors".into()));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.rows() != m {
                return Err(NumericsError::Shape(format!(
                    "concat_cols row counts disagree: {:?}",
                    tp.shape()
                )));
            }
            total += tp.cols();
        }
        let mut values = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            let n = tp.cols();
            for i in 0..m {
                values[i * total + offset..i * total + offset + n]
                    .copy_from_slice(&tp.values()[i * n..(i + 1) * n]);
            }
            offset += n;
        }
        let t = Tensor::new(vec![m, total], values)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Inverted dropout: kept entries scale by 1/(1-p). A zero rate records
    /// nothing.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, p: Real, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask: Vec<Real> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < keep as f64 {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), values).expect("same shape");
        self.push(t, Op::Dropout { a, mask })
    }

    /// Mean over masked positions of the negative log-likelihood of each
    /// target under the row softmax of `logits`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId, NumericsError> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 {
            return Err(NumericsError::Shape(format!(
                "cross entropy needs rank-2 logits, got {:?}",
                tl.shape()
            )));
        }
        let (rows, vocab) = (tl.rows(), tl.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(NumericsError::Validation(format!(
                "cross entropy over {rows} rows got {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let scored = mask.iter().filter(|&&m| m).count();
        if scored == 0 {
            return Err(NumericsError::Validation(
                "cross entropy mask selects no positions".into(),
            ));
        }
        let mut probs = Tensor::zeros(&[rows, vocab]);
        let mut total = 0.0;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            let target = targets[t] as usize;
            if target >= vocab {
                return Err(NumericsError::Validation(format!(
                    "target id {target} out of range for vocabulary {vocab}"
                )));
            }
            let row = &tl.values()[t * vocab..(t + 1) * vocab];
            softmax_slice(row, &mut probs.values_mut()[t * vocab..(t + 1) * vocab]);
            let p = probs.values()[t * vocab + target];
            total += -(p.max(Real::MIN_POSITIVE)).ln();
        }
        let loss = total / scored as Real;
        if !loss.is_finite() {
            return Err(NumericsError::NonFinite("cross entropy loss".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.iter().map(|&t| t as usize).collect(),
                mask: mask.to_vec(),
                probs,
                scored,
            },
        ))
    }

    /// Accumulates d(loss)/d(parameter) into every parameter gradient that
    /// participated in producing `loss`. Untouched parameters keep their
    /// current (typically zero) gradients.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<(), NumericsError> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(NumericsError::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::new(
            loss_node.value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let target = store.get_mut(*pid);
                    for (g, d) in target.grad.values_mut().iter_mut().zip(grad.values()) {
                        *g += d;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &grad);
                    acc(&mut grads, *b, &grad);
                }
                Op::AddBias { a, bias } => {
                    acc(&mut grads, *a, &grad);
                    let (m, n) = (grad.rows(), grad.cols());
                    let mut db = Tensor::zeros(&[n]);
                    for i in 0..m {
                        for j in 0..n {
                            db.values_mut()[j] += grad.values()[i * n + j];
                        }
                    }
                    acc(&mut grads, *bias, &db);
                }
                Op::MulElem(a, b) => {
                    let da = elementwise_product(&grad, self.value(*b));
                    let db = elementwise_product(&grad, self.value(*a));
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Scale { a, factor } => {
                    let values = grad.values().iter().map(|g| g * factor).collect();
                    let da = Tensor::new(grad.shape().to_vec(), values)?;
                    acc(&mut grads, *a, &da);
                }
                Op::Sum(a) => {
                    let g = grad.item();
                    let shape = self.value(*a).shape().to_vec();
                    let len = self.value(*a).len();
                    let da = Tensor::new(shape, vec![g; len])?;
                    acc(&mut grads, *a, &da);
                }
                Op::MatmulNN { a, b } => {
                    let da = matmul_nt(&grad, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &grad)?;
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::MatmulNT { a, b } => {
                    let da = matmul_nn(&grad, self.value(*b))?;
                    let db = matmul_tn(&grad, self.value(*a))?;
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Gelu(a) => {
                    let values = self
                        .value(*a)
                        .values()
                        .iter()
                        .zip(grad.values())
                        .map(|(&x, g)| g * gelu_grad_scalar(x))
                        .collect();
                    let da = Tensor::new(grad.shape().to_vec(), values)?;
                    acc(&mut grads, *a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let yrow = &y.values()[r * n..(r + 1) * n];
                        let grow = &grad.values()[r * n..(r + 1) * n];
                        let dot: Real = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for c in 0..n {
                            da.values_mut()[r * n + c] = yrow[c] * (grow[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::CausalMask(a) => {
                    // An additive constant: the gradient passes through.
                    acc(&mut grads, *a, &grad);
                }
                Op::LayerNormRows { a, gamma, beta, cache } => {
                    let x = self.value(*a);
                    let g = self.value(*gamma);
                    let (m, n) = (x.rows(), x.cols());
                    let mut da = Tensor::zeros(&[m, n]);
                    let mut dgamma = Tensor::zeros(&[n]);
                    let mut dbeta = Tensor::zeros(&[n]);
                    for r in 0..m {
                        let (mean, inv_std) = cache[r];
                        let xrow = &x.values()[r * n..(r + 1) * n];
                        let grow = &grad.values()[r * n..(r + 1) * n];
                        let mut sum_dyg = 0.0;
                        let mut sum_dyg_xhat = 0.0;
                        for c in 0..n {
                            let xhat = (xrow[c] - mean) * inv_std;
                            let dyg = grow[c] * g.values()[c];
                            sum_dyg += dyg;
                            sum_dyg_xhat += dyg * xhat;
                            dgamma.values_mut()[c] += grow[c] * xhat;
                            dbeta.values_mut()[c] += grow[c];
                        }
                        let inv_n = 1.0 / n as Real;
                        for c in 0..n {
                            let xhat = (xrow[c] - mean) * inv_std;
                            let dyg = grow[c] * g.values()[c];
                            da.values_mut()[r * n + c] = inv_std
                                * (dyg - inv_n * sum_dyg - xhat * inv_n * sum_dyg_xhat);
                        }
                    }
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *gamma, &dgamma);
                    acc(&mut grads, *beta, &dbeta);
                }
                Op::GatherRows { table, indices } => {
                    let width = self.value(*table).cols();
                    let rows = self.value(*table).rows();
                    let mut dt = Tensor::zeros(&[rows, width]);
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..width {
                            dt.values_mut()[idx * width + c] += grad.values()[r * width + c];
                        }
                    }
                    acc(&mut grads, *table, &dt);
                }
                Op::ConcatCols(parts) => {
                    let m = grad.rows();
                    let total = grad.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        let mut dp = Tensor::zeros(&[m, n]);
                        for r in 0..m {
                            dp.values_mut()[r * n..(r + 1) * n].copy_from_slice(
                                &grad.values()[r * total + offset..r * total + offset + n],
                            );
                        }
                        acc(&mut grads, p, &dp);
                        offset += n;
                    }
                }
                Op::Dropout { a, mask } => {
                    let values = grad
                        .values()
                        .iter()
                        .zip(mask)
                        .map(|(g, m)| g * m)
                        .collect();
                    let da = Tensor::new(grad.shape().to_vec(), values)?;
                    acc(&mut grads, *a, &da);
                }
                Op::MaskedCrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    scored,
                } => {
                    let up = grad.item() / *scored as Real;
                    let (rows, vocab) = (probs.rows(), probs.cols());
                    let mut dl = Tensor::zeros(&[rows, vocab]);
                    for t in 0..rows {
                        if !mask[t] {
                            continue;
                        }
                        for v in 0..vocab {
                            let indicator = if v == targets[t] { 1.0 } else { 0.0 };
                            dl.values_mut()[t * vocab + v] =
                                up * (probs.values()[t * vocab + v] - indicator);
                        }
                    }
                    acc(&mut grads, *logits, &dl);
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (g, d) in existing.values_mut().iter_mut().zip(delta.values()) {
                *g += d;
            }
        }
        slot => *slot = Some(delta.clone()),
    }
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::new(a.shape().to_vec(), values).expect("same shape")
}

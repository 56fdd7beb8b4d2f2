//! Dense tensors with a recorded forward graph and reverse-mode gradients.
//!
//! Tensors are immutable once created; an op output keeps reference-counted
//! handles to its inputs, so the graph for a loss stays alive exactly as
//! long as the loss value does. When no input of an op tracks gradients the
//! parents are not recorded at all, which lets inference loops run without
//! accumulating a graph.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} data values for shape {shape:?}, got {got}")]
    BadData {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: id {id} out of range for size {size}")]
    IdOutOfRange {
        op: &'static str,
        id: u32,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a tensor that does not require gradients")]
    NoGradPath,
    #[error("backward already called on this loss; rebuild the graph to reset")]
    BackwardTwice,
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type TensorId = u64;

fn next_id() -> TensorId {
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

enum Op {
    /// Elementwise add; rhs shape must be a suffix of lhs shape and is
    /// broadcast over the leading dimensions.
    Add(Tensor, Tensor),
    /// Elementwise multiply, same shape.
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    Matmul(Tensor, Tensor),
    /// `A x B^T` on the last two dims: `[b,m,k] x [b,n,k] -> [b,m,n]`.
    MatmulNT(Tensor, Tensor),
    /// Softmax over the last dimension.
    Softmax(Tensor),
    Gelu(Tensor),
    Relu(Tensor),
    /// RMS normalization over the last dimension with a learned scale.
    RmsNorm { x: Tensor, scale: Tensor, eps: f64 },
    /// Row gather: table `[v,d]`, ids flat -> `[len(ids), d]`.
    Embedding { table: Tensor, ids: Rc<Vec<u32>> },
    /// Mean negative log-likelihood of `targets` under `logits [n,v]`,
    /// restricted to rows where `mask` is true.
    CrossEntropy {
        logits: Tensor,
        targets: Rc<Vec<u32>>,
        mask: Rc<Vec<bool>>,
    },
    /// Swap two axes.
    SwapAxes(Tensor, usize, usize),
    Reshape(Tensor),
    Sum(Tensor),
}

struct TensorInner {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Option<Op>,
    requires_grad: bool,
    backward_done: Cell<bool>,
}

/// Dense 64-bit tensor; cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor(Rc<TensorInner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Gradients keyed by tensor id, produced by [`Tensor::backward`].
pub struct GradStore {
    grads: HashMap<TensorId, Vec<f64>>,
}

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.grads.remove(&t.id())
    }
}

impl Tensor {
    fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Tensor {
        Tensor(Rc::new(TensorInner {
            id: next_id(),
            shape,
            data: Arc::new(data),
            // Parents are only retained when a gradient can flow to them.
            op: requires_grad.then_some(op),
            requires_grad,
            backward_done: Cell::new(false),
        }))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Arc<Vec<f64>>) -> Result<Tensor, NumericsError> {
        Self::leaf(shape, data, true)
    }

    /// Leaf tensor treated as a constant.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor, NumericsError> {
        Self::leaf(shape, Arc::new(data), false)
    }

    pub fn leaf(
        shape: &[usize],
        data: Arc<Vec<f64>>,
        requires_grad: bool,
    ) -> Result<Tensor, NumericsError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NumericsError::BadData {
                op: "leaf",
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor(Rc::new(TensorInner {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            op: None,
            requires_grad,
            backward_done: Cell::new(false),
        })))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1], vec![v]).unwrap()
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.0.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn to_scalar(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    // ---- ops ---------------------------------------------------------

    /// Elementwise add; `rhs.shape` must equal `self.shape` or be a suffix
    /// of it (broadcast over leading dims).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        let ls = self.shape();
        let rs = rhs.shape();
        if !(ls == rs || (rs.len() < ls.len() && ls.ends_with(rs))) {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let rlen = rhs.numel().max(1);
        let mut out = self.data().to_vec();
        let rdata = rhs.data();
        for (i, o) in out.iter_mut().enumerate() {
            *o += rdata[i % rlen];
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(
            ls.to_vec(),
            out,
            Op::Add(self.clone(), rhs.clone()),
            rg,
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        if self.shape() != rhs.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Mul(self.clone(), rhs.clone()),
            rg,
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|a| a * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Scale(self.clone(), s),
            self.requires_grad(),
        )
    }

    fn matmul_dims(
        lhs: &[usize],
        rhs: &[usize],
        transpose_rhs: bool,
        op: &'static str,
    ) -> Result<(usize, usize, usize, usize), NumericsError> {
        let mismatch = || NumericsError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        match (lhs.len(), rhs.len()) {
            (2, 2) => {
                let (m, k) = (lhs[0], lhs[1]);
                let (rk, n) = if transpose_rhs {
                    (rhs[1], rhs[0])
                } else {
                    (rhs[0], rhs[1])
                };
                if k != rk {
                    return Err(mismatch());
                }
                Ok((1, m, k, n))
            }
            (3, 3) => {
                if lhs[0] != rhs[0] {
                    return Err(mismatch());
                }
                let (m, k) = (lhs[1], lhs[2]);
                let (rk, n) = if transpose_rhs {
                    (rhs[2], rhs[1])
                } else {
                    (rhs[1], rhs[2])
                };
                if k != rk {
                    return Err(mismatch());
                }
                Ok((lhs[0], m, k, n))
            }
            _ => Err(mismatch()),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`, or batched over a shared leading dim.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        let (b, m, k, n) = Self::matmul_dims(self.shape(), rhs.shape(), false, "matmul")?;
        let mut out = vec![0.0; b * m * n];
        for bi in 0..b {
            mm_nn(
                &self.data()[bi * m * k..][..m * k],
                &rhs.data()[bi * k * n..][..k * n],
                &mut out[bi * m * n..][..m * n],
                m,
                k,
                n,
            );
        }
        let shape = if self.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![b, m, n]
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Matmul(self.clone(), rhs.clone()),
            rg,
        ))
    }

    /// `A x B^T` on the last two dims: `[b,m,k] x [b,n,k] -> [b,m,n]`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        let (b, m, k, n) = Self::matmul_dims(self.shape(), rhs.shape(), true, "matmul_nt")?;
        let mut out = vec![0.0; b * m * n];
        for bi in 0..b {
            mm_nt(
                &self.data()[bi * m * k..][..m * k],
                &rhs.data()[bi * n * k..][..n * k],
                &mut out[bi * m * n..][..m * n],
                m,
                k,
                n,
            );
        }
        let shape = if self.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![b, m, n]
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(
            shape,
            out,
            Op::MatmulNT(self.clone(), rhs.clone()),
            rg,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self) -> Result<Tensor, NumericsError> {
        let width = *self.shape().last().ok_or(NumericsError::Invalid {
            op: "softmax",
            msg: "rank-0 tensor".into(),
        })?;
        let mut out = vec![0.0; self.numel()];
        for (row_in, row_out) in self.data().chunks(width).zip(out.chunks_mut(width)) {
            softmax_row(row_in, row_out);
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax(self.clone()),
            self.requires_grad(),
        ))
    }

    pub fn gelu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| gelu_fwd(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Gelu(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Relu(self.clone()),
            self.requires_grad(),
        )
    }

    /// RMS normalization over the last dimension:
    /// `y = x / sqrt(mean(x^2) + eps) * scale`.
    pub fn rms_normalize(&self, scale: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
        let width = *self.shape().last().ok_or(NumericsError::Invalid {
            op: "rms_normalize",
            msg: "rank-0 tensor".into(),
        })?;
        if scale.shape() != [width] {
            return Err(NumericsError::ShapeMismatch {
                op: "rms_normalize",
                lhs: self.shape().to_vec(),
                rhs: scale.shape().to_vec(),
            });
        }
        let g = scale.data();
        let mut out = vec![0.0; self.numel()];
        for (row_in, row_out) in self.data().chunks(width).zip(out.chunks_mut(width)) {
            let ms = row_in.iter().map(|v| v * v).sum::<f64>() / width as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for i in 0..width {
                row_out[i] = row_in[i] * inv * g[i];
            }
        }
        let rg = self.requires_grad() || scale.requires_grad();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::RmsNorm {
                x: self.clone(),
                scale: scale.clone(),
                eps,
            },
            rg,
        ))
    }

    /// Gathers rows of `self` (`[v,d]`) for each id, producing `[ids.len(), d]`.
    pub fn embedding_lookup(&self, ids: &[u32]) -> Result<Tensor, NumericsError> {
        if self.shape().len() != 2 {
            return Err(NumericsError::Invalid {
                op: "embedding_lookup",
                msg: format!("table must be rank 2, got {:?}", self.shape()),
            });
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(NumericsError::IdOutOfRange {
                    op: "embedding_lookup",
                    id,
                    size: v,
                });
            }
            out.extend_from_slice(&self.data()[id as usize * d..][..d]);
        }
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: self.clone(),
                ids: Rc::new(ids.to_vec()),
            },
            self.requires_grad(),
        ))
    }

    /// Mean negative log-likelihood of `targets` under `self = [n, v]`
    /// logits, averaged over rows with `mask[i] == true`.
    pub fn cross_entropy(&self, targets: &[u32], mask: &[bool]) -> Result<Tensor, NumericsError> {
        if self.shape().len() != 2 {
            return Err(NumericsError::Invalid {
                op: "cross_entropy",
                msg: format!("logits must be rank 2, got {:?}", self.shape()),
            });
        }
        let (n, v) = (self.shape()[0], self.shape()[1]);
        if targets.len() != n || mask.len() != n {
            return Err(NumericsError::BadData {
                op: "cross_entropy",
                shape: self.shape().to_vec(),
                expected: n,
                got: targets.len().min(mask.len()),
            });
        }
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return Err(NumericsError::Invalid {
                op: "cross_entropy",
                msg: "mask excludes every position".into(),
            });
        }
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t as usize >= v {
                return Err(NumericsError::IdOutOfRange {
                    op: "cross_entropy",
                    id: t,
                    size: v,
                });
            }
            let row = &self.data()[i * v..][..v];
            total += log_sum_exp(row) - row[t as usize];
        }
        let loss = total / kept as f64;
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: Rc::new(targets.to_vec()),
                mask: Rc::new(mask.to_vec()),
            },
            self.requires_grad(),
        ))
    }

    pub fn swap_axes(&self, a: usize, b: usize) -> Result<Tensor, NumericsError> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(NumericsError::Invalid {
                op: "swap_axes",
                msg: format!("axes ({a},{b}) out of range for rank {rank}"),
            });
        }
        let mut shape = self.shape().to_vec();
        shape.swap(a, b);
        let out = permute_two_axes(self.data(), self.shape(), a, b);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::SwapAxes(self.clone(), a, b),
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>();
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()), self.requires_grad())
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients for every gradient-tracking tensor reachable
    /// from this scalar loss.
    pub fn backward(&self) -> Result<GradStore, NumericsError> {
        if self.numel() != 1 {
            return Err(NumericsError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(NumericsError::NoGradPath);
        }
        if self.0.backward_done.replace(true) {
            return Err(NumericsError::BackwardTwice);
        }

        let order = topo_order(self);
        let mut grads: HashMap<TensorId, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(op) = &node.0.op else { continue };
            let Some(out_grad) = grads.get(&node.id()).cloned() else {
                continue;
            };
            backprop_op(op, node, &out_grad, &mut grads);
        }
        Ok(GradStore { grads })
    }
}

/// Deterministic post-order over the op graph (children before parents).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashMap<TensorId, ()> = HashMap::new();
    // Explicit stack; the second visit of a frame emits the node.
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if visited.insert(node.id(), ()).is_some() {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = &node.0.op {
            for input in op_inputs(op) {
                if input.requires_grad() && !visited.contains_key(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Add(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::MatmulNT(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Softmax(a)
        | Op::Gelu(a)
        | Op::Relu(a)
        | Op::SwapAxes(a, _, _)
        | Op::Reshape(a)
        | Op::Sum(a) => vec![a],
        Op::RmsNorm { x, scale, .. } => vec![x, scale],
        Op::Embedding { table, .. } => vec![table],
        Op::CrossEntropy { logits, .. } => vec![logits],
    }
}

fn accumulate(grads: &mut HashMap<TensorId, Vec<f64>>, t: &Tensor, g: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    match grads.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (acc, add) in e.get_mut().iter_mut().zip(&g) {
                *acc += add;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn backprop_op(op: &Op, out: &Tensor, og: &[f64], grads: &mut HashMap<TensorId, Vec<f64>>) {
    match op {
        Op::Add(a, b) => {
            accumulate(grads, a, og.to_vec());
            if b.requires_grad() {
                // Sum the upstream gradient over broadcast leading dims.
                let rlen = b.numel();
                let mut gb = vec![0.0; rlen];
                for (i, &g) in og.iter().enumerate() {
                    gb[i % rlen] += g;
                }
                accumulate(grads, b, gb);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let ga: Vec<f64> = og.iter().zip(b.data()).map(|(g, bv)| g * bv).collect();
                accumulate(grads, a, ga);
            }
            if b.requires_grad() {
                let gb: Vec<f64> = og.iter().zip(a.data()).map(|(g, av)| g * av).collect();
                accumulate(grads, b, gb);
            }
        }
        Op::Scale(a, s) => {
            accumulate(grads, a, og.iter().map(|g| g * s).collect());
        }
        Op::Matmul(a, b) => {
            // C = A B: dA = dC B^T, dB = A^T dC.
            let (bs, m, k, n) =
                Tensor::matmul_dims(a.shape(), b.shape(), false, "matmul").expect("checked");
            if a.requires_grad() {
                let mut ga = vec![0.0; bs * m * k];
                for bi in 0..bs {
                    mm_nt(
                        &og[bi * m * n..][..m * n],
                        &b.data()[bi * k * n..][..k * n],
                        &mut ga[bi * m * k..][..m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(grads, a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; bs * k * n];
                for bi in 0..bs {
                    mm_tn(
                        &a.data()[bi * m * k..][..m * k],
                        &og[bi * m * n..][..m * n],
                        &mut gb[bi * k * n..][..k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(grads, b, gb);
            }
        }
        Op::MatmulNT(a, b) => {
            // C = A B^T: dA = dC B, dB = dC^T A.
            let (bs, m, k, n) =
                Tensor::matmul_dims(a.shape(), b.shape(), true, "matmul_nt").expect("checked");
            if a.requires_grad() {
                let mut ga = vec![0.0; bs * m * k];
                for bi in 0..bs {
                    mm_nn(
                        &og[bi * m * n..][..m * n],
                        &b.data()[bi * n * k..][..n * k],
                        &mut ga[bi * m * k..][..m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(grads, a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; bs * n * k];
                for bi in 0..bs {
                    mm_tn(
                        &og[bi * m * n..][..m * n],
                        &a.data()[bi * m * k..][..m * k],
                        &mut gb[bi * n * k..][..n * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(grads, b, gb);
            }
        }
        Op::Softmax(a) => {
            let width = *out.shape().last().unwrap();
            let y = out.data();
            let mut ga = vec![0.0; a.numel()];
            for r in 0..a.numel() / width {
                let yr = &y[r * width..][..width];
                let gr = &og[r * width..][..width];
                let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                for i in 0..width {
                    ga[r * width + i] = yr[i] * (gr[i] - dot);
                }
            }
            accumulate(grads, a, ga);
        }
        Op::Gelu(a) => {
            let ga: Vec<f64> = a
                .data()
                .iter()
                .zip(og)
                .map(|(&x, g)| g * gelu_bwd(x))
                .collect();
            accumulate(grads, a, ga);
        }
        Op::Relu(a) => {
            let ga: Vec<f64> = a
                .data()
                .iter()
                .zip(og)
                .map(|(&x, g)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, a, ga);
        }
        Op::RmsNorm { x, scale, eps } => {
            let width = *x.shape().last().unwrap();
            let g = scale.data();
            let mut gx = vec![0.0; x.numel()];
            let mut gscale = vec![0.0; width];
            for r in 0..x.numel() / width {
                let xr = &x.data()[r * width..][..width];
                let gr = &og[r * width..][..width];
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / width as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                // dL/dx_j = inv*g_j*G_j - x_j*inv^3/width * sum_i(G_i*g_i*x_i)
                let dot: f64 = (0..width).map(|i| gr[i] * g[i] * xr[i]).sum();
                let c = inv * inv * inv / width as f64;
                for j in 0..width {
                    gx[r * width + j] = inv * g[j] * gr[j] - xr[j] * c * dot;
                }
                for i in 0..width {
                    gscale[i] += gr[i] * xr[i] * inv;
                }
            }
            accumulate(grads, x, gx);
            accumulate(grads, scale, gscale);
        }
        Op::Embedding { table, ids } => {
            let d = table.shape()[1];
            let mut gt = vec![0.0; table.numel()];
            for (row, &id) in ids.iter().enumerate() {
                let dst = &mut gt[id as usize * d..][..d];
                let src = &og[row * d..][..d];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            accumulate(grads, table, gt);
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
        } => {
            let (n, v) = (logits.shape()[0], logits.shape()[1]);
            let kept = mask.iter().filter(|&&m| m).count() as f64;
            let scale = og[0] / kept;
            let mut gl = vec![0.0; n * v];
            let mut probs = vec![0.0; v];
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let row = &logits.data()[i * v..][..v];
                softmax_row(row, &mut probs);
                let grow = &mut gl[i * v..][..v];
                for j in 0..v {
                    grow[j] = probs[j] * scale;
                }
                grow[targets[i] as usize] -= scale;
            }
            accumulate(grads, logits, gl);
        }
        Op::SwapAxes(a, ax0, ax1) => {
            let ga = permute_two_axes(og, out.shape(), *ax0, *ax1);
            accumulate(grads, a, ga);
        }
        Op::Reshape(a) => {
            accumulate(grads, a, og.to_vec());
        }
        Op::Sum(a) => {
            accumulate(grads, a, vec![og[0]; a.numel()]);
        }
    }
}

// ---- kernels ----------------------------------------------------------

/// C += A B, row-major. The k-inner update over contiguous rows of B and C
/// is the throughput-critical loop for the whole crate.
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let crow = &mut c[i * n..][..n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..][..n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A B^T (B stored [n,k]); row-by-row dot products.
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let crow = &mut c[i * n..][..n];
        for j in 0..n {
            let brow = &b[j * k..][..k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            crow[j] += acc;
        }
    }
}

/// C += A^T B (A stored [m,k], C is [k,n]).
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let brow = &b[i * n..][..n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..][..n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn permute_two_axes(data: &[f64], shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    if a == b {
        return data.to_vec();
    }
    let (a, b) = (a.min(b), a.max(b));
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);

    // Collapse to 5 logical dims: [pre, A, mid, B, post].
    let pre: usize = shape[..a].iter().product();
    let da = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let db = shape[b];
    let post: usize = shape[b + 1..rank].iter().product();

    let mut out = vec![0.0; data.len()];
    for p in 0..pre {
        for ia in 0..da {
            for im in 0..mid {
                for ib in 0..db {
                    let src = (((p * da + ia) * mid + im) * db + ib) * post;
                    let dst = (((p * db + ib) * mid + im) * da + ia) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        use rand_distr_like::*;
        (0..n).map(|_| normal(rng)).collect()
    }

    // Box-Muller; avoids pulling rand_distr in for tests.
    mod rand_distr_like {
        use rand::Rng;
        pub fn normal<R: Rng>(rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::leaf(shape, Arc::new(data), true).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tensor::constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = t.softmax().unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn rms_normalize_constant_vector_is_ones() {
        let x = Tensor::constant(&[4], vec![3.0; 4]).unwrap();
        let g = Tensor::constant(&[4], vec![1.0; 4]).unwrap();
        let y = x.rms_normalize(&g, 1e-9).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn cross_entropy_perfect_logits_tend_to_zero() {
        // One-hot-correct logits with growing margin drive the loss to 0.
        let mut prev = f64::INFINITY;
        for margin in [2.0, 8.0, 32.0] {
            let logits = Tensor::constant(&[1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let loss = logits.cross_entropy(&[0], &[true]).unwrap().to_scalar();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn square_function_gradient() {
        let x = param(&[1], vec![3.0]);
        let y = x.mul(&x).unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits_data = randn(&mut rng, 4 * 5);
        let logits = param(&[4, 5], logits_data.clone());
        let targets = [1u32, 0, 4, 2];
        let mask = [true, true, false, true];
        let loss = logits.cross_entropy(&targets, &mask).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&logits).unwrap();

        let kept = 3.0;
        for i in 0..4 {
            let row = &logits_data[i * 5..][..5];
            let mut probs = vec![0.0; 5];
            softmax_row(row, &mut probs);
            for j in 0..5 {
                let expected = if mask[i] {
                    (probs[j] - if j == targets[i] as usize { 1.0 } else { 0.0 }) / kept
                } else {
                    0.0
                };
                assert!(
                    (g[i * 5 + j] - expected).abs() < 1e-12,
                    "row {i} col {j}: {} vs {expected}",
                    g[i * 5 + j]
                );
            }
        }
    }

    #[test]
    fn backward_twice_rejected() {
        let x = param(&[1], vec![2.0]);
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert!(matches!(y.backward(), Err(NumericsError::BackwardTwice)));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::constant(&[4, 2], vec![0.0; 8]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let table = Tensor::constant(&[4, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(
            table.embedding_lookup(&[0, 4]),
            Err(NumericsError::IdOutOfRange { .. })
        ));
    }

    /// Central finite differences against every element of every
    /// gradient-tracking input of a scalar-valued graph.
    fn check_gradients<F>(inputs: &mut [(Vec<usize>, Vec<f64>)], f: F)
    where
        F: Fn(&[Tensor]) -> Tensor,
    {
        let build = |vals: &[(Vec<usize>, Vec<f64>)]| -> Vec<Tensor> {
            vals.iter()
                .map(|(s, d)| param(s, d.clone()))
                .collect::<Vec<_>>()
        };
        let tensors = build(inputs);
        let loss = f(&tensors);
        assert_eq!(loss.numel(), 1, "loss must be scalar");
        let grads = loss.backward().unwrap();
        let analytic: Vec<Vec<f64>> = tensors
            .iter()
            .map(|t| grads.get(t).map(|g| g.to_vec()).unwrap_or_default())
            .collect();

        let h = 1e-5;
        for ti in 0..inputs.len() {
            for ei in 0..inputs[ti].1.len() {
                let orig = inputs[ti].1[ei];
                inputs[ti].1[ei] = orig + h;
                let up = f(&build(inputs)).to_scalar();
                inputs[ti].1[ei] = orig - h;
                let down = f(&build(inputs)).to_scalar();
                inputs[ti].1[ei] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = if analytic[ti].is_empty() {
                    0.0
                } else {
                    analytic[ti][ei]
                };
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (a - numeric).abs() / denom <= 1e-4,
                    "input {ti} elem {ei}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn finite_difference_add_mul_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut inputs = vec![
            (vec![2, 3], randn(&mut rng, 6)),
            (vec![3], randn(&mut rng, 3)),
        ];
        check_gradients(&mut inputs, |t| {
            let x = t[0].add(&t[1]).unwrap().scale(1.7);
            let y = x.mul(&x).unwrap();
            y.sum_all()
        });
    }

    #[test]
    fn finite_difference_matmul_both_orients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut inputs = vec![
            (vec![2, 3, 4], randn(&mut rng, 24)),
            (vec![2, 4, 2], randn(&mut rng, 16)),
            (vec![2, 5, 4], randn(&mut rng, 40)),
        ];
        check_gradients(&mut inputs, |t| {
            let c = t[0].matmul(&t[1]).unwrap(); // [2,3,2]
            let d = t[0].matmul_nt(&t[2]).unwrap(); // [2,3,5]
            c.sum_all().add(&d.mul(&d).unwrap().sum_all()).unwrap()
        });
    }

    #[test]
    fn finite_difference_softmax_gelu_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut inputs = vec![(vec![3, 4], randn(&mut rng, 12))];
        check_gradients(&mut inputs, |t| {
            let s = t[0].softmax().unwrap();
            let g = t[0].gelu();
            let r = t[0].scale(0.5).relu();
            let mix = s.add(&g).unwrap().add(&r).unwrap();
            mix.mul(&mix).unwrap().sum_all()
        });
    }

    #[test]
    fn finite_difference_rms_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut inputs = vec![
            (vec![3, 4], randn(&mut rng, 12)),
            (vec![4], randn(&mut rng, 4)),
        ];
        check_gradients(&mut inputs, |t| {
            let y = t[0].rms_normalize(&t[1], 1e-6).unwrap();
            y.mul(&y).unwrap().sum_all()
        });
    }

    #[test]
    fn finite_difference_embedding_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut inputs = vec![
            (vec![5, 3], randn(&mut rng, 15)),
            (vec![3, 4], randn(&mut rng, 12)),
        ];
        check_gradients(&mut inputs, |t| {
            let e = t[0].embedding_lookup(&[1, 4, 0, 2]).unwrap(); // [4,3]
            let logits = e.matmul(&t[1]).unwrap(); // [4,4]
            logits
                .cross_entropy(&[0, 3, 1, 1], &[true, true, false, true])
                .unwrap()
        });
    }

    #[test]
    fn finite_difference_swap_axes_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut inputs = vec![(vec![2, 3, 2, 2], randn(&mut rng, 24))];
        check_gradients(&mut inputs, |t| {
            let y = t[0].swap_axes(1, 2).unwrap();
            let z = y.reshape(&[6, 4]).unwrap();
            z.mul(&z).unwrap().sum_all()
        });
    }

    #[test]
    fn constant_inputs_record_no_graph() {
        let a = Tensor::constant(&[2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::constant(&[2, 2], vec![2.0; 4]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.0.op.is_none());
    }

    #[test]
    fn matmul_against_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (m, k, n) = (7, 5, 9);
        let a = randn(&mut rng, m * k);
        let b = randn(&mut rng, k * n);
        let ta = Tensor::constant(&[m, k], a.clone()).unwrap();
        let tb = Tensor::constant(&[k, n], b.clone()).unwrap();
        let c = ta.matmul(&tb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                assert!((c.data()[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }
}

//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! The tape records primitive operations in topological order; `backward`
//! replays them once in reverse. All reductions accumulate row-major,
//! left-to-right, so identical inputs produce bit-identical outputs.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of f64 with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Gradient slot, populated by `Tape::backward` for tracked leaves.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "grad length {} does not match data length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { lhs: TensorId, rhs: TensorId },
    AddRowBias { x: TensorId, bias: TensorId },
    Add { lhs: TensorId, rhs: TensorId },
    MulElem { lhs: TensorId, rhs: TensorId },
    Scale { x: TensorId, c: f64 },
    Relu { x: TensorId },
    SoftmaxRows { x: TensorId },
    LnFloor { x: TensorId, floor: f64 },
    SumAll { x: TensorId },
    /// Batch-mean KL(teacher || softmax(learner / tau)) with the teacher
    /// distribution held constant. Fused so that the gradient
    /// `(s_learner - s_teacher) / (B * tau)` vanishes exactly when both
    /// sides emit bit-identical logits.
    KlVsSoftmax {
        learner: TensorId,
        teacher_probs: Vec<f64>,
        tau: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations; replayable exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Insert a gradient-tracked leaf (a parameter).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, true)
    }

    /// Insert a constant leaf; backward never flows into it.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        let grad = vec![0.0; value.len()];
        let id = TensorId(self.nodes.len());
        // Intermediate nodes need grads whenever any operand does.
        let rg = requires_grad
            || match &op {
                Op::Leaf => false,
                Op::MatMul { lhs, rhs }
                | Op::Add { lhs, rhs }
                | Op::MulElem { lhs, rhs }
                | Op::AddRowBias { x: lhs, bias: rhs } => {
                    self.nodes[lhs.0].requires_grad || self.nodes[rhs.0].requires_grad
                }
                Op::Scale { x, .. }
                | Op::Relu { x }
                | Op::SoftmaxRows { x }
                | Op::LnFloor { x, .. }
                | Op::SumAll { x }
                | Op::KlVsSoftmax { learner: x, .. } => self.nodes[x.0].requires_grad,
            };
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad: rg,
        });
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node; zeros before `backward`.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let t = self.value(id);
        if t.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    // ── Primitive operations ────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.value(a).rows()?;
        let (kb, n) = self.value(b).rows()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {ka} vs {kb}"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { lhs: a, rhs: b }, false))
    }

    /// `[b,c] + [c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (b, c) = self.value(x).rows()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match row width {}",
                self.value(bias).shape(),
                c
            )));
        }
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut out = Vec::with_capacity(b * c);
        for i in 0..b {
            for j in 0..c {
                out.push(xd[i * c + j] + bd[j]);
            }
        }
        let t = Tensor::new(vec![b, c], out)?;
        Ok(self.push(t, Op::AddRowBias { x, bias }, false))
    }

    /// Elementwise add; shapes must match.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::Add { lhs: a, rhs: b }, false))
    }

    /// Elementwise multiply; shapes must match.
    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul_elem")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::MulElem { lhs: a, rhs: b }, false))
    }

    /// Multiply every entry by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data: out,
            grad: None,
        };
        self.push(t, Op::Scale { x, c }, false)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data: out,
            grad: None,
        };
        self.push(t, Op::Relu { x }, false)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (b, c) = self.value(x).rows()?;
        let xd = self.value(x).data();
        if !xd.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let mut out = vec![0.0; b * c];
        for i in 0..b {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let t = Tensor::new(vec![b, c], out)?;
        Ok(self.push(t, Op::SoftmaxRows { x }, false))
    }

    /// `ln(max(x, floor))`; below the floor the output is the constant
    /// `ln(floor)` and the gradient is exactly zero.
    pub fn ln_floor(&mut self, x: TensorId, floor: f64) -> Result<TensorId> {
        if floor <= 0.0 {
            return Err(Error::Usage(format!("ln_floor requires floor > 0, got {floor}")));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.max(floor).ln())
            .collect();
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data: out,
            grad: None,
        };
        Ok(self.push(t, Op::LnFloor { x, floor }, false))
    }

    /// Sum of all entries, as a `[1]` tensor. Accumulates left-to-right.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut s = 0.0;
        for v in self.value(x).data() {
            s += v;
        }
        let t = Tensor::scalar(s);
        self.push(t, Op::SumAll { x }, false)
    }

    /// Batch-mean `KL(softmax(z_teacher/tau) || softmax(z_learner/tau))`,
    /// fused. Both sides go through the same log-softmax code path, so
    /// bit-identical logits give an exactly zero loss and gradient.
    pub fn kl_vs_softmax(
        &mut self,
        learner: TensorId,
        teacher_logits: &Tensor,
        tau: f64,
    ) -> Result<TensorId> {
        if tau <= 0.0 {
            return Err(Error::Usage(format!("kl_vs_softmax requires tau > 0, got {tau}")));
        }
        let (b, c) = self.value(learner).rows()?;
        if teacher_logits.shape() != [b, c] {
            return Err(Error::Shape(format!(
                "teacher logits shape {:?} does not match learner [{b}, {c}]",
                teacher_logits.shape()
            )));
        }
        if !teacher_logits.all_finite() || !self.value(learner).all_finite() {
            return Err(Error::Numeric("kl_vs_softmax requires finite logits".into()));
        }
        let (s1, ln_s1) = log_softmax_rows(teacher_logits.data(), b, c, tau);
        let (_s2, ln_s2) = log_softmax_rows(self.value(learner).data(), b, c, tau);
        let mut total = 0.0;
        for i in 0..b * c {
            if s1[i] > 0.0 {
                total += s1[i] * (ln_s1[i] - ln_s2[i]);
            }
        }
        let t = Tensor::scalar(total / b as f64);
        Ok(self.push(
            t,
            Op::KlVsSoftmax {
                learner,
                teacher_probs: s1,
                tau,
            },
            false,
        ))
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates the grad buffer of
    /// every reachable node; unreachable tracked leaves keep exact zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on a consumed tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { lhs, rhs } => {
                    let (m, k) = self.nodes[lhs.0].value.rows()?;
                    let n = self.nodes[rhs.0].value.shape()[1];
                    let g = self.nodes[i].grad.clone();
                    if self.nodes[lhs.0].requires_grad {
                        // dA = G @ B^T
                        let b = &self.nodes[rhs.0].value;
                        let mut bt = vec![0.0; k * n];
                        for r in 0..k {
                            for q in 0..n {
                                bt[q * k + r] = b.data()[r * n + q];
                            }
                        }
                        let da = matmul_raw(&g, &bt, m, n, k);
                        axpy(&mut self.nodes[lhs.0].grad, &da);
                    }
                    if self.nodes[rhs.0].requires_grad {
                        // dB = A^T @ G
                        let a = &self.nodes[lhs.0].value;
                        let mut at = vec![0.0; m * k];
                        for r in 0..m {
                            for q in 0..k {
                                at[q * m + r] = a.data()[r * k + q];
                            }
                        }
                        let db = matmul_raw(&at, &g, k, m, n);
                        axpy(&mut self.nodes[rhs.0].grad, &db);
                    }
                }
                Op::AddRowBias { x, bias } => {
                    let (b, c) = self.nodes[i].value.rows()?;
                    let g = self.nodes[i].grad.clone();
                    if self.nodes[x.0].requires_grad {
                        axpy(&mut self.nodes[x.0].grad, &g);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let gb = &mut self.nodes[bias.0].grad;
                        for r in 0..b {
                            for j in 0..c {
                                gb[j] += g[r * c + j];
                            }
                        }
                    }
                }
                Op::Add { lhs, rhs } => {
                    let g = self.nodes[i].grad.clone();
                    if self.nodes[lhs.0].requires_grad {
                        axpy(&mut self.nodes[lhs.0].grad, &g);
                    }
                    if self.nodes[rhs.0].requires_grad {
                        axpy(&mut self.nodes[rhs.0].grad, &g);
                    }
                }
                Op::MulElem { lhs, rhs } => {
                    let g = self.nodes[i].grad.clone();
                    if self.nodes[lhs.0].requires_grad {
                        let other = self.nodes[rhs.0].value.data().to_vec();
                        let gl = &mut self.nodes[lhs.0].grad;
                        for (j, gv) in g.iter().enumerate() {
                            gl[j] += gv * other[j];
                        }
                    }
                    if self.nodes[rhs.0].requires_grad {
                        let other = self.nodes[lhs.0].value.data().to_vec();
                        let gr = &mut self.nodes[rhs.0].grad;
                        for (j, gv) in g.iter().enumerate() {
                            gr[j] += gv * other[j];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.nodes[x.0].requires_grad {
                        let g = self.nodes[i].grad.clone();
                        let gx = &mut self.nodes[x.0].grad;
                        for (j, gv) in g.iter().enumerate() {
                            gx[j] += gv * c;
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.nodes[x.0].requires_grad {
                        let g = self.nodes[i].grad.clone();
                        let xin = self.nodes[x.0].value.data().to_vec();
                        let gx = &mut self.nodes[x.0].grad;
                        for (j, gv) in g.iter().enumerate() {
                            if xin[j] > 0.0 {
                                gx[j] += gv;
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    if self.nodes[x.0].requires_grad {
                        let (b, c) = self.nodes[i].value.rows()?;
                        let s = self.nodes[i].value.data().to_vec();
                        let g = self.nodes[i].grad.clone();
                        let gx = &mut self.nodes[x.0].grad;
                        for r in 0..b {
                            let mut dot = 0.0;
                            for j in 0..c {
                                dot += g[r * c + j] * s[r * c + j];
                            }
                            for j in 0..c {
                                gx[r * c + j] += s[r * c + j] * (g[r * c + j] - dot);
                            }
                        }
                    }
                }
                Op::LnFloor { x, floor } => {
                    if self.nodes[x.0].requires_grad {
                        let g = self.nodes[i].grad.clone();
                        let xin = self.nodes[x.0].value.data().to_vec();
                        let gx = &mut self.nodes[x.0].grad;
                        for (j, gv) in g.iter().enumerate() {
                            if xin[j] > floor {
                                gx[j] += gv / xin[j];
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[x.0].requires_grad {
                        let g = self.nodes[i].grad[0];
                        for gv in self.nodes[x.0].grad.iter_mut() {
                            *gv += g;
                        }
                    }
                }
                Op::KlVsSoftmax {
                    learner,
                    teacher_probs,
                    tau,
                } => {
                    if self.nodes[learner.0].requires_grad {
                        let g = self.nodes[i].grad[0];
                        let (b, c) = self.nodes[learner.0].value.rows()?;
                        let (s2, _) = log_softmax_rows(self.nodes[learner.0].value.data(), b, c, tau);
                        let scale = g / (b as f64 * tau);
                        let gx = &mut self.nodes[learner.0].grad;
                        for j in 0..b * c {
                            gx[j] += scale * (s2[j] - teacher_probs[j]);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Collect gradients for the given leaves, in order.
    pub fn gradients_for(&self, ids: &[TensorId]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if !self.nodes[id.0].requires_grad {
                return Err(Error::Usage(
                    "gradient requested for an untracked tensor".into(),
                ));
            }
            out.push(self.nodes[id.0].grad.clone());
        }
        Ok(out)
    }
}

/// Row-wise softmax and log-softmax of `z / tau` in one pass, max-subtracted.
/// Shared by teacher and learner sides of the KL op so that identical inputs
/// produce bit-identical outputs.
fn log_softmax_rows(data: &[f64], b: usize, c: usize, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; b * c];
    let mut ln_s = vec![0.0; b * c];
    for i in 0..b {
        let row = &data[i * c..(i + 1) * c];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mx = mx.max(v / tau);
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v / tau - mx).exp();
            s[i * c + j] = e;
            sum += e;
        }
        let ln_sum = sum.ln();
        for j in 0..c {
            ln_s[i * c + j] = row[j] / tau - mx - ln_sum;
            s[i * c + j] /= sum;
        }
    }
    (s, ln_s)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

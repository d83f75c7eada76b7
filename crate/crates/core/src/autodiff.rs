//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations evaluate eagerly as they are recorded, so the forward value of
//! every node is available immediately and `grad` can run at any time. The
//! key property of this tape is that **gradient computation is itself
//! recorded as tape operations**: the adjoint of every primitive is expressed
//! in terms of the same primitives. Gradients are therefore ordinary tape
//! values, which is what makes optimizer updates differentiable — an update
//! like `w' = w - lr * m_hat / (sqrt(v_hat) + eps)` built from tape ops can
//! be differentiated again by a later `grad` call (unrolled meta-gradients).
//!
//! A tape is single-threaded and owns all its intermediates; parallelism
//! happens above this module with one tape per worker. Everything is `f64`
//! and evaluation order is fixed, so identical leaves give bit-identical
//! values and gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Probability floor applied before any `log` (and the matching ceiling).
/// Clamping uses a straight-through gradient: 1 inside the interval, 0
/// outside, so a saturated surrogate cannot produce a -inf loss.
pub const PROB_CLAMP_MIN: f64 = 1e-7;
pub const PROB_CLAMP_MAX: f64 = 1.0 - 1e-7;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    /// 1xC row replicated to RxC
    BroadcastRow(Var, usize),
    /// column sums: RxC -> 1xC
    SumRows(Var),
    ReduceSum(Var),
    ReduceMean(Var),
    /// 1x1 scalar times `factor`, filled to RxC
    BroadcastScalar(Var, usize, usize, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// adjoint of GatherRows: rows of the source are added into a zero
    /// matrix with `usize` rows at the given indices (duplicates accumulate)
    ScatterRows(Var, Vec<usize>, usize),
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Wengert tape. Build values with the methods below, then call [`Tape::grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Register a differentiable leaf. `grad` can be taken with respect to it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_node(Op::Leaf, value, true)
    }

    /// Register a constant. Gradient never flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_node(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push_node(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b) => self.requires(*a) || self.requires(*b),
            Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::BroadcastRow(a, _)
            | Op::SumRows(a)
            | Op::ReduceSum(a)
            | Op::ReduceMean(a)
            | Op::BroadcastScalar(a, _, _, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _, _) => self.requires(*a),
            Op::ConcatRows(parts) => parts.iter().any(|p| self.requires(*p)),
        };
        Ok(self.push_node(op, value, requires_grad))
    }

    fn eval(&self, op: &Op) -> Result<Matrix> {
        let m = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::MatMul(a, b) => m(a).matmul(m(b))?,
            Op::Add(a, b) => m(a).zip(m(b), "add", |x, y| x + y)?,
            Op::Sub(a, b) => m(a).zip(m(b), "sub", |x, y| x - y)?,
            Op::Mul(a, b) => m(a).zip(m(b), "mul", |x, y| x * y)?,
            Op::Div(a, b) => m(a).zip(m(b), "div", |x, y| x / y)?,
            Op::Scale(a, c) => m(a).map(|x| x * c),
            Op::AddConst(a, c) => m(a).map(|x| x + c),
            Op::AddRow(a, r) => {
                let mat = m(a);
                let row = m(r);
                if row.rows() != 1 || row.cols() != mat.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "add_row",
                        left_rows: mat.rows(),
                        left_cols: mat.cols(),
                        right_rows: row.rows(),
                        right_cols: row.cols(),
                    });
                }
                let mut out = mat.clone();
                for i in 0..out.rows() {
                    for j in 0..out.cols() {
                        out.set(i, j, out.get(i, j) + row.get(0, j));
                    }
                }
                out
            }
            Op::BroadcastRow(r, rows) => {
                let row = m(r);
                assert_eq!(row.rows(), 1, "broadcast_row needs a 1xC source");
                let mut out = Matrix::zeros(*rows, row.cols());
                for i in 0..*rows {
                    for j in 0..row.cols() {
                        out.set(i, j, row.get(0, j));
                    }
                }
                out
            }
            Op::SumRows(a) => {
                let mat = m(a);
                let mut out = Matrix::zeros(1, mat.cols());
                for i in 0..mat.rows() {
                    for j in 0..mat.cols() {
                        out.set(0, j, out.get(0, j) + mat.get(i, j));
                    }
                }
                out
            }
            Op::ReduceSum(a) => Matrix::scalar(m(a).sum()),
            Op::ReduceMean(a) => Matrix::scalar(m(a).mean()),
            Op::BroadcastScalar(s, rows, cols, factor) => {
                Matrix::filled(*rows, *cols, m(s).item() * factor)
            }
            Op::Relu(a) => m(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => m(a).map(sigmoid),
            Op::Log(a) => m(a).map(f64::ln),
            Op::Sqrt(a) => m(a).map(f64::sqrt),
            Op::Clamp(a, lo, hi) => m(a).map(|x| x.clamp(*lo, *hi)),
            Op::Transpose(a) => m(a).transpose(),
            Op::ConcatRows(parts) => {
                let mats: Vec<&Matrix> = parts.iter().map(m).collect();
                Matrix::concat_rows(&mats)?
            }
            Op::GatherRows(a, idx) => m(a).gather_rows(idx),
            Op::ScatterRows(a, idx, rows) => {
                let src = m(a);
                assert_eq!(src.rows(), idx.len(), "scatter_rows index count");
                let mut out = Matrix::zeros(*rows, src.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..src.cols() {
                        out.set(i, j, out.get(i, j) + src.get(k, j));
                    }
                }
                out
            }
        })
    }

    // ── Builders ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::Scale(a, c)).expect("scale cannot fail")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::AddConst(a, c)).expect("add_const cannot fail")
    }

    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(mat, row))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.record(Op::SumRows(a)).expect("sum_rows cannot fail")
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        self.record(Op::ReduceSum(a)).expect("reduce_sum cannot fail")
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        self.record(Op::ReduceMean(a)).expect("reduce_mean cannot fail")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(Op::Relu(a)).expect("relu cannot fail")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::Sigmoid(a)).expect("sigmoid cannot fail")
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.record(Op::Log(a)).expect("log cannot fail")
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.record(Op::Sqrt(a)).expect("sqrt cannot fail")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.record(Op::Clamp(a, lo, hi)).expect("clamp cannot fail")
    }

    /// Clamp probabilities to the crate-wide interval before taking logs.
    pub fn clamp_prob(&mut self, a: Var) -> Var {
        self.clamp(a, PROB_CLAMP_MIN, PROB_CLAMP_MAX)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.record(Op::Transpose(a)).expect("transpose cannot fail")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        self.record(Op::GatherRows(a, indices.to_vec())).expect("gather_rows cannot fail")
    }

    // ── Reverse pass ─────────────────────────────────────────────────

    /// Gradients of a scalar `output` with respect to the given leaves.
    ///
    /// The adjoint computation is appended to the tape, so the returned
    /// `Var`s are ordinary tape values: building further ops on them (an
    /// optimizer update, say) keeps the whole chain differentiable. Leaves
    /// the output does not depend on get a zero gradient of matching shape.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        for w in wrt {
            assert!(
                matches!(self.nodes[w.0].op, Op::Leaf) && self.nodes[w.0].requires_grad,
                "grad target must be a differentiable leaf"
            );
        }
        self.reverse_pass(output, wrt, false)
    }

    /// Partial derivatives of `output` with respect to arbitrary tape values,
    /// treating each of them as an independent input: the reverse sweep stops
    /// at every `wrt` var instead of continuing into its history. This is
    /// what an unrolled optimizer loop needs — the gradient at the *current*
    /// iterate, which is itself a recorded value.
    pub fn grad_at(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.reverse_pass(output, wrt, true)
    }

    fn reverse_pass(&mut self, output: Var, wrt: &[Var], stop_at_wrt: bool) -> Result<Vec<Var>> {
        if self.value(output).shape() != (1, 1) {
            let (r, c) = self.value(output).shape();
            return Err(Error::InvalidConfig(format!(
                "grad requires a scalar output, got {r}x{c}"
            )));
        }
        let mut adjoint: Vec<Option<Var>> = vec![None; output.0 + 1];
        let seed = self.constant(Matrix::scalar(1.0));
        adjoint[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            if stop_at_wrt && wrt.iter().any(|w| w.0 == id) && id != output.0 {
                continue;
            }
            if !self.nodes[id].requires_grad && id != output.0 {
                continue;
            }
            let Some(up) = adjoint[id] else { continue };
            let op = self.nodes[id].op.clone();
            self.backprop(&op, Var(id), up, &mut adjoint)?;
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            match adjoint.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let shape = self.value(*w).shape();
                    out.push(self.constant(Matrix::zeros(shape.0, shape.1)));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&mut self, adjoint: &mut [Option<Var>], target: Var, g: Var) -> Result<()> {
        if !self.requires(target) {
            return Ok(());
        }
        adjoint[target.0] = Some(match adjoint[target.0] {
            Some(existing) => self.add(existing, g)?,
            None => g,
        });
        Ok(())
    }

    fn backprop(&mut self, op: &Op, node: Var, up: Var, adjoint: &mut [Option<Var>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let bt = self.transpose(*b);
                    let g = self.matmul(up, bt)?;
                    self.accumulate(adjoint, *a, g)?;
                }
                if self.requires(*b) {
                    let at = self.transpose(*a);
                    let g = self.matmul(at, up)?;
                    self.accumulate(adjoint, *b, g)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adjoint, *a, up)?;
                self.accumulate(adjoint, *b, up)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adjoint, *a, up)?;
                let neg = self.scale(up, -1.0);
                self.accumulate(adjoint, *b, neg)?;
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let g = self.mul(up, *b)?;
                    self.accumulate(adjoint, *a, g)?;
                }
                if self.requires(*b) {
                    let g = self.mul(up, *a)?;
                    self.accumulate(adjoint, *b, g)?;
                }
            }
            Op::Div(a, b) => {
                if self.requires(*a) {
                    let g = self.div(up, *b)?;
                    self.accumulate(adjoint, *a, g)?;
                }
                if self.requires(*b) {
                    // d(a/b)/db = -a/b^2 = -(out)/b
                    let q = self.div(node, *b)?;
                    let t = self.mul(up, q)?;
                    let g = self.scale(t, -1.0);
                    self.accumulate(adjoint, *b, g)?;
                }
            }
            Op::Scale(a, c) => {
                let g = self.scale(up, *c);
                self.accumulate(adjoint, *a, g)?;
            }
            Op::AddConst(a, _) => {
                self.accumulate(adjoint, *a, up)?;
            }
            Op::AddRow(a, r) => {
                self.accumulate(adjoint, *a, up)?;
                if self.requires(*r) {
                    let g = self.sum_rows(up);
                    self.accumulate(adjoint, *r, g)?;
                }
            }
            Op::BroadcastRow(r, _) => {
                let g = self.sum_rows(up);
                self.accumulate(adjoint, *r, g)?;
            }
            Op::SumRows(a) => {
                let rows = self.value(*a).rows();
                let g = self.record(Op::BroadcastRow(up, rows))?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::ReduceSum(a) => {
                let (r, c) = self.value(*a).shape();
                let g = self.record(Op::BroadcastScalar(up, r, c, 1.0))?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::ReduceMean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c) as f64;
                let g = self.record(Op::BroadcastScalar(up, r, c, 1.0 / n))?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::BroadcastScalar(s, _, _, factor) => {
                let total = self.reduce_sum(up);
                let g = self.scale(total, *factor);
                self.accumulate(adjoint, *s, g)?;
            }
            Op::Relu(a) => {
                let gate = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let gate = self.constant(gate);
                let g = self.mul(up, gate)?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::Sigmoid(a) => {
                // s * (1 - s), reusing the forward value
                let neg = self.scale(node, -1.0);
                let one_minus = self.add_const(neg, 1.0);
                let ds = self.mul(node, one_minus)?;
                let g = self.mul(up, ds)?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::Log(a) => {
                let g = self.div(up, *a)?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::Sqrt(a) => {
                // 0.5 / sqrt(x); the additive 1e-300 only turns an exact 0/0
                // (zero upstream at zero input) into 0 instead of NaN
                let half = self.scale(up, 0.5);
                let denom = self.add_const(node, 1e-300);
                let g = self.div(half, denom)?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::Clamp(a, lo, hi) => {
                // straight-through: pass gradient inside [lo, hi], block outside
                let gate = self.value(*a).map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                let gate = self.constant(gate);
                let g = self.mul(up, gate)?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::Transpose(a) => {
                let g = self.transpose(up);
                self.accumulate(adjoint, *a, g)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts.clone() {
                    let rows = self.value(p).rows();
                    if self.requires(p) {
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        let g = self.gather_rows(up, &idx);
                        self.accumulate(adjoint, p, g)?;
                    }
                    offset += rows;
                }
            }
            Op::GatherRows(a, idx) => {
                let rows = self.value(*a).rows();
                let g = self.record(Op::ScatterRows(up, idx.clone(), rows))?;
                self.accumulate(adjoint, *a, g)?;
            }
            Op::ScatterRows(a, idx, _) => {
                let g = self.gather_rows(up, idx);
                self.accumulate(adjoint, *a, g)?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Differentiable Adam ───────────────────────────────────────────────

/// Snapshot of Adam accumulators, detached from any tape.
#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: usize,
}

impl AdamSnapshot {
    /// Zero state matching the given parameter shapes.
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        AdamSnapshot {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }
}

/// Adam whose update is built from tape operations, so the updated
/// parameters remain differentiable functions of anything the gradients
/// depend on. The moment accumulators are tape values too; `epsilon` sits in
/// the denominator outside the square root, which is differentiated as-is.
pub struct TapeAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Var>,
    v: Vec<Var>,
    step: usize,
}

impl TapeAdam {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    /// Resume from a snapshot, registering the accumulators on `tape` as
    /// constants (gradient does not flow into history from before this tape).
    pub fn resume(tape: &mut Tape, snapshot: &AdamSnapshot, lr: f64) -> Self {
        TapeAdam {
            lr,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            epsilon: Self::DEFAULT_EPSILON,
            m: snapshot.m.iter().map(|m| tape.constant(m.clone())).collect(),
            v: snapshot.v.iter().map(|v| tape.constant(v.clone())).collect(),
            step: snapshot.step,
        }
    }

    /// One Adam step; returns the updated parameter vars.
    pub fn step(&mut self, tape: &mut Tape, params: &[Var], grads: &[Var]) -> Result<Vec<Var>> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match params");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 / (1.0 - self.beta1.powi(t));
        let bc2 = 1.0 / (1.0 - self.beta2.powi(t));

        let mut updated = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let g = grads[i];
            let m_old = self.m[i];
            let v_old = self.v[i];

            let m_keep = tape.scale(m_old, self.beta1);
            let m_new_part = tape.scale(g, 1.0 - self.beta1);
            let m_new = tape.add(m_keep, m_new_part)?;

            let g2 = tape.mul(g, g)?;
            let v_keep = tape.scale(v_old, self.beta2);
            let v_new_part = tape.scale(g2, 1.0 - self.beta2);
            let v_new = tape.add(v_keep, v_new_part)?;

            let m_hat = tape.scale(m_new, bc1);
            let v_hat = tape.scale(v_new, bc2);
            let root = tape.sqrt(v_hat);
            let denom = tape.add_const(root, self.epsilon);
            let ratio = tape.div(m_hat, denom)?;
            let delta = tape.scale(ratio, self.lr);
            let p_new = tape.sub(params[i], delta)?;

            self.m[i] = m_new;
            self.v[i] = v_new;
            updated.push(p_new);
        }
        Ok(updated)
    }

    /// Detach the accumulators into plain matrices for reuse on a new tape.
    pub fn snapshot(&self, tape: &Tape) -> AdamSnapshot {
        AdamSnapshot {
            m: self.m.iter().map(|&v| tape.value(v).clone()).collect(),
            v: self.v.iter().map(|&v| tape.value(v).clone()).collect(),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of `f` at `x0` in coordinate `i`.
    fn central_fd(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], i: usize, h: f64) -> f64 {
        let mut plus = x0.to_vec();
        let mut minus = x0.to_vec();
        plus[i] += h;
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn matmul_forward_matches_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0]]));
        let b = tape.constant(Matrix::from_rows(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.item(c), 11.0);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.item(s), 0.5);
    }

    #[test]
    fn reduce_mean_of_three() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let m = tape.reduce_mean(x);
        assert_eq!(tape.item(m), 2.0);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(tape.item(g[0]), 6.0);
    }

    #[test]
    fn shape_mismatch_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(4, 1));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn grad_of_nonscalar_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        let y = tape.relu(x);
        assert!(tape.grad(y, &[x]).is_err());
    }

    /// d/dtheta log(sigmoid(w * (x + theta))) at w=1, x=0, theta=0 is 0.5.
    #[test]
    fn log_sigmoid_composite_gradient() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Matrix::scalar(0.0));
        let x = tape.constant(Matrix::scalar(0.0));
        let z = tape.add(x, theta).unwrap();
        let p = tape.sigmoid(z);
        let p = tape.clamp_prob(p);
        let l = tape.log(p);
        let g = tape.grad(l, &[theta]).unwrap();
        let analytic = tape.item(g[0]);
        assert!((analytic - 0.5).abs() < 1e-12);

        // independent oracle: central finite difference, h = 1e-6
        let f = |v: &[f64]| sigmoid(v[0]).ln();
        let fd = central_fd(f, &[0.0], 0, 1e-6);
        assert!((analytic - fd).abs() < 1e-6, "analytic {analytic} vs fd {fd}");
    }

    /// Gradient through two unrolled SGD steps on f(w) = w^2/2 with lr 0.1.
    /// w2 = 0.81 * w0, L = w2^2/2, dL/dw0 = 0.81^2 * w0.
    #[test]
    fn two_unrolled_sgd_steps_match_closed_form() {
        let w0_val = 1.0;
        let mut tape = Tape::new();
        let w0 = tape.leaf(Matrix::scalar(w0_val));

        let mut w = w0;
        for _ in 0..2 {
            // d(w^2/2)/dw = w, so the SGD step is w - lr*w
            let step = tape.scale(w, 0.1);
            w = tape.sub(w, step).unwrap();
        }
        let half = tape.scale(w, 0.5);
        let outer = tape.mul(half, w).unwrap();
        let g = tape.grad(outer, &[w0]).unwrap();
        let expected = 0.81 * 0.81 * w0_val;
        assert!((tape.item(g[0]) - expected).abs() < 1e-12);
    }

    /// K = 1 unrolled SGD step on a 1-feature linear model vs finite
    /// differences: outer loss after the step as a function of theta.
    #[test]
    fn unrolled_sgd_linear_matches_fd() {
        let lr = 0.3;
        let w_init = 0.4;
        let x_q = 0.7; // training point is x_q + theta
        let y_q = 1.0;
        let x_out = -0.5; // outer loss evaluates here
        let theta0 = 0.05;

        // scalar pipeline: p = sigmoid(w * (x_q + theta)); inner loss BCE(p, y)
        // w' = w - lr * dBCE/dw ; outer = sigmoid(w' * x_out)
        let run = |theta: f64| -> f64 {
            let mut tape = Tape::new();
            let th = tape.leaf(Matrix::scalar(theta));
            let w = tape.leaf(Matrix::scalar(w_init));
            let xq = tape.constant(Matrix::scalar(x_q));
            let xin = tape.add(xq, th).unwrap();
            let z = tape.mul(w, xin).unwrap();
            let p = tape.sigmoid(z);
            let p = tape.clamp_prob(p);
            // BCE with y = 1: -log p
            let lp = tape.log(p);
            let inner = tape.scale(lp, -(y_q));
            let gw = tape.grad(inner, &[w]).unwrap()[0];
            let step = tape.scale(gw, lr);
            let w1 = tape.sub(w, step).unwrap();
            let xo = tape.constant(Matrix::scalar(x_out));
            let zo = tape.mul(w1, xo).unwrap();
            let out = tape.sigmoid(zo);
            tape.item(out)
        };

        // analytic gradient through the same construction
        let mut tape = Tape::new();
        let th = tape.leaf(Matrix::scalar(theta0));
        let w = tape.leaf(Matrix::scalar(w_init));
        let xq = tape.constant(Matrix::scalar(x_q));
        let xin = tape.add(xq, th).unwrap();
        let z = tape.mul(w, xin).unwrap();
        let p = tape.sigmoid(z);
        let p = tape.clamp_prob(p);
        let lp = tape.log(p);
        let inner = tape.scale(lp, -1.0);
        let gw = tape.grad(inner, &[w]).unwrap()[0];
        let step = tape.scale(gw, lr);
        let w1 = tape.sub(w, step).unwrap();
        let xo = tape.constant(Matrix::scalar(x_out));
        let zo = tape.mul(w1, xo).unwrap();
        let out = tape.sigmoid(zo);
        let g_theta = tape.grad(out, &[th]).unwrap()[0];
        let analytic = tape.item(g_theta);

        let fd = central_fd(|v| run(v[0]), &[theta0], 0, 1e-6);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-4, "analytic {analytic} vs fd {fd} rel {rel}");
    }

    /// K = 3 unrolled Adam steps vs finite differences, rel err < 1e-3.
    #[test]
    fn unrolled_adam_matches_fd() {
        let lr = 0.05;
        let theta0 = [0.03, -0.02];
        let (analytic, value_fn) = unrolled_adam_theta_grad(&theta0, lr);
        let fd0 = {
            let h = 1e-5;
            let mut plus = theta0;
            plus[0] += h;
            let mut minus = theta0;
            minus[0] -= h;
            (value_fn(&plus) - value_fn(&minus)) / (2.0 * h)
        };
        let rel = (analytic[0] - fd0).abs() / fd0.abs().max(1e-12);
        assert!(rel < 1e-3, "analytic {} vs fd {} rel {}", analytic[0], fd0, rel);

        let fd1 = {
            let h = 1e-5;
            let mut plus = theta0;
            plus[1] += h;
            let mut minus = theta0;
            minus[1] -= h;
            (value_fn(&plus) - value_fn(&minus)) / (2.0 * h)
        };
        let rel1 = (analytic[1] - fd1).abs() / fd1.abs().max(1e-12);
        assert!(rel1 < 1e-3, "analytic {} vs fd {} rel {}", analytic[1], fd1, rel1);
    }

    /// Shared helper: 3 Adam steps on a 2-feature linear logistic model where
    /// every training row is shifted by theta; returns d(outer)/d(theta) and
    /// a value-only closure for finite differencing.
    fn unrolled_adam_theta_grad(theta0: &[f64; 2], lr: f64) -> ([f64; 2], impl Fn(&[f64; 2]) -> f64) {
        fn build(theta: &[f64; 2], lr: f64, want_grad: bool) -> (f64, [f64; 2]) {
            let mut tape = Tape::new();
            let th = tape.leaf(Matrix::from_rows(&[vec![theta[0], theta[1]]]));
            let x_base = tape.constant(Matrix::from_rows(&[
                vec![0.5, -0.1],
                vec![-0.4, 0.8],
                vec![0.9, 0.2],
            ]));
            let ones = tape.constant(Matrix::filled(3, 1, 1.0));
            let theta_rows = tape.matmul(ones, th).unwrap();
            let x = tape.add(x_base, theta_rows).unwrap();
            let y = tape.constant(Matrix::from_rows(&[vec![1.0], vec![0.0], vec![1.0]]));

            // inner gradients are taken wrt the current iterate via
            // grad_wrt_var, so the chain w_k -> w_{k+1} stays connected
            let mut w = tape.leaf(Matrix::from_rows(&[vec![0.3], vec![-0.2]]));
            let snapshot = AdamSnapshot::zeros(&[(2, 1)]);
            let mut adam = TapeAdam::resume(&mut tape, &snapshot, lr);
            for _ in 0..3 {
                let z = tape.matmul(x, w).unwrap();
                let p = tape.sigmoid(z);
                let p = tape.clamp_prob(p);
                let lp = tape.log(p);
                let t1 = tape.mul(y, lp).unwrap();
                let np = tape.scale(p, -1.0);
                let q = tape.add_const(np, 1.0);
                let q = tape.clamp_prob(q);
                let lq = tape.log(q);
                let ny = tape.scale(y, -1.0);
                let oy = tape.add_const(ny, 1.0);
                let t2 = tape.mul(oy, lq).unwrap();
                let s = tape.add(t1, t2).unwrap();
                let mean = tape.reduce_mean(s);
                let loss = tape.scale(mean, -1.0);
                let gw = tape.grad_wrt_var(loss, w).unwrap();
                let updated = adam.step(&mut tape, &[w], &[gw]).unwrap();
                w = updated[0];
            }
            let x_out = tape.constant(Matrix::from_rows(&[vec![0.6, -0.7]]));
            let z = tape.matmul(x_out, w).unwrap();
            let p = tape.sigmoid(z);
            let outer = tape.reduce_mean(p);
            let val = tape.item(outer);
            if !want_grad {
                return (val, [0.0, 0.0]);
            }
            let g = tape.grad(outer, &[th]).unwrap()[0];
            let gm = tape.value(g);
            (val, [gm.get(0, 0), gm.get(0, 1)])
        }

        let (_, g) = build(theta0, lr, true);
        (g, move |t: &[f64; 2]| build(t, lr, false).0)
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![0.3, -0.7]]));
        let s = tape.sigmoid(x);
        let l1 = tape.reduce_mean(s);
        let sq = tape.mul(x, x).unwrap();
        let l2 = tape.reduce_sum(sq);
        let (a, b) = (2.5, -1.25);
        let l1s = tape.scale(l1, a);
        let l2s = tape.scale(l2, b);
        let combo = tape.add(l1s, l2s).unwrap();

        let g_combo = tape.grad(combo, &[x]).unwrap()[0];
        let g1 = tape.grad(l1, &[x]).unwrap()[0];
        let g2 = tape.grad(l2, &[x]).unwrap()[0];
        for j in 0..2 {
            let lhs = tape.value(g_combo).get(0, j);
            let rhs = a * tape.value(g1).get(0, j) + b * tape.value(g2).get(0, j);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tapes_are_bit_identical() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Matrix::from_rows(&[vec![0.123, -0.456, 0.789]]));
            let s = tape.sigmoid(x);
            let c = tape.clamp_prob(s);
            let l = tape.log(c);
            let loss = tape.reduce_mean(l);
            let g = tape.grad(loss, &[x]).unwrap()[0];
            (tape.item(loss), tape.value(g).data().to_vec())
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Every primitive op's analytic gradient matches central differences
    /// (h = 1e-5) with relative error below 1e-4 on fixed pseudo-random input.
    #[test]
    fn primitive_vjps_match_finite_differences() {
        // builds a scalar loss from a 2x3 leaf through the op under test
        type Builder = fn(&mut Tape, Var) -> Var;
        let cases: Vec<(&str, Builder)> = vec![
            ("relu", |t, x| {
                let r = t.relu(x);
                t.reduce_mean(r)
            }),
            ("sigmoid", |t, x| {
                let s = t.sigmoid(x);
                t.reduce_mean(s)
            }),
            ("log_of_shifted", |t, x| {
                let shifted = t.add_const(x, 3.0);
                let l = t.log(shifted);
                t.reduce_sum(l)
            }),
            ("sqrt_of_shifted", |t, x| {
                let shifted = t.add_const(x, 3.0);
                let s = t.sqrt(shifted);
                t.reduce_mean(s)
            }),
            ("mul_self", |t, x| {
                let m = t.mul(x, x).unwrap();
                t.reduce_sum(m)
            }),
            ("div_by_shifted", |t, x| {
                let shifted = t.add_const(x, 4.0);
                let d = t.div(x, shifted).unwrap();
                t.reduce_mean(d)
            }),
            ("matmul_chain", |t, x| {
                let w = t.constant(Matrix::from_rows(&[
                    vec![0.5, -0.3],
                    vec![0.2, 0.9],
                    vec![-0.6, 0.1],
                ]));
                let y = t.matmul(x, w).unwrap();
                let s = t.sigmoid(y);
                t.reduce_mean(s)
            }),
            ("transpose_chain", |t, x| {
                let xt = t.transpose(x);
                let s = t.sigmoid(xt);
                t.reduce_sum(s)
            }),
            ("sum_rows_chain", |t, x| {
                let sr = t.sum_rows(x);
                let s = t.sigmoid(sr);
                t.reduce_mean(s)
            }),
            ("gather_chain", |t, x| {
                let g = t.gather_rows(x, &[1, 0, 1]);
                let s = t.sigmoid(g);
                t.reduce_mean(s)
            }),
            ("concat_chain", |t, x| {
                let c = t.concat_rows(&[x, x]).unwrap();
                let s = t.sigmoid(c);
                t.reduce_mean(s)
            }),
        ];

        let x0 = [0.31, -0.52, 0.77, 1.13, -0.24, 0.05];
        for (name, builder) in cases {
            let eval = |vals: &[f64]| {
                let mut t = Tape::new();
                let x = t.leaf(Matrix::from_vec(2, 3, vals.to_vec()));
                let loss = builder(&mut t, x);
                t.item(loss)
            };
            let mut t = Tape::new();
            let x = t.leaf(Matrix::from_vec(2, 3, x0.to_vec()));
            let loss = builder(&mut t, x);
            let g = t.grad(loss, &[x]).unwrap()[0];
            for i in 0..6 {
                let fd = central_fd(eval, &x0, i, 1e-5);
                let an = t.value(g).data()[i];
                let rel = (an - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {an} vs fd {fd} (rel {rel})");
            }
        }
    }

    #[test]
    fn grad_of_independent_leaf_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(2.0));
        let unused = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad(y, &[unused]).unwrap()[0];
        assert_eq!(tape.value(g).data(), &[0.0, 0.0]);
    }
}

impl Tape {
    /// Single-target convenience wrapper around [`Tape::grad_at`].
    pub fn grad_wrt_var(&mut self, output: Var, wrt: Var) -> Result<Var> {
        Ok(self.grad_at(output, &[wrt])?[0])
    }
}

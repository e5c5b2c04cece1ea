//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its value. Operands
//! always refer to earlier nodes, so the recorded graph is acyclic and the
//! node order is already a topological order; [`Tape::backward`] walks it
//! back to front exactly once.

use std::sync::atomic::{AtomicU32, Ordering};

use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    AddConst(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    SumAll(usize),
    RowSums(usize),
    LogSumExpRows(usize),
    SelectCols(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    Inverse(usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoints of the leaves reached by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Adjoint of `var` with zeros substituted for unreached leaves.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(var).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives an adjoint (data, fixed masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.index].value
    }

    fn check(&self, var: Var) -> Result<usize, TensorError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, parents: &[usize]) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "add", |x, y| x + y)?;
        self.push(v, Op::Add(ia, ib), "add", &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(ia, ib), "sub", &[ia, ib])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(ia, ib), "mul", &[ia, ib])
    }

    /// Adds the `1 × c` row `row` to every row of the `r × c` matrix `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var, TensorError> {
        let (im, ir) = (self.check(m)?, self.check(row)?);
        let v = self.nodes[im].value.add_row(&self.nodes[ir].value)?;
        self.push(v, Op::AddRow(im, ir), "add_row", &[im, ir])
    }

    pub fn sub_row(&mut self, m: Var, row: Var) -> Result<Var, TensorError> {
        let neg = self.neg(row)?;
        self.add_row(m, neg)
    }

    /// Multiplies every row of `m` elementwise by the `1 × c` row `row`.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var, TensorError> {
        let (im, ir) = (self.check(m)?, self.check(row)?);
        let v = self.nodes[im].value.mul_row(&self.nodes[ir].value)?;
        self.push(v, Op::MulRow(im, ir), "mul_row", &[im, ir])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push(v, Op::MatMul(ia, ib), "matmul", &[ia, ib])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.transpose();
        self.push(v, Op::Transpose(ia), "transpose", &[ia])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x * factor);
        self.push(v, Op::Scale(ia, factor), "scale", &[ia])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x + c);
        self.push(v, Op::AddConst(ia), "add_const", &[ia])
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(ia), "relu", &[ia])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(f64::exp);
        self.push(v, Op::Exp(ia), "exp", &[ia])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(f64::ln);
        self.push(v, Op::Log(ia), "log", &[ia])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x * x);
        self.push(v, Op::Square(ia), "square", &[ia])
    }

    /// Sum of all entries, as a `1 × 1` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        self.push(v, Op::SumAll(ia), "sum", &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let count = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / count)
    }

    /// `r × c → r × 1`: sum across each row.
    pub fn row_sums(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        let sums = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let v = Tensor::column_vector(sums);
        self.push(v, Op::RowSums(ia), "row_sums", &[ia])
    }

    /// `r × c → r × 1`: numerically stable `log Σ_j exp(a[i, j])`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        let out = (0..src.rows())
            .map(|r| logsumexp(src.row(r)))
            .collect();
        let v = Tensor::column_vector(out);
        self.push(v, Op::LogSumExpRows(ia), "logsumexp_rows", &[ia])
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.select_cols(idx)?;
        self.push(v, Op::SelectCols(ia, idx.to_vec()), "select_cols", &[ia])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let v = Tensor::concat_cols(&refs)?;
        self.push(v, Op::ConcatCols(idx.clone()), "concat_cols", &idx)
    }

    /// Matrix inverse of a small square matrix.
    pub fn inverse(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.inverse()?;
        self.push(v, Op::Inverse(ia), "inverse", &[ia])
    }

    /// Reverse sweep from a scalar root. The tape itself is not modified, so
    /// repeated calls start from zeroed adjoints and agree bit for bit.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let ir = self.check(root)?;
        let shape = self.nodes[ir].value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarRoot { shape });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; ir + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[ir] = Some(Tensor::scalar(1.0));

        for i in (0..=ir).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let wants = |p: usize| self.nodes[p].requires_grad;
            let val = |p: usize| &self.nodes[p].value;
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut adj[*a], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut adj[*b], g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut adj[*a], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut adj[*b], g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut adj[*a], g.zip_map(val(*b), "mul", |x, y| x * y)?);
                    }
                    if wants(*b) {
                        accumulate(&mut adj[*b], g.zip_map(val(*a), "mul", |x, y| x * y)?);
                    }
                }
                Op::AddRow(m, r) => {
                    if wants(*r) {
                        accumulate(&mut adj[*r], g.column_sums());
                    }
                    if wants(*m) {
                        accumulate(&mut adj[*m], g);
                    }
                }
                Op::MulRow(m, r) => {
                    if wants(*r) {
                        let prod = g.zip_map(val(*m), "mul_row", |x, y| x * y)?;
                        accumulate(&mut adj[*r], prod.column_sums());
                    }
                    if wants(*m) {
                        accumulate(&mut adj[*m], g.mul_row(val(*r))?);
                    }
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut adj[*a], g.matmul_nt(val(*b)));
                    }
                    if wants(*b) {
                        accumulate(&mut adj[*b], val(*a).matmul_tn(&g));
                    }
                }
                Op::Transpose(a) => accumulate(&mut adj[*a], g.transpose()),
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut adj[*a], g.map(|x| x * f));
                }
                Op::AddConst(a) => accumulate(&mut adj[*a], g),
                Op::Relu(a) => {
                    let d = g.zip_map(val(*a), "relu", |x, y| if y > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut adj[*a], d);
                }
                Op::Exp(a) => {
                    accumulate(&mut adj[*a], g.zip_map(&node.value, "exp", |x, y| x * y)?);
                }
                Op::Log(a) => {
                    accumulate(&mut adj[*a], g.zip_map(val(*a), "log", |x, y| x / y)?);
                }
                Op::Square(a) => {
                    accumulate(&mut adj[*a], g.zip_map(val(*a), "square", |x, y| 2.0 * x * y)?);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut adj[*a], Tensor::filled(r, c, g.data()[0]));
                }
                Op::RowSums(a) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        let gr = g.data()[row];
                        d.row_mut(row).iter_mut().for_each(|v| *v = gr);
                    }
                    accumulate(&mut adj[*a], d);
                }
                Op::LogSumExpRows(a) => {
                    let src = val(*a);
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for row in 0..src.rows() {
                        let lse = node.value.data()[row];
                        let gr = g.data()[row];
                        for (dv, &sv) in d.row_mut(row).iter_mut().zip(src.row(row)) {
                            *dv = gr * (sv - lse).exp();
                        }
                    }
                    accumulate(&mut adj[*a], d);
                }
                Op::SelectCols(a, idx) => {
                    let src = val(*a);
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for row in 0..src.rows() {
                        let gr = g.row(row);
                        let dr = d.row_mut(row);
                        for (k, &c) in idx.iter().enumerate() {
                            dr[c] += gr[k];
                        }
                    }
                    accumulate(&mut adj[*a], d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = val(p).cols();
                        if wants(p) {
                            let cols: Vec<usize> = (offset..offset + width).collect();
                            accumulate(&mut adj[p], g.select_cols(&cols)?);
                        }
                        offset += width;
                    }
                }
                Op::Inverse(a) => {
                    // d(A⁻¹) = -A⁻¹ dA A⁻¹, so the adjoint is -A⁻ᵀ G A⁻ᵀ.
                    let inv_t = node.value.transpose();
                    let d = inv_t.matmul(&g)?.matmul(&inv_t)?.map(|x| -x);
                    accumulate(&mut adj[*a], d);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }
}

/// `log Σ exp(v)` with the usual max shift. Empty input gives `-∞`.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::row_vector(vec![1.5, -2.0, 0.25]));
        let sq = tape.square(v).unwrap();
        let root = tape.sum(sq).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let xs = vec![0.3, -1.2, 2.0, 0.0];
        let mut tape = Tape::new();
        let v = tape.param(Tensor::row_vector(xs.clone()));
        let root = tape.logsumexp_rows(v).unwrap();
        let g = tape.backward(root).unwrap();
        let z: f64 = xs.iter().map(|x| x.exp()).sum();
        for (gi, xi) in g.get(v).unwrap().data().iter().zip(&xs) {
            assert!((gi - xi.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(v),
            Err(TensorError::NonScalarRoot { shape: (1, 2) })
        ));
    }

    #[test]
    fn non_finite_values_surface_as_errors() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::row_vector(vec![-1.0]));
        assert!(matches!(tape.log(v), Err(TensorError::NonFinite { op: "log" })));
        let big = tape.param(Tensor::scalar(1000.0));
        assert!(tape.exp(big).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::row_vector(vec![0.0, 1.0, -1.0]));
        let r = tape.relu(v).unwrap();
        let root = tape.sum(r).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::row_vector(vec![3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let root = tape.sum(m).unwrap();
        let g = tape.backward(root).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn vars_from_another_tape_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let va = a.param(Tensor::scalar(1.0));
        let _ = b.param(Tensor::scalar(1.0));
        assert!(matches!(b.exp(va), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order and the backward pass is a single reverse sweep.
//! Parameter leaves borrow their values from a [`ParamStore`] instead of
//! copying them.

use std::borrow::Cow;

use super::params::{GradStore, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Dropout(Var, Vec<f64>),
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        message: format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Variable, true)
    }

    /// A leaf bound to a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self
            .store
            .expect("Tape::param requires a tape built with Tape::with_params");
        self.push(Cow::Borrowed(store.get(id)), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % cols])
            .collect();
        let out = Tensor::new(ta.rows(), cols, data)?;
        Ok(self.push_op(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push_op(out, Op::Scale(a, factor), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat_cols",
            message: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat_rows",
            message: "no inputs".into(),
        })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                message: format!("{start}..{end} of {} columns", t.cols()),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::new(t.rows(), end - start, data)?;
        Ok(self.push_op(out, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                message: format!("{start}..{end} of {} rows", t.rows()),
            });
        }
        let cols = t.cols();
        let out = Tensor::new(end - start, cols, t.data()[start * cols..end * cols].to_vec())?;
        Ok(self.push_op(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, r + 1)
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes row `i` of the output.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    message: format!("index {i} out of {} rows", t.rows()),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(indices.len(), cols, data)?;
        Ok(self.push_op(out, Op::Gather(table, indices.to_vec()), &[table]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(super::tensor::softmax(t.row(r)));
        }
        let out = Tensor::new(t.rows(), t.cols(), data).expect("same shape");
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(super::tensor::log_softmax(t.row(r)));
        }
        let out = Tensor::new(t.rows(), t.cols(), data).expect("same shape");
        self.push_op(out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Inverted dropout with a mask drawn from `rng`; identity when `rate == 0`.
    pub fn dropout<R: rand::Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.rows(), t.cols(), data).expect("same shape");
        self.push_op(out, Op::Dropout(a, mask), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `mask ⊙ new + (1 − mask) ⊙ old` with a constant 0/1 mask.
    pub fn blend(&mut self, new: Var, old: Var, mask: &Tensor) -> Result<Var> {
        let keep_new = self.constant(mask.clone());
        let keep_old = self.constant(mask.map(|m| 1.0 - m));
        let a = self.mul(new, keep_new)?;
        let b = self.mul(old, keep_old)?;
        self.add(a, b)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {}x{}",
                root_value.rows(),
                root_value.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Variable | Op::Param(_) | Op::Constant);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `out`.
    pub fn backward_into(&self, root: Var, out: &mut GradStore) -> Result<()> {
        self.backward(root)?.accumulate_into(out);
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = node.value.as_ref();
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let gb = g.matmul(&self.value(*b).transpose()).expect("shapes checked");
                    self.acc(grads, *a, gb);
                }
                if self.wants(*b) {
                    let ga = self.value(*a).transpose().matmul(g).expect("shapes checked");
                    self.acc(grads, *b, ga);
                }
            }
            Op::Add(a, b) => {
                self.acc_ref(grads, *a, g);
                self.acc_ref(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_ref(grads, *a, g);
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(a, bias) => {
                self.acc_ref(grads, *a, g);
                if self.wants(*bias) {
                    let mut sums = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, x) in sums.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    self.acc(grads, *bias, Tensor::row_vector(sums));
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.map(|x| x * f));
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    self.acc(grads, *a, zip_map(g, y, |g, y| g * (1.0 - y * y)));
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    self.acc(grads, *a, zip_map(g, y, |g, y| g * y * (1.0 - y)));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    self.acc(grads, *a, zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(g.rows() * width);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + width]);
                        }
                        self.acc(grads, *p, Tensor::new(g.rows(), width, data).unwrap());
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let height = self.value(*p).rows();
                    if self.wants(*p) {
                        let data = g.data()[offset * cols..(offset + height) * cols].to_vec();
                        self.acc(grads, *p, Tensor::new(height, cols, data).unwrap());
                    }
                    offset += height;
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let mut full = Tensor::zeros(src.rows(), src.cols());
                    let width = g.cols();
                    let cols = src.cols();
                    for r in 0..g.rows() {
                        full.data_mut()[r * cols + start..r * cols + start + width]
                            .copy_from_slice(g.row(r));
                    }
                    self.acc(grads, *a, full);
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let cols = src.cols();
                    self.acc_region(grads, *a, start * cols, g.data());
                }
            }
            Op::Gather(table, indices) => {
                if self.wants(*table) {
                    let src = self.value(*table);
                    let cols = src.cols();
                    let slot = &mut grads[table.0];
                    let acc = slot.get_or_insert_with(|| Tensor::zeros(src.rows(), cols));
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut acc.data_mut()[i * cols..(i + 1) * cols];
                        for (d, x) in dst.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.transpose());
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let mut out = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                        let cols = y.cols();
                        for c in 0..cols {
                            out.data_mut()[r * cols + c] = y.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    self.acc(grads, *a, out);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.wants(*a) {
                    let mut out = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        let cols = y.cols();
                        for c in 0..cols {
                            out.data_mut()[r * cols + c] = g.get(r, c) - y.get(r, c).exp() * total;
                        }
                    }
                    self.acc(grads, *a, out);
                }
            }
            Op::Dropout(a, mask) => {
                if self.wants(*a) {
                    let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    self.acc(grads, *a, Tensor::new(g.rows(), g.cols(), data).unwrap());
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    self.acc(grads, *a, Tensor::filled(src.rows(), src.cols(), g.item()));
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_ref(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    fn acc_region(&self, grads: &mut [Option<Tensor>], v: Var, offset: usize, g: &[f64]) {
        let src = self.value(v);
        let slot = &mut grads[v.0];
        let acc = slot.get_or_insert_with(|| Tensor::zeros(src.rows(), src.cols()));
        for (d, x) in acc.data_mut()[offset..offset + g.len()].iter_mut().zip(g) {
            *d += x;
        }
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

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf, if the leaf was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn accumulate_into(&self, out: &mut GradStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.accumulate(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_variable_gradients, GradCheck};

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(1, 2));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_q_minus_y() {
        let logits = vec![0.3, -1.2, 2.0, 0.7];
        let target = 2;
        let mut tape = Tape::new();
        let u = tape.variable(Tensor::row_vector(logits.clone()));
        let logq = tape.log_softmax_rows(u);
        let mut onehot = vec![0.0; 4];
        onehot[target] = 1.0;
        let y = tape.constant(Tensor::row_vector(onehot.clone()));
        let picked = tape.mul(logq, y).unwrap();
        let s = tape.sum(picked);
        let loss = tape.scale(s, -1.0);
        let grads = tape.backward(loss).unwrap();
        let q = crate::nn::tensor::softmax(&logits);
        for k in 0..4 {
            let expected = q[k] - onehot[k];
            assert!((grads.wrt(u).unwrap().data()[k] - expected).abs() < 1e-12);
        }
    }

    // Every op, checked by central differences on random inputs.
    #[test]
    fn all_ops_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |r: usize, c: usize| {
            Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
        };
        let inputs = vec![rand_t(2, 3), rand_t(3, 4), rand_t(1, 4), rand_t(2, 4), rand_t(5, 3)];
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let (a, b, bias, d, table) = (v[0], v[1], v[2], v[3], v[4]);
            let m = tape.matmul(a, b)?;
            let m = tape.add_row(m, bias)?;
            let t = tape.tanh(m);
            let s = tape.sigmoid(d);
            let p = tape.mul(t, s)?;
            let q = tape.sub(p, d)?;
            let q = tape.scale(q, 0.7);
            let cc = tape.concat_cols(&[q, t])?;
            let sl = tape.slice_cols(cc, 2, 6)?;
            let cr = tape.concat_rows(&[sl, d])?;
            let r = tape.slice_rows(cr, 1, 3)?;
            let sm = tape.softmax_rows(r);
            let ls = tape.log_softmax_rows(cr);
            let tr = tape.transpose(ls);
            let g = tape.gather_rows(table, &[4, 0, 4])?;
            let gm = tape.matmul(g, b)?;
            let gs = tape.sum(gm);
            let x = tape.matmul(sm, tr)?;
            let xs = tape.sum(x);
            let e = tape.sum(sm);
            let y = tape.add(xs, gs)?;
            let z = tape.add(y, e)?;
            let rl = tape.relu(m);
            let rs = tape.sum(rl);
            tape.add(z, rs)
        };
        let report = check_variable_gradients(&inputs, f, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let _: &GradCheck = &report;
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row_vector(vec![1.0, 2.0]));
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
        let d = tape.dropout(x, 0.5, &mut rng);
        let v = tape.value(d).data().to_vec();
        assert!(v.iter().zip([1.0, 2.0]).all(|(y, x)| *y == 0.0 || *y == 2.0 * x));
    }
}

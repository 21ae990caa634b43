//! Minimal dense-tensor reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`]; calling [`Tape::backward`] on a
//! scalar result walks the tape in reverse and produces gradients for every
//! reachable node, grouped by parameter name for leaves bound to a
//! [`ParamStore`]. Tensors are rank ≤ 2 (matrices, with row vectors for
//! biases and 1×1 matrices for scalars).
//!
//! The adjacency of a state graph enters the tape either as an ordinary
//! dense matrix via [`Tape::matmul`] or through the sparse edge-list path
//! [`Tape::spmm`]; both satisfy the same contract and are cross-checked in
//! the test suite.

mod store;

pub mod fdcheck;

pub use store::{AdamConfig, OptimError, ParamStore};

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

/// Element type of every tensor. `f64` by default; the `f32` cargo feature
/// switches the whole stack to single precision.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Dense rank-2 value.
pub type Matrix = Array2<Scalar>;

/// Weighted symmetric adjacency stored as an edge list. Entries are
/// `(row, col, weight)` and must list both directions of every edge plus
/// any self-loops explicitly.
pub type EdgeWeights = Vec<(u32, u32, Scalar)>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward called twice without reset")]
    BackwardTwice,
    #[error("backward requires a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("index {index} out of bounds for {op} on a {rows}x{cols} tensor")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
        cols: usize,
    },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

enum Op {
    /// Constant input; no gradient tracked beyond the node itself.
    Leaf,
    /// Leaf bound to a named parameter; gradients are reported by name.
    Param(String),
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// `a + bias` where `bias` is a 1×d row broadcast over the rows of `a`.
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, Scalar),
    Sigmoid(TensorId),
    Relu(TensorId),
    Cos(TensorId),
    /// Elementwise Huber loss with threshold lambda.
    Huber(TensorId, Scalar),
    SumAll(TensorId),
    MeanAll(TensorId),
    /// Row-wise softmax at the given temperature.
    SoftmaxT(TensorId, Scalar),
    /// Sparse symmetric adjacency multiply: `out[i] += w * h[j]`.
    SpMM(Arc<EdgeWeights>, TensorId),
    /// `out[k] = a[rows[k]]`; duplicate indices accumulate on backward.
    GatherRows(TensorId, Arc<Vec<usize>>),
    /// `out[k, 0] = a[k, cols[k]]` — one column picked per row.
    SelectPerRow(TensorId, Arc<Vec<usize>>),
    /// Vertical stack of the inputs, in order.
    ConcatRows(Vec<TensorId>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_id: Vec<Option<Matrix>>,
    /// Gradient per parameter name, summed over all tape leaves bound to it.
    pub by_name: BTreeMap<String, Matrix>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given tape node, if it was
    /// reached by the backward pass.
    pub fn of(&self, id: TensorId) -> Option<&Matrix> {
        self.by_id.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Computation tape. Construction order is topological, so the backward
/// pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

type Result<T> = std::result::Result<T, AutodiffError>;

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

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, id: TensorId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: TensorId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.nrows(), v.ncols())
    }

    fn push(&mut self, value: Matrix, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: Scalar) -> TensorId {
        self.push(Matrix::from_elem((1, 1), value), Op::Leaf)
    }

    /// Binds the named parameter from `store` as a tape leaf. Its gradient
    /// is reported under the same name by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        let value = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        Ok(self.push(value.clone(), Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{ar}x{ac} . {br}x{bc}"),
            });
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            return Err(AutodiffError::ShapeMismatch {
                op: op_name,
                detail: format!("{ar}x{ac} vs {br}x{bc}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a 1×d bias row to every row of `a`.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (_, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != ac {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                detail: format!("bias {br}x{bc} for matrix with {ac} columns"),
            });
        }
        let bias_row = self.nodes[bias.0].value.row(0).to_owned();
        let value = &self.nodes[a.0].value + &bias_row;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, factor: Scalar) -> TensorId {
        let value = &self.nodes[a.0].value * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn cos(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(Scalar::cos);
        self.push(value, Op::Cos(a))
    }

    /// Elementwise Huber loss: `x²/2` for `|x| ≤ lambda`, else
    /// `lambda·(|x| − lambda/2)`.
    pub fn huber(&mut self, a: TensorId, lambda: Scalar) -> TensorId {
        let value = self.nodes[a.0].value.mapv(|x| {
            if x.abs() <= lambda {
                0.5 * x * x
            } else {
                lambda * (x.abs() - 0.5 * lambda)
            }
        });
        self.push(value, Op::Huber(a, lambda))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let value = Matrix::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.len().max(1) as Scalar;
        let value = Matrix::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        self.push(value, Op::MeanAll(a))
    }

    /// Row-wise temperature softmax: `softmax(x / temperature)` per row.
    pub fn softmax_t(&mut self, a: TensorId, temperature: Scalar) -> TensorId {
        let value = softmax_rows(&self.nodes[a.0].value, temperature);
        self.push(value, Op::SoftmaxT(a, temperature))
    }

    /// Sparse symmetric adjacency multiply. `edges` must contain both
    /// directions of every off-diagonal entry; node indices must be valid
    /// rows of `h`.
    pub fn spmm(&mut self, edges: Arc<EdgeWeights>, h: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.shape(h);
        for &(i, j, _) in edges.iter() {
            if i as usize >= rows || j as usize >= rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "spmm",
                    detail: format!("edge ({i},{j}) out of range for {rows} rows"),
                });
            }
        }
        let value = spmm_apply(&edges, &self.nodes[h.0].value, rows, cols);
        Ok(self.push(value, Op::SpMM(edges, h)))
    }

    pub fn gather_rows(&mut self, a: TensorId, rows: Arc<Vec<usize>>) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        for &r in rows.iter() {
            if r >= ar {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: r,
                    rows: ar,
                    cols: ac,
                });
            }
        }
        let mut value = Matrix::zeros((rows.len(), ac));
        for (k, &r) in rows.iter().enumerate() {
            value.row_mut(k).assign(&self.nodes[a.0].value.row(r));
        }
        Ok(self.push(value, Op::GatherRows(a, rows)))
    }

    /// Picks one entry per row: `out[k, 0] = a[k, cols[k]]`.
    pub fn select_per_row(&mut self, a: TensorId, cols: Arc<Vec<usize>>) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        if cols.len() != ar {
            return Err(AutodiffError::ShapeMismatch {
                op: "select_per_row",
                detail: format!("{} indices for {ar} rows", cols.len()),
            });
        }
        for &c in cols.iter() {
            if c >= ac {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "select_per_row",
                    index: c,
                    rows: ar,
                    cols: ac,
                });
            }
        }
        let mut value = Matrix::zeros((ar, 1));
        for (k, &c) in cols.iter().enumerate() {
            value[(k, 0)] = self.nodes[a.0].value[(k, c)];
        }
        Ok(self.push(value, Op::SelectPerRow(a, cols)))
    }

    /// Vertical concatenation. Inputs may have zero rows; all must share a
    /// column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                detail: "no inputs".to_string(),
            });
        }
        let cols = self.shape(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("{pc} columns vs {cols}"),
                });
            }
            total += pr;
        }
        let mut value = Matrix::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let pr = self.shape(p).0;
            value
                .slice_mut(ndarray::s![at..at + pr, ..])
                .assign(&self.nodes[p.0].value);
            at += pr;
        }
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Reverse sweep from a 1×1 loss node. Populates gradients for every
    /// node that the loss depends on; leaves not reached keep `None` (their
    /// parameter gradient is zero).
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let (lr, lc) = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows: lr, cols: lc });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_name: BTreeMap<String, Matrix> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads[idx] {
                    by_name
                        .entry(name.clone())
                        .and_modify(|acc| *acc += g)
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Ok(Gradients { by_id: grads, by_name })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let add_grad = |grads: &mut [Option<Matrix>], id: TensorId, delta: Matrix| {
            match &mut grads[id.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.nodes[b.0].value.t());
                let gb = self.nodes[a.0].value.t().dot(g);
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                add_grad(grads, *a, g.clone());
                let summed = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                add_grad(grads, *bias, summed);
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                add_grad(grads, *a, g * &self.nodes[b.0].value);
                add_grad(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Scale(a, factor) => add_grad(grads, *a, g * *factor),
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                add_grad(grads, *a, g * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                add_grad(grads, *a, g * &mask);
            }
            Op::Cos(a) => {
                let d = self.nodes[a.0].value.mapv(|x| -x.sin());
                add_grad(grads, *a, g * &d);
            }
            Op::Huber(a, lambda) => {
                let d = self.nodes[a.0].value.mapv(|x| x.clamp(-*lambda, *lambda));
                add_grad(grads, *a, g * &d);
            }
            Op::SumAll(a) => {
                let (r, c) = (self.nodes[a.0].value.nrows(), self.nodes[a.0].value.ncols());
                add_grad(grads, *a, Matrix::from_elem((r, c), g[(0, 0)]));
            }
            Op::MeanAll(a) => {
                let (r, c) = (self.nodes[a.0].value.nrows(), self.nodes[a.0].value.ncols());
                let n = (r * c).max(1) as Scalar;
                add_grad(grads, *a, Matrix::from_elem((r, c), g[(0, 0)] / n));
            }
            Op::SoftmaxT(a, temperature) => {
                let y = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(y.raw_dim());
                for (row, (yr, gr)) in y.rows().into_iter().zip(g.rows()).enumerate() {
                    let dot: Scalar = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                    for (col, (&yv, &gv)) in yr.iter().zip(gr.iter()).enumerate() {
                        ga[(row, col)] = yv * (gv - dot) / temperature;
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::SpMM(edges, h) => {
                let (rows, cols) = (self.nodes[h.0].value.nrows(), self.nodes[h.0].value.ncols());
                // The edge list is symmetric, so the transpose multiply is
                // the same operation applied to the upstream gradient.
                add_grad(grads, *h, spmm_apply(edges, g, rows, cols));
            }
            Op::GatherRows(a, rows) => {
                let (ar, ac) = (self.nodes[a.0].value.nrows(), self.nodes[a.0].value.ncols());
                let mut ga = Matrix::zeros((ar, ac));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(k);
                }
                add_grad(grads, *a, ga);
            }
            Op::SelectPerRow(a, cols) => {
                let (ar, ac) = (self.nodes[a.0].value.nrows(), self.nodes[a.0].value.ncols());
                let mut ga = Matrix::zeros((ar, ac));
                for (k, &c) in cols.iter().enumerate() {
                    ga[(k, c)] += g[(k, 0)];
                }
                add_grad(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let pr = self.nodes[p.0].value.nrows();
                    let slice = g.slice(ndarray::s![at..at + pr, ..]).to_owned();
                    add_grad(grads, p, slice);
                    at += pr;
                }
            }
        }
    }
}

/// Row-wise `softmax(x / temperature)` on a plain matrix.
pub fn softmax_rows(x: &Matrix, temperature: Scalar) -> Matrix {
    let mut out = Matrix::zeros(x.raw_dim());
    for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
        let max = xrow.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(xrow.iter()) {
            *o = ((x - max) / temperature).exp();
            sum += *o;
        }
        orow.mapv_inplace(|v| v / sum);
    }
    out
}

fn spmm_apply(edges: &EdgeWeights, h: &Matrix, rows: usize, cols: usize) -> Matrix {
    let mut out = Matrix::zeros((rows, cols));
    for &(i, j, w) in edges {
        let src = h.row(j as usize).to_owned();
        let mut dst = out.row_mut(i as usize);
        dst.scaled_add(w, &src);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fdcheck::{max_rel_error, numeric_param_grad};
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y)[(0, 0)], 0.5);
    }

    #[test]
    fn huber_at_threshold_takes_quadratic_value() {
        let mut tape = Tape::new();
        let x = tape.scalar(1.0);
        let y = tape.huber(x, 1.0);
        assert_eq!(tape.value(y)[(0, 0)], 0.5);
    }

    #[test]
    fn softmax_of_uniform_values_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 1.0, 1.0]]);
        let y = tape.softmax_t(x, 5.0);
        for &v in tape.value(y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_loss_gradient_is_the_fixed_input() {
        // loss = sum(x · W) with x fixed => dL/dW = broadcast of column sums of x.
        let mut store = ParamStore::new();
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        store.insert("w", Matrix::ones((2, 3)));

        let mut tape = Tape::new();
        let xs = tape.constant(x.clone());
        let w = tape.param(&store, "w").unwrap();
        let prod = tape.matmul(xs, w).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();

        let gw = &grads.by_name["w"];
        for col in 0..3 {
            assert_eq!(gw[(0, col)], 4.0); // 1 + 3
            assert_eq!(gw[(1, col)], 6.0); // 2 + 4
        }
    }

    #[test]
    fn constant_loss_yields_no_param_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::ones((2, 2)));
        let mut tape = Tape::new();
        let _w = tape.param(&store, "w").unwrap();
        let c = tape.scalar(3.0);
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.by_name.is_empty());
    }

    #[test]
    fn backward_twice_without_reset_errors() {
        let mut tape = Tape::new();
        let x = tape.scalar(2.0);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(AutodiffError::BackwardTwice)
        ));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros((2, 3)));
        let b = tape.constant(Matrix::zeros((2, 3)));
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(Matrix::zeros((3, 2)));
        assert!(tape.add(a, c).is_err());
    }

    /// Finite-difference check for every op against the recorded backward
    /// pass. Each case builds `loss = sum(weights ⊙ op(param...))` with a
    /// fixed random weighting so all output entries contribute.
    #[cfg(not(feature = "f32"))]
    #[test]
    fn every_op_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let weight = random_matrix(&mut rng, 3, 4);
        let weight_small = random_matrix(&mut rng, 3, 1);
        let edges: Arc<EdgeWeights> = Arc::new(vec![
            (0, 0, 0.5),
            (1, 1, 1.0),
            (2, 2, 0.25),
            (0, 1, 0.3),
            (1, 0, 0.3),
            (1, 2, 0.7),
            (2, 1, 0.7),
        ]);

        type Builder = Box<dyn Fn(&mut Tape, &ParamStore) -> TensorId>;
        let cases: Vec<(&str, (usize, usize), Builder)> = vec![
            ("matmul", (3, 2), {
                let w = weight.clone();
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let other = t.constant(Matrix::from_shape_fn((2, 4), |(i, j)| {
                        0.3 + 0.1 * (i as Scalar) - 0.2 * (j as Scalar)
                    }));
                    let y = t.matmul(p, other).unwrap();
                    let wc = t.constant(w.clone());
                    let prod = t.mul(y, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
            ("add_mul_sub", (3, 4), {
                let w = weight.clone();
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let c = t.constant(Matrix::from_elem((3, 4), 0.7));
                    let a = t.add(p, c).unwrap();
                    let m = t.mul(a, p).unwrap();
                    let d = t.sub(m, p).unwrap();
                    let wc = t.constant(w.clone());
                    let prod = t.mul(d, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
            ("add_row", (1, 4), {
                let w = weight.clone();
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let base = t.constant(Matrix::from_shape_fn((3, 4), |(i, j)| {
                        (i as Scalar) * 0.2 - (j as Scalar) * 0.1
                    }));
                    let y = t.add_row(base, p).unwrap();
                    let wc = t.constant(w.clone());
                    let prod = t.mul(y, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
            ("sigmoid", (3, 4), unary_case(&weight, |t, x| t.sigmoid(x))),
            ("relu_shifted", (3, 4), {
                let w = weight.clone();
                // Shift inputs away from the kink at zero.
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let c = t.constant(Matrix::from_elem((3, 4), 0.35));
                    let shifted = t.add(p, c).unwrap();
                    let y = t.relu(shifted);
                    let wc = t.constant(w.clone());
                    let prod = t.mul(y, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
            ("cos", (3, 4), unary_case(&weight, |t, x| t.cos(x))),
            ("huber", (3, 4), unary_case(&weight, |t, x| t.huber(x, 0.4))),
            ("scale", (3, 4), unary_case(&weight, |t, x| t.scale(x, -2.5))),
            ("mean_all", (3, 4), {
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    t.mean_all(p)
                })
            }),
            ("softmax_t", (3, 4), {
                let w = weight.clone();
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let y = t.softmax_t(p, 2.0);
                    let wc = t.constant(w.clone());
                    let prod = t.mul(y, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
            ("spmm", (3, 4), {
                let w = weight.clone();
                let e = edges.clone();
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let y = t.spmm(e.clone(), p).unwrap();
                    let wc = t.constant(w.clone());
                    let prod = t.mul(y, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
            ("gather_rows", (3, 4), {
                let w = weight.clone();
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let idx = Arc::new(vec![2usize, 0, 2]);
                    let y = t.gather_rows(p, idx).unwrap();
                    let wc = t.constant(w.clone());
                    let prod = t.mul(y, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
            ("select_per_row", (3, 4), {
                let w = weight_small.clone();
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let cols = Arc::new(vec![1usize, 3, 0]);
                    let y = t.select_per_row(p, cols).unwrap();
                    let wc = t.constant(w.clone());
                    let prod = t.mul(y, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
            ("concat_rows", (2, 4), {
                let w = weight.clone();
                Box::new(move |t, s| {
                    let p = t.param(s, "p").unwrap();
                    let c = t.constant(Matrix::from_elem((1, 4), 0.3));
                    let y = t.concat_rows(&[p, c]).unwrap();
                    let wc = t.constant(w.clone());
                    let prod = t.mul(y, wc).unwrap();
                    t.sum_all(prod)
                })
            }),
        ];

        for (name, shape, build) in &cases {
            let mut store = ParamStore::new();
            store.insert("p", random_matrix(&mut rng, shape.0, shape.1));

            let mut tape = Tape::new();
            let loss = build(&mut tape, &store);
            let grads = tape.backward(loss).unwrap();
            let analytic = grads
                .by_name
                .get("p")
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(*shape));

            let numeric = numeric_param_grad(&store, "p", 1e-5, |s| {
                let mut t = Tape::new();
                let l = build(&mut t, s);
                t.value(l)[(0, 0)]
            });
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-6, "op {name}: max rel err {err}");
        }
    }

    #[cfg(not(feature = "f32"))]
    fn unary_case(
        weight: &Matrix,
        f: impl Fn(&mut Tape, TensorId) -> TensorId + 'static,
    ) -> Box<dyn Fn(&mut Tape, &ParamStore) -> TensorId> {
        let w = weight.clone();
        Box::new(move |t, s| {
            let p = t.param(s, "p").unwrap();
            let y = f(t, p);
            let wc = t.constant(w.clone());
            let prod = t.mul(y, wc).unwrap();
            t.sum_all(prod)
        })
    }
}

//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are appended after their parents, so the node order is a
//! topological order and [`Tape::backward`] walks it once in reverse.
//! Shape errors inside the recorded ops are programming errors and panic;
//! public loss and model entry points validate shapes before recording.

use std::sync::Arc;

use super::linalg::{cholesky_spd, inverse_from_cholesky, logdet_from_cholesky};
use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Below this norm a row is treated as zero by [`Tape::normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One output row of a sparse linear row map: `out[col] = Σ w · in[src][src_col]`.
#[derive(Clone, Debug)]
pub struct MappedRow<T> {
    pub src: usize,
    /// `(out_col, src_col, weight)` triples.
    pub terms: Vec<(u32, u32, T)>,
}

/// Sparse linear map from the rows of one matrix to the rows of another.
#[derive(Clone, Debug)]
pub struct RowMap<T> {
    pub out_cols: usize,
    pub rows: Vec<MappedRow<T>>,
}

impl<T: Scalar> RowMap<T> {
    pub fn apply(&self, input: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows.len(), self.out_cols);
        for (r, mapped) in self.rows.iter().enumerate() {
            let src = input.row(mapped.src);
            let dst = out.row_mut(r);
            for &(oc, sc, w) in &mapped.terms {
                dst[oc as usize] += w * src[sc as usize];
            }
        }
        out
    }

    fn apply_transpose(&self, grad: &Matrix<T>, in_rows: usize, in_cols: usize) -> Matrix<T> {
        let mut out = Matrix::zeros(in_rows, in_cols);
        for (r, mapped) in self.rows.iter().enumerate() {
            let g = grad.row(r);
            let dst = out.row_mut(mapped.src);
            for &(oc, sc, w) in &mapped.terms {
                dst[sc as usize] += w * g[oc as usize];
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    AddRowBroadcast(Var, Var),
    Relu(Var),
    Tanh(Var),
    Transpose(Var),
    Sum(Var),
    LogDetSpd { input: Var, inverse: Matrix<T> },
    NormalizeRows { input: Var, norms: Vec<T> },
    SliceRows { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    LogSumExpRows { input: Var, probs: Matrix<T> },
    Gather { input: Var, index: Vec<(usize, usize)> },
    MapRows { input: Var, map: Arc<RowMap<T>> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    flip_logdet_grad: bool,
}

/// Gradients of a scalar root with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Matrix<T> {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flip_logdet_grad: false,
        }
    }

    /// Negative control for the self-check: makes `logdet_spd` backpropagate
    /// the wrong sign.
    #[doc(hidden)]
    pub fn inject_logdet_sign_fault(&mut self) {
        self.flip_logdet_grad = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.derived(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a).add(self.value(b));
        self.derived(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a).sub(self.value(b));
        self.derived(value, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "hadamard shape mismatch");
        let value = self.value(a).hadamard(self.value(b));
        self.derived(value, Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    /// `a + 1 bᵀ` for a `1 × cols` row `b`.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (_, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "bias must be 1 x cols");
        let mut value = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for row in value.as_mut_slice().chunks_mut(cols.max(1)) {
            for (x, &bv) in row.iter_mut().zip(&b) {
                *x += bv;
            }
        }
        self.derived(value, Op::AddRowBroadcast(a, bias), &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.derived(value, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.derived(value, Op::Tanh(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.derived(value, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.derived(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `trace(aᵀ b) = Σ a ∘ b`.
    pub fn inner(&mut self, a: Var, b: Var) -> Var {
        let h = self.hadamard(a, b);
        self.sum(h)
    }

    /// Log-determinant of a symmetric positive-definite input via Cholesky.
    pub fn logdet_spd(&mut self, a: Var) -> Result<Var> {
        let l = cholesky_spd(self.value(a))?;
        let value = Matrix::scalar(logdet_from_cholesky(&l));
        let inverse = inverse_from_cholesky(&l);
        Ok(self.derived(value, Op::LogDetSpd { input: a, inverse }, &[a]))
    }

    /// Scales each row to unit l2 norm; rows with norm below [`NORM_FLOOR`]
    /// become the first basis vector and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut value = Matrix::zeros(rows, cols);
        let mut norms = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = x.row(i);
            let n = r.iter().map(|&v| v * v).sum::<T>().sqrt();
            let out = value.row_mut(i);
            if n < T::lit(NORM_FLOOR) {
                if cols > 0 {
                    out[0] = T::one();
                }
                norms.push(T::zero());
            } else {
                for (o, &v) in out.iter_mut().zip(r) {
                    *o = v / n;
                }
                norms.push(n);
            }
        }
        self.derived(value, Op::NormalizeRows { input: a, norms }, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        self.derived(value, Op::SliceRows { input: a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let value = {
            let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Matrix::vstack(&mats)
        };
        self.derived(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row-wise `ln Σ_j exp(a_ij)`, optionally skipping the diagonal entry; `rows × 1`.
    pub fn logsumexp_rows(&mut self, a: Var, exclude_diagonal: bool) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut probs = Matrix::zeros(rows, cols);
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let keep = |j: usize| !(exclude_diagonal && i == j);
            let r = x.row(i);
            let m = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| r[j])
                .fold(T::neg_infinity(), T::max);
            let p = probs.row_mut(i);
            let mut total = T::zero();
            for j in (0..cols).filter(|&j| keep(j)) {
                p[j] = (r[j] - m).exp();
                total += p[j];
            }
            for v in p.iter_mut() {
                *v /= total;
            }
            out.push(m + total.ln());
        }
        let value = Matrix::from_raw(rows, 1, out);
        self.derived(value, Op::LogSumExpRows { input: a, probs }, &[a])
    }

    /// Picks the listed entries into a `k × 1` column.
    pub fn gather(&mut self, a: Var, index: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        let value = Matrix::from_raw(index.len(), 1, index.iter().map(|&(r, c)| x.get(r, c)).collect());
        self.derived(value, Op::Gather { input: a, index }, &[a])
    }

    pub fn map_rows(&mut self, a: Var, map: Arc<RowMap<T>>) -> Var {
        let value = map.apply(self.value(a));
        self.derived(value, Op::MapRows { input: a, map }, &[a])
    }

    /// Gradients of the `1 × 1` node `root` with respect to every node that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        if root.0 >= n {
            return Err(Error::GraphCycle(root.0));
        }
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(Error::shape("backward", "1 x 1 root", format!("{root_shape:?}")));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Matrix::scalar(T::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.check_parents(i)?;
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn check_parents(&self, i: usize) -> Result<()> {
        let ok = |v: &Var| v.0 < i;
        let good = match &self.nodes[i].op {
            Op::Leaf => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) | Op::AddRowBroadcast(a, b) => {
                ok(a) && ok(b)
            }
            Op::Scale(a, _) | Op::Relu(a) | Op::Tanh(a) | Op::Transpose(a) | Op::Sum(a) => ok(a),
            Op::LogDetSpd { input, .. }
            | Op::NormalizeRows { input, .. }
            | Op::SliceRows { input, .. }
            | Op::LogSumExpRows { input, .. }
            | Op::Gather { input, .. }
            | Op::MapRows { input, .. } => ok(input),
            Op::ConcatRows(parts) => parts.iter().all(ok),
        };
        if good {
            Ok(())
        } else {
            Err(Error::GraphCycle(i))
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddRowBroadcast(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*bias) {
                    let cols = g.cols();
                    let mut sums = vec![T::zero(); cols];
                    for i in 0..g.rows() {
                        for (s, &v) in sums.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *bias, Matrix::from_raw(1, cols, sums));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::LogDetSpd { input, inverse } => {
                let s = if self.flip_logdet_grad { -g.item() } else { g.item() };
                self.accumulate(grads, *input, inverse.scale(s))
            }
            Op::NormalizeRows { input, norms } => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    if norms[i] == T::zero() {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let inv = T::one() / norms[i];
                    for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) * inv;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::SliceRows { input, start } => {
                let (r, c) = self.shape(*input);
                let mut dx = Matrix::zeros(r, c);
                let len = g.rows();
                dx.as_mut_slice()[start * c..(start + len) * c].copy_from_slice(g.as_slice());
                self.accumulate(grads, *input, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            Op::LogSumExpRows { input, probs } => {
                let mut dx = probs.clone();
                for i in 0..dx.rows() {
                    let gi = g.get(i, 0);
                    for v in dx.row_mut(i) {
                        *v *= gi;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Gather { input, index } => {
                let (r, c) = self.shape(*input);
                let mut dx = Matrix::zeros(r, c);
                for (k, &(i, j)) in index.iter().enumerate() {
                    let cur = dx.get(i, j);
                    dx.set(i, j, cur + g.get(k, 0));
                }
                self.accumulate(grads, *input, dx);
            }
            Op::MapRows { input, map } => {
                let (r, c) = self.shape(*input);
                self.accumulate(grads, *input, map.apply_transpose(g, r, c));
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn push_raw_matmul(&mut self, a: usize, b: usize, value: Matrix<T>) -> Var {
        self.push(value, Op::MatMul(Var(a), Var(b)), true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut p = x.clone();
                p.set(i, j, x.get(i, j) + h);
                let mut m = x.clone();
                m.set(i, j, x.get(i, j) - h);
                g.set(i, j, (f(&p) - f(&m)) / (2.0 * h));
            }
        }
        g
    }

    fn assert_close(analytic: &Matrix<f64>, numeric: &Matrix<f64>) {
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            let scale = a.abs().max(n.abs());
            if scale > 1e-8 {
                assert!((a - n).abs() / scale < 1e-4, "analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn quadratic_form_gradient_is_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(3, 4, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let xt = t.transpose(xv);
        let p = t.matmul(xt, xv);
        let root = t.inner(xv, xv);
        assert!((t.value(root).item() - t.value(p).trace()).abs() < 1e-12);
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(xv), x.scale(2.0));
    }

    #[test]
    fn logdet_of_gram_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(4, 3, &mut rng);
        let f = |x: &Matrix<f64>| {
            let m = Matrix::identity(4).add(&x.matmul_t(x));
            crate::numerics::logdet_spd(&m).unwrap()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let xt = t.transpose(xv);
        let gram = t.matmul(xv, xt);
        let eye = t.constant(Matrix::identity(4));
        let m = t.add(eye, gram);
        let root = t.logdet_spd(m).unwrap();
        let g = t.backward(root).unwrap();
        assert_close(&g.wrt(xv), &numeric_grad(&x, f));
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 2, 3.0));
        let c = t.constant(Matrix::scalar(7.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(x), Matrix::zeros(2, 2));
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_reference_is_reported_as_cycle() {
        let mut t = Tape::<f64>::new();
        t.leaf(Matrix::scalar(1.0));
        // Node 1 claims node 1 as a parent.
        let bad = t.push_raw_matmul(0, 1, Matrix::scalar(1.0));
        assert!(matches!(t.backward(bad), Err(Error::GraphCycle(1))));
    }

    #[test]
    fn elementwise_and_structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(4, 3, &mut rng);
        let w = random(3, 5, &mut rng);
        let b = random(1, 5, &mut rng);
        let build = |t: &mut Tape<f64>, xv: Var| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let h = t.matmul(xv, wv);
            let h = t.add_row_broadcast(h, bv);
            let a = t.tanh(h);
            let r = t.relu(h);
            let s = t.hadamard(a, r);
            let top = t.slice_rows(s, 0, 2);
            let bottom = t.slice_rows(a, 2, 2);
            let cat = t.concat_rows(&[bottom, top]);
            let n = t.normalize_rows(cat);
            let l = t.logsumexp_rows(n, false);
            let pick = t.gather(n, vec![(0, 1), (3, 4), (3, 4)]);
            let sl = t.sum(l);
            let sp = t.sum(pick);
            let d = t.sub(sl, sp);
            t.scale(d, 0.7)
        };
        let f = |x: &Matrix<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let r = build(&mut t, xv);
            t.value(r).item()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let root = build(&mut t, xv);
        let g = t.backward(root).unwrap();
        assert_close(&g.wrt(xv), &numeric_grad(&x, f));
    }

    #[test]
    fn masked_logsumexp_skips_diagonal() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[vec![100.0, 0.0], vec![0.0, 100.0]]).unwrap());
        let l = t.logsumexp_rows(a, true);
        assert_eq!(t.value(l).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn row_map_and_its_adjoint() {
        let map = Arc::new(RowMap {
            out_cols: 2,
            rows: vec![
                MappedRow { src: 1, terms: vec![(0, 0, 0.5), (0, 2, 0.5), (1, 1, 2.0)] },
                MappedRow { src: 0, terms: vec![(1, 2, -1.0)] },
            ],
        });
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(x);
        let y = t.map_rows(xv, map);
        assert_eq!(t.value(y).as_slice(), &[5.0, 10.0, 0.0, -3.0]);
        let root = t.sum(y);
        let g = t.backward(root).unwrap().wrt(xv);
        assert_eq!(g.as_slice(), &[0.0, 0.0, -1.0, 0.5, 2.0, 0.5]);
    }

    #[test]
    fn degenerate_rows_normalize_to_first_basis_vector() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Matrix::zeros(2, 3));
        let n = t.normalize_rows(x);
        assert_eq!(t.value(n).as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let s = t.sum(n);
        assert_eq!(t.backward(s).unwrap().wrt(x), Matrix::zeros(2, 3));
    }
}

//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! sweeps the nodes in reverse and accumulates adjoints. Rows are voxels and
//! columns are channels throughout the trainer, so the op set is the handful
//! of matrix, broadcast and reduction primitives the evidence pipeline needs.

use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data does not match {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// The single value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert!(
            self.same_shape(other),
            "shape mismatch {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let lhs = self.row(r);
            for c in 0..other.rows {
                out.data[r * other.rows + c] =
                    lhs.iter().zip(other.row(c)).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    /// `self^T * other`.
    fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let rhs = other.row(r);
            for (i, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(rhs) {
                    *d += a * b;
                }
            }
        }
        out
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Softplus(Var),
    Log(Var),
    Recip(Var),
    ClampMin(Var, f64),
    RowSum(Var),
    ColSum(Var),
    Sum(Var),
    BroadcastCols(Var),
    SelectRows(Var, Var, Rc<[bool]>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A leaf: parameters, inputs and constants alike.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a 1xC row vector to every row of an RxC matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, m.cols);
        let mut out = m.clone();
        for chunk in out.data.chunks_mut(m.cols) {
            for (d, &b) in chunk.iter_mut().zip(&r.data) {
                *d += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).map(|x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo))
    }

    /// RxC -> Rx1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = m.data.chunks(m.cols).map(|r| r.iter().sum()).collect();
        let v = Matrix::new(m.rows, 1, data);
        self.push(v, Op::RowSum(a))
    }

    /// RxC -> 1xC.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut data = vec![0.0; m.cols];
        for chunk in m.data.chunks(m.cols) {
            for (d, &x) in data.iter_mut().zip(chunk) {
                *d += x;
            }
        }
        let v = Matrix::new(1, m.cols, data);
        self.push(v, Op::ColSum(a))
    }

    /// Any shape -> 1x1.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::Sum(a))
    }

    /// Rx1 -> RxC by repeating the column.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.cols, 1);
        let data = m
            .data
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, cols))
            .collect();
        let v = Matrix::new(m.rows, cols, data);
        self.push(v, Op::BroadcastCols(a))
    }

    /// Row r comes from `a` where `keep[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, keep: Rc<[bool]>) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert!(ma.same_shape(mb));
        assert_eq!(keep.len(), ma.rows);
        let mut out = ma.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.data[r * ma.cols..(r + 1) * ma.cols].copy_from_slice(mb.row(r));
            }
        }
        self.push(out, Op::SelectRows(a, b, keep))
    }

    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = &self.nodes[output.0].value;
        grads[output.0] = Some(Matrix::filled(out.rows, out.cols, 1.0));

        fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = vec![0.0; g.cols];
                    for chunk in g.data.chunks(g.cols) {
                        for (d, &x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *row, Matrix::new(1, g.cols, dr));
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip(self.value(*b), |d, y| d * y);
                    let db = g.zip(self.value(*a), |d, x| d * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    let da = g.zip(vb, |d, den| d / den);
                    let db = g.zip(y, |d, q| d * q).zip(vb, |dq, den| -dq / den);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.map(|d| k * d)),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip(y, |d, t| d * (1.0 - t * t))),
                Op::Softplus(a) => {
                    let da = g.zip(self.value(*a), |d, x| d * sigmoid(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::Log(a) => {
                    let da = g.zip(self.value(*a), |d, x| d / x);
                    accumulate(&mut grads, *a, da);
                }
                Op::Recip(a) => accumulate(&mut grads, *a, g.zip(y, |d, r| -d * r * r)),
                Op::ClampMin(a, lo) => {
                    let da = g.zip(self.value(*a), |d, x| if x > *lo { d } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::RowSum(a) => {
                    let cols = self.value(*a).cols;
                    let data = g
                        .data
                        .iter()
                        .flat_map(|&d| std::iter::repeat_n(d, cols))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::new(g.rows, cols, data));
                }
                Op::ColSum(a) => {
                    let rows = self.value(*a).rows;
                    let mut data = Vec::with_capacity(rows * g.cols);
                    for _ in 0..rows {
                        data.extend_from_slice(&g.data);
                    }
                    accumulate(&mut grads, *a, Matrix::new(rows, g.cols, data));
                }
                Op::Sum(a) => {
                    let m = self.value(*a);
                    accumulate(&mut grads, *a, Matrix::filled(m.rows, m.cols, g.item()));
                }
                Op::BroadcastCols(a) => {
                    let data = g.data.chunks(g.cols).map(|r| r.iter().sum()).collect();
                    accumulate(&mut grads, *a, Matrix::new(g.rows, 1, data));
                }
                Op::SelectRows(a, b, keep) => {
                    let mut da = g.clone();
                    let mut db = g;
                    for (r, &k) in keep.iter().enumerate() {
                        let span = r * da.cols..(r + 1) * da.cols;
                        if k {
                            db.data[span].fill(0.0);
                        } else {
                            da.data[span].fill(0.0);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
            }
        }
        Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| (n.value.rows, n.value.cols))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Central differences of a scalar function of one leaf matrix.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&mut Tape, Var) -> Var) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let eval = |m: Matrix| {
                let mut t = Tape::new();
                let v = t.leaf(m);
                let o = f(&mut t, v);
                t.value(o).item()
            };
            out.data_mut()[i] = (eval(plus) - eval(minus)) / (2.0 * h);
        }
        out
    }

    fn check(x: Matrix, f: &dyn Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let o = f(&mut t, v);
        let g = t.backward(o).get(v);
        let n = numeric_grad(&x, f);
        for (a, b) in g.data().iter().zip(n.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    fn sample() -> Matrix {
        Matrix::new(3, 2, vec![0.3, -1.2, 0.8, 0.1, -0.4, 2.0])
    }

    #[test]
    fn elementwise_ops() {
        check(sample(), &|t, x| {
            let a = t.tanh(x);
            let b = t.softplus(x);
            let c = t.mul(a, b);
            let d = t.div(c, b);
            let e = t.offset(b, 1.0);
            let f = t.ln(e);
            let g = t.recip(e);
            let h = t.add(d, f);
            let k = t.sub(h, g);
            let m = t.scale(k, -0.7);
            let s = t.clamp_min(m, -0.5);
            t.sum(s)
        });
    }

    #[test]
    fn reductions_and_broadcasts() {
        check(sample(), &|t, x| {
            let r = t.row_sum(x);
            let rb = t.broadcast_cols(r, 2);
            let p = t.mul(rb, x);
            let c = t.col_sum(p);
            let sq = t.mul(c, c);
            t.sum(sq)
        });
    }

    #[test]
    fn matmul_and_bias() {
        let w = Matrix::new(2, 3, vec![0.5, -0.2, 0.1, 0.3, 0.9, -0.4]);
        let bias = Matrix::new(1, 3, vec![0.1, 0.0, -0.1]);
        check(sample(), &|t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(bias.clone());
            let y = t.matmul(x, wv);
            let z = t.add_row(y, bv);
            let a = t.tanh(z);
            t.sum(a)
        });
        // gradient with respect to the weight itself
        let x = sample();
        check(w.clone(), &|t, wv| {
            let xv = t.leaf(x.clone());
            let y = t.matmul(xv, wv);
            let a = t.tanh(y);
            t.sum(a)
        });
    }

    #[test]
    fn select_rows_routes_gradients() {
        let other = Matrix::new(3, 2, vec![1.0; 6]);
        let keep: Rc<[bool]> = Rc::from(vec![true, false, true]);
        let mut t = Tape::new();
        let a = t.leaf(sample());
        let b = t.leaf(other);
        let s = t.select_rows(a, b, keep);
        let o = t.sum(s);
        let g = t.backward(o);
        assert_eq!(g.get(a).data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.get(b).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::scalar(2.0));
        let b = t.leaf(Matrix::scalar(3.0));
        let c = t.mul(a, a);
        let g = t.backward(c);
        assert_eq!(g.get(a).item(), 4.0);
        assert_eq!(g.get(b).item(), 0.0);
    }
}

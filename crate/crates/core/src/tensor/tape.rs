//! Dynamically recorded reverse-mode tape over 2-D values.

use super::{kernels, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Broadcast a `1×n` row over every row of `x`.
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    L2Norm {
        x: Var,
        norms: Vec<F>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    RelShift(Var),
    RelUnshift(Var),
    ConcatCols(Vec<Var>),
    Nll {
        x: Var,
        targets: Vec<(usize, usize)>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F: Scalar> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    needs_grad: bool,
    op: Op<F>,
}

/// A single forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Tape<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
}

/// Gradients of one scalar with respect to every recorded value that needed one.
#[derive(Debug)]
pub struct Grads<F: Scalar = f64> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>, parents: &[Var]) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Tensors of rank 1 are stored as a single row.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let (rows, cols) = t.dims2();
        self.leaf_raw(rows, cols, t.data().to_vec(), t.requires_grad())
    }

    pub fn leaf_raw(&mut self, rows: usize, cols: usize, value: Vec<F>, requires_grad: bool) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf data does not match {rows}x{cols}");
        self.nodes.push(Node {
            rows,
            cols,
            value,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("tape values are well formed")
    }

    /// The scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (n2, p) = self.dims(b);
        if n != n2 {
            return Err(shape_err("matmul", (m, n), (n2, p)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, n, p);
        Ok(self.push(m, p, out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`, the natural layout for applying `d_out×d_in` weights to row vectors.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (p, n2) = self.dims(b);
        if n != n2 {
            return Err(shape_err("matmul_nt", (m, n), (p, n2)));
        }
        let bt = kernels::transpose(self.value(b), p, n);
        let out = kernels::matmul(self.value(a), &bt, m, n, p);
        Ok(self.push(m, p, out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = kernels::transpose(self.value(a), m, n);
        self.push(n, m, out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("add", self.dims(a), self.dims(b)));
        }
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(m, n, out, Op::Add(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(row) != (1, n) {
            return Err(shape_err("add_row", (m, n), self.dims(row)));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        Ok(self.push(m, n, out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push(m, n, out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        self.push(m, n, out, Op::Relu(x), &[x])
    }

    /// Row softmax. With `causal`, entry `(r, c)` for `c > r` is exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims(x);
        if causal && m != n {
            return Err(shape_err("softmax(causal)", (m, n), (m, m)));
        }
        let out = kernels::softmax_rows(self.value(x), m, n, causal)?;
        Ok(self.push(m, n, out, Op::Softmax(x), &[x]))
    }

    /// Per-row standardization followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return Err(shape_err("layernorm", (m, n), self.dims(gain)));
        }
        let (xhat, inv_std) = kernels::standardize_rows(self.value(x), m, n, eps)?;
        let g = self.value(gain);
        let b = self.value(bias);
        let out = xhat
            .chunks(n)
            .flat_map(|r| r.iter().zip(g).zip(b).map(|((&v, &g), &b)| v * g + b))
            .collect();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(m, n, out, op, &[x, gain, bias]))
    }

    /// Scale every row to unit Euclidean norm.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (out, norms) = kernels::l2_rows(self.value(x), m, n)?;
        Ok(self.push(m, n, out, Op::L2Norm { x, norms }, &[x]))
    }

    /// Rows `idx[0], idx[1], …` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row index {bad} out of range for {rows} rows")));
        }
        let t = self.value(table);
        let out = idx
            .iter()
            .flat_map(|&i| t[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        Ok(self.push(
            idx.len(),
            cols,
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(Error::Capacity(format!("rows {start}..{} of a {m}-row value", start + len)));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(len, n, out, Op::SliceRows { x, start }, &[x]))
    }

    /// `T×W → T×T` with `out[n][i] = m[n][n−i]` for `i ≤ n` and zero above the
    /// diagonal. Turns per-offset scores into per-position scores.
    pub fn rel_shift(&mut self, m: Var) -> Result<Var> {
        let (t, w) = self.dims(m);
        if w < t {
            return Err(shape_err("rel_shift", (t, w), (t, t)));
        }
        let src = self.value(m);
        let mut out = vec![F::zero(); t * t];
        for n in 0..t {
            for i in 0..=n {
                out[n * t + i] = src[n * w + (n - i)];
            }
        }
        Ok(self.push(t, t, out, Op::RelShift(m), &[m]))
    }

    /// `T×T → T×T` with `out[n][o] = a[n][n−o]` for `o ≤ n`. Regroups
    /// attention weights by offset.
    pub fn rel_unshift(&mut self, a: Var) -> Result<Var> {
        let (t, t2) = self.dims(a);
        if t != t2 {
            return Err(shape_err("rel_unshift", (t, t2), (t, t)));
        }
        let src = self.value(a);
        let mut out = vec![F::zero(); t * t];
        for n in 0..t {
            for o in 0..=n {
                out[n * t + o] = src[n * t + (n - o)];
            }
        }
        Ok(self.push(t, t, out, Op::RelUnshift(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat_cols of nothing".into()));
        };
        let m = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(shape_err("concat_cols", self.dims(first), self.dims(p)));
            }
            total += self.dims(p).1;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(m, total, out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean of `−ln x[r][c]` over `targets`.
    pub fn nll(&mut self, x: Var, targets: &[(usize, usize)]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Input("nll over no targets".into()));
        }
        let (m, n) = self.dims(x);
        let v = self.value(x);
        let mut total = F::zero();
        for &(r, c) in targets {
            if r >= m || c >= n {
                return Err(Error::Input(format!("target ({r}, {c}) outside {m}x{n}")));
            }
            let p = v[r * n + c];
            if !(p > F::zero()) {
                return Err(Error::InfiniteLoss { position: r });
            }
            total -= p.ln();
        }
        let mean = total / F::of(targets.len() as f64);
        Ok(self.push(
            1,
            1,
            vec![mean],
            Op::Nll {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(x), &[x])
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.dims(loss) != (1, 1) {
            return Err(shape_err("backward", self.dims(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (m, n) = (node.rows, node.cols);
        let zero = F::zero();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                if self.wants(*a) {
                    let bt = kernels::transpose(self.value(*b), k, n);
                    kernels::matmul_acc(g, &bt, m, n, k, slot(grads, self, *a));
                }
                if self.wants(*b) {
                    kernels::matmul_tn_acc(self.value(*a), g, k, m, n, slot(grads, self, *b));
                }
            }
            Op::MatMulNT(a, b) => {
                let (_, k) = self.dims(*a);
                if self.wants(*a) {
                    kernels::matmul_acc(g, self.value(*b), m, n, k, slot(grads, self, *a));
                }
                if self.wants(*b) {
                    kernels::matmul_tn_acc(g, self.value(*a), n, m, k, slot(grads, self, *b));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let gt = kernels::transpose(g, m, n);
                    add_into(slot(grads, self, *a), &gt);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot(grads, self, v), g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    add_into(slot(grads, self, *x), g);
                }
                if self.wants(*row) {
                    let dst = slot(grads, self, *row);
                    for gr in g.chunks(n) {
                        add_into(dst, gr);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    for (d, &gv) in slot(grads, self, *x).iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    for ((d, &gv), &v) in slot(grads, self, *x).iter_mut().zip(g).zip(xv) {
                        if v > zero {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let dst = slot(grads, self, *x);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dst[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.wants(*gain) {
                    let dst = slot(grads, self, *gain);
                    for (xr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for ((d, &xv), &gv) in dst.iter_mut().zip(xr).zip(gr) {
                            *d += xv * gv;
                        }
                    }
                }
                if self.wants(*bias) {
                    let dst = slot(grads, self, *bias);
                    for gr in g.chunks(n) {
                        add_into(dst, gr);
                    }
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain);
                    let nf = F::of(n as f64);
                    let dst = slot(grads, self, *x);
                    let mut dxhat = vec![zero; n];
                    for r in 0..m {
                        let xr = &xhat[r * n..(r + 1) * n];
                        for ((d, &gv), &w) in dxhat.iter_mut().zip(&g[r * n..(r + 1) * n]).zip(gain_v) {
                            *d = gv * w;
                        }
                        let s1: F = dxhat.iter().copied().sum();
                        let s2: F = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let c = inv_std[r] / nf;
                        for ((d, &dh), &xv) in dst[r * n..(r + 1) * n].iter_mut().zip(&dxhat).zip(xr) {
                            *d += c * (nf * dh - s1 - xv * s2);
                        }
                    }
                }
            }
            Op::L2Norm { x, norms } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let dst = slot(grads, self, *x);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let inv = F::one() / norms[r];
                        for ((d, &yv), &gv) in dst[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                            *d += (gv - yv * dot) * inv;
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                if self.wants(*table) {
                    let dst = slot(grads, self, *table);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dst[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    add_into(&mut slot(grads, self, *x)[start * n..(start + m) * n], g);
                }
            }
            Op::RelShift(src) => {
                if self.wants(*src) {
                    let w = self.dims(*src).1;
                    let dst = slot(grads, self, *src);
                    for r in 0..m {
                        for i in 0..=r {
                            dst[r * w + (r - i)] += g[r * n + i];
                        }
                    }
                }
            }
            Op::RelUnshift(src) => {
                if self.wants(*src) {
                    let dst = slot(grads, self, *src);
                    for r in 0..m {
                        for o in 0..=r {
                            dst[r * n + (r - o)] += g[r * n + o];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if self.wants(p) {
                        let dst = slot(grads, self, p);
                        for r in 0..m {
                            add_into(&mut dst[r * c..(r + 1) * c], &g[r * n + offset..r * n + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::Nll { x, targets } => {
                if self.wants(*x) {
                    let cols = self.dims(*x).1;
                    let xv = self.value(*x);
                    let scale = g[0] / F::of(targets.len() as f64);
                    let dst = slot(grads, self, *x);
                    for &(r, c) in targets {
                        dst[r * cols + c] -= scale / xv[r * cols + c];
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    for d in slot(grads, self, *x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn slot<'a, F: Scalar>(grads: &'a mut [Option<Vec<F>>], tape: &Tape<F>, v: Var) -> &'a mut [F] {
    let len = tape.nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

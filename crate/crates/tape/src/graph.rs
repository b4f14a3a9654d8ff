use std::cell::{Cell, Ref, RefCell};

use ndarray::{s, Array2, Axis, Zip};

use crate::Matrix;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MaskRows(Var, Matrix),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    ShiftRows(Var, isize),
    GradReverse(Var, f64),
    CosineDistance {
        a: Var,
        b: Var,
        eps: f64,
    },
    SoftmaxXent {
        logits: Var,
        probs: Matrix,
        targets: Vec<usize>,
    },
    GruCell(Box<GruTrace>),
}

struct GruTrace {
    xg: Var,
    h: Var,
    u: Var,
    bh: Var,
    mask: Matrix,
    z: Matrix,
    r: Matrix,
    n: Matrix,
    hn: Matrix,
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            MaskRows(a, _) | Scale(a, _) | Tanh(a) | Sigmoid(a) | Relu(a) | Exp(a) | Ln(a)
            | Abs(a) | Square(a) | Sum(a) | SumCols(a) | SliceRows(a, _) | SliceCols(a, _)
            | Gather(a, _) | ShiftRows(a, _) | GradReverse(a, _) => vec![*a],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            CosineDistance { a, b, .. } => vec![*a, *b],
            SoftmaxXent { logits, .. } => vec![*logits],
            GruCell(t) => vec![t.xg, t.h, t.u, t.bh],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Methods take `&self` so calls can be nested; nodes live until the graph
/// is dropped.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    degenerate_norms: Cell<usize>,
}

/// Sensitivities of a scalar root with respect to the nodes of a graph.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path from `v` reaches the root or
    /// `v` does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn grad_slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Array2::zeros(shape))
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
    match &mut grads[v.0] {
        Some(g) => *g += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of cosine distances computed with a norm below the guard epsilon.
    pub fn degenerate_norms(&self) -> usize {
        self.degenerate_norms.get()
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|p| nodes[p.0].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Matrix, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Input whose gradient is tracked.
    pub fn variable(&self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar_constant(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Copy of `v`'s value as a new constant, cutting gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch");
            va.dot(&*vb)
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
            &*va + &*vb
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "sub shape mismatch");
            &*va - &*vb
        };
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "mul shape mismatch");
            &*va * &*vb
        };
        self.push(value, Op::Mul(a, b))
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (va, vr) = (self.value(a), self.value(row));
            assert_eq!(vr.dim(), (1, va.ncols()), "add_row shape mismatch");
            &*va + &*vr
        };
        self.push(value, Op::AddRow(a, row))
    }

    /// `a (m x n) * col (m x 1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let value = {
            let (va, vc) = (self.value(a), self.value(col));
            assert_eq!(vc.dim(), (va.nrows(), 1), "mul_col shape mismatch");
            &*va * &*vc
        };
        self.push(value, Op::MulCol(a, col))
    }

    /// Multiplies each row by a fixed weight (typically a 0/1 validity mask).
    pub fn mask_rows(&self, a: Var, mask: &Matrix) -> Var {
        let value = {
            let va = self.value(a);
            assert_eq!(mask.dim(), (va.nrows(), 1), "mask_rows shape mismatch");
            &*va * mask
        };
        self.push(value, Op::MaskRows(a, mask.clone()))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `max(0, x)` elementwise. The subgradient at exactly zero is taken as 0.
    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    /// Per-row sums as an `m x 1` column.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = values.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = values.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch")
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    /// Row gather: output row `i` copies row `index[i]` of `a`, or is zero
    /// when the index is `None`. Embedding lookup and length regulation are
    /// both expressed with this.
    pub fn gather_rows(&self, a: Var, index: Vec<Option<usize>>) -> Var {
        let value = {
            let va = self.value(a);
            let mut out = Array2::zeros((index.len(), va.ncols()));
            for (i, src) in index.iter().enumerate() {
                if let Some(src) = *src {
                    out.row_mut(i).assign(&va.row(src));
                }
            }
            out
        };
        self.push(value, Op::Gather(a, index))
    }

    /// Output row `r` is input row `r - offset`, zero-filled outside the
    /// input. With time-major layout an offset of `B` delays by one step.
    pub fn shift_rows(&self, a: Var, offset: isize) -> Var {
        let value = {
            let va = self.value(a);
            let rows = va.nrows() as isize;
            let mut out = Array2::zeros(va.dim());
            for r in 0..rows {
                let src = r - offset;
                if (0..rows).contains(&src) {
                    out.row_mut(r as usize).assign(&va.row(src as usize));
                }
            }
            out
        };
        self.push(value, Op::ShiftRows(a, offset))
    }

    /// Identity in the forward pass; the backward pass multiplies the
    /// incoming sensitivity by `-gain`.
    pub fn grad_reverse(&self, a: Var, gain: f64) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::GradReverse(a, gain))
    }

    /// Row-wise cosine distance `1 - a.b / (|a| |b|)` as an `m x 1` column.
    /// Norms below `eps` are replaced by `eps` and counted as degenerate.
    pub fn cosine_distance(&self, a: Var, b: Var, eps: f64) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "cosine_distance shape mismatch");
            let mut out = Array2::zeros((va.nrows(), 1));
            let mut degenerate = 0;
            for (i, (ra, rb)) in va.rows().into_iter().zip(vb.rows()).enumerate() {
                let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
                degenerate += usize::from(na < eps) + usize::from(nb < eps);
                out[[i, 0]] = 1.0 - ra.dot(&rb) / (na.max(eps) * nb.max(eps));
            }
            self.degenerate_norms
                .set(self.degenerate_norms.get() + degenerate);
            out
        };
        self.push(value, Op::CosineDistance { a, b, eps })
    }

    /// Per-row softmax cross-entropy against class `targets[i]`, as an
    /// `m x 1` column of losses.
    pub fn softmax_xent(&self, logits: Var, targets: Vec<usize>) -> Var {
        let (value, probs) = {
            let vl = self.value(logits);
            assert_eq!(vl.nrows(), targets.len(), "softmax_xent target count");
            let mut probs = vl.clone();
            let mut out = Array2::zeros((vl.nrows(), 1));
            for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - max).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
                out[[i, 0]] = -(vl[[i, targets[i]]] - max - z.ln());
            }
            (out, probs)
        };
        self.push(
            value,
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
            },
        )
    }

    /// One masked GRU step.
    ///
    /// `xg` is the input projection `x W + b` for this step (`B x 3H`, gate
    /// order update/reset/candidate), `h` the previous state, `u` the
    /// recurrent weights (`H x 3H`) and `bh` their bias. Rows whose mask is
    /// zero keep their previous state.
    pub fn gru_cell(&self, xg: Var, h: Var, u: Var, bh: Var, mask: &Matrix) -> Var {
        let (value, trace) = {
            let (vx, vh, vu, vb) = (self.value(xg), self.value(h), self.value(u), self.value(bh));
            let hidden = vh.ncols();
            assert_eq!(vx.dim(), (vh.nrows(), 3 * hidden), "gru_cell input shape");
            assert_eq!(vu.dim(), (hidden, 3 * hidden), "gru_cell recurrent shape");
            assert_eq!(mask.dim(), (vh.nrows(), 1), "gru_cell mask shape");
            let hu = vh.dot(&*vu) + &*vb;
            let z = (&vx.slice(s![.., ..hidden]) + &hu.slice(s![.., ..hidden])).mapv(sigmoid);
            let r = (&vx.slice(s![.., hidden..2 * hidden]) + &hu.slice(s![.., hidden..2 * hidden]))
                .mapv(sigmoid);
            let hn = hu.slice(s![.., 2 * hidden..]).to_owned();
            let n = (&vx.slice(s![.., 2 * hidden..]) + &(&r * &hn)).mapv(f64::tanh);
            let mut out = vh.clone();
            Zip::from(&mut out)
                .and(&z)
                .and(&n)
                .and_broadcast(mask)
                .for_each(|o, &z, &n, &m| {
                    let fresh = n + z * (*o - n);
                    *o += m * (fresh - *o);
                });
            (
                out,
                GruTrace {
                    xg,
                    h,
                    u,
                    bh,
                    mask: mask.clone(),
                    z,
                    r,
                    n,
                    hn,
                },
            )
        };
        self.push(value, Op::GruCell(Box::new(trace)))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.dim(), (1, 1), "backward root must be 1 x 1");
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        if !nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            Self::backward_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(nodes: &[Node], node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if wants(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if wants(*a) {
                    accumulate(grads, *a, g * val(*col));
                }
                if wants(*col) {
                    let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(grads, *col, gc);
                }
            }
            Op::MaskRows(a, mask) => accumulate(grads, *a, g * mask),
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Tanh(a) => accumulate(grads, *a, g * &y.mapv(|t| 1.0 - t * t)),
            Op::Sigmoid(a) => accumulate(grads, *a, g * &y.mapv(|s| s * (1.0 - s))),
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(grads, *a, g * &x.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Exp(a) => accumulate(grads, *a, g * y),
            Op::Ln(a) => accumulate(grads, *a, g / val(*a)),
            Op::Abs(a) => accumulate(grads, *a, g * &val(*a).mapv(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })),
            Op::Square(a) => accumulate(grads, *a, g * &val(*a).mapv(|x| 2.0 * x)),
            Op::Sum(a) => {
                let shape = val(*a).dim();
                accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::SumCols(a) => {
                let shape = val(*a).dim();
                let slot = grad_slot(grads, *a, shape);
                *slot += g;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = val(p).ncols();
                    if wants(p) {
                        let shape = val(p).dim();
                        let slot = grad_slot(grads, p, shape);
                        *slot += &g.slice(s![.., offset..offset + width]);
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let height = val(p).nrows();
                    if wants(p) {
                        let shape = val(p).dim();
                        let slot = grad_slot(grads, p, shape);
                        *slot += &g.slice(s![offset..offset + height, ..]);
                    }
                    offset += height;
                }
            }
            Op::SliceRows(a, start) => {
                let shape = val(*a).dim();
                let slot = grad_slot(grads, *a, shape);
                let mut dst = slot.slice_mut(s![*start..*start + g.nrows(), ..]);
                dst += g;
            }
            Op::SliceCols(a, start) => {
                let shape = val(*a).dim();
                let slot = grad_slot(grads, *a, shape);
                let mut dst = slot.slice_mut(s![.., *start..*start + g.ncols()]);
                dst += g;
            }
            Op::Gather(a, index) => {
                let shape = val(*a).dim();
                let slot = grad_slot(grads, *a, shape);
                for (i, src) in index.iter().enumerate() {
                    if let Some(src) = *src {
                        let mut dst = slot.row_mut(src);
                        dst += &g.row(i);
                    }
                }
            }
            Op::ShiftRows(a, offset) => {
                let shape = val(*a).dim();
                let rows = shape.0 as isize;
                let slot = grad_slot(grads, *a, shape);
                for r in 0..rows {
                    let src = r - offset;
                    if (0..rows).contains(&src) {
                        let mut dst = slot.row_mut(src as usize);
                        dst += &g.row(r as usize);
                    }
                }
            }
            Op::GradReverse(a, gain) => accumulate(grads, *a, g * -*gain),
            Op::CosineDistance { a, b, eps } => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Array2::zeros(va.dim());
                let mut gb = Array2::zeros(vb.dim());
                for i in 0..va.nrows() {
                    let (ra, rb) = (va.row(i), vb.row(i));
                    let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
                    let (ea, eb) = (na.max(*eps), nb.max(*eps));
                    let cos = ra.dot(&rb) / (ea * eb);
                    let gi = g[[i, 0]];
                    // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2), the
                    // second term vanishing where the norm is clamped.
                    let ka = if na >= *eps { cos / (ea * ea) } else { 0.0 };
                    let kb = if nb >= *eps { cos / (eb * eb) } else { 0.0 };
                    let inv = 1.0 / (ea * eb);
                    for j in 0..va.ncols() {
                        ga[[i, j]] = -gi * (rb[j] * inv - ka * ra[j]);
                        gb[[i, j]] = -gi * (ra[j] * inv - kb * rb[j]);
                    }
                }
                if wants(*a) {
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
            } => {
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[[i, t]] -= 1.0;
                    let gi = g[[i, 0]];
                    gl.row_mut(i).mapv_inplace(|x| x * gi);
                }
                accumulate(grads, *logits, gl);
            }
            Op::GruCell(t) => Self::backward_gru(nodes, t, g, grads),
        }
    }

    fn backward_gru(nodes: &[Node], t: &GruTrace, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let wants = |v: Var| nodes[v.0].requires_grad;
        let h = &nodes[t.h.0].value;
        let u = &nodes[t.u.0].value;
        let (rows, hidden) = h.dim();
        // gate pre-activation sensitivities: [update, reset, candidate]
        let mut gx = Array2::zeros((rows, 3 * hidden));
        let mut ghu = Array2::zeros((rows, 3 * hidden));
        let mut gh = Array2::zeros((rows, hidden));
        for i in 0..rows {
            let m = t.mask[[i, 0]];
            for j in 0..hidden {
                let gi = g[[i, j]];
                let (z, r, n, hn, hp) = (t.z[[i, j]], t.r[[i, j]], t.n[[i, j]], t.hn[[i, j]], h[[i, j]]);
                let g_fresh = m * gi;
                gh[[i, j]] = (1.0 - m) * gi + g_fresh * z;
                let a_z = g_fresh * (hp - n) * z * (1.0 - z);
                let a_n = g_fresh * (1.0 - z) * (1.0 - n * n);
                let a_r = a_n * hn * r * (1.0 - r);
                gx[[i, j]] = a_z;
                gx[[i, hidden + j]] = a_r;
                gx[[i, 2 * hidden + j]] = a_n;
                ghu[[i, j]] = a_z;
                ghu[[i, hidden + j]] = a_r;
                ghu[[i, 2 * hidden + j]] = a_n * r;
            }
        }
        if wants(t.h) {
            gh += &ghu.dot(&u.t());
            accumulate(grads, t.h, gh);
        }
        if wants(t.u) {
            accumulate(grads, t.u, h.t().dot(&ghu));
        }
        if wants(t.bh) {
            accumulate(grads, t.bh, ghu.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        if wants(t.xg) {
            accumulate(grads, t.xg, gx);
        }
    }
}

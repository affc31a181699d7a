//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every quantity is a 2-d matrix; scalars are `1×1`, column vectors `n×1`.
//! Operations are recorded on a [`Tape`] as they are evaluated and
//! [`Tape::backward`] walks the record in reverse, accumulating adjoints.
//!
//! Element-wise binary operators broadcast a `1×1`, `1×c` or `r×1` operand
//! against an `r×c` one. Shape mismatches inside the tape are programming
//! errors and panic; user-facing entry points validate shapes beforehand.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use nalgebra::DMatrix;

use super::linalg;
use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    /// Element-wise map; `partials[k]` is d out / d inputs[k], same shape as the output.
    Map(Vec<usize>, Vec<Mat>),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    Diag(usize),
    GatherRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    TileCols(usize, usize),
    SumColGroups(usize, usize),
    HStack(Vec<usize>),
    VStack(Vec<usize>),
    SqDist(usize, usize),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.nrows(), v.ncols())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Mat {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let val = v.value();
                Mat::zeros(val.nrows(), val.ncols())
            }
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize), op: &str) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            panic!("{op}: cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn zip_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64, op: &str) -> Mat {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape(), op);
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Mat::from_fn(r, c, |i, j| {
        let x = a[(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j })];
        let y = b[(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j })];
        f(x, y)
    })
}

/// Sums `g` down to `rows×cols` (the inverse of broadcasting).
fn reduce_to(g: Mat, rows: usize, cols: usize) -> Mat {
    if g.nrows() == rows && g.ncols() == cols {
        return g;
    }
    let g = if rows == 1 && g.nrows() != 1 {
        row_sum(&g)
    } else {
        g
    };
    if cols == 1 && g.ncols() != 1 {
        col_sum(&g)
    } else {
        g
    }
}

fn row_sum(m: &Mat) -> Mat {
    Mat::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

fn col_sum(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.nrows(), 1);
    for j in 0..m.ncols() {
        let mut o = out.column_mut(0);
        o += m.column(j);
    }
    out
}

fn lower_tri(mut m: Mat) -> Mat {
    let n = m.nrows();
    for j in 0..m.ncols() {
        for i in 0..j.min(n) {
            m[(i, j)] = 0.0;
        }
    }
    m
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> Rc<Mat> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, value))
    }

    fn unary(&self, a: Var<'_>, value: Mat, op: Op) -> Var<'_> {
        let rg = self.needs(&[a.id]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, value: Mat, op: Op) -> Var<'_> {
        let rg = self.needs(&[a.id, b.id]);
        self.push(value, op, rg)
    }

    /// Element-wise map over `N` equally shaped inputs. `f` returns the value and
    /// the partial derivatives with respect to each input.
    pub fn map_n<'t, const N: usize>(
        &'t self,
        inputs: [Var<'t>; N],
        f: impl Fn([f64; N]) -> (f64, [f64; N]),
    ) -> Var<'t> {
        let vals: Vec<Rc<Mat>> = inputs.iter().map(|v| self.val(v.id)).collect();
        let (r, c) = vals[0].shape();
        for v in &vals[1..] {
            assert_eq!(v.shape(), (r, c), "map_n: inputs must share a shape");
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.needs(&ids);
        let mut out = Mat::zeros(r, c);
        let mut partials: Vec<Mat> = if rg {
            (0..N).map(|_| Mat::zeros(r, c)).collect()
        } else {
            Vec::new()
        };
        let slices: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
        for k in 0..r * c {
            let mut x = [0.0; N];
            for (n, s) in slices.iter().enumerate() {
                x[n] = s[k];
            }
            let (y, d) = f(x);
            out.as_mut_slice()[k] = y;
            if rg {
                for n in 0..N {
                    partials[n].as_mut_slice()[k] = d[n];
                }
            }
        }
        self.push(out, Op::Map(ids, partials), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", lv.shape()),
            ));
        }
        if !lv[(0, 0)].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Mat::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<Mat>], nodes: &[Node], id: usize, g: Mat) {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let shape = |i: usize| nodes[i].value.shape();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    let (ar, ac) = shape(*a);
                    let (br, bc) = shape(*b);
                    acc(&mut grads, &nodes, *b, reduce_to(g.clone(), br, bc));
                    acc(&mut grads, &nodes, *a, reduce_to(g, ar, ac));
                }
                Op::Sub(a, b) => {
                    let (ar, ac) = shape(*a);
                    let (br, bc) = shape(*b);
                    acc(&mut grads, &nodes, *b, -reduce_to(g.clone(), br, bc));
                    acc(&mut grads, &nodes, *a, reduce_to(g, ar, ac));
                }
                Op::Mul(a, b) => {
                    let (ar, ac) = shape(*a);
                    let (br, bc) = shape(*b);
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        let ga = zip_broadcast(&g, vb, |x, y| x * y, "mul-back");
                        acc(&mut grads, &nodes, *a, reduce_to(ga, ar, ac));
                    }
                    if nodes[*b].requires_grad {
                        let gb = zip_broadcast(&g, va, |x, y| x * y, "mul-back");
                        acc(&mut grads, &nodes, *b, reduce_to(gb, br, bc));
                    }
                }
                Op::Div(a, b) => {
                    let (ar, ac) = shape(*a);
                    let (br, bc) = shape(*b);
                    let vb = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        let ga = zip_broadcast(&g, vb, |x, y| x / y, "div-back");
                        acc(&mut grads, &nodes, *a, reduce_to(ga, ar, ac));
                    }
                    if nodes[*b].requires_grad {
                        let q = g.component_mul(&node.value);
                        let gb = zip_broadcast(&q, vb, |x, y| -x / y, "div-back");
                        acc(&mut grads, &nodes, *b, reduce_to(gb, br, bc));
                    }
                }
                Op::Neg(a) => acc(&mut grads, &nodes, *a, -g),
                Op::Scale(a, c) => acc(&mut grads, &nodes, *a, g * *c),
                Op::Map(ids, partials) => {
                    for (i, p) in ids.iter().zip(partials) {
                        if nodes[*i].requires_grad {
                            acc(&mut grads, &nodes, *i, g.component_mul(p));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        let ga = &g * nodes[*b].value.transpose();
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let gb = nodes[*a].value.tr_mul(&g);
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = shape(*a);
                    acc(&mut grads, &nodes, *a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::SumRows(a) => {
                    let (r, c) = shape(*a);
                    acc(&mut grads, &nodes, *a, Mat::from_fn(r, c, |_, j| g[(0, j)]));
                }
                Op::SumCols(a) => {
                    let (r, c) = shape(*a);
                    acc(&mut grads, &nodes, *a, Mat::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::Cholesky(a) => {
                    let l = &node.value;
                    let mut p = lower_tri(l.tr_mul(&g));
                    for i in 0..p.nrows() {
                        p[(i, i)] *= 0.5;
                    }
                    // S = L^-T P L^-1
                    let t = linalg::solve_lower_t(l, &p);
                    let s = linalg::solve_lower_t(l, &t.transpose()).transpose();
                    let sym = (&s + s.transpose()) * 0.5;
                    acc(&mut grads, &nodes, *a, sym);
                }
                Op::SolveLower(l, b) => {
                    let lv = &nodes[*l].value;
                    let gb = linalg::solve_lower_t(lv, &g);
                    if nodes[*l].requires_grad {
                        let gl = lower_tri(-(&gb * node.value.transpose()));
                        acc(&mut grads, &nodes, *l, gl);
                    }
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::SolveLowerT(l, b) => {
                    let lv = &nodes[*l].value;
                    let gb = linalg::solve_lower(lv, &g);
                    if nodes[*l].requires_grad {
                        let gl = lower_tri(-(&*node.value * gb.transpose()));
                        acc(&mut grads, &nodes, *l, gl);
                    }
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::Diag(a) => {
                    let (r, c) = shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r.min(c) {
                        ga[(i, i)] = g[(i, 0)];
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[(i, j)] += g[(k, j)];
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let (r, c) = shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    for (k, &j) in idx.iter().enumerate() {
                        let mut dst = ga.column_mut(j);
                        dst += g.column(k);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::TileCols(a, reps) => {
                    let (r, c) = shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    for rep in 0..*reps {
                        ga += g.columns(rep * c, c);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SumColGroups(a, size) => {
                    let (r, c) = shape(*a);
                    let ga = Mat::from_fn(r, c, |i, j| g[(i, j / size)]);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::HStack(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let c = nodes[i].value.ncols();
                        acc(&mut grads, &nodes, i, g.columns(off, c).into_owned());
                        off += c;
                    }
                }
                Op::VStack(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let r = nodes[i].value.nrows();
                        acc(&mut grads, &nodes, i, g.rows(off, r).into_owned());
                        off += r;
                    }
                }
                Op::SqDist(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        let rs = g.column_sum();
                        let mut ga = -(&g * &**vb);
                        for i in 0..va.nrows() {
                            for d in 0..va.ncols() {
                                ga[(i, d)] += rs[i] * va[(i, d)];
                            }
                        }
                        acc(&mut grads, &nodes, *a, ga * 2.0);
                    }
                    if nodes[*b].requires_grad {
                        let cs = g.row_sum();
                        let mut gb = -g.tr_mul(va);
                        for j in 0..vb.nrows() {
                            for d in 0..vb.ncols() {
                                gb[(j, d)] += cs[j] * vb[(j, d)];
                            }
                        }
                        acc(&mut grads, &nodes, *b, gb * 2.0);
                    }
                }
            }
        }

        for (id, g) in grads.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&nodes[id].op, g) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of leaf #{id}")));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn nrows(&self) -> usize {
        self.shape().0
    }

    pub fn ncols(&self) -> usize {
        self.shape().1
    }

    /// Value of a `1×1` variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    pub fn map(self, f: impl Fn(f64) -> (f64, f64)) -> Var<'t> {
        self.tape.map_n([self], |[x]| {
            let (y, d) = f(x);
            (y, [d])
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.map(|x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(self) -> Var<'t> {
        self.map(|x| (x.ln(), 1.0 / x))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map(|x| {
            let s = x.sqrt();
            (s, if s > 0.0 { 0.5 / s } else { 0.0 })
        })
    }

    pub fn square(self) -> Var<'t> {
        self.map(|x| (x * x, 2.0 * x))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(|x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(|x| {
            let s = 1.0 / (1.0 + (-x).exp());
            (s, s * (1.0 - s))
        })
    }

    /// `max(x, lo)` with zero gradient on the clamped side.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.map(|x| if x > lo { (x, 1.0) } else { (lo, 0.0) })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.tape.unary(self, v, Op::Scale(self.id, c))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let v = &*a * &*b;
        self.tape.binary(self, rhs, v, Op::MatMul(self.id, rhs.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.unary(self, v, Op::Transpose(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Mat::from_element(1, 1, self.value().sum());
        self.tape.unary(self, v, Op::Sum(self.id))
    }

    /// Sums over rows, giving a `1×c` row.
    pub fn sum_rows(self) -> Var<'t> {
        let v = row_sum(&self.value());
        self.tape.unary(self, v, Op::SumRows(self.id))
    }

    /// Sums over columns, giving an `r×1` column.
    pub fn sum_cols(self) -> Var<'t> {
        let v = col_sum(&self.value());
        self.tape.unary(self, v, Op::SumCols(self.id))
    }

    /// Lower Cholesky factor of a symmetric matrix after adding `jitter·I`.
    ///
    /// The jitter is treated as a constant; the gradient is that of the
    /// factor of `A + jitter·I` with respect to a symmetric `A`.
    pub fn cholesky_with_jitter(self, jitter: f64) -> Result<Var<'t>> {
        let mut a = (*self.value()).clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        let l = linalg::cholesky(&a).ok_or(Error::NotPositiveDefinite { max_jitter: jitter })?;
        Ok(self.tape.unary(self, l, Op::Cholesky(self.id)))
    }

    /// `L⁻¹ B` for lower-triangular `self = L`.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let x = linalg::solve_lower(&self.value(), &b.value());
        self.tape.binary(self, b, x, Op::SolveLower(self.id, b.id))
    }

    /// `L⁻ᵀ B` for lower-triangular `self = L`.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        let x = linalg::solve_lower_t(&self.value(), &b.value());
        self.tape.binary(self, b, x, Op::SolveLowerT(self.id, b.id))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(self) -> Var<'t> {
        let a = self.value();
        let n = a.nrows().min(a.ncols());
        let v = Mat::from_fn(n, 1, |i, _| a[(i, i)]);
        self.tape.unary(self, v, Op::Diag(self.id))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let a = self.value();
        let c = a.ncols();
        let v = Mat::from_fn(idx.len(), c, |k, j| a[(idx[k], j)]);
        self.tape
            .unary(self, v, Op::GatherRows(self.id, idx.to_vec()))
    }

    pub fn gather_cols(self, idx: &[usize]) -> Var<'t> {
        let a = self.value();
        let mut v = Mat::zeros(a.nrows(), idx.len());
        for (k, &j) in idx.iter().enumerate() {
            v.set_column(k, &a.column(j));
        }
        self.tape
            .unary(self, v, Op::GatherCols(self.id, idx.to_vec()))
    }

    /// Repeats the whole column block `reps` times: `[A | A | ... ]`.
    pub fn tile_cols(self, reps: usize) -> Var<'t> {
        let a = self.value();
        let c = a.ncols();
        let v = Mat::from_fn(a.nrows(), c * reps, |i, j| a[(i, j % c)]);
        self.tape.unary(self, v, Op::TileCols(self.id, reps))
    }

    /// Sums consecutive groups of `size` columns.
    pub fn sum_col_groups(self, size: usize) -> Var<'t> {
        let a = self.value();
        assert!(size > 0 && a.ncols() % size == 0, "sum_col_groups: bad group size");
        let k = a.ncols() / size;
        let mut v = Mat::zeros(a.nrows(), k);
        for j in 0..a.ncols() {
            let mut dst = v.column_mut(j / size);
            dst += a.column(j);
        }
        self.tape.unary(self, v, Op::SumColGroups(self.id, size))
    }

    /// Matrix of squared Euclidean distances between the rows of `self` and `other`.
    pub fn sqdist(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ncols(), b.ncols(), "sqdist: column mismatch");
        let d = a.ncols();
        let mut v = Mat::zeros(a.nrows(), b.nrows());
        for j in 0..b.nrows() {
            for i in 0..a.nrows() {
                let mut s = 0.0;
                for k in 0..d {
                    let t = a[(i, k)] - b[(j, k)];
                    s += t * t;
                }
                v[(i, j)] = s;
            }
        }
        self.tape.binary(self, other, v, Op::SqDist(self.id, other.id))
    }
}

pub fn hstack<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "hstack of nothing");
    let tape = parts[0].tape;
    let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let r = vals[0].nrows();
    let c: usize = vals.iter().map(|v| v.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let mut off = 0;
    for v in &vals {
        assert_eq!(v.nrows(), r, "hstack: row mismatch");
        out.columns_mut(off, v.ncols()).copy_from(&**v);
        off += v.ncols();
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    tape.push(out, Op::HStack(ids), rg)
}

pub fn vstack<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "vstack of nothing");
    let tape = parts[0].tape;
    let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let c = vals[0].ncols();
    let r: usize = vals.iter().map(|v| v.nrows()).sum();
    let mut out = Mat::zeros(r, c);
    let mut off = 0;
    for v in &vals {
        assert_eq!(v.ncols(), c, "vstack: column mismatch");
        out.rows_mut(off, v.nrows()).copy_from(&**v);
        off += v.nrows();
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    tape.push(out, Op::VStack(ids), rg)
}

macro_rules! binop {
    ($tr:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> $tr for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let v = zip_broadcast(&self.value(), &rhs.value(), $f, stringify!($method));
                self.tape
                    .binary(self, rhs, v, Op::$variant(self.id, rhs.id))
            }
        }
        impl<'t> $tr<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.scalar(rhs);
                self.$method(c)
            }
        }
        impl<'t> $tr<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let c = rhs.tape.scalar(self);
                c.$method(rhs)
            }
        }
    };
}

binop!(Add, add, Add, |x, y| x + y);
binop!(Sub, sub, Sub, |x, y| x - y);
binop!(Mul, mul, Mul, |x, y| x * y);
binop!(Div, div, Div, |x, y| x / y);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = -(*self.value()).clone();
        self.tape.unary(self, v, Op::Neg(self.id))
    }
}

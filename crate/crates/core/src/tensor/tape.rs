//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; vectors are `1 × n` rows and scalars are
//! `1 × 1`. A [`Tape`] records operations as they execute and
//! [`Tape::backward`] walks them in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Matrix = Array2<f64>;

const LN_EPS: f64 = 1e-5;

/// Contiguous run of rows forming one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    LeakyRelu(usize, f64),
    Gelu(usize, Matrix),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    GroupMean(usize, Vec<Vec<usize>>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SumAll(usize),
    Pick(usize, Vec<(usize, usize)>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<Segment>,
        key_valid: Vec<bool>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    SegmentSoftmax(usize, Vec<usize>),
    RowNormalize {
        x: usize,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
    BceWithLogits {
        logits: usize,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
}

/// Operation recorder. Values live for as long as the tape does.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
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

/// Gradients indexed by tape node. Nodes the loss does not depend on have
/// no entry.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
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

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf (parameter or constant).
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.leaf(Matrix::from_elem((1, 1), x))
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates from a `1 × 1` output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Matrix::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            // Only leaves keep their gradient; interior ones are consumed.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| -> &Matrix { &nodes[i].value };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = g.dot(&val(*b).t());
                    let db = val(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let dr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, &g * val(*r));
                    acc(&mut grads, *r, dr);
                }
                Op::MulCol(a, c) => {
                    let dc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g * val(*c));
                    acc(&mut grads, *c, dc);
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g *= *s;
                    acc(&mut grads, *a, g);
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Exp(a) => {
                    let mut g = g;
                    g *= &*node.value;
                    acc(&mut grads, *a, g);
                }
                Op::Ln(a) => acc(&mut grads, *a, &g / val(*a)),
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d *= slope
                            }
                        });
                    acc(&mut grads, *a, d);
                }
                Op::Gelu(a, deriv) => {
                    let mut g = g;
                    g *= deriv;
                    acc(&mut grads, *a, g);
                }
                Op::GatherRows(a, idx) => {
                    let src = val(*a);
                    let mut d = Matrix::zeros(src.dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(i);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ScatterAddRows(a, idx) => {
                    let src = val(*a);
                    let mut d = Matrix::zeros(src.dim());
                    for (i, &r) in idx.iter().enumerate() {
                        d.row_mut(i).assign(&g.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::GroupMean(a, groups) => {
                    let src = val(*a);
                    let mut d = Matrix::zeros(src.dim());
                    for (k, group) in groups.iter().enumerate() {
                        let w = 1.0 / group.len() as f64;
                        for &r in group {
                            d.row_mut(r).scaled_add(w, &g.row(k));
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + n, ..]).to_owned());
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + n]).to_owned());
                        off += n;
                    }
                }
                Op::SumAll(a) => {
                    let d = Matrix::from_elem(val(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::Pick(a, coords) => {
                    let mut d = Matrix::zeros(val(*a).dim());
                    for (i, &(r, c)) in coords.iter().enumerate() {
                        d[[r, c]] += g[[0, i]];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gam = val(*gamma);
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * gam;
                    let n = xhat.ncols() as f64;
                    let mut dx = Matrix::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / n;
                        let mean_dhx = dh.dot(&xh) / n;
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = rstd[r] * (dh[c] - mean_dh - xh[c] * mean_dhx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    key_valid,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) =
                        attention_backward(&g, val(*q), val(*k), val(*v), segments, key_valid, *heads, probs);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::SegmentSoftmax(a, seg) => {
                    let p = &*node.value;
                    let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dots = Matrix::zeros((nseg, p.ncols()));
                    for (e, &sgi) in seg.iter().enumerate() {
                        for h in 0..p.ncols() {
                            dots[[sgi, h]] += g[[e, h]] * p[[e, h]];
                        }
                    }
                    let mut d = Matrix::zeros(p.dim());
                    for (e, &sgi) in seg.iter().enumerate() {
                        for h in 0..p.ncols() {
                            d[[e, h]] = p[[e, h]] * (g[[e, h]] - dots[[sgi, h]]);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &*node.value;
                    let mut d = Matrix::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yg = y.row(r).dot(&g.row(r));
                        for c in 0..y.ncols() {
                            d[[r, c]] = (g[[r, c]] - y[[r, c]] * yg) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len() as f64;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[[i, l]] -= 1.0;
                    }
                    d *= g[[0, 0]] / n;
                    acc(&mut grads, *logits, d);
                }
                Op::BceWithLogits { logits, labels } => {
                    let z = val(*logits);
                    let n = labels.len() as f64;
                    let mut d = Matrix::zeros(z.dim());
                    for (i, &y) in labels.iter().enumerate() {
                        d[[i, 0]] = (sigmoid(z[[i, 0]]) - y) * g[[0, 0]] / n;
                    }
                    acc(&mut grads, *logits, d);
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<Matrix>], id: usize, d: Matrix) {
    match &mut grads[id] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_with_grad(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    segments: &[Segment],
    key_valid: &[bool],
    heads: usize,
) -> (Matrix, Vec<Matrix>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.dim());
    let mut probs = Vec::with_capacity(segments.len() * heads);
    for seg in segments {
        let rows = seg.start..seg.start + seg.len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut sc = qh.dot(&kh.t()) * scale;
            for mut row in sc.rows_mut() {
                let mut max = f64::NEG_INFINITY;
                for (j, x) in row.iter().enumerate() {
                    if key_valid[seg.start + j] && *x > max {
                        max = *x;
                    }
                }
                let mut sum = 0.0;
                for (j, x) in row.iter_mut().enumerate() {
                    if key_valid[seg.start + j] {
                        *x = (*x - max).exp();
                        sum += *x;
                    } else {
                        *x = 0.0;
                    }
                }
                row /= sum;
            }
            out.slice_mut(s![rows.clone(), cols]).assign(&sc.dot(&vh));
            probs.push(sc);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    segments: &[Segment],
    _key_valid: &[bool],
    heads: usize,
    probs: &[Matrix],
) -> (Matrix, Matrix, Matrix) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(q.dim());
    let mut dk = Matrix::zeros(k.dim());
    let mut dv = Matrix::zeros(v.dim());
    let mut pi = 0;
    for seg in segments {
        let rows = seg.start..seg.start + seg.len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &probs[pi];
            pi += 1;
            let go = g.slice(s![rows.clone(), cols.clone()]);
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()])
                .assign(&p.t().dot(&go));
            let dp = go.dot(&vh.t());
            let mut ds = p * &dp;
            for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                let dot: f64 = p.row(r).dot(&dp.row(r));
                for (j, x) in row.iter_mut().enumerate() {
                    *x -= p[[r, j]] * dot;
                }
            }
            ds *= scale;
            dq.slice_mut(s![rows.clone(), cols.clone()])
                .assign(&ds.dot(&kh));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
        }
    }
    (dq, dk, dv)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Scalar value of a `1 × 1` var.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn unary(self, value: Matrix, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().dot(&*other.value());
        self.unary(v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.unary(v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.unary(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*other.value();
        self.unary(v, Op::Mul(self.id, other.id))
    }

    /// Adds a `1 × n` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let r = row.value();
        assert_eq!(r.nrows(), 1);
        let v = &*self.value() + &*r;
        self.unary(v, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a `1 × n` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let r = row.value();
        assert_eq!(r.nrows(), 1);
        let v = &*self.value() * &*r;
        self.unary(v, Op::MulRow(self.id, row.id))
    }

    /// Scales row `i` by entry `i` of an `n × 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let c = col.value();
        assert_eq!(c.ncols(), 1);
        let v = &*self.value() * &*c;
        self.unary(v, Op::MulCol(self.id, col.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = &*self.value() * s;
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = &*self.value() + s;
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn gelu(self) -> Var<'t> {
        let x = self.value();
        let mut v = Matrix::zeros(x.dim());
        let mut d = Matrix::zeros(x.dim());
        ndarray::Zip::from(&mut v).and(&mut d).and(&*x).for_each(|v, d, &x| {
            (*v, *d) = gelu_with_grad(x);
        });
        self.unary(v, Op::Gelu(self.id, d))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let src = self.value();
        let mut v = Matrix::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.unary(v, Op::GatherRows(self.id, idx.to_vec()))
    }

    /// Sums row `i` into output row `idx[i]` of an `n_out`-row result.
    pub fn scatter_add_rows(self, idx: &[usize], n_out: usize) -> Var<'t> {
        let src = self.value();
        assert_eq!(idx.len(), src.nrows());
        let mut v = Matrix::zeros((n_out, src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            let mut row = v.row_mut(r);
            row += &src.row(i);
        }
        self.unary(v, Op::ScatterAddRows(self.id, idx.to_vec()))
    }

    /// Row `k` of the result is the mean of the rows listed in `groups[k]`.
    pub fn group_mean(self, groups: &[Vec<usize>]) -> Var<'t> {
        let src = self.value();
        let mut v = Matrix::zeros((groups.len(), src.ncols()));
        for (k, group) in groups.iter().enumerate() {
            assert!(!group.is_empty(), "empty group in group_mean");
            let w = 1.0 / group.len() as f64;
            for &r in group {
                v.row_mut(k).scaled_add(w, &src.row(r));
            }
        }
        self.unary(v, Op::GroupMean(self.id, groups.to_vec()))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let vals: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = vals.iter().map(|m| m.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column mismatch in concat_rows");
        tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let vals: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = vals.iter().map(|m| m.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row mismatch in concat_cols");
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Matrix::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Selects individual entries into a `1 × n` row.
    pub fn pick(self, coords: &[(usize, usize)]) -> Var<'t> {
        let src = self.value();
        let mut v = Matrix::zeros((1, coords.len()));
        for (i, &(r, c)) in coords.iter().enumerate() {
            v[[0, i]] = src[[r, c]];
        }
        self.unary(v, Op::Pick(self.id, coords.to_vec()))
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
        let x = self.value();
        let n = x.ncols() as f64;
        let mut xhat = Matrix::zeros(x.dim());
        let mut rstd = Vec::with_capacity(x.nrows());
        for (r, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let out = &(&xhat * &*gamma.value()) + &*beta.value();
        self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention applied independently within
    /// each segment. Keys whose row is not `key_valid` receive zero weight.
    pub fn attention(
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        segments: &[Segment],
        key_valid: &[bool],
        heads: usize,
    ) -> Var<'t> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        assert_eq!(qv.ncols() % heads, 0, "width must divide into heads");
        let (out, probs) = attention_forward(&qv, &kv, &vv, segments, key_valid, heads);
        q.tape.push(
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                segments: segments.to_vec(),
                key_valid: key_valid.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Softmax over the rows that share a segment id, per column.
    pub fn segment_softmax(self, seg: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(seg.len(), x.nrows());
        let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = Matrix::from_elem((nseg, x.ncols()), f64::NEG_INFINITY);
        for (e, &s) in seg.iter().enumerate() {
            for h in 0..x.ncols() {
                max[[s, h]] = max[[s, h]].max(x[[e, h]]);
            }
        }
        let mut out = Matrix::zeros(x.dim());
        let mut sum = Matrix::zeros((nseg, x.ncols()));
        for (e, &s) in seg.iter().enumerate() {
            for h in 0..x.ncols() {
                let v = (x[[e, h]] - max[[s, h]]).exp();
                out[[e, h]] = v;
                sum[[s, h]] += v;
            }
        }
        for (e, &s) in seg.iter().enumerate() {
            for h in 0..x.ncols() {
                out[[e, h]] /= sum[[s, h]];
            }
        }
        self.unary(out, Op::SegmentSoftmax(self.id, seg.to_vec()))
    }

    /// Scales each row to unit L2 norm. Rows must be non-zero.
    pub fn row_normalize(self) -> Var<'t> {
        let x = self.value();
        let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = (*x).clone();
        for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
            row /= *n;
        }
        self.unary(
            out,
            Op::RowNormalize {
                x: self.id,
                norms,
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'t> {
        let z = self.value();
        assert_eq!(labels.len(), z.nrows());
        let mut probs = Matrix::zeros(z.dim());
        let mut total = 0.0;
        for (r, row) in z.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for (c, x) in row.iter().enumerate() {
                probs[[r, c]] = (x - lse).exp();
            }
            total += lse - row[labels[r]];
        }
        let v = Matrix::from_elem((1, 1), total / labels.len() as f64);
        self.unary(
            v,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of an `n × 1` logit column.
    pub fn bce_with_logits(self, labels: &[f64]) -> Var<'t> {
        let z = self.value();
        assert_eq!(z.dim(), (labels.len(), 1));
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let x = z[[i, 0]];
                x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let v = Matrix::from_elem((1, 1), total / labels.len() as f64);
        self.unary(
            v,
            Op::BceWithLogits {
                logits: self.id,
                labels: labels.to_vec(),
            },
        )
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.leaf(v)
    }
}

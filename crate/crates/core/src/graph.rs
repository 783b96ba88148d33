//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and enough cached state to run the backward rule.
//! Parameters enter through [`Graph::param`], constants through
//! [`Graph::constant`]; after [`Graph::backward`] the gradient of any node can
//! be read back, and [`Graph::param_grads`] collects the ones that belong to a
//! [`ParamStore`].

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Additive-mask entries at or below this value are treated as excluded.
pub const MASK_EXCLUDED: f64 = -1e8;

/// Additive mask value used for excluded attention entries.
pub const NEG_INF_SURROGATE: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Array1<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<Option<usize>>>),
    Sum(Var),
    Mean(Var),
    GruCell {
        gi: Var,
        gh: Var,
        h_prev: Var,
        r: Array1<f64>,
        z: Array1<f64>,
        n: Array1<f64>,
        gh_n: Array1<f64>,
    },
    SmoothL1 {
        x: Var,
        target: Mat,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Array1<f64>,
    },
    KlRows {
        student: Var,
        student_probs: Mat,
        log_ratio: Mat,
        row_kl: Array1<f64>,
    },
    Cosine {
        a: Var,
        b: Mat,
        cos: f64,
        norm_a: f64,
        norm_b: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// All nodes in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// True for constants and parameters.
    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id reuse
    /// one node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-wise softmax. Entries of `mask` at or below [`MASK_EXCLUDED`] get
    /// probability zero; a row with no admitted entry is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mat>) -> Var {
        let v = masked_softmax(self.value(a), mask);
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// 1×n affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|&e| (e - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: widths differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Builds a matrix whose row `i` is row `idx[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let mut v = Mat::zeros((idx.len(), cols));
        for (i, j) in idx.iter().enumerate() {
            if let Some(j) = *j {
                v.row_mut(i).assign(&src.row(j));
            }
        }
        self.push(v, Op::GatherRows(a, Rc::new(idx)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// One gated-recurrent-unit step. `gi` and `gh` are the 1×3h input and
    /// hidden projections (bias included), gate order reset, update, new.
    pub fn gru_cell(&mut self, gi: Var, gh: Var, h_prev: Var) -> Var {
        let h = self.shape(h_prev).1;
        let giv = self.value(gi).row(0).to_owned();
        let ghv = self.value(gh).row(0).to_owned();
        let hp = self.value(h_prev).row(0).to_owned();
        let r = (&giv.slice(s![0..h]) + &ghv.slice(s![0..h])).mapv(sigmoid);
        let z = (&giv.slice(s![h..2 * h]) + &ghv.slice(s![h..2 * h])).mapv(sigmoid);
        let gh_n = ghv.slice(s![2 * h..3 * h]).to_owned();
        let n = (&giv.slice(s![2 * h..3 * h]) + &(&r * &gh_n)).mapv(f64::tanh);
        let out = (1.0 - &z) * &n + &z * &hp;
        let v = out.insert_axis(Axis(0));
        self.push(
            v,
            Op::GruCell {
                gi,
                gh,
                h_prev,
                r,
                z,
                n,
                gh_n,
            },
        )
    }

    /// Mean elementwise smooth-L1 (transition point 1) against a fixed target.
    pub fn smooth_l1(&mut self, x: Var, target: &Mat) -> Var {
        assert_eq!(self.shape(x), target.dim(), "smooth_l1: shape mismatch");
        let xv = self.value(x);
        let n = xv.len() as f64;
        let total: f64 = xv
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        self.push(
            Mat::from_elem((1, 1), total / n),
            Op::SmoothL1 {
                x,
                target: target.clone(),
            },
        )
    }

    /// Softmax cross-entropy of a 1×C logit row against class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), 1, "cross_entropy: expects a single logit row");
        assert!(target < lv.ncols(), "cross_entropy: target out of range");
        let ls = log_softmax(lv);
        let probs = ls.row(0).mapv(f64::exp);
        let loss = -ls[[0, target]];
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    /// Mean over rows of KL(softmax(student) ‖ softmax(teacher)); the teacher
    /// logits are a constant.
    pub fn kl_rows(&mut self, student: Var, teacher: &Mat) -> Var {
        assert_eq!(self.shape(student), teacher.dim(), "kl_rows: shape mismatch");
        let lp = log_softmax(self.value(student));
        let lq = log_softmax(teacher);
        let student_probs = lp.mapv(f64::exp);
        let log_ratio = &lp - &lq;
        let row_kl = (&student_probs * &log_ratio).sum_axis(Axis(1));
        let loss = row_kl.sum() / row_kl.len() as f64;
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::KlRows {
                student,
                student_probs,
                log_ratio,
                row_kl,
            },
        )
    }

    /// `1 - cos(a, b)` over all entries, with `b` constant. Zero vectors give
    /// cosine zero.
    pub fn cosine_loss(&mut self, a: Var, b: &Mat) -> Var {
        assert_eq!(self.shape(a), b.dim(), "cosine_loss: shape mismatch");
        let av = self.value(a);
        let dot: f64 = av.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na2: f64 = av.iter().map(|x| x * x).sum();
        let nb2: f64 = b.iter().map(|x| x * x).sum();
        let denom = (na2 * nb2).sqrt();
        let cos = if denom > 0.0 {
            (dot / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        self.push(
            Mat::from_elem((1, 1), 1.0 - cos),
            Op::Cosine {
                a,
                b: b.clone(),
                cos,
                norm_a: na2.sqrt(),
                norm_b: nb2.sqrt(),
            },
        )
    }

    /// Backpropagates from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    /// Gradients for every parameter that took part in the graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.wrt(v).map(|g| (id, g.as_standard_layout().into_owned())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&self, i: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = dy.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(dy);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, dy.clone());
                acc(grads, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, -dy);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, dy * self.value(*b));
                acc(grads, *b, dy * self.value(*a));
            }
            Op::Scale(a, k) => acc(grads, *a, dy * *k),
            Op::Relu(a) => {
                let mut d = dy.clone();
                d.zip_mut_with(y, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => acc(grads, *a, dy * &y.mapv(|s| s * (1.0 - s))),
            Op::Tanh(a) => acc(grads, *a, dy * &y.mapv(|t| 1.0 - t * t)),
            Op::Transpose(a) => acc(grads, *a, dy.t().to_owned()),
            Op::Softmax(a) => {
                let inner = (dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(grads, *a, y * &(dy - &inner));
            }
            Op::LogSoftmax(a) => {
                let sum_dy = dy.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(grads, *a, dy - &(y.mapv(f64::exp) * &sum_dy));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma);
                acc(grads, *gamma, (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = dy * g;
                let n = xhat.ncols() as f64;
                let mut dx = Mat::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let s1 = dh.sum();
                    let s2 = (&dh * &xh).sum();
                    for c in 0..xhat.ncols() {
                        dx[[r, c]] = inv_std[r] / n * (n * dh[c] - s1 - xh[c] * s2);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(grads, p, dy.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    acc(grads, p, dy.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                acc(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (i, j) in idx.iter().enumerate() {
                    if let Some(j) = *j {
                        let mut row = d.row_mut(j);
                        row += &dy.row(i);
                    }
                }
                acc(grads, *a, d);
            }
            Op::Sum(a) => acc(grads, *a, Mat::from_elem(self.shape(*a), dy[[0, 0]])),
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                acc(grads, *a, Mat::from_elem(shape, dy[[0, 0]] / n));
            }
            Op::GruCell {
                gi,
                gh,
                h_prev,
                r,
                z,
                n,
                gh_n,
            } => {
                let dh = dy.row(0);
                let hp = self.value(*h_prev).row(0);
                let dn = &dh * &(1.0 - z);
                let dz = &dh * &(&hp - n);
                let dhp = &dh * z;
                let da_n = &dn * &n.mapv(|t| 1.0 - t * t);
                let dr = &da_n * gh_n;
                let da_z = &dz * &z.mapv(|s| s * (1.0 - s));
                let da_r = &dr * &r.mapv(|s| s * (1.0 - s));
                let hsz = r.len();
                let mut dgi = Mat::zeros((1, 3 * hsz));
                let mut dgh = Mat::zeros((1, 3 * hsz));
                dgi.slice_mut(s![0, 0..hsz]).assign(&da_r);
                dgi.slice_mut(s![0, hsz..2 * hsz]).assign(&da_z);
                dgi.slice_mut(s![0, 2 * hsz..]).assign(&da_n);
                dgh.slice_mut(s![0, 0..hsz]).assign(&da_r);
                dgh.slice_mut(s![0, hsz..2 * hsz]).assign(&da_z);
                dgh.slice_mut(s![0, 2 * hsz..]).assign(&(&da_n * r));
                acc(grads, *gi, dgi);
                acc(grads, *gh, dgh);
                acc(grads, *h_prev, dhp.insert_axis(Axis(0)));
            }
            Op::SmoothL1 { x, target } => {
                let xv = self.value(*x);
                let n = xv.len() as f64;
                let k = dy[[0, 0]] / n;
                let mut d = xv - target;
                d.mapv_inplace(|e| if e.abs() < 1.0 { e * k } else { e.signum() * k });
                acc(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut d = probs.clone();
                d[*target] -= 1.0;
                acc(grads, *logits, (d * dy[[0, 0]]).insert_axis(Axis(0)));
            }
            Op::KlRows {
                student,
                student_probs,
                log_ratio,
                row_kl,
            } => {
                let rows = student_probs.nrows() as f64;
                let k = dy[[0, 0]] / rows;
                let centered = log_ratio - &row_kl.view().insert_axis(Axis(1));
                acc(grads, *student, student_probs * &centered * k);
            }
            Op::Cosine {
                a,
                b,
                cos,
                norm_a,
                norm_b,
            } => {
                if *norm_a > 0.0 && *norm_b > 0.0 {
                    let av = self.value(*a);
                    let d = -(b / (norm_a * norm_b) - av * (*cos / (norm_a * norm_a)));
                    acc(grads, *a, d * dy[[0, 0]]);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
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

/// Row-wise softmax honoring an optional additive mask.
pub fn masked_softmax(x: &Mat, mask: Option<&Mat>) -> Mat {
    if let Some(m) = mask {
        assert_eq!(x.dim(), m.dim(), "softmax: mask shape mismatch");
    }
    let mut out = Mat::zeros(x.dim());
    for r in 0..x.nrows() {
        let admitted = |c: usize| mask.is_none_or(|m| m[[r, c]] > MASK_EXCLUDED);
        let logit = |c: usize| x[[r, c]] + mask.map_or(0.0, |m| m[[r, c]]);
        let mut max = f64::NEG_INFINITY;
        for c in 0..x.ncols() {
            if admitted(c) {
                max = max.max(logit(c));
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..x.ncols() {
            if admitted(c) {
                let e = (logit(c) - max).exp();
                out[[r, c]] = e;
                total += e;
            }
        }
        out.row_mut(r).mapv_inplace(|e| e / total);
    }
    out
}

pub fn log_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
        let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|e| e - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`, compared to the analytic gradient.
    fn check<F>(x: Mat, f: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let loss = f(&mut g, xv);
        let grads = g.backward(loss);
        let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Mat::zeros(x.dim()));
        let h = 1e-6;
        for idx in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let v = g.constant(xp);
                let l = f(&mut g, v);
                g.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let tol = 1e-6 * a.abs().max(numeric.abs()).max(1.0);
            assert!((a - numeric).abs() < tol, "entry {idx}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(3, 4, &mut rng);
        let b = random(1, 4, &mut rng);
        check(random(2, 3, &mut rng), move |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.matmul(x, w);
            let y = g.add_row(y, b);
            let s = g.sigmoid(y);
            let t = g.tanh(y);
            let p = g.mul(s, t);
            let q = g.scale(p, 1.7);
            let r = g.sub(q, y);
            g.sum(r)
        });
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let weights = random(3, 5, &mut rng);
        let mut mask = Mat::zeros((3, 5));
        mask[[0, 1]] = NEG_INF_SURROGATE;
        mask[[2, 4]] = NEG_INF_SURROGATE;
        let gamma = random(1, 5, &mut rng);
        let beta = random(1, 5, &mut rng);
        check(random(3, 5, &mut rng), move |g, x| {
            let gm = g.constant(gamma.clone());
            let bt = g.constant(beta.clone());
            let n = g.layer_norm(x, gm, bt);
            let sm = g.softmax_rows(n, Some(&mask));
            let w = g.constant(weights.clone());
            let p = g.mul(sm, w);
            let ls = g.log_softmax_rows(x);
            let q = g.mul(ls, w);
            let a = g.sum(p);
            let b = g.mean(q);
            g.add(a, b)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let other = random(4, 2, &mut rng);
        check(random(4, 3, &mut rng), move |g, x| {
            let o = g.constant(other.clone());
            let c = g.concat_cols(&[x, o]);
            let r = g.concat_rows(&[c, c]);
            let sl = g.slice_rows(r, 2, 5);
            let sc = g.slice_cols(sl, 1, 3);
            let gt = g.gather_rows(sc, vec![Some(0), None, Some(4), Some(0)]);
            let t = g.transpose(gt);
            let re = g.relu(t);
            let sq = g.mul(re, re);
            g.sum(sq)
        });
    }

    #[test]
    fn loss_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = random(2, 3, &mut rng) * 3.0;
        let teacher = random(2, 3, &mut rng);
        let cos_b = random(2, 3, &mut rng);
        check(random(2, 3, &mut rng), move |g, x| {
            let a = g.smooth_l1(x, &target);
            let b = g.kl_rows(x, &teacher);
            let c = g.cosine_loss(x, &cos_b);
            let row = g.slice_rows(x, 1, 1);
            let d = g.cross_entropy(row, 2);
            let ab = g.add(a, b);
            let cd = g.add(c, d);
            g.add(ab, cd)
        });
    }

    #[test]
    fn gru_cell_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gh = random(1, 9, &mut rng);
        let hp = random(1, 3, &mut rng);
        check(random(1, 9, &mut rng), {
            let gh = gh.clone();
            let hp = hp.clone();
            move |g, x| {
                let ghv = g.constant(gh.clone());
                let h = g.constant(hp.clone());
                let o = g.gru_cell(x, ghv, h);
                let sq = g.mul(o, o);
                g.sum(sq)
            }
        });
        check(random(1, 9, &mut rng), move |g, x| {
            let gi = g.constant(gh.clone());
            let h = g.constant(hp.clone());
            let o = g.gru_cell(gi, x, h);
            let o2 = g.gru_cell(gi, x, o);
            g.sum(o2)
        });
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let mask = array![[0.0, 0.0], [NEG_INF_SURROGATE, NEG_INF_SURROGATE]];
        let p = masked_softmax(&x, Some(&mask));
        assert!((p.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(p.row(1).sum(), 0.0);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store.insert("w", array![[2.0]]);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let l = g.sum(p);
        let grads = g.backward(l);
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert!((pg[0].1[[0, 0]] - 4.0).abs() < 1e-12);
    }
}

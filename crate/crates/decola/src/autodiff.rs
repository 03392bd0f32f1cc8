//! Minimal reverse-mode automatic differentiation over f64 matrices.
//!
//! A [`Tape`] owns a DAG of matrix-valued nodes; every operation appends a
//! node and returns a lightweight [`Var`] handle. `backward` walks the tape in
//! reverse and accumulates gradients, which can then be harvested per named
//! parameter. Everything is f64 and single-threaded per tape, so gradients are
//! bit-reproducible and finite-difference checks are tight.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::geometry;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, eps: f64 },
    L2NormalizeRows { x: Var, eps: f64 },
    SumAll(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    GatherCols { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    BceWithLogits { logits: Var, targets: Mat },
    L1To { x: Var, target: Mat },
    GiouLoss { pred_cxcywh: Var, target_cxcywh: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, Var)>>,
    grads: RefCell<Vec<Option<Mat>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a named parameter leaf; its gradient is harvested by
    /// [`Tape::param_grads`].
    pub fn param(&self, name: &str, value: Mat) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.borrow_mut().push((name.to_string(), v));
        v
    }

    pub fn value(&self, v: Var) -> Mat {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let d = nodes[v.0].value.dim();
        (d.0, d.1)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].value.dim(), (1, 1), "scalar_value on non-scalar");
        nodes[v.0].value[(0, 0)]
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(av.ncols(), bv.nrows(), "matmul shape mismatch");
            av.dot(bv)
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].value.dim(), nodes[b.0].value.dim(), "add shape");
            &nodes[a.0].value + &nodes[b.0].value
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].value.dim(), nodes[b.0].value.dim(), "sub shape");
            &nodes[a.0].value - &nodes[b.0].value
        };
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].value.dim(), nodes[b.0].value.dim(), "mul shape");
            &nodes[a.0].value * &nodes[b.0].value
        };
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * c
        };
        self.push(value, Op::Scale(a, c))
    }

    /// a: N×d, row: 1×d, broadcast-added to every row of a.
    pub fn add_row_broadcast(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!(rv.nrows(), 1, "broadcast row must be 1×d");
            assert_eq!(av.ncols(), rv.ncols(), "broadcast dim mismatch");
            av + &rv.row(0)
        };
        self.push(value, Op::AddRowBroadcast(a, row))
    }

    pub fn mul_row_broadcast(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!(rv.nrows(), 1, "broadcast row must be 1×d");
            assert_eq!(av.ncols(), rv.ncols(), "broadcast dim mismatch");
            av * &rv.row(0)
        };
        self.push(value, Op::MulRowBroadcast(a, row))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.t().to_owned()
        };
        self.push(value, Op::Transpose(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|x| x.max(0.0))
        };
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(stable_sigmoid)
        };
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum: f64 = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out
        };
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm without affine terms (pair with
    /// [`Tape::mul_row_broadcast`]/[`Tape::add_row_broadcast`] for gain/bias).
    pub fn layer_norm_rows(&self, x: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.clone();
            for mut row in out.rows_mut() {
                let d = row.len() as f64;
                let mean = row.sum() / d;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                let denom = (var + eps).sqrt();
                row.mapv_inplace(|v| (v - mean) / denom);
            }
            out
        };
        self.push(value, Op::LayerNormRows { x, eps })
    }

    pub fn l2_normalize_rows(&self, x: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.clone();
            for mut row in out.rows_mut() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > eps {
                    row.mapv_inplace(|v| v / norm);
                } else {
                    row.fill(0.0);
                }
            }
            out
        };
        self.push(value, Op::L2NormalizeRows { x, eps })
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Mat::from_elem((1, 1), nodes[a.0].value.sum())
        };
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let mut out = Mat::zeros((idx.len(), xv.ncols()));
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).assign(&xv.row(r));
            }
            out
        };
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn gather_cols(&self, x: Var, idx: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let mut out = Mat::zeros((xv.nrows(), idx.len()));
            for (j, &c) in idx.iter().enumerate() {
                out.column_mut(j).assign(&xv.column(c));
            }
            out
        };
        self.push(value, Op::GatherCols { x, idx: idx.to_vec() })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let ncols = nodes[parts[0].0].value.ncols();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.nrows()).sum();
            let mut out = Mat::zeros((total, ncols));
            let mut at = 0;
            for p in parts {
                let pv = &nodes[p.0].value;
                out.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
                at += pv.nrows();
            }
            out
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let nrows = nodes[parts[0].0].value.nrows();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.ncols()).sum();
            let mut out = Mat::zeros((nrows, total));
            let mut at = 0;
            for p in parts {
                let pv = &nodes[p.0].value;
                out.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
                at += pv.ncols();
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.slice(s![start..start + len, ..]).to_owned()
        };
        self.push(value, Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.slice(s![.., start..start + len]).to_owned()
        };
        self.push(value, Op::SliceCols { x, start, len })
    }

    /// Elementwise binary cross-entropy against constant targets, computed in
    /// the numerically stable logit form.
    pub fn bce_with_logits(&self, logits: Var, targets: Mat) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            assert_eq!(z.dim(), targets.dim(), "bce target shape");
            let mut out = Mat::zeros(z.dim());
            for ((i, j), zv) in z.indexed_iter() {
                let t = targets[(i, j)];
                out[(i, j)] = zv.max(0.0) - zv * t + (1.0 + (-zv.abs()).exp()).ln();
            }
            out
        };
        self.push(value, Op::BceWithLogits { logits, targets })
    }

    /// Elementwise |x − target| against a constant target.
    pub fn l1_to(&self, x: Var, target: Mat) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            assert_eq!(xv.dim(), target.dim(), "l1 target shape");
            let mut out = Mat::zeros(xv.dim());
            for ((i, j), v) in xv.indexed_iter() {
                out[(i, j)] = (v - target[(i, j)]).abs();
            }
            out
        };
        self.push(value, Op::L1To { x, target })
    }

    /// Per-row GIoU loss (1 − GIoU) between predicted and constant target
    /// boxes, both CXCYWH; output N×1. Gradients route through the analytic
    /// GIoU derivative from [`crate::geometry`].
    pub fn giou_loss(&self, pred_cxcywh: Var, target_cxcywh: Mat) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let p = &nodes[pred_cxcywh.0].value;
            assert_eq!(p.ncols(), 4, "boxes are N×4");
            assert_eq!(p.dim(), target_cxcywh.dim(), "giou target shape");
            let mut out = Mat::zeros((p.nrows(), 1));
            for i in 0..p.nrows() {
                let pb = [p[(i, 0)], p[(i, 1)], p[(i, 2)], p[(i, 3)]];
                let tb = [
                    target_cxcywh[(i, 0)],
                    target_cxcywh[(i, 1)],
                    target_cxcywh[(i, 2)],
                    target_cxcywh[(i, 3)],
                ];
                out[(i, 0)] = 1.0
                    - geometry::giou_pair_xyxy(
                        geometry::cxcywh_to_xyxy(pb),
                        geometry::cxcywh_to_xyxy(tb),
                    );
            }
            out
        };
        self.push(value, Op::GiouLoss {
            pred_cxcywh,
            target_cxcywh,
        })
    }

    /// Runs backpropagation from a 1×1 loss node.
    pub fn backward(&self, loss: Var) {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&nodes[b.0].value.t());
                    let db = nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &nodes[b.0].value;
                    let db = &g * &nodes[a.0].value;
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, a.0, &g * *c);
                }
                Op::AddRowBroadcast(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, a.0, g);
                    accumulate(&mut grads, row.0, dr);
                }
                Op::MulRowBroadcast(a, row) => {
                    let rv = nodes[row.0].value.row(0).to_owned();
                    let da = &g * &rv;
                    let dr = (&g * &nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, row.0, dr);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a.0, g.t().to_owned());
                }
                Op::Relu(a) => {
                    let mask = nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, a.0, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = &g * &(y * &y.mapv(|v| 1.0 - v));
                    accumulate(&mut grads, a.0, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..y.ncols() {
                            da[(r, c)] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::LayerNormRows { x, eps } => {
                    let xv = &nodes[x.0].value;
                    let mut da = Mat::zeros(xv.dim());
                    let d = xv.ncols() as f64;
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                        let denom = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / denom).collect();
                        let gr = g.row(r);
                        let gmean: f64 = gr.sum() / d;
                        let gxhat: f64 =
                            gr.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for c in 0..xv.ncols() {
                            da[(r, c)] = (gr[c] - gmean - xhat[c] * gxhat) / denom;
                        }
                    }
                    accumulate(&mut grads, x.0, da);
                }
                Op::L2NormalizeRows { x, eps } => {
                    let xv = &nodes[x.0].value;
                    let y = &node.value;
                    let mut da = Mat::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm <= *eps {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..xv.ncols() {
                            da[(r, c)] = (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, x.0, da);
                }
                Op::SumAll(a) => {
                    let shape = nodes[a.0].value.dim();
                    accumulate(&mut grads, a.0, Mat::from_elem(shape, g[(0, 0)]));
                }
                Op::GatherRows { x, idx } => {
                    let mut da = Mat::zeros(nodes[x.0].value.dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut row = da.row_mut(r);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads, x.0, da);
                }
                Op::GatherCols { x, idx } => {
                    let mut da = Mat::zeros(nodes[x.0].value.dim());
                    for (j, &c) in idx.iter().enumerate() {
                        let mut col = da.column_mut(c);
                        col += &g.column(j);
                    }
                    accumulate(&mut grads, x.0, da);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let rows = nodes[p.0].value.nrows();
                        let slice = g.slice(s![at..at + rows, ..]).to_owned();
                        accumulate(&mut grads, p.0, slice);
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let cols = nodes[p.0].value.ncols();
                        let slice = g.slice(s![.., at..at + cols]).to_owned();
                        accumulate(&mut grads, p.0, slice);
                        at += cols;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let mut da = Mat::zeros(nodes[x.0].value.dim());
                    da.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    accumulate(&mut grads, x.0, da);
                }
                Op::SliceCols { x, start, len } => {
                    let mut da = Mat::zeros(nodes[x.0].value.dim());
                    da.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads, x.0, da);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = &nodes[logits.0].value;
                    let mut da = Mat::zeros(z.dim());
                    for ((r, c), zv) in z.indexed_iter() {
                        da[(r, c)] = g[(r, c)] * (stable_sigmoid(*zv) - targets[(r, c)]);
                    }
                    accumulate(&mut grads, logits.0, da);
                }
                Op::L1To { x, target } => {
                    let xv = &nodes[x.0].value;
                    let mut da = Mat::zeros(xv.dim());
                    for ((r, c), v) in xv.indexed_iter() {
                        let diff = v - target[(r, c)];
                        da[(r, c)] = g[(r, c)] * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                    }
                    accumulate(&mut grads, x.0, da);
                }
                Op::GiouLoss {
                    pred_cxcywh,
                    target_cxcywh,
                } => {
                    let p = &nodes[pred_cxcywh.0].value;
                    let mut da = Mat::zeros(p.dim());
                    for i in 0..p.nrows() {
                        let pb = [p[(i, 0)], p[(i, 1)], p[(i, 2)], p[(i, 3)]];
                        let tb = [
                            target_cxcywh[(i, 0)],
                            target_cxcywh[(i, 1)],
                            target_cxcywh[(i, 2)],
                            target_cxcywh[(i, 3)],
                        ];
                        let (_, dxyxy, _) = geometry::giou_pair_with_grad_xyxy(
                            geometry::cxcywh_to_xyxy(pb),
                            geometry::cxcywh_to_xyxy(tb),
                        );
                        // chain through cxcywh→xyxy, negate for (1 − giou)
                        let dcx = dxyxy[0] + dxyxy[2];
                        let dcy = dxyxy[1] + dxyxy[3];
                        let dw = 0.5 * (dxyxy[2] - dxyxy[0]);
                        let dh = 0.5 * (dxyxy[3] - dxyxy[1]);
                        let s = -g[(i, 0)];
                        da[(i, 0)] = s * dcx;
                        da[(i, 1)] = s * dcy;
                        da[(i, 2)] = s * dw;
                        da[(i, 3)] = s * dh;
                    }
                    accumulate(&mut grads, pred_cxcywh.0, da);
                }
            }
        }
        *self.grads.borrow_mut() = grads;
    }

    /// Gradient of the last `backward` w.r.t. a node (zeros if unused).
    pub fn grad(&self, v: Var) -> Mat {
        let grads = self.grads.borrow();
        match &grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.nodes.borrow()[v.0].value.dim()),
        }
    }

    /// Harvests parameter gradients by name after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, v) in self.params.borrow().iter() {
            let g = self.grad(*v);
            out.entry(name.clone())
                .and_modify(|acc: &mut Mat| *acc = &*acc + &g)
                .or_insert(g);
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Mat>], idx: usize, g: Mat) {
    match &mut grads[idx] {
        Some(acc) => *acc = &*acc + &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(inputs) for a graph builder.
    fn check_grads(build: impl Fn(&Tape, &[Var]) -> Var, inits: &[Mat], tol: f64) {
        let tape = Tape::new();
        let vars: Vec<Var> = inits.iter().map(|m| tape.constant(m.clone())).collect();
        let loss = build(&tape, &vars);
        tape.backward(loss);
        let analytic: Vec<Mat> = vars.iter().map(|v| tape.grad(*v)).collect();

        let eval = |perturbed: &[Mat]| -> f64 {
            let t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|m| t.constant(m.clone())).collect();
            let l = build(&t, &vs);
            t.scalar_value(l)
        };

        let h = 1e-5;
        for (k, init) in inits.iter().enumerate() {
            for ((i, j), _) in init.indexed_iter() {
                let mut plus = inits.to_vec();
                plus[k][(i, j)] += h;
                let mut minus = inits.to_vec();
                minus[k][(i, j)] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic[k][(i, j)];
                assert!(
                    (an - fd).abs() <= tol * fd.abs().max(1.0),
                    "input {k} entry ({i},{j}): analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        check_grads(
            |t, v| {
                let y = t.matmul(v[0], v[1]);
                let y = t.relu(y);
                t.sum_all(y)
            },
            &[a, b],
            1e-4,
        );
    }

    #[test]
    fn softmax_layernorm_normalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 4, 6);
        check_grads(
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let n = t.layer_norm_rows(s, 1e-5);
                let u = t.l2_normalize_rows(n, 1e-12);
                let sq = t.mul(u, u);
                t.sum_all(sq)
            },
            &[x],
            1e-3,
        );
    }

    #[test]
    fn gather_concat_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 5, 4);
        let y = rand_mat(&mut rng, 2, 4);
        check_grads(
            |t, v| {
                let g = t.gather_rows(v[0], &[0, 2, 2, 4]);
                let c = t.concat_rows(&[g, v[1]]);
                let sc = t.slice_cols(c, 1, 2);
                let sr = t.slice_rows(sc, 0, 5);
                let m = t.mul(sr, sr);
                t.sum_all(m)
            },
            &[x, y],
            1e-4,
        );
    }

    #[test]
    fn broadcast_and_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 3, 5);
        let b = rand_mat(&mut rng, 1, 5);
        let g = rand_mat(&mut rng, 1, 5);
        check_grads(
            |t, v| {
                let y = t.add_row_broadcast(v[0], v[1]);
                let y = t.mul_row_broadcast(y, v[2]);
                let y = t.sigmoid(y);
                t.sum_all(y)
            },
            &[x, b, g],
            1e-4,
        );
    }

    #[test]
    fn bce_and_l1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand_mat(&mut rng, 4, 3);
        let targets = Mat::from_shape_fn((4, 3), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let l1_target = rand_mat(&mut rng, 4, 3);
        check_grads(
            |t, v| {
                let bce = t.bce_with_logits(v[0], targets.clone());
                let l1 = t.l1_to(v[0], l1_target.clone());
                let tot = t.add(bce, l1);
                t.sum_all(tot)
            },
            &[z],
            1e-4,
        );
    }

    #[test]
    fn giou_loss_gradients() {
        let pred = arr2(&[[0.45, 0.52, 0.2, 0.25], [0.7, 0.7, 0.1, 0.1]]);
        let target = arr2(&[[0.5, 0.5, 0.22, 0.22], [0.3, 0.3, 0.15, 0.15]]);
        check_grads(
            |t, v| {
                let l = t.giou_loss(v[0], target.clone());
                t.sum_all(l)
            },
            &[pred],
            1e-3,
        );
    }

    #[test]
    fn gather_cols_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 3, 6);
        check_grads(
            |t, v| {
                let g = t.gather_cols(v[0], &[5, 0, 0, 3]);
                let m = t.mul(g, g);
                t.sum_all(m)
            },
            &[x],
            1e-4,
        );
    }

    #[test]
    fn param_grads_accumulate_across_uses() {
        let tape = Tape::new();
        let w = tape.param("w", arr2(&[[2.0, 1.0]]));
        let a = tape.mul(w, w);
        let b = tape.add(a, w);
        let loss = tape.sum_all(b);
        tape.backward(loss);
        let grads = tape.param_grads();
        // d/dw (w² + w) = 2w + 1
        assert_eq!(grads["w"], arr2(&[[5.0, 3.0]]));
    }
}

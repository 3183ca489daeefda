//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every value is an `Array2<f64>`; scalars are `1 x 1`. Operations are
//! recorded in creation order, so a reverse sweep over the node list is a
//! valid topological order for the backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use crate::semantic::vmf::{log_vmf_normalizer_unchecked, log_vmf_normalizer_slope};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-6;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm(Var),
    Transpose(Var),
    L2Rows(Var),
    MeanRows(Var),
    SegmentMean(Var, Rc<Vec<Vec<usize>>>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Rc<Vec<usize>>),
    LogSoftmax(Var),
    WeightedSum(Var, Rc<Array2<f64>>),
    VmfLogNorm { w: Var, tau: f64, dim: usize },
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Array2<f64>) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(like.raw_dim()))
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

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&*self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) + &*self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `a + row` with `row` of shape `1 x n` broadcast over the rows of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = &*self.value(a) + &*self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// `a * row` elementwise with `row` of shape `1 x n` broadcast.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let out = &*self.value(a) * &*self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = &*self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&self, a: Var) -> Var {
        let out = layer_norm_rows(&self.value(a));
        self.push(out, Op::LayerNorm(a))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn l2_normalize_rows(&self, a: Var) -> Var {
        let mut out = (*self.value(a)).clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            row.mapv_inplace(|x| x / n);
        }
        self.push(out, Op::L2Rows(a))
    }

    pub fn mean_rows(&self, a: Var) -> Var {
        let val = self.value(a);
        let out = val
            .mean_axis(Axis(0))
            .expect("mean over empty matrix")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    /// Mean of the rows listed in each group; one output row per group.
    pub fn segment_mean(&self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let val = self.value(a);
        let mut out = Array2::zeros((groups.len(), val.ncols()));
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "segment_mean: empty group");
            let mut row = out.row_mut(g);
            for &i in members {
                row += &val.row(i);
            }
            row.mapv_inplace(|x| x / members.len() as f64);
        }
        self.push(out, Op::SegmentMean(a, Rc::new(groups)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &idx);
        self.push(out, Op::SelectRows(a, Rc::new(idx)))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let mut out = (*self.value(a)).clone();
        for mut row in out.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|x| x - lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Scalar `sum(a * weights)`; `weights` is treated as a constant.
    pub fn weighted_sum(&self, a: Var, weights: Array2<f64>) -> Var {
        let s = (&*self.value(a) * &weights).sum();
        self.push(Array2::from_elem((1, 1), s), Op::WeightedSum(a, Rc::new(weights)))
    }

    /// Per-row log vMF normalizer `log C_dim(|w_k| / tau)` as a `1 x K` row.
    pub fn vmf_log_norm_rows(&self, w: Var, tau: f64, dim: usize) -> Var {
        let val = self.value(w);
        let out = Array2::from_shape_fn((1, val.nrows()), |(_, k)| {
            let kappa = val.row(k).dot(&val.row(k)).sqrt() / tau;
            log_vmf_normalizer_unchecked(kappa, dim)
        });
        self.push(out, Op::VmfLogNorm { w, tau, dim })
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(nodes[output.0].value.raw_dim()));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |v: Var| &*nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    accumulate(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let ga = &g * val(*row);
                    let grow = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, grow);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(val(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a) => {
                    accumulate(&mut grads, *a, layer_norm_backward(val(*a), &node.value, &g));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::L2Rows(a) => {
                    let x = val(*a);
                    let y = &*node.value;
                    let mut ga = Array2::zeros(x.raw_dim());
                    for ((mut gr, xr), (yr, dr)) in ga
                        .rows_mut()
                        .into_iter()
                        .zip(x.rows())
                        .zip(y.rows().into_iter().zip(g.rows()))
                    {
                        let n = xr.dot(&xr).sqrt().max(NORM_FLOOR);
                        let proj = yr.dot(&dr);
                        Zip::from(&mut gr)
                            .and(&dr)
                            .and(&yr)
                            .for_each(|o, &d, &yy| *o = (d - yy * proj) / n);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let x = val(*a);
                    let n = x.nrows() as f64;
                    let row = g.row(0).mapv(|v| v / n);
                    let ga = Array2::from_shape_fn(x.raw_dim(), |(_, j)| row[j]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentMean(a, groups) => {
                    let x = val(*a);
                    let mut ga = Array2::zeros(x.raw_dim());
                    for (gi, members) in groups.iter().enumerate() {
                        let share = g.row(gi).mapv(|v| v / members.len() as f64);
                        for &i in members {
                            let mut r = ga.row_mut(i);
                            r += &share;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = val(*p).nrows();
                        let slice = g.slice(ndarray::s![start..start + rows, ..]).to_owned();
                        accumulate(&mut grads, *p, slice);
                        start += rows;
                    }
                }
                Op::SelectRows(a, idx) => {
                    let x = val(*a);
                    let mut ga = Array2::zeros(x.raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &*node.value;
                    let mut ga = g.clone();
                    for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = gr.sum();
                        Zip::from(&mut gr).and(&yr).for_each(|d, &ly| *d -= ly.exp() * total);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedSum(a, weights) => {
                    accumulate(&mut grads, *a, &**weights * g[[0, 0]]);
                }
                Op::VmfLogNorm { w, tau, dim } => {
                    let x = val(*w);
                    let mut gw = Array2::zeros(x.raw_dim());
                    for k in 0..x.nrows() {
                        let norm = x.row(k).dot(&x.row(k)).sqrt();
                        if norm <= NORM_FLOOR {
                            continue;
                        }
                        let slope = log_vmf_normalizer_slope(norm / tau, *dim);
                        let coeff = g[[0, k]] * slope / (tau * norm);
                        let mut r = gw.row_mut(k);
                        r.assign(&x.row(k).mapv(|v| v * coeff));
                    }
                    accumulate(&mut grads, *w, gw);
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn layer_norm_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn layer_norm_backward(x: &Array2<f64>, y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (((mut o, xr), yr), gr) in out
        .rows_mut()
        .into_iter()
        .zip(x.rows())
        .zip(y.rows())
        .zip(g.rows())
    {
        let n = xr.len() as f64;
        let mean = xr.sum() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let mean_g = gr.sum() / n;
        let mean_gy = gr.dot(&yr) / n;
        Zip::from(&mut o)
            .and(&gr)
            .and(&yr)
            .for_each(|o, &d, &yy| *o = inv * (d - mean_g - yy * mean_gy));
    }
    out
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

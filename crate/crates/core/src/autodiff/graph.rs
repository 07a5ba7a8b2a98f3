use std::collections::BTreeMap;
use std::sync::Arc;

use super::matrix::{matmul_acc, matmul_at_acc, matmul_bt_acc, Matrix};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::indexing::GroupTable;

/// Number of taps in a 3×3 kernel.
pub const KERNEL_TAPS: usize = 9;

/// Per output row, the source row feeding each kernel tap (if occupied).
/// Tap `k` corresponds to offset `(k / 3 - 1, k % 3 - 1)` in `(vx, vy)`.
pub type Rulebook = Vec<[Option<usize>; KERNEL_TAPS]>;

const LAYER_NORM_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Arc<[usize]>,
    },
    ScatterMean {
        x: Var,
        group_of: Arc<[usize]>,
        counts: Vec<usize>,
    },
    ScatterSum {
        x: Var,
        group_of: Arc<[usize]>,
    },
    ScatterMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        x: Var,
        group_of: Arc<[usize]>,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    SubmConv {
        x: Var,
        w: Var,
        rulebook: Arc<Rulebook>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        beta: f64,
    },
    SumAll {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation graph. Nodes are appended in evaluation
/// order, so the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when no path reached it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Leaf for a named parameter. Repeated requests for one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::validation(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched by this graph, by name.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Collects per-parameter gradients (zeros for untouched parameters of `store`).
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> BTreeMap<String, Matrix> {
        store
            .iter()
            .map(|(name, value)| {
                let g = match self.params.get(name) {
                    Some(&v) => grads.wrt(v),
                    None => Matrix::zeros(value.rows(), value.cols()),
                };
                (name.clone(), g)
            })
            .collect()
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        let (wc, d) = self.shape(w);
        if wc != c || self.shape(b) != (1, d) {
            return Err(Error::shape(format!(
                "linear: x {n}x{c}, w {wc}x{d}, b {:?}",
                self.shape(b)
            )));
        }
        let mut out = Matrix::zeros(n, d);
        {
            let bias = self.value(b).data();
            for r in 0..n {
                out.row_mut(r).copy_from_slice(bias);
            }
        }
        matmul_acc(self.value(x).data(), self.value(w).data(), out.data_mut(), n, c, d);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.shape(b) != (1, c) {
            return Err(Error::shape(format!("add_bias: x {n}x{c}, b {:?}", self.shape(b))));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..n {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape(format!(
                "layer_norm: x {n}x{c}, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if c == 0 {
            return Err(Error::shape("layer_norm over zero columns"));
        }
        let xv = self.value(x);
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            let out_row = out.row_mut(r);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out_row[j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if n != nb {
            return Err(Error::shape(format!("concat_cols: {n} rows vs {nb} rows")));
        }
        let mut out = Matrix::zeros(n, ca + cb);
        let (av, bv) = (self.value(a), self.value(b));
        for r in 0..n {
            let row = out.row_mut(r);
            row[..ca].copy_from_slice(av.row(r));
            row[ca..].copy_from_slice(bv.row(r));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols { a, b }, rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.shape(x);
        if start > end || end > c {
            return Err(Error::shape(format!("slice_cols [{start}, {end}) of {c} columns")));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(n, end - start);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (g, c) = self.shape(x);
        if let Some(bad) = index.iter().find(|&&i| i >= g) {
            return Err(Error::Index(format!("gather_rows: row {bad} of {g}")));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(index.len(), c);
        for (r, &src) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(src));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows { x, index: index.into() }, rg))
    }

    fn check_groups(&self, op: &str, x: Var, groups: &GroupTable) -> Result<()> {
        if groups.n_items() != self.shape(x).0 {
            return Err(Error::shape(format!(
                "{op}: {} rows but groups cover {}",
                self.shape(x).0,
                groups.n_items()
            )));
        }
        Ok(())
    }

    /// Per-group arithmetic mean of member rows.
    pub fn scatter_mean(&mut self, x: Var, groups: &GroupTable) -> Result<Var> {
        self.check_groups("scatter_mean", x, groups)?;
        let c = self.shape(x).1;
        let xv = self.value(x);
        let mut out = Matrix::zeros(groups.n_groups(), c);
        let mut counts = Vec::with_capacity(groups.n_groups());
        for (g, members) in groups.iter_groups().enumerate() {
            let row = out.row_mut(g);
            for &i in members {
                for (o, v) in row.iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
            let n = members.len() as f64;
            for o in row.iter_mut() {
                *o /= n;
            }
            counts.push(members.len());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ScatterMean {
                x,
                group_of: groups.group_of().into(),
                counts,
            },
            rg,
        ))
    }

    pub fn scatter_sum(&mut self, x: Var, groups: &GroupTable) -> Result<Var> {
        self.check_groups("scatter_sum", x, groups)?;
        let c = self.shape(x).1;
        let xv = self.value(x);
        let mut out = Matrix::zeros(groups.n_groups(), c);
        for (g, members) in groups.iter_groups().enumerate() {
            let row = out.row_mut(g);
            for &i in members {
                for (o, v) in row.iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ScatterSum {
                x,
                group_of: groups.group_of().into(),
            },
            rg,
        ))
    }

    /// Per-group, per-column maximum. The gradient goes to the lowest-index
    /// member attaining the maximum.
    pub fn scatter_max(&mut self, x: Var, groups: &GroupTable) -> Result<Var> {
        self.check_groups("scatter_max", x, groups)?;
        let c = self.shape(x).1;
        let xv = self.value(x);
        let g_count = groups.n_groups();
        let mut out = Matrix::zeros(g_count, c);
        let mut argmax = vec![0usize; g_count * c];
        for (g, members) in groups.iter_groups().enumerate() {
            let first = members[0];
            let row = out.row_mut(g);
            row.copy_from_slice(xv.row(first));
            argmax[g * c..(g + 1) * c].fill(first);
            for &i in &members[1..] {
                for (j, &v) in xv.row(i).iter().enumerate() {
                    if v > row[j] {
                        row[j] = v;
                        argmax[g * c + j] = i;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ScatterMax { x, argmax }, rg))
    }

    /// Softmax of a single-column input within each group.
    pub fn segment_softmax(&mut self, x: Var, groups: &GroupTable) -> Result<Var> {
        self.check_groups("segment_softmax", x, groups)?;
        if self.shape(x).1 != 1 {
            return Err(Error::shape("segment_softmax expects one column"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for members in groups.iter_groups() {
            let max = members.iter().map(|&i| xv[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in members {
                let e = (xv[i] - max).exp();
                out[i] = e;
                total += e;
            }
            for &i in members {
                out[i] /= total;
            }
        }
        let n = out.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Matrix::new(n, 1, out)?,
            Op::SegmentSoftmax {
                x,
                group_of: groups.group_of().into(),
            },
            rg,
        ))
    }

    /// Scales row `i` of `x` by `w[i]` where `w` has one column.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.shape(w) != (n, 1) {
            return Err(Error::shape(format!("mul_rows: x {n}x{c}, w {:?}", self.shape(w))));
        }
        let mut out = self.value(x).clone();
        let wv = self.value(w).data().to_vec();
        for (r, s) in wv.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::MulRows { x, w }, rg))
    }

    /// 3×3 convolution over an active set: `out[g] = Σ_k x[rb[g][k]] · W_k`,
    /// missing taps contribute nothing. `w` has shape `(9·Cin) × Cout`.
    pub fn subm_conv(&mut self, x: Var, w: Var, rulebook: &Arc<Rulebook>) -> Result<Var> {
        let (g, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        if wr != KERNEL_TAPS * cin {
            return Err(Error::shape(format!(
                "subm_conv: x {g}x{cin} needs {}-row kernel, got {wr}",
                KERNEL_TAPS * cin
            )));
        }
        if rulebook.len() != g {
            return Err(Error::shape(format!(
                "subm_conv: rulebook has {} rows for {g} sites",
                rulebook.len()
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = Matrix::zeros(g, cout);
        for (site, taps) in rulebook.iter().enumerate() {
            let out_row = &mut out.data_mut()[site * cout..(site + 1) * cout];
            for (k, src) in taps.iter().enumerate() {
                let Some(src) = *src else { continue };
                if src >= g {
                    return Err(Error::Index(format!("subm_conv: source {src} of {g}")));
                }
                matmul_acc(
                    &xv[src * cin..(src + 1) * cin],
                    &wv[k * cin * cout..(k + 1) * cin * cout],
                    out_row,
                    1,
                    cin,
                    cout,
                );
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            out,
            Op::SubmConv {
                x,
                w,
                rulebook: Arc::clone(rulebook),
            },
            rg,
        ))
    }

    /// Mean elementwise smooth-L1: `0.5 d² / β` if `|d| < β`, else `|d| − 0.5 β`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Matrix, beta: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(format!(
                "smooth_l1: pred {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        if beta.is_nan() || beta <= 0.0 {
            return Err(Error::validation(format!("smooth_l1 beta must be > 0, got {beta}")));
        }
        let pv = self.value(pred).data();
        let n = pv.len().max(1) as f64;
        let total: f64 = pv
            .iter()
            .zip(target.data())
            .map(|(a, b)| smooth_l1_elem(a - b, beta))
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Matrix::scalar(total / n),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                beta,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Matrix::scalar(s), Op::SumAll { x }, rg)
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, c) = nodes[x.0].value.shape();
                let d = g.cols();
                if want(*x) {
                    let dx = acc!(*x);
                    matmul_bt_acc(g.data(), nodes[w.0].value.data(), dx.data_mut(), n, c, d);
                }
                if want(*w) {
                    let dw = acc!(*w);
                    matmul_at_acc(nodes[x.0].value.data(), g.data(), dw.data_mut(), n, c, d);
                }
                if want(*b) {
                    let db = acc!(*b);
                    for r in 0..n {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                if want(*x) {
                    acc!(*x).add_assign(g);
                }
                if want(*b) {
                    let db = acc!(*b);
                    for r in 0..g.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    acc!(*a).add_assign(g);
                }
                if want(*b) {
                    acc!(*b).add_assign(g);
                }
            }
            Op::Scale { x, c } => {
                if want(*x) {
                    let dx = acc!(*x);
                    for (o, v) in dx.data_mut().iter_mut().zip(g.data()) {
                        *o += c * v;
                    }
                }
            }
            Op::Relu { x } => {
                if want(*x) {
                    let xv = nodes[x.0].value.data();
                    let dx = acc!(*x);
                    for ((o, v), xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if *xi > 0.0 {
                            *o += v;
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
                let (n, c) = g.shape();
                let gv = nodes[gain.0].value.data();
                if want(*x) {
                    let dx = acc!(*x);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..n {
                        let gr = g.row(r);
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hr[j];
                        }
                        let scale = inv_std[r] / c as f64;
                        let row = dx.row_mut(r);
                        for j in 0..c {
                            row[j] += scale * (c as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
                if want(*gain) {
                    let dg = acc!(*gain);
                    for r in 0..n {
                        let hr = &xhat[r * c..(r + 1) * c];
                        for ((o, gr), h) in dg.data_mut().iter_mut().zip(g.row(r)).zip(hr) {
                            *o += gr * h;
                        }
                    }
                }
                if want(*bias) {
                    let db = acc!(*bias);
                    for r in 0..n {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = nodes[a.0].value.cols();
                if want(*a) {
                    let da = acc!(*a);
                    for r in 0..g.rows() {
                        for (o, v) in da.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                            *o += v;
                        }
                    }
                }
                if want(*b) {
                    let db = acc!(*b);
                    for r in 0..g.rows() {
                        for (o, v) in db.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let dx = acc!(*x);
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (o, v) in dx.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if want(*x) {
                    let dx = acc!(*x);
                    for (r, &src) in index.iter().enumerate() {
                        for (o, v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ScatterMean { x, group_of, counts } => {
                if want(*x) {
                    let dx = acc!(*x);
                    for (r, &grp) in group_of.iter().enumerate() {
                        let inv = 1.0 / counts[grp] as f64;
                        for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(grp)) {
                            *o += v * inv;
                        }
                    }
                }
            }
            Op::ScatterSum { x, group_of } => {
                if want(*x) {
                    let dx = acc!(*x);
                    for (r, &grp) in group_of.iter().enumerate() {
                        for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(grp)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ScatterMax { x, argmax } => {
                if want(*x) {
                    let c = g.cols();
                    let dx = acc!(*x);
                    for (slot_idx, &src) in argmax.iter().enumerate() {
                        let j = slot_idx % c;
                        let grp = slot_idx / c;
                        let v = g.get(grp, j);
                        let cur = dx.get(src, j);
                        dx.set(src, j, cur + v);
                    }
                }
            }
            Op::SegmentSoftmax { x, group_of } => {
                if want(*x) {
                    let y = node.value.data();
                    let gd = g.data();
                    let n_groups = group_of.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_groups];
                    for (r, &grp) in group_of.iter().enumerate() {
                        dot[grp] += y[r] * gd[r];
                    }
                    let dx = acc!(*x);
                    for (r, &grp) in group_of.iter().enumerate() {
                        dx.data_mut()[r] += y[r] * (gd[r] - dot[grp]);
                    }
                }
            }
            Op::MulRows { x, w } => {
                let c = g.cols();
                if want(*x) {
                    let wv = nodes[w.0].value.data();
                    let dx = acc!(*x);
                    for (r, s) in wv.iter().enumerate() {
                        for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += v * s;
                        }
                    }
                }
                if want(*w) {
                    let xv = &nodes[x.0].value;
                    let dw = acc!(*w);
                    for r in 0..g.rows() {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g.get(r, j) * xv.get(r, j);
                        }
                        dw.data_mut()[r] += s;
                    }
                }
            }
            Op::SubmConv { x, w, rulebook } => {
                let (_, cin) = nodes[x.0].value.shape();
                let cout = g.cols();
                let block = cin * cout;
                if want(*x) {
                    let wv = nodes[w.0].value.data();
                    let dx = acc!(*x);
                    for (site, taps) in rulebook.iter().enumerate() {
                        let gr = g.row(site);
                        for (k, src) in taps.iter().enumerate() {
                            let Some(src) = *src else { continue };
                            matmul_bt_acc(gr, &wv[k * block..(k + 1) * block], dx.row_mut(src), 1, cin, cout);
                        }
                    }
                }
                if want(*w) {
                    let xv = nodes[x.0].value.data();
                    let dw = acc!(*w);
                    for (site, taps) in rulebook.iter().enumerate() {
                        let gr = g.row(site);
                        for (k, src) in taps.iter().enumerate() {
                            let Some(src) = *src else { continue };
                            matmul_at_acc(
                                &xv[src * cin..(src + 1) * cin],
                                gr,
                                &mut dw.data_mut()[k * block..(k + 1) * block],
                                1,
                                cin,
                                cout,
                            );
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                if want(*pred) {
                    let pv = nodes[pred.0].value.data();
                    let upstream = g.data()[0] / pv.len().max(1) as f64;
                    let dp = acc!(*pred);
                    for ((o, p), t) in dp.data_mut().iter_mut().zip(pv).zip(target) {
                        *o += upstream * smooth_l1_grad(p - t, *beta);
                    }
                }
            }
            Op::SumAll { x } => {
                if want(*x) {
                    let up = g.data()[0];
                    for o in acc!(*x).data_mut() {
                        *o += up;
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], nodes: &[Node], v: Var) -> &'a mut Matrix {
    let (r, c) = nodes[v.0].value.shape();
    grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
}

pub fn smooth_l1_elem(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

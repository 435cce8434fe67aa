use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{Gradients, ParamId, ParamStore};
use crate::decomp::{moving_average, moving_average_adjoint};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

struct LstmCache {
    /// Activated gates per step, columns `[i | f | g | o]`.
    gates: Array2<f64>,
    cells: Array2<f64>,
    tanh_cells: Array2<f64>,
}

struct ContrastiveCache {
    unit: Array2<f64>,
    norms: Array1<f64>,
    probs: Array2<f64>,
}

enum Op {
    Input,
    Param { store: u64, index: usize },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, xhat: Array2<f64>, inv_std: Array1<f64> },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    MeanRows(Var),
    Sum(Var),
    Lstm { x: Var, w_ih: Var, w_hh: Var, bias: Var, cache: LstmCache },
    Im2Col { x: Var, kernel: usize, pad_left: usize },
    MovingAverage(Var, usize),
    L1Project { x: Var, budget: f64, norm: f64 },
    Contrastive { z: Var, tau: f64, cache: ContrastiveCache },
    BceLogits { z: Var, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::StackRows(..) => "stack_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Lstm { .. } => "lstm",
            Op::Im2Col { .. } => "im2col",
            Op::MovingAverage(..) => "moving_average",
            Op::L1Project { .. } => "l1_project",
            Op::Contrastive { .. } => "contrastive_loss",
            Op::BceLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations. Build values with the op methods, then call
/// [`Graph::backward`] once on a scalar output.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Array2<f64>>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(op: &Op, value: &Array2<f64>) -> Result<()> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: op.name().to_string(),
        })
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(&op, &value)?;
        self.grads = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is tracked and readable via [`Graph::grad`].
    pub fn input_tracked(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.push(
            p.value.clone(),
            Op::Param {
                store: store.tag(),
                index: id.index(),
            },
            !p.frozen,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
        }
        let out = va.dot(vb);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", va.dim(), vb.dim())));
        }
        let out = va.dot(&vb.t());
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.dim(), vb.dim())));
        }
        let out = va + vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", va.dim(), vr.dim())));
        }
        let out = va + vr;
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", va.dim(), vb.dim())));
        }
        let out = va * vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1×C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", va.dim(), vr.dim())));
        }
        let out = va * vr;
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// Elementwise product with a constant (e.g. a channel mask).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Result<Var> {
        let va = self.value(a);
        if va.dim() != c.dim() {
            return Err(Error::shape("mul_const", format!("{:?} * {:?}", va.dim(), c.dim())));
        }
        let out = va * &c;
        let ng = self.needs(a);
        self.push(out, Op::MulConst(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a) * k;
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    /// Variance is offset by 1e-5, so constant rows map to zero.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for r in 0..rows {
            let row = va.row(r);
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            Zip::from(xhat.row_mut(r)).and(&row).for_each(|o, &v| *o = (v - mean) * inv);
        }
        let ng = self.needs(a);
        self.push(xhat.clone(), Op::LayerNorm { x: a, xhat, inv_std }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).nrows();
        if parts.iter().any(|&p| self.value(p).nrows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).map_err(|e| Error::shape("concat_cols", e.to_string()))?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("stack_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).ncols();
        if parts.iter().any(|&p| self.value(p).ncols() != cols) {
            return Err(Error::shape("stack_rows", "column counts differ"));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).map_err(|e| Error::shape("stack_rows", e.to_string()))?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::StackRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start >= end || end > va.ncols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {}", va.ncols())));
        }
        let out = va.slice(s![.., start..end]).to_owned();
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, start, end), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start >= end || end > va.nrows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {}", va.nrows())));
        }
        let out = va.slice(s![start..end, ..]).to_owned();
        let ng = self.needs(a);
        self.push(out, Op::SliceRows(a, start, end), ng)
    }

    /// Column means, as a `1×C` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.nrows() == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let out = va.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let ng = self.needs(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// LSTM over the rows of `x` (T×I) from zero state. Weights are `I×4H`
    /// and `H×4H`, bias `1×4H`, gate column order `[input, forget, cell, output]`.
    /// Returns the hidden states, T×H.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let (vx, wi, wh, vb) = (self.value(x), self.value(w_ih), self.value(w_hh), self.value(bias));
        let hidden = wh.nrows();
        if wi.nrows() != vx.ncols()
            || wi.ncols() != 4 * hidden
            || wh.ncols() != 4 * hidden
            || vb.dim() != (1, 4 * hidden)
        {
            return Err(Error::shape(
                "lstm",
                format!(
                    "x {:?}, w_ih {:?}, w_hh {:?}, bias {:?}",
                    vx.dim(),
                    wi.dim(),
                    wh.dim(),
                    vb.dim()
                ),
            ));
        }
        let steps = vx.nrows();
        let pre = vx.dot(wi) + vb;
        let mut gates = Array2::zeros((steps, 4 * hidden));
        let mut cells = Array2::zeros((steps, hidden));
        let mut tanh_cells = Array2::zeros((steps, hidden));
        let mut hs = Array2::zeros((steps, hidden));
        let mut h_prev = Array1::<f64>::zeros(hidden);
        let mut c_prev = Array1::<f64>::zeros(hidden);
        for t in 0..steps {
            let z = &pre.row(t) + &h_prev.dot(wh);
            let mut g = gates.row_mut(t);
            for j in 0..4 * hidden {
                g[j] = if (2 * hidden..3 * hidden).contains(&j) {
                    z[j].tanh()
                } else {
                    sigmoid(z[j])
                };
            }
            for j in 0..hidden {
                let (i, f, gg, o) = (g[j], g[hidden + j], g[2 * hidden + j], g[3 * hidden + j]);
                let c = f * c_prev[j] + i * gg;
                let tc = c.tanh();
                cells[[t, j]] = c;
                tanh_cells[[t, j]] = tc;
                hs[[t, j]] = o * tc;
            }
            h_prev = hs.row(t).to_owned();
            c_prev = cells.row(t).to_owned();
        }
        let ng = self.needs(x) || self.needs(w_ih) || self.needs(w_hh) || self.needs(bias);
        self.push(
            hs,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                cache: LstmCache {
                    gates,
                    cells,
                    tanh_cells,
                },
            },
            ng,
        )
    }

    /// Unfolds T×C into T×(kernel·C) zero-padded patches, `pad_left` rows of
    /// padding before the series and `kernel - 1 - pad_left` after. Column
    /// `j·C + c` of row `t` holds `x[t + j - pad_left, c]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, pad_left: usize) -> Result<Var> {
        if kernel == 0 || pad_left >= kernel {
            return Err(Error::shape("im2col", format!("kernel {kernel}, pad_left {pad_left}")));
        }
        let vx = self.value(x);
        let (steps, ch) = vx.dim();
        let mut out = Array2::zeros((steps, kernel * ch));
        for t in 0..steps {
            for j in 0..kernel {
                let src = t as isize + j as isize - pad_left as isize;
                if src >= 0 && (src as usize) < steps {
                    out.slice_mut(s![t, j * ch..(j + 1) * ch]).assign(&vx.row(src as usize));
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Im2Col { x, kernel, pad_left }, ng)
    }

    /// Centered moving average along rows with replicate padding.
    pub fn moving_average(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = moving_average(self.value(x).view(), window)?;
        let ng = self.needs(x);
        self.push(out, Op::MovingAverage(x, window), ng)
    }

    /// Radially rescales `x` onto the ℓ1 ball of radius `budget` when outside it.
    pub fn l1_project(&mut self, x: Var, budget: f64) -> Result<Var> {
        if !(budget > 0.0) {
            return Err(Error::Config(format!("l1 budget must be positive, got {budget}")));
        }
        let vx = self.value(x);
        let norm: f64 = vx.iter().map(|v| v.abs()).sum();
        let out = if norm > budget {
            vx * (budget / norm)
        } else {
            vx.clone()
        };
        let ng = self.needs(x);
        self.push(out, Op::L1Project { x, budget, norm }, ng)
    }

    /// Normalized-temperature cross-entropy over `2N` embeddings (rows),
    /// where rows `2k` and `2k+1` are a positive pair.
    pub fn contrastive_loss(&mut self, z: Var, tau: f64) -> Result<Var> {
        let (loss, cache) = contrastive_forward(self.value(z).view(), tau)?;
        let ng = self.needs(z);
        self.push(Array2::from_elem((1, 1), loss), Op::Contrastive { z, tau, cache }, ng)
    }

    /// Mean binary cross-entropy of logits `z` (B×1) against targets in {0, 1}.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let vz = self.value(z);
        if vz.ncols() != 1 || vz.nrows() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?}, {} targets", vz.dim(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let loss = vz
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let ng = self.needs(z);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::BceLogits {
                z,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if out.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called on a value not recorded in this graph".into()));
        }
        if self.value(out).dim() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).dim()
            )));
        }
        self.backward_with(out, Array2::from_elem((1, 1), 1.0))
    }

    /// Reverse pass seeded with an arbitrary output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Array2<f64>) -> Result<()> {
        if out.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called on a value not recorded in this graph".into()));
        }
        if seed.dim() != self.value(out).dim() {
            return Err(Error::shape("backward", "seed gradient shape differs from output"));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Parameter gradients for `store`, zeros where a parameter was unused or frozen.
    pub fn gradients(&self, store: &ParamStore) -> Result<Gradients> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Usage("gradients requested before backward".into()))?;
        let mut out = Gradients::zeros_like(store);
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param { store: tag, index }, Some(g)) = (&node.op, g) {
                if *tag == store.tag() && !store.get(store.id(*index)).frozen {
                    *out.slot_mut(*index) += g;
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let acc = |v: Var, delta: Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.dot(&self.value(*b).t()), grads);
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t().dot(g), grads);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.dot(self.value(*b)), grads);
                }
                if self.needs(*b) {
                    acc(*b, g.t().dot(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b), grads);
                acc(*b, g * self.value(*a), grads);
            }
            Op::MulRow(a, row) => {
                acc(*a, g * self.value(*row), grads);
                let prod = g * self.value(*a);
                acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
            }
            Op::MulConst(a, c) => acc(*a, g * c, grads),
            Op::Scale(a, k) => acc(*a, g * *k, grads),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d, grads);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d, grads);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                Zip::from(&mut d).and(x).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d, grads);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y * dot);
                }
                acc(*a, d, grads);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let cols = xhat.ncols() as f64;
                let mut d = Array2::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let sum_g = gr.sum();
                    let sum_gx = gr.dot(&xr);
                    let inv = inv_std[r];
                    Zip::from(d.row_mut(r)).and(&gr).and(&xr).for_each(|o, &gv, &xv| {
                        *o = inv * (gv - sum_g / cols - xv * sum_gx / cols);
                    });
                }
                acc(*x, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    acc(p, g.slice(s![.., start..start + w]).to_owned(), grads);
                    start += w;
                }
            }
            Op::StackRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    acc(p, g.slice(s![start..start + h, ..]).to_owned(), grads);
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d, grads);
            }
            Op::SliceRows(a, start, end) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![*start..*end, ..]).assign(g);
                acc(*a, d, grads);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).dim();
                let mut d = Array2::zeros((rows, cols));
                let row = g.row(0).mapv(|v| v / rows as f64);
                for mut r in d.rows_mut() {
                    r.assign(&row);
                }
                acc(*a, d, grads);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                acc(*a, d, grads);
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                cache,
            } => {
                let wh = self.value(*w_hh);
                let hidden = wh.nrows();
                let steps = cache.gates.nrows();
                let mut dz = Array2::<f64>::zeros((steps, 4 * hidden));
                let mut dh_next = Array1::<f64>::zeros(hidden);
                let mut dc_next = Array1::<f64>::zeros(hidden);
                for t in (0..steps).rev() {
                    let gt = cache.gates.row(t);
                    let mut dzt = dz.row_mut(t);
                    for j in 0..hidden {
                        let (i, f, gg, o) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
                        let tc = cache.tanh_cells[[t, j]];
                        let c_prev = if t > 0 { cache.cells[[t - 1, j]] } else { 0.0 };
                        let dh = g[[t, j]] + dh_next[j];
                        let d_o = dh * tc;
                        let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                        dzt[j] = dc * gg * i * (1.0 - i);
                        dzt[hidden + j] = dc * c_prev * f * (1.0 - f);
                        dzt[2 * hidden + j] = dc * i * (1.0 - gg * gg);
                        dzt[3 * hidden + j] = d_o * o * (1.0 - o);
                        dc_next[j] = dc * f;
                    }
                    dh_next = dzt.dot(&wh.t());
                }
                if self.needs(*x) {
                    acc(*x, dz.dot(&self.value(*w_ih).t()), grads);
                }
                if self.needs(*w_ih) {
                    acc(*w_ih, self.value(*x).t().dot(&dz), grads);
                }
                if self.needs(*w_hh) {
                    let hs = &node.value;
                    let mut h_prev = Array2::zeros((steps, hidden));
                    if steps > 1 {
                        h_prev.slice_mut(s![1.., ..]).assign(&hs.slice(s![..steps - 1, ..]));
                    }
                    acc(*w_hh, h_prev.t().dot(&dz), grads);
                }
                if self.needs(*bias) {
                    acc(*bias, dz.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::Im2Col { x, kernel, pad_left } => {
                let (steps, ch) = self.value(*x).dim();
                let mut d = Array2::zeros((steps, ch));
                for t in 0..steps {
                    for j in 0..*kernel {
                        let src = t as isize + j as isize - *pad_left as isize;
                        if src >= 0 && (src as usize) < steps {
                            let mut dst = d.row_mut(src as usize);
                            dst += &g.slice(s![t, j * ch..(j + 1) * ch]);
                        }
                    }
                }
                acc(*x, d, grads);
            }
            Op::MovingAverage(x, window) => acc(*x, moving_average_adjoint(g.view(), *window), grads),
            Op::L1Project { x, budget, norm } => {
                if norm <= budget {
                    acc(*x, g.clone(), grads);
                } else {
                    let vx = self.value(*x);
                    let k = budget / norm;
                    let dot: f64 = (g * vx).sum();
                    let corr = budget * dot / (norm * norm);
                    let mut d = g * k;
                    Zip::from(&mut d).and(vx).for_each(|d, &v| *d -= corr * sign(v));
                    acc(*x, d, grads);
                }
            }
            Op::Contrastive { z, tau, cache } => {
                acc(*z, contrastive_backward(cache, *tau, g[[0, 0]]), grads);
            }
            Op::BceLogits { z, targets } => {
                let n = targets.len() as f64;
                let vz = self.value(*z);
                let mut d = Array2::zeros(vz.dim());
                for (r, &y) in targets.iter().enumerate() {
                    d[[r, 0]] = g[[0, 0]] * (sigmoid(vz[[r, 0]]) - y) / n;
                }
                acc(*z, d, grads);
            }
        }
        Ok(())
    }
}

/// Forward pass of the paired contrastive loss, shared by the graph op and
/// the standalone loss function.
fn contrastive_forward(z: ArrayView2<'_, f64>, tau: f64) -> Result<(f64, ContrastiveCache)> {
    let n2 = z.nrows();
    if n2 < 2 || n2 % 2 != 0 {
        return Err(Error::shape(
            "contrastive_loss",
            format!("need an even number (≥ 2) of embeddings, got {n2}"),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut unit = z.to_owned();
    let mut norms = Array1::zeros(n2);
    for (r, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) {
            return Err(Error::InsufficientData(format!(
                "embedding {r} has zero norm; cosine similarity is undefined"
            )));
        }
        norms[r] = norm;
        row.mapv_inplace(|v| v / norm);
    }
    let sim = unit.dot(&unit.t()) / tau;
    let mut probs = Array2::zeros((n2, n2));
    let mut total = 0.0;
    for i in 0..n2 {
        let partner = i ^ 1;
        let max = (0..n2)
            .filter(|&k| k != i)
            .map(|k| sim[[i, k]])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n2).filter(|&k| k != i).map(|k| (sim[[i, k]] - max).exp()).sum();
        for k in (0..n2).filter(|&k| k != i) {
            probs[[i, k]] = (sim[[i, k]] - max).exp() / denom;
        }
        total += -(sim[[i, partner]] - max - denom.ln());
    }
    Ok((total / n2 as f64, ContrastiveCache { unit, norms, probs }))
}

fn contrastive_backward(cache: &ContrastiveCache, tau: f64, upstream: f64) -> Array2<f64> {
    let n2 = cache.unit.nrows();
    // dL/dS[i,k] = (P[i,k] - 1[k = partner(i)]) / 2N
    let mut ds = cache.probs.clone();
    for i in 0..n2 {
        ds[[i, i ^ 1]] -= 1.0;
    }
    ds.mapv_inplace(|v| v * upstream / n2 as f64);
    // S = U Uᵀ / τ  =>  dU = (dS + dSᵀ) U / τ
    let sym = &ds + &ds.t();
    let du = sym.dot(&cache.unit) / tau;
    let mut dz = Array2::zeros(du.dim());
    for r in 0..n2 {
        let u = cache.unit.row(r);
        let g = du.row(r);
        let proj = u.dot(&g);
        Zip::from(dz.row_mut(r))
            .and(&g)
            .and(&u)
            .for_each(|o, &gv, &uv| *o = (gv - uv * proj) / cache.norms[r]);
    }
    dz
}

/// Paired contrastive loss over `2N` embeddings without recording a graph.
pub(crate) fn contrastive_loss_value(z: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    contrastive_forward(z, tau).map(|(loss, _)| loss)
}

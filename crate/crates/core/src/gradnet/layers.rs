//! The closed set of layer kinds models are assembled from.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Serializable description of one layer; checkpoints carry the list of
/// these so a mismatched architecture is caught on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    RecurrentCell { input: usize, hidden: usize },
    SelfAttentionBlock { width: usize, heads: usize, ff_width: usize },
    Conv1d { input: usize, output: usize, kernel: usize },
    LayerNorm { width: usize },
    Activation { function: Activation },
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.uniform_range(-bound, bound))
}

fn expect_cols(g: &Graph, x: Var, cols: usize, layer: &'static str) -> Result<()> {
    let got = g.shape(x).1;
    if got != cols {
        return Err(Error::shape(layer, format!("expected {cols} input columns, got {got}")));
    }
    Ok(())
}

/// Affine map `x·W + b` applied to every row.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    input: usize,
    output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(input, output, bound, rng));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, output)));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        expect_cols(g, x, self.input, "dense")?;
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Dense {
            input: self.input,
            output: self.output,
        }
    }

    pub fn output(&self) -> usize {
        self.output
    }

    /// Sets weights and bias to zero, making the layer output identically zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).value.fill(0.0);
        store.get_mut(self.bias).value.fill(0.0);
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, width))),
            shift: store.add(format!("{name}.shift"), Array2::zeros((1, width))),
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        expect_cols(g, x, self.width, "layer_norm")?;
        let n = g.layer_norm(x)?;
        let gain = g.param(store, self.gain)?;
        let shift = g.param(store, self.shift)?;
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::LayerNorm { width: self.width }
    }
}

/// Standard LSTM cell unrolled over the time axis from zero state.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    input: usize,
    hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), uniform(input, 4 * hidden, bound, rng));
        let w_hh = store.add(format!("{name}.w_hh"), uniform(hidden, 4 * hidden, bound, rng));
        let mut b = Array2::zeros((1, 4 * hidden));
        // forget gate starts open
        b.slice_mut(ndarray::s![0, hidden..2 * hidden]).fill(1.0);
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        expect_cols(g, x, self.input, "lstm")?;
        let wi = g.param(store, self.w_ih)?;
        let wh = g.param(store, self.w_hh)?;
        let b = g.param(store, self.bias)?;
        g.lstm(x, wi, wh, b)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::RecurrentCell {
            input: self.input,
            hidden: self.hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// 1-D convolution over time with "same" zero padding (the extra pad row of
/// an even kernel goes after the series).
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `(kernel·input) × output`, rows ordered tap-major.
    pub weight: ParamId,
    pub bias: ParamId,
    input: usize,
    output: usize,
    kernel: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (kernel * input) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(kernel * input, output, bound, rng));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, output)));
        Self {
            weight,
            bias,
            input,
            output,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        expect_cols(g, x, self.input, "conv1d")?;
        let cols = g.im2col(x, self.kernel, (self.kernel - 1) / 2)?;
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(cols, w)?;
        g.add_row(y, b)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv1d {
            input: self.input,
            output: self.output,
            kernel: self.kernel,
        }
    }
}

/// Pre-norm transformer encoder block:
/// `x + attn(ln(x))`, then `+ ff(ln(·))` with a ReLU feed-forward.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    norm_attn: LayerNorm,
    query: Dense,
    key: Dense,
    value: Dense,
    out: Dense,
    norm_ff: LayerNorm,
    ff_in: Dense,
    ff_out: Dense,
    width: usize,
    heads: usize,
    ff_width: usize,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), width),
            query: Dense::new(store, &format!("{name}.q"), width, width, rng),
            key: Dense::new(store, &format!("{name}.k"), width, width, rng),
            value: Dense::new(store, &format!("{name}.v"), width, width, rng),
            out: Dense::new(store, &format!("{name}.o"), width, width, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff_in: Dense::new(store, &format!("{name}.ff1"), width, ff_width, rng),
            ff_out: Dense::new(store, &format!("{name}.ff2"), ff_width, width, rng),
            width,
            heads,
            ff_width,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        expect_cols(g, x, self.width, "self_attention_block")?;
        let a = self.norm_attn.forward(g, store, x)?;
        let q = self.query.forward(g, store, a)?;
        let k = self.key.forward(g, store, a)?;
        let v = self.value.forward(g, store, a)?;
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let r = h * head_dim..(h + 1) * head_dim;
                (
                    g.slice_cols(q, r.start, r.end)?,
                    g.slice_cols(k, r.start, r.end)?,
                    g.slice_cols(v, r.start, r.end)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_rows(scores)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let attn = self.out.forward(g, store, merged)?;
        let x1 = g.add(x, attn)?;
        let b = self.norm_ff.forward(g, store, x1)?;
        let hid = self.ff_in.forward(g, store, b)?;
        let hid = g.relu(hid)?;
        let ff = self.ff_out.forward(g, store, hid)?;
        g.add(x1, ff)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::SelfAttentionBlock {
            width: self.width,
            heads: self.heads,
            ff_width: self.ff_width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_dense_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let d = Dense::new(&mut store, "d", 3, 3, &mut rng);
        store.get_mut(d.weight).value = Array2::eye(3);
        let mut g = Graph::new();
        let x = array![[1.0, -2.0, 0.5], [3.0, 4.0, 5.0]];
        let xv = g.input(x.clone()).unwrap();
        let y = d.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn lstm_single_step_matches_cell_formula() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let cell = Lstm::new(&mut store, "lstm", 2, 3, &mut rng);
        let x = array![[0.7, -0.3]];
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let h = cell.forward(&mut g, &store, xv).unwrap();

        let z = x.dot(&store.get(cell.w_ih).value) + &store.get(cell.bias).value;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..3 {
            let i = sig(z[[0, j]]);
            let gg = z[[0, 6 + j]].tanh();
            let o = sig(z[[0, 9 + j]]);
            let want = o * (i * gg).tanh();
            assert!((g.value(h)[[0, j]] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_with_centre_tap_only_is_pointwise() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let conv = Conv1d::new(&mut store, "c", 2, 2, 3, &mut rng);
        let mut w = Array2::zeros((6, 2));
        // tap 1 (centre) rows 2..4
        w[[2, 0]] = 1.0;
        w[[3, 1]] = 1.0;
        store.get_mut(conv.weight).value = w;
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let y = conv.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut store = ParamStore::new();
        assert!(AttentionBlock::new(&mut store, "a", 10, 3, 8, &mut Rng::new(0)).is_err());
    }
}

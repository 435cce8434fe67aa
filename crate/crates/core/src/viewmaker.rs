//! Learned views: two generators perturb the trend and seasonal parts of a
//! series, the summed perturbation is smoothed, kept off the indicator
//! channels, scaled into an ℓ1 budget and added back. The generators are
//! trained against a contrastive encoder.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::decomp::{check_window, decompose, DecompConfig};
use crate::domain::{Discharge, FeatureSchema, N_CHANNELS};
use crate::error::{Error, Result};
use crate::gradnet::layers::{Activation, AttentionBlock, Dense, Lstm};
use crate::gradnet::{
    Checkpoint, Gradients, Graph, LayerSpec, Model, Optimizer, OptimizerConfig, ParamStore, Var,
};
use crate::rng::Rng;

/// Radial scaling of `delta` onto the ℓ1 ball of radius `ε·T·d` when it lies
/// outside; unchanged otherwise.
pub fn project_l1(delta: ArrayView2<'_, f64>, epsilon: f64) -> Array2<f64> {
    let budget = epsilon * delta.len() as f64;
    let norm: f64 = delta.iter().map(|v| v.abs()).sum();
    if norm <= budget {
        delta.to_owned()
    } else {
        delta.mapv(|v| v * (budget / norm))
    }
}

/// Paired contrastive loss over `2N` embeddings; rows `2k` and `2k+1` are
/// the two views of sample `k`.
pub fn simclr_loss(embeddings: ArrayView2<'_, f64>, temperature: f64) -> Result<f64> {
    crate::gradnet::contrastive_loss_value(embeddings, temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewmakerConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Standard-normal channels concatenated before every attention block.
    pub noise_channels: usize,
    pub smoothing_window: usize,
    /// ε: the perturbation's ℓ1 norm is capped at `ε·T·d`.
    pub budget: f64,
    /// Moving-average window for the trend/seasonal split.
    pub decomp_window: usize,
}

impl Default for ViewmakerConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            blocks: 2,
            heads: 4,
            ff_width: 64,
            noise_channels: 2,
            smoothing_window: 5,
            budget: 0.1,
            decomp_window: 25,
        }
    }
}

impl ViewmakerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "viewmaker hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(Error::Config(format!("distortion budget must be positive, got {}", self.budget)));
        }
        check_window(self.smoothing_window)?;
        check_window(self.decomp_window)
    }
}

/// Recurrent positional encoding, then attention blocks each preceded by
/// noise injection, then a linear head back to the channel count.
#[derive(Debug, Clone)]
struct Generator {
    pos: Lstm,
    mix: Vec<Dense>,
    blocks: Vec<AttentionBlock>,
    head: Dense,
}

impl Generator {
    fn new(store: &mut ParamStore, name: &str, cfg: &ViewmakerConfig, rng: &mut Rng) -> Result<Self> {
        let h = cfg.hidden;
        let mut mix = Vec::new();
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            mix.push(Dense::new(store, &format!("{name}.mix{b}"), h + cfg.noise_channels, h, rng));
            blocks.push(AttentionBlock::new(store, &format!("{name}.block{b}"), h, cfg.heads, cfg.ff_width, rng)?);
        }
        Ok(Self {
            pos: Lstm::new(store, &format!("{name}.lstm"), N_CHANNELS, h, rng),
            mix,
            blocks,
            head: Dense::new(store, &format!("{name}.head"), h, N_CHANNELS, rng),
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, noise: &[Array2<f64>]) -> Result<Var> {
        let mut h = self.pos.forward(g, store, x)?;
        for ((mix, block), z) in self.mix.iter().zip(&self.blocks).zip(noise) {
            let zv = g.input(z.clone())?;
            let joined = g.concat_cols(&[h, zv])?;
            h = mix.forward(g, store, joined)?;
            h = block.forward(g, store, h)?;
        }
        self.head.forward(g, store, h)
    }

    fn specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(self.pos.spec());
        for (mix, block) in self.mix.iter().zip(&self.blocks) {
            out.push(mix.spec());
            out.push(block.spec());
        }
        out.push(self.head.spec());
    }
}

/// Noise for one view: one `T × noise_channels` matrix per attention block
/// of each generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewNoise {
    pub trend: Vec<Array2<f64>>,
    pub seasonal: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct ViewmakerModel {
    config: ViewmakerConfig,
    store: ParamStore,
    trend: Generator,
    seasonal: Generator,
}

impl ViewmakerModel {
    pub fn new(config: ViewmakerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let trend = Generator::new(&mut store, "trend", &config, rng)?;
        let seasonal = Generator::new(&mut store, "seasonal", &config, rng)?;
        Ok(Self {
            config,
            store,
            trend,
            seasonal,
        })
    }

    pub fn config(&self) -> &ViewmakerConfig {
        &self.config
    }

    /// Zeroes both output heads, making every view equal its input.
    pub fn zero_output_heads(&mut self) {
        self.trend.head.zero(&mut self.store);
        self.seasonal.head.zero(&mut self.store);
    }

    pub fn draw_noise(&self, rows: usize, rng: &mut Rng) -> ViewNoise {
        let mut draw = || -> Vec<Array2<f64>> {
            (0..self.config.blocks)
                .map(|_| Array2::from_shape_fn((rows, self.config.noise_channels), |_| rng.normal()))
                .collect()
        };
        let trend = draw();
        let seasonal = draw();
        ViewNoise { trend, seasonal }
    }

    /// Records the view computation on `g`. Gradients reach this model's
    /// parameters; `x` enters as a constant.
    pub fn view_graph(&self, g: &mut Graph, x: ArrayView2<'_, f64>, noise: &ViewNoise) -> Result<Var> {
        let (rows, cols) = x.dim();
        if cols != N_CHANNELS {
            return Err(Error::shape("make_view", format!("expected {N_CHANNELS} channels, found {cols}")));
        }
        if noise.trend.len() != self.config.blocks
            || noise.seasonal.len() != self.config.blocks
            || noise.trend.iter().chain(&noise.seasonal).any(|z| z.nrows() != rows)
        {
            return Err(Error::shape("make_view", "noise does not match the series length"));
        }
        let (trend, seasonal) = decompose(
            x,
            &DecompConfig {
                window: self.config.decomp_window,
            },
        )?;
        let xt = g.input(trend)?;
        let xs = g.input(seasonal)?;
        let dt = self.trend.forward(g, &self.store, xt, &noise.trend)?;
        let ds = self.seasonal.forward(g, &self.store, xs, &noise.seasonal)?;
        let delta = g.add(dt, ds)?;
        let delta = g.moving_average(delta, self.config.smoothing_window)?;
        let delta = g.mul_const(delta, physics_mask(rows))?;
        let delta = g.l1_project(delta, self.config.budget * (rows * cols) as f64)?;
        let base = g.input(x.to_owned())?;
        g.add(base, delta)
    }

    /// One view of `x` with fresh noise from `rng`.
    pub fn make_view(&self, x: ArrayView2<'_, f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        let noise = self.draw_noise(x.nrows(), rng);
        self.make_view_with(x, &noise)
    }

    pub fn make_view_with(&self, x: ArrayView2<'_, f64>, noise: &ViewNoise) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let v = self.view_graph(&mut g, x, noise)?;
        Ok(g.value(v).clone())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture("viewmaker", &self.config, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != "viewmaker" {
            return Err(Error::Schema(format!("expected a viewmaker checkpoint, found `{}`", ck.model)));
        }
        let mut model = Self::new(ck.config()?, &mut Rng::new(0))?;
        ck.restore(&mut model)?;
        Ok(model)
    }
}

impl Model for ViewmakerModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        self.trend.specs(&mut out);
        self.seasonal.specs(&mut out);
        out
    }
}

/// Ones on physics channels, zeros on indicator channels.
fn physics_mask(rows: usize) -> Array2<f64> {
    let schema = FeatureSchema::standard();
    Array2::from_shape_fn((rows, N_CHANNELS), |(_, c)| if schema.is_indicator(c) { 0.0 } else { 1.0 })
}

/// A view of a whole discharge, keeping its labels.
pub fn make_view(vm: &ViewmakerModel, d: &Discharge, rng: &mut Rng) -> Result<Discharge> {
    let samples = vm.make_view(d.samples.view(), rng)?;
    Ok(Discharge { samples, ..d.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub embedding: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            blocks: 1,
            heads: 4,
            ff_width: 64,
            embedding: 64,
        }
    }
}

/// Recurrent layer, attention blocks, mean over time, two-layer projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    lstm: Lstm,
    blocks: Vec<AttentionBlock>,
    proj1: Dense,
    proj2: Dense,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if config.embedding < 2 {
            return Err(Error::Config(format!("embedding width must be ≥ 2, got {}", config.embedding)));
        }
        if config.hidden == 0 || config.heads == 0 || config.hidden % config.heads != 0 {
            return Err(Error::Config(format!(
                "encoder hidden width {} must be a positive multiple of heads {}",
                config.hidden, config.heads
            )));
        }
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "enc.lstm", N_CHANNELS, config.hidden, rng);
        let blocks = (0..config.blocks)
            .map(|b| {
                AttentionBlock::new(&mut store, &format!("enc.block{b}"), config.hidden, config.heads, config.ff_width, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let proj1 = Dense::new(&mut store, "enc.proj1", config.hidden, config.hidden, rng);
        let proj2 = Dense::new(&mut store, "enc.proj2", config.hidden, config.embedding, rng);
        Ok(Self {
            config,
            store,
            lstm,
            blocks,
            proj1,
            proj2,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `T × d` series to a `1 × e` embedding.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = self.lstm.forward(g, &self.store, x)?;
        for block in &self.blocks {
            h = block.forward(g, &self.store, h)?;
        }
        let pooled = g.mean_rows(h)?;
        let p = self.proj1.forward(g, &self.store, pooled)?;
        let p = Activation::Relu.apply(g, p)?;
        self.proj2.forward(g, &self.store, p)
    }

    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let xv = g.input(x.to_owned())?;
        let z = self.forward(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture("encoder", &self.config, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != "encoder" {
            return Err(Error::Schema(format!("expected an encoder checkpoint, found `{}`", ck.model)));
        }
        let mut model = Self::new(ck.config()?, &mut Rng::new(0))?;
        ck.restore(&mut model)?;
        Ok(model)
    }
}

impl Model for Encoder {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = vec![self.lstm.spec()];
        out.extend(self.blocks.iter().map(|b| b.spec()));
        out.push(self.proj1.spec());
        out.push(LayerSpec::Activation {
            function: Activation::Relu,
        });
        out.push(self.proj2.spec());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// N: each step embeds two views of N crops.
    pub batch_pairs: usize,
    /// λ: the viewmaker minimizes `-λ·L`.
    pub loss_weight: f64,
    pub temperature: f64,
    pub crop_length: usize,
    pub encoder_optimizer: OptimizerConfig,
    pub viewmaker_optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_pairs: 16,
            loss_weight: 2.5,
            temperature: 0.05339,
            crop_length: 64,
            encoder_optimizer: OptimizerConfig::adam(1e-3).with_clip_norm(5.0),
            viewmaker_optimizer: OptimizerConfig::adam(1e-3).with_clip_norm(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::Config(format!("loss weight must be non-negative, got {}", self.loss_weight)));
        }
        if self.crop_length == 0 {
            return Err(Error::Config("crop_length must be positive".into()));
        }
        self.encoder_optimizer.validate()?;
        self.viewmaker_optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// Contrastive loss seen by the encoder update.
    pub encoder_loss: f64,
    /// `-λ·L` seen by the viewmaker update.
    pub viewmaker_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,encoder_loss,viewmaker_loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:e},{:e}\n", r.step, r.encoder_loss, r.viewmaker_loss));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Which side of the adversarial game a batch loss is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Viewmaker,
}

/// A training batch: crops plus the noise for both views of each.
#[derive(Debug, Clone)]
pub struct Batch {
    pub crops: Vec<Array2<f64>>,
    pub noise: Vec<[ViewNoise; 2]>,
}

impl Batch {
    pub fn sample(corpus: &[&Discharge], vm: &ViewmakerModel, cfg: &TrainConfig, rng: &mut Rng) -> Self {
        let mut crops = Vec::with_capacity(cfg.batch_pairs);
        let mut noise = Vec::with_capacity(cfg.batch_pairs);
        for _ in 0..cfg.batch_pairs {
            let d = corpus[rng.below(corpus.len())];
            let start = rng.below(d.len() - cfg.crop_length + 1);
            crops.push(
                d.samples
                    .slice(ndarray::s![start..start + cfg.crop_length, ..])
                    .to_owned(),
            );
            noise.push([vm.draw_noise(cfg.crop_length, rng), vm.draw_noise(cfg.crop_length, rng)]);
        }
        Self { crops, noise }
    }
}

/// Contrastive loss of a batch. With `Side::Viewmaker` the views stay on the
/// graph so gradients reach the generators; with `Side::Encoder` they enter
/// as constants.
pub fn batch_loss(
    g: &mut Graph,
    vm: &ViewmakerModel,
    enc: &Encoder,
    batch: &Batch,
    temperature: f64,
    side: Side,
) -> Result<Var> {
    let mut embeddings = Vec::with_capacity(2 * batch.crops.len());
    for (crop, noise) in batch.crops.iter().zip(&batch.noise) {
        for n in noise {
            let view = match side {
                Side::Viewmaker => vm.view_graph(g, crop.view(), n)?,
                Side::Encoder => {
                    let v = vm.make_view_with(crop.view(), n)?;
                    g.input(v)?
                }
            };
            embeddings.push(enc.forward(g, view)?);
        }
    }
    let z = g.stack_rows(&embeddings)?;
    g.contrastive_loss(z, temperature)
}

/// Alternating adversarial training: each step updates the encoder to lower
/// the contrastive loss, then the viewmaker to raise it (minimizing `-λ·L`)
/// on the same crops and noise.
pub fn train_adversarial(
    vm: &mut ViewmakerModel,
    enc: &mut Encoder,
    corpus: &[Discharge],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let usable: Vec<&Discharge> = corpus.iter().filter(|d| d.len() >= cfg.crop_length).collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no discharge has at least {} steps for training crops",
            cfg.crop_length
        )));
    }
    if usable.len() < corpus.len() {
        log::warn!(
            "{} of {} discharges are shorter than the {}-step crop and are skipped",
            corpus.len() - usable.len(),
            corpus.len(),
            cfg.crop_length
        );
    }
    let mut enc_opt = Optimizer::new(cfg.encoder_optimizer, enc.params())?;
    let mut vm_opt = Optimizer::new(cfg.viewmaker_optimizer, vm.params())?;
    let base = Rng::new(cfg.seed).substream("viewmaker-train");
    let mut history = TrainHistory::default();
    for step in 0..cfg.steps {
        let mut rng = base.fork(step as u64);
        let batch = Batch::sample(&usable, vm, cfg, &mut rng);
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in `{op}`"),
            },
            other => other,
        };

        let mut g = Graph::new();
        let loss = batch_loss(&mut g, vm, enc, &batch, cfg.temperature, Side::Encoder).map_err(diverged)?;
        let encoder_loss = g.value(loss)[[0, 0]];
        g.backward(loss).map_err(diverged)?;
        let grads = g.gradients(enc.params())?;
        enc_opt.step(enc.params_mut(), &grads)?;

        let mut g = Graph::new();
        let loss = batch_loss(&mut g, vm, enc, &batch, cfg.temperature, Side::Viewmaker).map_err(diverged)?;
        let objective = g.scale(loss, -cfg.loss_weight)?;
        let viewmaker_loss = g.value(objective)[[0, 0]];
        g.backward(objective).map_err(diverged)?;
        let grads: Gradients = g.gradients(vm.params())?;
        vm_opt.step(vm.params_mut(), &grads)?;

        history.rows.push(HistoryRow {
            step,
            encoder_loss,
            viewmaker_loss,
        });
        if step % 50 == 0 {
            log::debug!("step {step}: encoder loss {encoder_loss:.5}, viewmaker loss {viewmaker_loss:.5}");
        }
    }
    Ok(history)
}

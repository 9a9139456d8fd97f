//! Ensemble samplers: a windowed rejection sampler over a joint data source,
//! and a small conditional flow-matching model trained from scratch.
//!
//! The flow model regresses the velocity of the path
//! `y_t = t·y + √(1−t)·ε` with target `v* = y − ε / (2√(1−t))` and samples by
//! forward Euler from `t = 0` to `t = 1 − δ`. The network is a stack of affine
//! layers with ReLU between them, differentiated by hand.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::Ensemble;
use crate::datasets::{LabeledDataset, ResponseAxis, SyntheticKind};
use crate::error::{check_dim, Error, Result};
use crate::numerics::Rng;

/// Number of window doublings the oracle sampler attempts before giving up.
pub const MAX_WIDENINGS: u32 = 5;
/// Draws allowed per requested member before the window is widened.
const DRAWS_PER_MEMBER: usize = 1000;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GENCPFM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the oracle sampler gets fresh joint `(x, y)` draws.
#[derive(Debug, Clone)]
pub enum JointSource {
    Synthetic { kind: SyntheticKind, axis: ResponseAxis },
    /// Resamples rows with replacement.
    Empirical(LabeledDataset),
}

impl JointSource {
    pub fn covariate_dim(&self) -> usize {
        match self {
            JointSource::Synthetic { .. } => 1,
            JointSource::Empirical(d) => d.p,
        }
    }

    pub fn response_dim(&self) -> usize {
        match self {
            JointSource::Synthetic { .. } => 1,
            JointSource::Empirical(d) => d.d,
        }
    }

    /// Appends one joint draw's covariate to `x` and response to `y`.
    fn draw_into(&self, rng: &mut Rng, x: &mut Vec<f64>, y: &mut Vec<f64>) {
        match self {
            JointSource::Synthetic { kind, axis } => {
                let [a, b] = kind.draw_joint(rng);
                match axis {
                    ResponseAxis::Second => {
                        x.push(a);
                        y.push(b);
                    }
                    ResponseAxis::First => {
                        x.push(b);
                        y.push(a);
                    }
                }
            }
            JointSource::Empirical(data) => {
                let i = rng.index(data.len());
                x.extend_from_slice(data.x_row(i));
                y.extend_from_slice(data.y_row(i));
            }
        }
    }
}

/// Collects responses of joint draws whose covariate lies within `window_h`
/// (Euclidean) of `x`, doubling the window when acceptance stalls.
pub fn oracle_sample(source: &JointSource, x: &[f64], m: usize, window_h: f64, rng: &mut Rng) -> Result<Ensemble> {
    check_dim(source.covariate_dim(), x.len())?;
    if m == 0 {
        return Err(Error::InvalidParameter("ensemble size must be at least 1".into()));
    }
    if !(window_h > 0.0) {
        return Err(Error::InvalidParameter(format!("window must be positive, got {window_h}")));
    }
    if let JointSource::Empirical(d) = source {
        if d.is_empty() {
            return Err(Error::Empty("joint dataset"));
        }
    }
    let d = source.response_dim();
    let mut out = Vec::with_capacity(m * d);
    let mut xs = Vec::with_capacity(source.covariate_dim());
    let mut ys = Vec::with_capacity(d);
    let mut h = window_h;
    let mut widenings = 0;
    loop {
        let h2 = h * h;
        for _ in 0..DRAWS_PER_MEMBER * m {
            xs.clear();
            ys.clear();
            source.draw_into(rng, &mut xs, &mut ys);
            let dist2: f64 = xs.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist2 <= h2 {
                out.extend_from_slice(&ys);
                if out.len() == m * d {
                    return Ensemble::new(d, out);
                }
            }
        }
        if widenings == MAX_WIDENINGS {
            return Err(Error::SamplerStalled { collected: out.len() / d, wanted: m, window: h });
        }
        widenings += 1;
        h *= 2.0;
    }
}

/// One affine layer `z = W a + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Velocity network `v_θ(y_t, t, x)`; input layout `[y_t, t, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub layers: Vec<Dense>,
}

/// Gradients with the same layout as [`FlowModel::layers`].
pub type Gradients = Vec<Dense>;

impl FlowModel {
    /// `n_layers` affine layers of width `hidden` (ReLU between), uniform
    /// `±1/√fan_in` initialization.
    pub fn new(response_dim: usize, covariate_dim: usize, hidden: usize, n_layers: usize, rng: &mut Rng) -> Result<Self> {
        if response_dim == 0 || hidden == 0 || n_layers == 0 {
            return Err(Error::InvalidParameter("flow model needs positive dimensions and at least one layer".into()));
        }
        let input = response_dim + 1 + covariate_dim;
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(hidden).take(n_layers - 1));
        widths.push(response_dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Array2::from_shape_fn((w[1], w[0]), |_| rng.uniform_range(-bound, bound));
                let bias = Array1::from_shape_fn(w[1], |_| rng.uniform_range(-bound, bound));
                Dense { weight, bias }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn response_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn covariate_dim(&self) -> usize {
        self.input_dim() - self.response_dim() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward(&self, input: &Array2<f64>) -> Array2<f64> {
        let mut a = input.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            a = a.dot(&l.weight.t()) + &l.bias;
            if i < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        a
    }

    /// Mean over rows of `‖v_θ(input) − target‖²` and its gradient.
    pub fn loss_and_grad(&self, input: &Array2<f64>, target: &Array2<f64>) -> (f64, Gradients) {
        let n = input.nrows() as f64;
        let last = self.layers.len() - 1;
        // activations[i] feeds layer i
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut a = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.weight.t()) + &l.bias;
            activations.push(a);
            a = if i < last { z.mapv(|v| v.max(0.0)) } else { z };
        }
        let diff = &a - target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let mut delta = diff * (2.0 / n);
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let prev = &activations[i];
            let gw = delta.t().dot(prev);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weight);
                // ReLU'(z) = 1 where the stored activation is positive
                back.zip_mut_with(prev, |g, &act| {
                    if act <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
            grads.push(Dense { weight: gw, bias: gb });
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Magic, format version, layer count, `(out, in)` per layer, then each
    /// layer's weights row-major followed by its bias; little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.weight.nrows() as u32).to_le_bytes())?;
            w.write_all(&(l.weight.ncols() as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n_layers = read_u32(r)? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            shapes.push((read_u32(r)? as usize, read_u32(r)? as usize));
        }
        for w in shapes.windows(2) {
            if w[0].0 != w[1].1 {
                return Err(Error::Checkpoint("layer shapes do not chain".into()));
            }
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (out, inp) in shapes {
            let mut weight = Array2::zeros((out, inp));
            let mut bias = Array1::zeros(out);
            for v in weight.iter_mut().chain(bias.iter_mut()) {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            layers.push(Dense { weight, bias });
        }
        let model = Self { layers };
        if model.input_dim() < model.response_dim() + 1 {
            return Err(Error::Checkpoint("input layer too narrow for [y_t, t, x] layout".into()));
        }
        Ok(model)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect()
}

/// `y_t = t·y + √(1−t)·ε`.
pub fn interpolate(y: f64, eps: f64, t: f64) -> f64 {
    t * y + (1.0 - t).sqrt() * eps
}

/// `v* = y − ε / (2√(1−t))`.
pub fn target_velocity(y: f64, eps: f64, t: f64) -> f64 {
    y - eps / (2.0 * (1.0 - t).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// Times are drawn from `[0, 1 − δ]`.
    pub t_clamp_delta: f64,
    pub euler_steps: usize,
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for FmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            step_size: 1e-3,
            t_clamp_delta: 1e-3,
            euler_steps: 100,
            hidden: 128,
            layers: 5,
            seed: 0,
        }
    }
}

impl FmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.euler_steps < 1 {
            return Err(Error::InvalidParameter("euler_steps must be at least 1".into()));
        }
        if !(self.t_clamp_delta > 0.0 && self.t_clamp_delta < 0.5) {
            return Err(Error::InvalidParameter(format!("t_clamp_delta must lie in (0, 0.5), got {}", self.t_clamp_delta)));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidParameter("batch_size, hidden and layers must be positive".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidParameter("step_size must be positive".into()));
        }
        Ok(())
    }
}

/// Builds `[y_t, t, x]` inputs and `v*` targets for a batch, drawing
/// `t ~ U[0, 1−δ]` and `ε ~ N(0, I)` per sample.
pub fn fm_batch(xs: &[f64], ys: &[f64], p: usize, d: usize, delta: f64, rng: &mut Rng) -> (Array2<f64>, Array2<f64>) {
    let n = ys.len() / d;
    let mut input = Array2::zeros((n, d + 1 + p));
    let mut target = Array2::zeros((n, d));
    for i in 0..n {
        let t = rng.uniform() * (1.0 - delta);
        for j in 0..d {
            let eps = rng.normal();
            let y = ys[i * d + j];
            input[[i, j]] = interpolate(y, eps, t);
            target[[i, j]] = target_velocity(y, eps, t);
        }
        input[[i, d]] = t;
        for k in 0..p {
            input[[i, d + 1 + k]] = xs[i * p + k];
        }
    }
    (input, target)
}

/// Flow-matching loss and gradient on one batch of `(x, y)` pairs.
pub fn fm_loss_and_grad(model: &FlowModel, xs: &[f64], ys: &[f64], delta: f64, rng: &mut Rng) -> Result<(f64, Gradients)> {
    let d = model.response_dim();
    let p = model.covariate_dim();
    if ys.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if ys.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: ys.len() / d * d + d, got: ys.len() });
    }
    check_dim(ys.len() / d * p, xs.len())?;
    let (input, target) = fm_batch(xs, ys, p, d, delta, rng);
    Ok(model.loss_and_grad(&input, &target))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Trained model and the mean training loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainedFlow {
    pub model: FlowModel,
    pub epoch_losses: Vec<f64>,
}

/// Adam on the flow-matching loss with shuffled mini-batches.
pub fn fm_train(train: &LabeledDataset, cfg: &FmTrainConfig) -> Result<TrainedFlow> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut model = FlowModel::new(train.d, train.p, cfg.hidden, cfg.layers, &mut rng)?;
    let mut params = model.params_flat();
    let mut adam = Adam::new(params.len(), cfg.step_size);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk);
            let (input, target) = fm_batch(&batch.x, &batch.y, train.p, train.d, cfg.t_clamp_delta, &mut rng);
            let (loss, grads) = model.loss_and_grad(&input, &target);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            adam.update(&mut params, &flatten(&grads));
            model.set_params_flat(&params)?;
        }
        let mean = total / n as f64;
        log::debug!("flow matching epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainedFlow { model, epoch_losses })
}

/// Trajectories integrated together in one batched forward pass.
const SAMPLE_CHUNK: usize = 512;

/// `m` forward-Euler trajectories from `N(0, I)` over `[0, 1 − δ]`. Chunk `c`
/// of [`SAMPLE_CHUNK`] trajectories draws its noise from child stream `c` of a
/// fork of `rng`.
pub fn fm_sample(model: &FlowModel, x: &[f64], m: usize, euler_steps: usize, delta: f64, rng: &mut Rng) -> Result<Ensemble> {
    check_dim(model.covariate_dim(), x.len())?;
    if euler_steps < 1 {
        return Err(Error::InvalidParameter("euler_steps must be at least 1".into()));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("ensemble size must be at least 1".into()));
    }
    let d = model.response_dim();
    let base = rng.fork();
    let chunks: Vec<Vec<f64>> = (0..m.div_ceil(SAMPLE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows = SAMPLE_CHUNK.min(m - c * SAMPLE_CHUNK);
            integrate(model, x, rows, euler_steps, delta, &mut base.child(c as u64))
        })
        .collect();
    Ensemble::new(d, chunks.concat())
}

fn integrate(model: &FlowModel, x: &[f64], rows: usize, euler_steps: usize, delta: f64, rng: &mut Rng) -> Vec<f64> {
    let d = model.response_dim();
    let mut input = Array2::zeros((rows, d + 1 + x.len()));
    for i in 0..rows {
        for j in 0..d {
            input[[i, j]] = rng.normal();
        }
        for (k, xv) in x.iter().enumerate() {
            input[[i, d + 1 + k]] = *xv;
        }
    }
    let dt = (1.0 - delta) / euler_steps as f64;
    for step in 0..euler_steps {
        input.column_mut(d).fill(step as f64 * dt);
        let v = model.forward(&input);
        let mut y = input.slice_mut(s![.., 0..d]);
        y.scaled_add(dt, &v);
    }
    input.slice(s![.., 0..d]).iter().copied().collect()
}

/// Produces ensembles for covariates.
#[derive(Debug, Clone)]
pub enum Sampler {
    Oracle { source: JointSource, window_h: f64 },
    Flow { model: FlowModel, euler_steps: usize, delta: f64 },
}

impl Sampler {
    pub fn draw(&self, x: &[f64], m: usize, rng: &mut Rng) -> Result<Ensemble> {
        match self {
            Sampler::Oracle { source, window_h } => oracle_sample(source, x, m, *window_h, rng),
            Sampler::Flow { model, euler_steps, delta } => fm_sample(model, x, m, *euler_steps, *delta, rng),
        }
    }
}

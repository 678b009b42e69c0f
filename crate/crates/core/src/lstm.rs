//! Stacked LSTM sequence regressor with weight-dropped recurrences.
//!
//! Every step reads one input row and emits one output row through a linear
//! projection of the top layer's hidden state. Training is truncated BPTT
//! over windows of random length with state carried between windows,
//! DropConnect on the hidden-to-hidden matrices, locked dropout before the
//! projection, AdamW, and global gradient-norm clipping.
//!
//! Sequences in a minibatch run side by side as matrix columns.

use std::io::Read as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Role, SampleSet, Standardizer};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::series::MultiSeries;

const CHECKPOINT_FORMAT: &str = "busemu-lstm";
const CHECKPOINT_VERSION: u32 = 1;
const PARAM_ORDERING: &str =
    "per layer bottom-up: W (4H x in), U (4H x H), b (4H); then projection W (out x H), b (out); \
     matrices column-major, gate blocks ordered i, f, g, o";

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Input-to-hidden weights, gate blocks `[i; f; g; o]`.
    pub w: DMatrix<f64>,
    /// Hidden-to-hidden weights, same gate layout.
    pub u: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub output_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dim: 64,
            num_layers: 2,
            output_dim: 2,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(format!("all LSTM dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let h = self.hidden_dim;
        let mut n = 0;
        for l in 0..self.num_layers {
            let inp = if l == 0 { self.input_dim } else { h };
            n += 4 * h * (inp + h + 1);
        }
        n + self.output_dim * (h + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
    /// Output projection, `out x H`.
    pub proj_w: DMatrix<f64>,
    pub proj_b: DVector<f64>,
}

/// Per-layer DropConnect masks for the `U` matrices plus an optional locked
/// dropout mask on the top hidden state. Both hold 0/1 entries; scaling by
/// the keep probability happens when they are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMasks {
    pub weight_drop_prob: f64,
    pub recurrent: Vec<DMatrix<f64>>,
    pub output_dropout_prob: f64,
    pub output: Option<DVector<f64>>,
}

impl DropMasks {
    pub fn sample(arch: &Architecture, weight_drop_prob: f64, output_dropout_prob: f64, rng: &mut Rng) -> Self {
        let h = arch.hidden_dim;
        let mut bern = |p: f64, n: usize| -> Vec<f64> {
            (0..n).map(|_| if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { 1.0 }).collect()
        };
        let recurrent = (0..arch.num_layers)
            .map(|_| DMatrix::from_vec(4 * h, h, bern(weight_drop_prob, 4 * h * h)))
            .collect();
        let output = (output_dropout_prob > 0.0).then(|| DVector::from_vec(bern(output_dropout_prob, h)));
        Self {
            weight_drop_prob,
            recurrent,
            output_dropout_prob,
            output,
        }
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        let h = arch.hidden_dim;
        if !(0.0..1.0).contains(&self.weight_drop_prob) || !(0.0..1.0).contains(&self.output_dropout_prob) {
            return Err(Error::InvalidArgument("drop probabilities must lie in [0, 1)".into()));
        }
        if self.recurrent.len() != arch.num_layers
            || self.recurrent.iter().any(|m| m.shape() != (4 * h, h))
            || self.output.as_ref().is_some_and(|m| m.len() != h)
        {
            return Err(Error::Shape("drop masks do not match the model".into()));
        }
        Ok(())
    }
}

/// Recurrent state, one `H x B` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub h: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
}

impl State {
    pub fn zeros(arch: &Architecture, batch: usize) -> Self {
        let z = DMatrix::zeros(arch.hidden_dim, batch);
        Self {
            h: vec![z.clone(); arch.num_layers],
            c: vec![z; arch.num_layers],
        }
    }
}

struct StepCache {
    x: DMatrix<f64>,
    h_prev: DMatrix<f64>,
    c_prev: DMatrix<f64>,
    i: DMatrix<f64>,
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    o: DMatrix<f64>,
    tc: DMatrix<f64>,
}

struct WindowCache {
    steps: Vec<Vec<StepCache>>,
    top: Vec<DMatrix<f64>>,
}

/// Effective weights for one pass: masked `U` and the output keep scale.
struct Effective {
    u: Vec<DMatrix<f64>>,
    out: Option<DVector<f64>>,
}

impl LstmModel {
    /// Zero-initialized model.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let h = arch.hidden_dim;
        let layers = (0..arch.num_layers)
            .map(|l| Layer {
                w: DMatrix::zeros(4 * h, if l == 0 { arch.input_dim } else { h }),
                u: DMatrix::zeros(4 * h, h),
                b: DVector::zeros(4 * h),
            })
            .collect();
        Ok(Self {
            arch,
            layers,
            proj_w: DMatrix::zeros(arch.output_dim, h),
            proj_b: DVector::zeros(arch.output_dim),
        })
    }

    /// Weights uniform in `±1/sqrt(H)`, biases zero except the forget gate at 1.
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let h = arch.hidden_dim;
        let a = 1.0 / (h as f64).sqrt();
        for layer in &mut m.layers {
            layer.w.apply(|v| *v = rng.random_range(-a..a));
            layer.u.apply(|v| *v = rng.random_range(-a..a));
            layer.b.rows_mut(h, h).fill(1.0);
        }
        m.proj_w.apply(|v| *v = rng.random_range(-a..a));
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params()
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            t.push(l.w.as_slice());
            t.push(l.u.as_slice());
            t.push(l.b.as_slice());
        }
        t.push(self.proj_w.as_slice());
        t.push(self.proj_b.as_slice());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            t.push(l.w.as_mut_slice());
            t.push(l.u.as_mut_slice());
            t.push(l.b.as_mut_slice());
        }
        t.push(self.proj_w.as_mut_slice());
        t.push(self.proj_b.as_mut_slice());
        t
    }

    /// Whether each tensor (in [`tensors`](Self::tensors) order) takes weight decay.
    fn decayed(&self) -> Vec<bool> {
        let mut d = Vec::new();
        for _ in &self.layers {
            d.extend([true, true, false]);
        }
        d.extend([true, false]);
        d
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::Shape(format!("{} values for {} parameters", values.len(), self.n_params())));
        }
        let mut k = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[k..k + n]);
            k += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn effective(&self, masks: Option<&DropMasks>) -> Result<Effective> {
        let Some(m) = masks else {
            return Ok(Effective {
                u: self.layers.iter().map(|l| l.u.clone()).collect(),
                out: None,
            });
        };
        m.check(&self.arch)?;
        let keep = 1.0 / (1.0 - m.weight_drop_prob);
        let u = self
            .layers
            .iter()
            .zip(&m.recurrent)
            .map(|(l, mask)| l.u.component_mul(mask) * keep)
            .collect();
        let out = m.output.as_ref().map(|o| o / (1.0 - m.output_dropout_prob));
        Ok(Effective { u, out })
    }

    fn forward_window(
        &self,
        eff: &Effective,
        xs: &[DMatrix<f64>],
        mut state: State,
        keep_cache: bool,
    ) -> (Vec<DMatrix<f64>>, Option<WindowCache>, State) {
        let hd = self.arch.hidden_dim;
        let batch = xs.first().map_or(0, DMatrix::ncols);
        let mut ys = Vec::with_capacity(xs.len());
        let mut cache = keep_cache.then(|| WindowCache {
            steps: Vec::with_capacity(xs.len()),
            top: Vec::with_capacity(xs.len()),
        });
        let mut pre = DMatrix::zeros(4 * hd, batch);
        for x in xs {
            let mut input = x.clone();
            let mut step = Vec::new();
            for (l, layer) in self.layers.iter().enumerate() {
                for j in 0..batch {
                    pre.column_mut(j).copy_from(&layer.b);
                }
                pre.gemm(1.0, &layer.w, &input, 1.0);
                pre.gemm(1.0, &eff.u[l], &state.h[l], 1.0);
                let i = pre.rows(0, hd).map(sigmoid);
                let f = pre.rows(hd, hd).map(sigmoid);
                let g = pre.rows(2 * hd, hd).map(f64::tanh);
                let o = pre.rows(3 * hd, hd).map(sigmoid);
                let c = f.component_mul(&state.c[l]) + i.component_mul(&g);
                let tc = c.map(f64::tanh);
                let h = o.component_mul(&tc);
                let h_prev = std::mem::replace(&mut state.h[l], h.clone());
                let c_prev = std::mem::replace(&mut state.c[l], c);
                if keep_cache {
                    step.push(StepCache {
                        x: input,
                        h_prev,
                        c_prev,
                        i,
                        f,
                        g,
                        o,
                        tc,
                    });
                }
                input = h;
            }
            if let Some(m) = &eff.out {
                for mut col in input.column_iter_mut() {
                    col.component_mul_assign(m);
                }
            }
            let mut y = &self.proj_w * &input;
            for mut col in y.column_iter_mut() {
                col += &self.proj_b;
            }
            ys.push(y);
            if let Some(c) = cache.as_mut() {
                c.steps.push(step);
                c.top.push(input);
            }
        }
        (ys, cache, state)
    }

    /// Gradients of the loss given `dys[t] = dL/dy_t`; recurrent state at the
    /// window start is treated as a constant.
    fn backward_window(&self, eff: &Effective, masks: Option<&DropMasks>, cache: &WindowCache, dys: &[DMatrix<f64>]) -> LstmModel {
        let hd = self.arch.hidden_dim;
        let nl = self.arch.num_layers;
        let batch = dys.first().map_or(0, DMatrix::ncols);
        let mut grad = LstmModel::zeros(self.arch).expect("validated architecture");
        let mut du_eff: Vec<DMatrix<f64>> = vec![DMatrix::zeros(4 * hd, hd); nl];
        let mut dh_next = vec![DMatrix::zeros(hd, batch); nl];
        let mut dc_next = vec![DMatrix::zeros(hd, batch); nl];
        let mut dpre = DMatrix::zeros(4 * hd, batch);
        for t in (0..dys.len()).rev() {
            let dy = &dys[t];
            grad.proj_w.gemm(1.0, dy, &cache.top[t].transpose(), 1.0);
            grad.proj_b += dy.column_sum();
            let mut dh_above = self.proj_w.tr_mul(dy);
            if let Some(m) = &eff.out {
                for mut col in dh_above.column_iter_mut() {
                    col.component_mul_assign(m);
                }
            }
            for l in (0..nl).rev() {
                let s = &cache.steps[t][l];
                let dh = &dh_above + &dh_next[l];
                let d_o = dh.component_mul(&s.tc).component_mul(&s.o.map(|o| o * (1.0 - o)));
                let dc = dh.component_mul(&s.o).component_mul(&s.tc.map(|v| 1.0 - v * v)) + &dc_next[l];
                let di = dc.component_mul(&s.g).component_mul(&s.i.map(|i| i * (1.0 - i)));
                let dg = dc.component_mul(&s.i).component_mul(&s.g.map(|g| 1.0 - g * g));
                let df = dc.component_mul(&s.c_prev).component_mul(&s.f.map(|f| f * (1.0 - f)));
                dc_next[l] = dc.component_mul(&s.f);
                dpre.rows_mut(0, hd).copy_from(&di);
                dpre.rows_mut(hd, hd).copy_from(&df);
                dpre.rows_mut(2 * hd, hd).copy_from(&dg);
                dpre.rows_mut(3 * hd, hd).copy_from(&d_o);
                let gl = &mut grad.layers[l];
                gl.w.gemm(1.0, &dpre, &s.x.transpose(), 1.0);
                du_eff[l].gemm(1.0, &dpre, &s.h_prev.transpose(), 1.0);
                gl.b += dpre.column_sum();
                dh_next[l] = eff.u[l].tr_mul(&dpre);
                if l > 0 {
                    dh_above = self.layers[l].w.tr_mul(&dpre);
                }
            }
        }
        for (l, du) in du_eff.into_iter().enumerate() {
            grad.layers[l].u = match masks {
                Some(m) => du.component_mul(&m.recurrent[l]) / (1.0 - m.weight_drop_prob),
                None => du,
            };
        }
        grad
    }

    fn check_inputs(&self, inputs: &MultiSeries) -> Result<()> {
        if inputs.n_channels() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "model reads {} input channels, got {}",
                self.arch.input_dim,
                inputs.n_channels()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    /// Runs one sequence from zero state. Output channels are labelled `y0..`.
    pub fn forward(&self, inputs: &MultiSeries, masks: Option<&DropMasks>) -> Result<MultiSeries> {
        self.check_inputs(inputs)?;
        let eff = self.effective(masks)?;
        let xs = columns(&[inputs]);
        let (ys, _, _) = self.forward_window(&eff, &xs, State::zeros(&self.arch, 1), false);
        let labels = (0..self.arch.output_dim).map(|k| format!("y{k}")).collect();
        let rows: Vec<Vec<f64>> = ys.iter().map(|y| y.column(0).iter().copied().collect()).collect();
        MultiSeries::from_rows(inputs.sample_rate(), labels, &rows)
    }

    /// Mean squared error over steps and channels with its exact gradient.
    pub fn backward(&self, inputs: &MultiSeries, targets: &MultiSeries, masks: Option<&DropMasks>) -> Result<(f64, LstmModel)> {
        self.check_inputs(inputs)?;
        if targets.n_channels() != self.arch.output_dim || targets.len() != inputs.len() {
            return Err(Error::Shape("targets do not match inputs and model outputs".into()));
        }
        let eff = self.effective(masks)?;
        let xs = columns(&[inputs]);
        let ts = columns(&[targets]);
        let (ys, cache, _) = self.forward_window(&eff, &xs, State::zeros(&self.arch, 1), true);
        let (loss, dys) = mse_and_grad(&ys, &ts);
        Ok((loss, self.backward_window(&eff, masks, &cache.unwrap(), &dys)))
    }

    /// Mean squared error of clean forwards over a whole sample set.
    pub fn evaluate_mse(&self, set: &SampleSet) -> Result<f64> {
        let eff = self.effective(None)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for traj in set.iter() {
            self.check_inputs(&traj.inputs)?;
            let xs = columns(&[&traj.inputs]);
            let ts = columns(&[&traj.outputs]);
            let (ys, _, _) = self.forward_window(&eff, &xs, State::zeros(&self.arch, 1), false);
            for (y, t) in ys.iter().zip(&ts) {
                sum += (y - t).norm_squared();
                count += y.len();
            }
        }
        Ok(sum / count as f64)
    }
}

/// Time-major `channels x batch` matrices from equal-length series.
fn columns(series: &[&MultiSeries]) -> Vec<DMatrix<f64>> {
    let len = series.iter().map(|s| s.len()).min().unwrap_or(0);
    let ch = series.first().map_or(0, |s| s.n_channels());
    (0..len)
        .map(|t| DMatrix::from_fn(ch, series.len(), |c, j| series[j].channel_at(c)[t]))
        .collect()
}

fn mse_and_grad(ys: &[DMatrix<f64>], ts: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>) {
    let n: usize = ys.iter().map(DMatrix::len).sum();
    let scale = 2.0 / n as f64;
    let mut loss = 0.0;
    let dys = ys
        .iter()
        .zip(ts)
        .map(|(y, t)| {
            let e = y - t;
            loss += e.norm_squared();
            e * scale
        })
        .collect();
    (loss / n as f64, dys)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weight_drop_prob: f64,
    pub output_dropout_prob: f64,
    pub weight_decay: f64,
    pub base_window_len: usize,
    pub window_len_jitter: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    /// Learning-rate multiplier used by [`fine_tune`].
    pub fine_tune_lr_scale: f64,
    /// Anneal the learning rate along a half cosine over the epochs.
    pub cosine_schedule: bool,
    /// Return the weights of the epoch with the lowest validation MSE
    /// (training MSE without a validation set) instead of the last one.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weight_drop_prob: 0.2,
            output_dropout_prob: 0.1,
            weight_decay: 1e-4,
            base_window_len: 64,
            window_len_jitter: 16,
            learning_rate: 3e-3,
            epochs: 30,
            grad_clip_norm: 1.0,
            batch_size: 20,
            fine_tune_lr_scale: 0.1,
            cosine_schedule: true,
            keep_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(0.0..1.0).contains(&self.weight_drop_prob) || !(0.0..1.0).contains(&self.output_dropout_prob) {
            return bad("drop probabilities must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.base_window_len < self.window_len_jitter + 2 {
            return bad("base_window_len - window_len_jitter must be at least 2");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.fine_tune_lr_scale > 0.0) {
            return bad("fine_tune_lr_scale must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Clean (no dropout) MSE on the training set before the first update.
    pub initial_train_mse: f64,
    pub train_mse: Vec<f64>,
    /// Empty when no validation set was supplied.
    pub valid_mse: Vec<f64>,
    pub wall_time_s: Vec<f64>,
    /// Epoch whose weights were returned.
    pub selected_epoch: Option<usize>,
}

/// AdamW with decoupled weight decay (`2 * decay * w` per unit learning rate).
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut LstmModel, grad: &[f64], lr: f64, decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let decayed = model.decayed();
        let mut k = 0;
        for (tensor, decays) in model.tensors_mut().into_iter().zip(decayed) {
            for w in tensor.iter_mut() {
                let g = grad[k];
                self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g;
                self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g * g;
                let step = (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
                let wd = if decays { 2.0 * decay * *w } else { 0.0 };
                *w -= lr * (step + wd);
                k += 1;
            }
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

fn check_layout(model: &LstmModel, set: &SampleSet) -> Result<()> {
    if set.input_dim() != model.arch.input_dim || set.output_dim() != model.arch.output_dim {
        return Err(Error::Shape(format!(
            "model maps {} -> {} channels, data has {} -> {}",
            model.arch.input_dim,
            model.arch.output_dim,
            set.input_dim(),
            set.output_dim()
        )));
    }
    Ok(())
}

/// Trains `model` on (already standardized) `train`. Deterministic in `cfg.seed`.
pub fn train(model: &LstmModel, train: &SampleSet, valid: Option<&SampleSet>, cfg: &TrainConfig) -> Result<(LstmModel, TrainReport)> {
    cfg.validate()?;
    run_training(model, train, valid, cfg, cfg.learning_rate, cfg.epochs, "train")
}

/// Continues training on `new_train` at `cfg.learning_rate * cfg.fine_tune_lr_scale`.
/// Zero epochs return the model unchanged.
pub fn fine_tune(model: &LstmModel, new_train: &SampleSet, valid: Option<&SampleSet>, cfg: &TrainConfig) -> Result<(LstmModel, TrainReport)> {
    if cfg.epochs > 0 {
        cfg.validate()?;
    }
    let lr = cfg.learning_rate * cfg.fine_tune_lr_scale;
    run_training(model, new_train, valid, cfg, lr, cfg.epochs, "fine-tune")
}

fn run_training(
    model: &LstmModel,
    train: &SampleSet,
    valid: Option<&SampleSet>,
    cfg: &TrainConfig,
    lr: f64,
    epochs: usize,
    tag: &str,
) -> Result<(LstmModel, TrainReport)> {
    check_layout(model, train)?;
    if let Some(v) = valid {
        check_layout(model, v)?;
    }
    let mut model = model.clone();
    let mut opt = AdamW::new(model.n_params());
    let mut rng = rng::stream(cfg.seed, tag, 0);
    let mut report = TrainReport {
        initial_train_mse: model.evaluate_mse(train)?,
        train_mse: Vec::with_capacity(epochs),
        valid_mse: Vec::new(),
        wall_time_s: Vec::with_capacity(epochs),
        selected_epoch: None,
    };
    let mut best: Option<(f64, LstmModel)> = None;
    let inputs: Vec<&MultiSeries> = train.iter().map(|d| &d.inputs).collect();
    let outputs: Vec<&MultiSeries> = train.iter().map(|d| &d.outputs).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (lo, hi) = (
        cfg.base_window_len - cfg.window_len_jitter,
        cfg.base_window_len + cfg.window_len_jitter,
    );
    for epoch in 0..epochs {
        let clock = Instant::now();
        let lr = if cfg.cosine_schedule {
            0.5 * lr * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
        } else {
            lr
        };
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bi: Vec<&MultiSeries> = chunk.iter().map(|&k| inputs[k]).collect();
            let bo: Vec<&MultiSeries> = chunk.iter().map(|&k| outputs[k]).collect();
            let xs = columns(&bi);
            let ts = columns(&bo);
            let mut state = State::zeros(&model.arch, chunk.len());
            let mut pos = 0;
            while pos < xs.len() {
                let w = rng.random_range(lo..=hi).min(xs.len() - pos);
                let masks = DropMasks::sample(&model.arch, cfg.weight_drop_prob, cfg.output_dropout_prob, &mut rng);
                let eff = model.effective(Some(&masks))?;
                let (ys, cache, next) = model.forward_window(&eff, &xs[pos..pos + w], state, true);
                let (loss, dys) = mse_and_grad(&ys, &ts[pos..pos + w]);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                let mut grad = model.backward_window(&eff, Some(&masks), &cache.unwrap(), &dys).flat();
                clip(&mut grad, cfg.grad_clip_norm);
                opt.step(&mut model, &grad, lr, cfg.weight_decay);
                state = next;
                pos += w;
            }
        }
        let mse = model.evaluate_mse(train)?;
        if !mse.is_finite() || !model.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        report.train_mse.push(mse);
        let score = match valid {
            Some(v) => {
                let m = model.evaluate_mse(v)?;
                report.valid_mse.push(m);
                m
            }
            None => mse,
        };
        if cfg.keep_best && best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.clone()));
            report.selected_epoch = Some(epoch);
        }
        report.wall_time_s.push(clock.elapsed().as_secs_f64());
    }
    if !cfg.keep_best && epochs > 0 {
        report.selected_epoch = Some(epochs - 1);
    }
    Ok((best.map_or(model, |(_, m)| m), report))
}

/// Checkpoint header; the weight payload follows the newline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub arch: Architecture,
    pub n_params: usize,
    pub ordering: String,
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub standardizer: Option<Standardizer>,
}

pub fn write_checkpoint(
    model: &LstmModel,
    config: Option<&TrainConfig>,
    standardizer: Option<&Standardizer>,
    out: &mut impl std::io::Write,
) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: model.arch,
        n_params: model.n_params(),
        ordering: PARAM_ORDERING.into(),
        config: config.copied(),
        seed: config.map(|c| c.seed),
        standardizer: standardizer.cloned(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for v in model.flat() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(LstmModel, CheckpointHeader)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    header.arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.n_params != header.arch.n_params() {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters, dimensions imply {}",
            header.n_params,
            header.arch.n_params()
        )));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != 8 * header.n_params {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            8 * header.n_params
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = LstmModel::zeros(header.arch)?;
    model.set_flat(&values)?;
    if !model.is_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok((model, header))
}

pub fn save_checkpoint(
    model: &LstmModel,
    config: Option<&TrainConfig>,
    standardizer: Option<&Standardizer>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, config, standardizer, &mut f)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(LstmModel, CheckpointHeader)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

/// Model plus the standardization it was trained under; maps raw inputs to
/// raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmEmulator {
    pub model: LstmModel,
    pub standardizer: Option<Standardizer>,
    pub output_labels: Vec<String>,
}

impl LstmEmulator {
    /// Fits standardization (optional) on `train` and trains a fresh model.
    pub fn fit(
        train: &SampleSet,
        valid: Option<&SampleSet>,
        arch: Architecture,
        cfg: &TrainConfig,
        standardize: bool,
    ) -> Result<(Self, TrainReport)> {
        cfg.validate()?;
        let standardizer = standardize.then(|| Standardizer::fit(train)).transpose()?;
        let mut init_rng = rng::stream(cfg.seed, "lstm-init", 0);
        let model = LstmModel::new(arch, &mut init_rng)?;
        let mut em = Self {
            model,
            standardizer,
            output_labels: train.trajectories[0].outputs.labels().to_vec(),
        };
        let (t, v) = em.prepare(train, valid)?;
        let (model, report) = self::train(&em.model, &t, v.as_ref(), cfg)?;
        em.model = model;
        Ok((em, report))
    }

    /// Fine-tunes on `new_train`, keeping the original standardization.
    pub fn fine_tune(&self, new_train: &SampleSet, valid: Option<&SampleSet>, cfg: &TrainConfig) -> Result<(Self, TrainReport)> {
        let (t, v) = self.prepare(new_train, valid)?;
        let (model, report) = self::fine_tune(&self.model, &t, v.as_ref(), cfg)?;
        Ok((
            Self {
                model,
                ..self.clone()
            },
            report,
        ))
    }

    fn prepare(&self, train: &SampleSet, valid: Option<&SampleSet>) -> Result<(SampleSet, Option<SampleSet>)> {
        let conv = |s: &SampleSet, role| -> Result<SampleSet> {
            let s = SampleSet::new(s.trajectories.clone(), role)?;
            match &self.standardizer {
                Some(st) => st.apply(&s),
                None => Ok(s),
            }
        };
        Ok((conv(train, Role::Train)?, valid.map(|v| conv(v, Role::Test)).transpose()?))
    }

    /// Raw-unit predictions for a raw-unit trajectory.
    pub fn predict(&self, raw: &Dataset) -> Result<MultiSeries> {
        let x = match &self.standardizer {
            Some(st) => st.inputs_forward(&raw.inputs)?,
            None => raw.inputs.clone(),
        };
        let z = self.model.forward(&x, None)?;
        let y = match &self.standardizer {
            Some(st) => st.outputs_inverse(&z)?,
            None => z,
        };
        MultiSeries::new(y.sample_rate(), self.output_labels.clone(), y.channels().to_vec())
    }

    pub fn save(&self, cfg: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.model, cfg, self.standardizer.as_ref(), path)
    }

    pub fn load(path: impl AsRef<Path>, output_labels: Vec<String>) -> Result<Self> {
        let (model, header) = load_checkpoint(path)?;
        Ok(Self {
            model,
            standardizer: header.standardizer,
            output_labels,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn arch(i: usize, h: usize, l: usize, o: usize) -> Architecture {
        Architecture {
            input_dim: i,
            hidden_dim: h,
            num_layers: l,
            output_dim: o,
        }
    }

    fn noise_series(seed: u64, channels: usize, len: usize) -> MultiSeries {
        let mut r = rng::stream(seed, "lstm-test", 0);
        let n = Normal::new(0.0, 1.0).unwrap();
        let data = (0..channels).map(|_| (0..len).map(|_| n.sample(&mut r)).collect()).collect();
        MultiSeries::new(10.0, (0..channels).map(|c| format!("c{c}")).collect(), data).unwrap()
    }

    fn loss_at(model: &LstmModel, x: &MultiSeries, y: &MultiSeries, masks: Option<&DropMasks>) -> f64 {
        model.backward(x, y, masks).unwrap().0
    }

    /// Largest relative deviation from central differences; relative errors
    /// are floored at 1e-4 in magnitude so near-zero entries compare absolutely.
    fn gradient_error(seed: u64, hidden: usize, layers: usize, steps: usize, masked: bool) -> f64 {
        let a = arch(2, hidden, layers, 2);
        let mut r = rng::stream(seed, "grad-check", 0);
        let mut model = LstmModel::new(a, &mut r).unwrap();
        // Non-zero biases everywhere so every gradient path is exercised.
        for l in &mut model.layers {
            l.b.apply(|v| *v += r.random_range(-0.5..0.5));
        }
        model.proj_b.apply(|v| *v = r.random_range(-0.5..0.5));
        let masks = masked.then(|| DropMasks::sample(&a, 0.3, 0.25, &mut r));
        let x = noise_series(seed, 2, steps);
        let y = noise_series(seed + 1000, 2, steps);
        let (_, grad) = model.backward(&x, &y, masks.as_ref()).unwrap();
        let analytic = grad.flat();
        let base = model.flat();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            probe.set_flat(&p).unwrap();
            let up = loss_at(&probe, &x, &y, masks.as_ref());
            p[k] -= 2.0 * h;
            probe.set_flat(&p).unwrap();
            let down = loss_at(&probe, &x, &y, masks.as_ref());
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic[k] - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert!(gradient_error(1, 4, 1, 8, false) < 1e-5);
        assert!(gradient_error(2, 4, 2, 8, false) < 1e-5);
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        assert!(gradient_error(3, 5, 2, 7, true) < 1e-5);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let m = LstmModel::zeros(arch(2, 3, 2, 2)).unwrap();
        let y = m.forward(&noise_series(4, 2, 20), None).unwrap();
        assert!(y.channels().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_hand_trace() {
        let mut m = LstmModel::zeros(arch(1, 1, 1, 1)).unwrap();
        m.layers[0].b[2] = 0.5f64.atanh();
        m.proj_w[(0, 0)] = 1.0;
        let x = MultiSeries::from_channels(10.0, vec![("x", vec![0.7])]).unwrap();
        let y = m.forward(&x, None).unwrap();
        // i = f = o = sigmoid(0) = 0.5, g = 0.5, c = 0.5 * 0.5.
        assert!((y.channel_at(0)[0] - 0.5 * (0.25f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_masks_equal_unmasked() {
        let a = arch(2, 4, 2, 2);
        let mut r = rng::from_seed(5);
        let m = LstmModel::new(a, &mut r).unwrap();
        let masks = DropMasks::sample(&a, 0.0, 0.0, &mut r);
        let x = noise_series(6, 2, 15);
        assert_eq!(m.forward(&x, Some(&masks)).unwrap(), m.forward(&x, None).unwrap());
    }

    #[test]
    fn dropconnect_is_unbiased_in_the_linear_regime() {
        // Pre-activations stay below 0.01, so the gates are near-affine and
        // the mean over masks tracks the unmasked forward.
        let a = arch(1, 3, 1, 1);
        let mut r = rng::from_seed(7);
        let mut m = LstmModel::zeros(a).unwrap();
        m.layers[0].w.apply(|v| *v = r.random_range(-0.005..0.005));
        m.layers[0].u.apply(|v| *v = r.random_range(-0.005..0.005));
        m.proj_w.fill(1.0);
        let x = MultiSeries::from_channels(10.0, vec![("x", vec![1.0])]).unwrap();
        let clean = m.forward(&x, None).unwrap().channel_at(0)[0];
        let n = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let masks = DropMasks::sample(&a, 0.5, 0.0, &mut r);
            let v = m.forward(&x, Some(&masks)).unwrap().channel_at(0)[0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
        assert!((mean - clean).abs() <= 4.0 * se + 1e-12, "{mean} vs {clean} (se {se})");
    }

    #[test]
    fn output_length_matches_input() {
        let m = LstmModel::new(arch(2, 3, 2, 2), &mut rng::from_seed(8)).unwrap();
        for len in [1, 2, 17, 64] {
            assert_eq!(m.forward(&noise_series(9, 2, len), None).unwrap().len(), len);
        }
    }

    #[test]
    fn mismatched_inputs_are_shape_errors() {
        let m = LstmModel::new(arch(2, 3, 1, 2), &mut rng::from_seed(8)).unwrap();
        assert!(matches!(m.forward(&noise_series(9, 3, 5), None), Err(Error::Shape(_))));
        let bad = DropMasks::sample(&arch(2, 4, 1, 2), 0.2, 0.0, &mut rng::from_seed(1));
        assert!(matches!(m.forward(&noise_series(9, 2, 5), Some(&bad)), Err(Error::Shape(_))));
    }

    #[test]
    fn perfect_targets_give_zero_gradient() {
        let m = LstmModel::new(arch(2, 3, 2, 2), &mut rng::from_seed(10)).unwrap();
        let x = noise_series(11, 2, 9);
        let y = m.forward(&x, None).unwrap();
        let (loss, g) = m.backward(&x, &y, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let m = LstmModel::new(arch(2, 4, 2, 2), &mut rng::from_seed(12)).unwrap();
        for l in &m.layers {
            assert!(l.b.rows(4, 4).iter().all(|&v| v == 1.0));
            assert!(l.b.rows(0, 4).iter().all(|&v| v == 0.0));
            assert!(l.w.iter().all(|v| v.abs() <= 0.5));
        }
    }

    #[test]
    fn decoupled_decay_step_with_zero_gradient() {
        let mut m = LstmModel::new(arch(1, 2, 1, 1), &mut rng::from_seed(13)).unwrap();
        let before = m.clone();
        let mut opt = AdamW::new(m.n_params());
        opt.step(&mut m, &vec![0.0; before.n_params()], 0.1, 0.5);
        let w0 = before.layers[0].u[(1, 1)];
        assert!((m.layers[0].u[(1, 1)] - (w0 - 0.1 * 2.0 * 0.5 * w0)).abs() < 1e-15);
        assert_eq!(m.layers[0].b, before.layers[0].b);
    }

    /// First-order linear plant `y_t = 0.8 y_{t-1} + 0.5 x_t`, two channels.
    fn toy_set(n: usize, seed: u64) -> SampleSet {
        let trajs = (0..n)
            .map(|k| {
                let x = noise_series(seed + k as u64, 2, 120);
                let mut y = vec![vec![0.0; 120]; 2];
                for (c, yc) in y.iter_mut().enumerate() {
                    for t in 0..120 {
                        let prev = if t > 0 { yc[t - 1] } else { 0.0 };
                        yc[t] = 0.8 * prev + 0.5 * x.channel_at(c)[t];
                    }
                }
                let out = MultiSeries::new(10.0, vec!["y0".into(), "y1".into()], y).unwrap();
                Dataset::new(x, out).unwrap()
            })
            .collect();
        SampleSet::new(trajs, Role::Train).unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            weight_drop_prob: 0.1,
            output_dropout_prob: 0.0,
            weight_decay: 1e-5,
            base_window_len: 24,
            window_len_jitter: 8,
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn toy_plant_is_learnable() {
        let set = toy_set(5, 20);
        let m = LstmModel::new(arch(2, 8, 1, 2), &mut rng::from_seed(14)).unwrap();
        let (_, report) = train(&m, &set, None, &toy_cfg()).unwrap();
        assert_eq!(report.train_mse.len(), 50);
        assert_eq!(report.wall_time_s.len(), 50);
        assert!(report.valid_mse.is_empty());
        assert!(
            *report.train_mse.last().unwrap() < 0.1 * report.initial_train_mse,
            "{} vs {}",
            report.train_mse.last().unwrap(),
            report.initial_train_mse
        );
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let set = toy_set(3, 30);
        let m = LstmModel::new(arch(2, 4, 1, 2), &mut rng::from_seed(15)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..toy_cfg()
        };
        let (trained, report) = train(&m, &set, None, &cfg).unwrap();
        assert_eq!(trained, m);
        assert!(report.train_mse.iter().all(|&v| v == report.initial_train_mse));
    }

    #[test]
    fn training_is_deterministic() {
        let set = toy_set(3, 40);
        let valid = SampleSet::new(toy_set(2, 50).trajectories, Role::Test).unwrap();
        let m = LstmModel::new(arch(2, 4, 2, 2), &mut rng::from_seed(16)).unwrap();
        let cfg = TrainConfig { epochs: 3, ..toy_cfg() };
        let (a, ra) = train(&m, &set, Some(&valid), &cfg).unwrap();
        let (b, rb) = train(&m, &set, Some(&valid), &cfg).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_eq!((ra.train_mse, ra.valid_mse), (rb.train_mse, rb.valid_mse));
    }

    #[test]
    fn fine_tune_zero_epochs_is_identity() {
        let set = toy_set(2, 60);
        let m = LstmModel::new(arch(2, 4, 1, 2), &mut rng::from_seed(17)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..toy_cfg() };
        let (tuned, report) = fine_tune(&m, &set, None, &cfg).unwrap();
        assert_eq!(tuned, m);
        assert!(report.train_mse.is_empty());
        assert!(train(&m, &set, None, &cfg).is_err());
    }

    #[test]
    fn diverging_training_is_reported() {
        let set = toy_set(2, 70);
        let mut m = LstmModel::new(arch(2, 4, 1, 2), &mut rng::from_seed(18)).unwrap();
        m.proj_b[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 2, ..toy_cfg() };
        assert!(matches!(train(&m, &set, None, &cfg), Err(Error::TrainingDiverged { epoch: 0 })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { weight_drop_prob: 1.0, ..Default::default() },
            TrainConfig { base_window_len: 10, window_len_jitter: 9, ..Default::default() },
            TrainConfig { grad_clip_norm: 0.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = LstmModel::new(arch(2, 5, 2, 2), &mut rng::from_seed(19)).unwrap();
        let cfg = TrainConfig::default();
        let mut buf = Vec::new();
        write_checkpoint(&m, Some(&cfg), None, &mut buf).unwrap();
        let (back, header) = read_checkpoint(&buf).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.config, Some(cfg));
        assert_eq!(header.n_params, m.n_params());
        buf.pop();
        assert!(matches!(read_checkpoint(&buf), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_rejects_inconsistent_dims() {
        let m = LstmModel::new(arch(2, 3, 1, 2), &mut rng::from_seed(20)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, None, None, &mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf).replace("\"hidden_dim\":3", "\"hidden_dim\":4");
        let mut forged = text.as_bytes()[..text.find('\n').unwrap() + 1].to_vec();
        forged.extend_from_slice(&buf[buf.iter().position(|&b| b == b'\n').unwrap() + 1..]);
        assert!(matches!(read_checkpoint(&forged), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn emulator_pipeline_matches_manual_standardization() {
        let set = toy_set(3, 80);
        let a = arch(2, 4, 1, 2);
        let cfg = TrainConfig { epochs: 2, ..toy_cfg() };
        let (em, _) = LstmEmulator::fit(&set, None, a, &cfg, true).unwrap();
        let st = em.standardizer.as_ref().unwrap();
        let raw = &set.trajectories[1];
        let manual = st
            .outputs_inverse(&em.model.forward(&st.inputs_forward(&raw.inputs).unwrap(), None).unwrap())
            .unwrap();
        let piped = em.predict(raw).unwrap();
        assert_eq!(piped.channels(), manual.channels());
        assert_eq!(piped.labels(), raw.outputs.labels());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        em.save(Some(&cfg), &path).unwrap();
        let back = LstmEmulator::load(&path, em.output_labels.clone()).unwrap();
        assert_eq!(back, em);
    }
}

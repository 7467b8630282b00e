//! Multi-stage L2 objective, Adam optimisation loop, checkpointing and
//! evaluation.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::data::{pad_array, random_patch, stream_rng, unpad_array, RainPair};
use crate::error::{input_err, Error, Result};
use crate::metrics::{score, ColorSpace, MetricReport};
use crate::model::{ModelConfig, SpdNet, StageOutputs};
use crate::params::ParamStore;
use crate::rcp::RgbImage;
use crate::tensor::Real;

/// Stream offsets keep batch-order and patch randomness independent.
const ORDER_STREAM: u64 = 1 << 32;
const PATCH_STREAM: u64 = 2 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: u64,
    /// Stops after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub hflip: bool,
    /// Global gradient-norm clip; `None` or `0` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every N steps (0 = only the final one).
    pub checkpoint_every: u64,
    /// Evaluate the training set every N steps (0 = never).
    pub eval_every: u64,
    pub use_ifm: Option<bool>,
    pub use_ensemble: Option<bool>,
    pub rcp_update: Option<bool>,
    pub num_wmlm: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 16,
            patch_size: 128,
            epochs: 300,
            max_steps: None,
            seed: 0,
            hflip: true,
            grad_clip: Some(10.0),
            checkpoint_every: 0,
            eval_every: 0,
            use_ifm: None,
            use_ensemble: None,
            rcp_update: None,
            num_wmlm: None,
        }
    }
}

impl TrainConfig {
    /// Applies the ablation overrides to `model`.
    pub fn apply(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if let Some(v) = self.use_ifm {
            m.use_ifm = v;
        }
        if let Some(v) = self.use_ensemble {
            m.use_ensemble = v;
        }
        if let Some(v) = self.rcp_update {
            m.rcp_update = v;
        }
        if let Some(v) = self.num_wmlm {
            m.num_wmlm = v;
        }
        m
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let m = model.spatial_multiple();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(m) {
            return Err(Error::Config(format!("patch_size {} must be a positive multiple of {m}", self.patch_size)));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::Config(format!("grad_clip must be non-negative, got {c}")));
            }
        }
        Ok(())
    }
}

/// `[model]` and `[train]` tables of a run configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate(&cfg.train.apply(&cfg.model))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Model config with the training ablation overrides applied.
    pub fn effective_model(&self) -> ModelConfig {
        self.train.apply(&self.model)
    }
}

/// Sum over stages of the per-stage mean squared error.
pub fn loss<T: Real>(outputs: &StageOutputs<T>, gt: &Array4<T>) -> Result<Var<T>> {
    let mut total: Option<Var<T>> = None;
    for pred in &outputs.predictions {
        if pred.dim() != gt.dim() {
            return input_err(format!("stage output {:?} vs ground truth {:?}", pred.dim(), gt.dim()));
        }
        let term = pred.mse(gt)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidInput("no stage outputs".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Array4<f32>>,
    pub v: Vec<Array4<f32>>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<_> = params.values().iter().map(|v| Array4::zeros(v.dim())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore<f32>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: AdamState::zeros_like(params) }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Array4<f32>]) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(t)) as f32;
        let c2 = (1.0 - self.beta2.powi(t)) as f32;
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.state.m).zip(&mut self.state.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array4<f32>], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if max > 0.0 && norm > max {
            let k = (max / (norm + 1e-6)) as f32;
            for g in grads.iter_mut() {
                g.mapv_inplace(|v| v * k);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
    pub wall_time: f64,
}

impl LogEntry {
    pub fn csv_line(&self) -> String {
        format!("{},{:e},{:e},{:.3}", self.step, self.loss, self.lr, self.wall_time)
    }
}

pub const LOG_HEADER: &str = "step,loss,lr,wall_time";

pub struct Batch {
    pub rainy: Array4<f32>,
    pub clean: Array4<f32>,
    pub keys: Vec<String>,
}

pub struct Trainer {
    pub net: SpdNet,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    /// Fresh weights seeded from `train.seed`; ablation overrides applied.
    pub fn new(model: &ModelConfig, train: TrainConfig) -> Result<Self> {
        let model = train.apply(model);
        train.validate(&model)?;
        let (net, params) = SpdNet::new::<f32>(model, train.seed)?;
        let adam = Adam::new(train.lr, &params);
        Ok(Self { net, params, adam, config: train, step: 0 })
    }

    /// Continues from a checkpoint; the stored architecture wins and the
    /// optimizer state is restored when present.
    pub fn resume(ck: Checkpoint, train: TrainConfig) -> Result<Self> {
        let net = ck.network()?;
        train.validate(net.config())?;
        let mut adam = Adam::new(train.lr, &ck.params);
        if let Some(state) = ck.optimizer {
            adam.state = state;
        }
        Ok(Self { net, params: ck.params, adam, config: train, step: ck.step })
    }

    pub fn checkpoint(&self, steps_per_epoch: u64) -> Checkpoint {
        Checkpoint {
            model: self.net.config().clone(),
            params: self.params.clone(),
            optimizer: Some(self.adam.state.clone()),
            train: Some(self.config.clone()),
            step: self.step,
            epoch: self.step / steps_per_epoch.max(1),
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.config.batch_size) as u64
    }

    /// Batch for the 0-based optimizer step `step`. Depends only on
    /// `(seed, step, dataset)`, so resumed runs see the same data.
    pub fn batch_for_step(&self, dataset: &[RainPair], step: u64) -> Result<Batch> {
        if dataset.is_empty() {
            return input_err("empty training set");
        }
        let spe = self.steps_per_epoch(dataset.len());
        let (epoch, j) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut stream_rng(self.config.seed, ORDER_STREAM + epoch));
        let b = self.config.batch_size;
        let chosen = &order[j * b..((j + 1) * b).min(order.len())];
        let mut rng = stream_rng(self.config.seed, PATCH_STREAM + step);
        let patches = chosen
            .iter()
            .map(|&i| random_patch(&dataset[i], self.config.patch_size, self.config.hflip, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let stack = |f: fn(&RainPair) -> &RgbImage| {
            let views: Vec<_> = patches.iter().map(|p| f(p).data().view()).collect();
            concatenate(Axis(0), &views).expect("equal patch sizes")
        };
        Ok(Batch {
            rainy: stack(|p| &p.rainy),
            clean: stack(|p| &p.clean),
            keys: patches.iter().map(|p| p.key.clone()).collect(),
        })
    }

    /// One forward/backward/update; returns the loss before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f32> {
        let bound = self.params.bind(true);
        let outputs = self.net.forward(&bound, &Var::constant(batch.rainy.clone()))?;
        let objective = loss(&outputs, &batch.clean)?;
        let value = objective.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, keys: batch.keys.join(",") });
        }
        let mut grads = objective.backward()?;
        let mut grads = bound.gradients(&mut grads);
        drop(outputs);
        clip_grad_norm(&mut grads, self.config.grad_clip);
        self.adam.step(&mut self.params, &grads);
        self.step += 1;
        Ok(value)
    }

    fn total_steps(&self, dataset_len: usize) -> u64 {
        let by_epochs = self.config.epochs.saturating_mul(self.steps_per_epoch(dataset_len));
        self.config.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    /// Trains until the configured step budget is spent or `on_step` breaks.
    /// With a `run_dir`, appends `train.log`, writes periodic
    /// `step_XXXXXXX.safetensors` checkpoints, `eval.log` when evaluation is
    /// enabled, and a final `final.safetensors`.
    pub fn run(
        &mut self,
        dataset: &[RainPair],
        run_dir: Option<&Path>,
        mut on_step: impl FnMut(&Trainer, &LogEntry) -> ControlFlow<()>,
    ) -> Result<Vec<LogEntry>> {
        if dataset.is_empty() {
            return input_err("empty training set");
        }
        let spe = self.steps_per_epoch(dataset.len());
        let total = self.total_steps(dataset.len());
        let mut log_file = match run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("train.log");
                let fresh = !path.exists();
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let started = Instant::now();
        let mut log = Vec::new();
        while self.step < total {
            let batch = self.batch_for_step(dataset, self.step)?;
            let loss = match self.train_step(&batch) {
                Ok(l) => l,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let Some(dir) = run_dir {
                        let dump = format!("error: {e}\nstep: {}\nkeys: {}\n", self.step + 1, batch.keys.join("\n      "));
                        std::fs::write(dir.join(format!("nonfinite_step{}.txt", self.step + 1)), dump)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let entry = LogEntry { step: self.step, loss, lr: self.config.lr, wall_time: started.elapsed().as_secs_f64() };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", entry.csv_line())?;
            }
            log.push(entry);
            if let Some(dir) = run_dir {
                if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                    self.checkpoint(spe).save(&dir.join(format!("step_{:07}.safetensors", self.step)))?;
                }
                if self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every) {
                    let report = evaluate(&self.net, &self.params, dataset, ColorSpace::Y)?;
                    let mut f = OpenOptions::new().create(true).append(true).open(dir.join("eval.log"))?;
                    writeln!(f, "{},{:.4},{:.4}", self.step, report.mean_psnr, report.mean_ssim)?;
                }
            }
            if on_step(self, &entry).is_break() {
                break;
            }
        }
        if let Some(dir) = run_dir {
            self.checkpoint(spe).save(&dir.join("final.safetensors"))?;
        }
        Ok(log)
    }
}

/// Pads, runs every stage, then unpads and clamps each prediction.
pub fn derain(net: &SpdNet, params: &ParamStore<f32>, image: &RgbImage) -> Result<Vec<RgbImage>> {
    let (padded, record) = pad_array(image.data(), net.config().spatial_multiple());
    net.predict(params, &padded)?
        .iter()
        .map(|b| RgbImage::clamped(unpad_array(b, record)))
        .collect()
}

/// One report per stage, scoring each stage prediction against the clean
/// image of every pair.
pub fn evaluate_stages(net: &SpdNet, params: &ParamStore<f32>, dataset: &[RainPair], space: ColorSpace) -> Result<Vec<MetricReport>> {
    let stages = net.config().num_wmlm;
    let mut per_stage: Vec<BTreeMap<String, _>> = vec![BTreeMap::new(); stages];
    for pair in dataset {
        for (s, pred) in derain(net, params, &pair.rainy)?.iter().enumerate() {
            per_stage[s].insert(pair.key.clone(), score(pred, &pair.clean, space)?);
        }
    }
    Ok(per_stage.into_iter().map(|m| MetricReport::new(space, m)).collect())
}

/// Scores the final stage.
pub fn evaluate(net: &SpdNet, params: &ParamStore<f32>, dataset: &[RainPair], space: ColorSpace) -> Result<MetricReport> {
    Ok(evaluate_stages(net, params, dataset, space)?.pop().expect("at least one stage"))
}

/// Loads a checkpoint and scores it on `dataset`.
pub fn evaluate_checkpoint(path: &Path, dataset: &[RainPair], space: ColorSpace) -> Result<MetricReport> {
    let ck = Checkpoint::load(path)?;
    evaluate(&ck.network()?, &ck.params, dataset, space)
}

/// Reads `step,loss` pairs back from a `train.log`.
pub fn read_log(path: &Path) -> Result<Vec<(u64, f32)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split(',');
            let step = parts.next().and_then(|s| s.parse().ok());
            let loss = parts.next().and_then(|s| s.parse().ok());
            step.zip(loss).ok_or_else(|| Error::InvalidInput(format!("bad log line {l:?}")))
        })
        .collect()
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.safetensors"))
}

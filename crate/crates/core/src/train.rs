//! Two-stage multitask training, augmentation, the plateau scheduler and
//! the checkpoint container.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::eval::{evaluate, LENGTH_CAP};
use crate::metrics::Aggregation;
use crate::model::{Architecture, LossWeights, Model, ModelConfig};
use crate::nn::Ctx;
use crate::synth::stream_rng;
use neuroseq_autodiff::{AdamW, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub time_mask_prob: f64,
    /// Longest time mask, in downsampled encoder steps.
    pub time_mask_max_steps: usize,
    /// Upper bound on the masked share of a trial's frames.
    pub time_mask_max_fraction: f64,
    pub channel_mask_prob: f64,
    /// Most electrodes zeroed in one trial (both feature types).
    pub channel_mask_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            time_mask_prob: 0.3,
            time_mask_max_steps: 25,
            time_mask_max_fraction: 0.2,
            channel_mask_prob: 0.25,
            channel_mask_max: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub loss: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub augment: AugmentConfig,
    /// Stage 2: leading word-decoder layers kept frozen.
    pub freeze_word_layers: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Stop once the selection metric reaches this value (0 disables).
    pub target_metric: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            loss: LossWeights::default(),
            lr: 1e-3,
            weight_decay: 1e-3,
            scheduler_factor: 0.5,
            scheduler_patience: 10,
            batch_size: 4,
            accumulation: 5,
            epochs: 30,
            dropout: 0.1,
            augment: AugmentConfig::default(),
            freeze_word_layers: 0,
            grad_clip: 1.0,
            target_metric: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch size and accumulation must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0 < self.scheduler_factor && self.scheduler_factor < 1.0) {
            return Err(Error::Config("scheduler factor must lie in (0, 1)".into()));
        }
        let a = &self.augment;
        for (name, p) in [("time_mask_prob", a.time_mask_prob), ("channel_mask_prob", a.channel_mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&a.time_mask_max_fraction) {
            return Err(Error::Config("time_mask_max_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }
}

/// What [`augment`] zeroed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskRecord {
    /// Masked frame range `[start, end)`.
    pub time: Option<(usize, usize)>,
    /// Masked electrodes.
    pub channels: Vec<usize>,
}

/// Time and channel masking of one trial's `T x 2C` features, in place.
/// `stride` converts encoder steps to frames.
pub fn augment(features: &mut Tensor, cfg: &AugmentConfig, stride: usize, rng: &mut ChaCha8Rng) -> MaskRecord {
    let mut record = MaskRecord::default();
    let (frames, cols) = (features.rows(), features.cols());
    if rng.gen::<f64>() < cfg.time_mask_prob {
        let budget = (cfg.time_mask_max_fraction * frames as f64).floor() as usize / stride.max(1);
        let max_steps = cfg.time_mask_max_steps.min(budget);
        if max_steps > 0 {
            let steps = rng.gen_range(1..=max_steps);
            let len = steps * stride;
            let start = rng.gen_range(0..=frames - len);
            for r in start..start + len {
                features.row_mut(r).fill(0.0);
            }
            record.time = Some((start, start + len));
        }
    }
    if rng.gen::<f64>() < cfg.channel_mask_prob {
        let electrodes = cols / 2;
        let max = cfg.channel_mask_max.min(electrodes);
        if max > 0 {
            let n = rng.gen_range(1..=max);
            let mut chosen = sample(rng, electrodes, n).into_vec();
            chosen.sort_unstable();
            for r in 0..frames {
                let row = features.row_mut(r);
                for &e in &chosen {
                    row[e] = 0.0;
                    row[electrodes + e] = 0.0;
                }
            }
            record.channels = chosen;
        }
    }
    record
}

/// Reduce-on-plateau for a metric where lower is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
            lr,
        }
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(b) if metric >= b => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

impl From<&AdamW> for OptimizerState {
    fn from(o: &AdamW) -> Self {
        Self {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step: o.step,
        }
    }
}

impl From<&OptimizerState> for AdamW {
    fn from(s: &OptimizerState) -> Self {
        AdamW {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            weight_decay: s.weight_decay,
            step: s.step,
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NSQC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    train: TrainConfig,
    words: Vec<String>,
    epoch: usize,
    best_metric: Option<f64>,
    optimizer: OptimizerState,
    scheduler: PlateauScheduler,
    frozen: Vec<String>,
}

/// Complete training state: parameters with their optimizer moments,
/// optimizer and scheduler state, and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Word list, indexed by word id.
    pub words: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation selection metric so far.
    pub best_metric: Option<f64>,
    pub optimizer: OptimizerState,
    pub scheduler: PlateauScheduler,
    pub store: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("checkpoint truncated: need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: self.pos as u64,
            message: "tensor size overflows".into(),
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
}

impl Checkpoint {
    /// Binds a model to the stored parameters; fails if the layout asks
    /// for any parameter the checkpoint does not contain.
    pub fn model(&mut self) -> Result<Model> {
        let before = self.store.len();
        let model = Model::build(&mut self.store, &self.arch, self.train.seed)?;
        if self.store.len() != before {
            return Err(Error::Config(format!(
                "checkpoint is missing {} parameters required by its architecture",
                self.store.len() - before
            )));
        }
        Ok(model)
    }

    pub fn expect_architecture(&self, arch: &Architecture) -> Result<()> {
        if &self.arch != arch {
            return Err(Error::Config(format!(
                "checkpoint architecture differs from the requested one: stored {}, requested {}",
                serde_json::to_string(&self.arch)?,
                serde_json::to_string(arch)?
            )));
        }
        Ok(())
    }

    /// `NSQC`, version, length-prefixed JSON header, then one blob per
    /// parameter: name, shape, value, first and second moments.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            train: self.train.clone(),
            words: self.words.clone(),
            epoch: self.epoch,
            best_metric: self.best_metric,
            optimizer: self.optimizer.clone(),
            scheduler: self.scheduler.clone(),
            frozen: self
                .store
                .iter()
                .filter(|(_, p)| p.frozen)
                .map(|(_, p)| p.name.clone())
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        put_u32(&mut out, self.store.len() as u32);
        for (_, p) in self.store.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.ndim() as u32);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_tensor(&mut out, &p.value);
            put_tensor(&mut out, &p.m);
            put_tensor(&mut out, &p.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::UnsupportedContainer("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedContainer(format!("checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Parse {
            offset: at as u64,
            message: format!("checkpoint header: {e}"),
        })?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Parse {
                    offset: at as u64,
                    message: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let value = r.tensor(&shape)?;
            let m = r.tensor(&shape)?;
            let v = r.tensor(&shape)?;
            let id = store.add(name.clone(), value)?;
            let p = store.get_mut(id);
            p.m = m;
            p.v = v;
            p.frozen = header.frozen.contains(&name);
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos as u64,
                message: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Self {
            arch: header.arch,
            train: header.train,
            words: header.words,
            epoch: header.epoch,
            best_metric: header.best_metric,
            optimizer: header.optimizer,
            scheduler: header.scheduler,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub phoneme_loss: f64,
    pub mfcc_loss: f64,
    pub word_loss: f64,
    pub val_per: f64,
    pub val_wer: Option<f64>,
    pub lr: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,phoneme_loss,mfcc_loss,word_loss,val_per,val_wer,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss,
            self.phoneme_loss,
            self.mfcc_loss,
            self.word_loss,
            self.val_per,
            self.val_wer.map(|w| w.to_string()).unwrap_or_default(),
            self.lr
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(EpochMetrics::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Training and validation examples plus the word list used to print
/// word hypotheses.
pub struct TrainData<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub words: &'a [String],
}

pub struct TrainOutcome {
    /// State at the epoch with the best validation metric.
    pub best: Checkpoint,
    /// State after the last completed epoch.
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// Days that need calibration parameters, in ascending order.
pub fn days_of(examples: &[Example]) -> Vec<usize> {
    let mut d: Vec<usize> = examples.iter().map(|e| e.day).collect();
    d.sort_unstable();
    d.dedup();
    d
}

/// Sum of per-trial loss gradients scaled by `scale`, accumulated into the
/// store. Returns the summed (unscaled) per-trial losses.
pub fn accumulate_gradients(
    model: &Model,
    store: &mut ParamStore,
    examples: &[Example],
    cfg: &TrainConfig,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 4]> {
    let stride = model.arch.model.frontend.stride;
    let mut sums = [0.0; 4];
    for ex in examples {
        let mut ex = ex.clone();
        augment(&mut ex.features, &cfg.augment, stride, rng);
        let (grads, values) = {
            let mut g = Graph::with_params(store);
            let mut ctx = Ctx::train(cfg.dropout, rng);
            let losses = model.loss(&mut g, &ex, &cfg.loss, &mut ctx)?;
            let total = g.value(losses.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    message: format!("training loss is {total}"),
                    last_good: None,
                });
            }
            let root = g.scale(losses.total, scale);
            g.backward(root)?;
            (g.into_param_grads(), [total, losses.phoneme, losses.mfcc, losses.word])
        };
        for (id, grad) in grads {
            store.accumulate_grad(id, &grad);
        }
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
    }
    Ok(sums)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    stream_rng(seed, 10_000 + epoch as u64)
}

/// Mutable training state; [`Trainer::checkpoint`] captures all of it.
pub struct Trainer {
    pub model: Model,
    pub ckpt: Checkpoint,
    optimizer: AdamW,
}

impl Trainer {
    /// Continues from a checkpoint (its config decides the remaining epochs).
    pub fn resume(mut ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        let model = ckpt.model()?;
        let optimizer = AdamW::from(&ckpt.optimizer);
        Ok(Self { model, ckpt, optimizer })
    }

    /// Fresh stage-1 state.
    pub fn stage1(model_cfg: &ModelConfig, cfg: &TrainConfig, days: Vec<usize>, words: &[String]) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != 1 {
            return Err(Error::Config("stage-1 training requires stage = 1".into()));
        }
        let arch = Architecture {
            model: model_cfg.clone(),
            days,
            n_words: words.len(),
            mfcc_head: cfg.loss.mfcc != 0.0,
            word_decoder: false,
        };
        let mut store = ParamStore::new();
        Model::build(&mut store, &arch, cfg.seed)?;
        Self::resume(Checkpoint {
            arch,
            train: cfg.clone(),
            words: words.to_vec(),
            epoch: 0,
            best_metric: None,
            optimizer: OptimizerState::from(&AdamW::new(cfg.lr, cfg.weight_decay)),
            scheduler: PlateauScheduler::new(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience),
            store,
        })
    }

    /// Stage 2 from a stage-1 checkpoint: drops the MFCC head, adds the word
    /// decoder, freezes its first `freeze_word_layers` layers and starts a
    /// fresh optimizer and scheduler.
    pub fn stage2(stage1: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != 2 {
            return Err(Error::Config("stage-2 training requires stage = 2".into()));
        }
        if stage1.arch.word_decoder {
            return Err(Error::Config("stage 2 needs a stage-1 checkpoint".into()));
        }
        let mut store = stage1.store.clone();
        store.remove_with_prefix("mfcc_head.");
        for p in store.iter_mut() {
            p.m = Tensor::zeros(p.value.shape());
            p.v = Tensor::zeros(p.value.shape());
            p.grad = Tensor::zeros(p.value.shape());
            p.frozen = false;
        }
        let arch = Architecture {
            mfcc_head: false,
            word_decoder: true,
            ..stage1.arch.clone()
        };
        Model::build(&mut store, &arch, cfg.seed)?;
        if cfg.freeze_word_layers > arch.model.transformer.word_layers {
            return Err(Error::Config(format!(
                "cannot freeze {} of {} word-decoder layers",
                cfg.freeze_word_layers, arch.model.transformer.word_layers
            )));
        }
        for i in 0..cfg.freeze_word_layers {
            store.set_frozen_with_prefix(&format!("word_decoder.layer{i}."), true);
        }
        Self::resume(Checkpoint {
            arch,
            train: cfg.clone(),
            words: stage1.words.clone(),
            epoch: 0,
            best_metric: None,
            optimizer: OptimizerState::from(&AdamW::new(cfg.lr, cfg.weight_decay)),
            scheduler: PlateauScheduler::new(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience),
            store,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.ckpt.clone();
        c.optimizer = OptimizerState::from(&self.optimizer);
        c
    }

    /// Validation metric used for scheduling and model selection: PER in
    /// stage 1, WER once the word decoder exists.
    fn selection_metric(m: &EpochMetrics) -> f64 {
        m.val_wer.unwrap_or(m.val_per)
    }

    /// One pass over the training set followed by validation.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochMetrics> {
        let cfg = self.ckpt.train.clone();
        let epoch = self.ckpt.epoch;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let step_size = cfg.effective_batch();
        let mut sums = [0.0; 4];
        for chunk in order.chunks(step_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let scale = 1.0 / batch.len() as f64;
            self.ckpt.store.zero_grad();
            let s = accumulate_gradients(&self.model, &mut self.ckpt.store, &batch, &cfg, scale, &mut rng)?;
            for (a, b) in sums.iter_mut().zip(s) {
                *a += b;
            }
            if cfg.grad_clip > 0.0 {
                let norm = self.ckpt.store.grad_norm();
                if norm > cfg.grad_clip {
                    self.ckpt.store.scale_grads(cfg.grad_clip / norm);
                }
            }
            self.optimizer.step(&mut self.ckpt.store).map_err(|e| Error::NonFinite {
                message: e.to_string(),
                last_good: None,
            })?;
        }
        self.ckpt.store.zero_grad();
        let report = evaluate(&self.model, &self.ckpt.store, data.val, data.words, LENGTH_CAP)?;
        let n = data.train.len().max(1) as f64;
        let mut m = EpochMetrics {
            epoch: epoch + 1,
            loss: sums[0] / n,
            phoneme_loss: sums[1] / n,
            mfcc_loss: sums[2] / n,
            word_loss: sums[3] / n,
            val_per: report.per(Aggregation::Pooled),
            val_wer: report.wer(Aggregation::Pooled),
            lr: self.optimizer.lr,
        };
        let metric = Self::selection_metric(&m);
        self.optimizer.lr = self.ckpt.scheduler.step(metric);
        m.lr = self.optimizer.lr;
        self.ckpt.epoch = epoch + 1;
        Ok(m)
    }

    /// Runs the remaining epochs of the configured budget, keeping the
    /// best-validation checkpoint. A non-finite loss aborts with the state
    /// of the last completed epoch attached to the error.
    pub fn fit(mut self, data: &TrainData, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Data("training needs non-empty train and validation splits".into()));
        }
        let mut history = Vec::new();
        let mut best: Option<Checkpoint> = None;
        while self.ckpt.epoch < self.ckpt.train.epochs {
            let last_good = self.checkpoint();
            let m = match self.run_epoch(data) {
                Ok(m) => m,
                Err(Error::NonFinite { message, .. }) => {
                    return Err(Error::NonFinite {
                        message,
                        last_good: Some(Box::new(last_good)),
                    })
                }
                Err(e) => return Err(e),
            };
            on_epoch(&m);
            let metric = Self::selection_metric(&m);
            let improved = self.ckpt.best_metric.is_none_or(|b| metric < b);
            if improved {
                self.ckpt.best_metric = Some(metric);
            }
            let snapshot = self.checkpoint();
            if improved || best.is_none() {
                best = Some(snapshot);
            }
            history.push(m);
            let target = self.ckpt.train.target_metric;
            if target > 0.0 && metric <= target {
                break;
            }
        }
        let last = self.checkpoint();
        Ok(TrainOutcome {
            best: best.unwrap_or_else(|| last.clone()),
            last,
            history,
        })
    }
}

/// Stage-1 training from scratch; returns the best-validation checkpoint.
pub fn train_stage1(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Example],
    val: &[Example],
    words: &[String],
) -> Result<Checkpoint> {
    let trainer = Trainer::stage1(model_cfg, cfg, days_of(train), words)?;
    let data = TrainData { train, val, words };
    Ok(trainer.fit(&data, |_| {})?.best)
}

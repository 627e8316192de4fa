//! Training loop, regularizers, datasets and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod regularize;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::condconv::ExecutionStrategy;
use crate::config::ConfigMap;
use crate::error::{config_err, Error, Result};
use crate::model::{ForwardConfig, Model, Noise, ParamRole};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{load_dataset, ChannelStats, DataSource, Dataset, SyntheticSpec};
pub use optim::{Schedule, Sgd};
pub use regularize::{expert_dropout, mixup, one_hot};

/// Independent random stream `id` of a run seeded with `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_MIXUP: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Dropout keep probability on the classifier input, in [0.6, 1].
    pub keep_prob: f64,
    /// 0 disables mixup.
    pub mixup_alpha: f64,
    /// In [0, 1).
    pub expert_dropout: f64,
    pub seed: u64,
    pub strategy: ExecutionStrategy,
    pub autoaugment: bool,
    /// Keep router parameters at their initial values.
    pub freeze_routing: bool,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

/// Keys [`TrainConfig::from_config`] understands.
pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "schedule",
    "momentum",
    "weight_decay",
    "keep_prob",
    "mixup_alpha",
    "expert_dropout",
    "seed",
    "strategy",
    "autoaugment",
    "freeze_routing",
    "clip_norm",
];

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            schedule: Schedule::WarmupCosine { warmup_epochs: 1 },
            momentum: 0.9,
            weight_decay: 1e-4,
            keep_prob: 1.0,
            mixup_alpha: 0.0,
            expert_dropout: 0.0,
            seed,
            strategy: ExecutionStrategy::Auto,
            autoaugment: false,
            freeze_routing: false,
            clip_norm: Some(1.0),
        }
    }

    /// Reads the training keys of `cfg`; `seed` is required.
    pub fn from_config(cfg: &ConfigMap) -> Result<Self> {
        let seed = cfg
            .parsed::<u64>("seed")?
            .ok_or_else(|| Error::Config("`seed` is required".into()))?;
        let mut c = Self::new(seed);
        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = cfg.parsed($key)? {
                    c.$field = v;
                }
            };
        }
        take!(epochs, "epochs");
        take!(batch_size, "batch_size");
        take!(learning_rate, "learning_rate");
        take!(schedule, "schedule");
        take!(momentum, "momentum");
        take!(weight_decay, "weight_decay");
        take!(keep_prob, "keep_prob");
        take!(mixup_alpha, "mixup_alpha");
        take!(expert_dropout, "expert_dropout");
        take!(strategy, "strategy");
        if let Some(v) = cfg.bool("autoaugment")? {
            c.autoaugment = v;
        }
        if let Some(v) = cfg.bool("freeze_routing")? {
            c.freeze_routing = v;
        }
        match cfg.get("clip_norm") {
            Some("none" | "0") => c.clip_norm = None,
            Some(_) => c.clip_norm = cfg.parsed("clip_norm")?,
            None => {}
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.autoaugment {
            return Err(Error::Unimplemented("autoaugment"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("epochs and batch_size must be positive");
        }
        if !(0.6..=1.0).contains(&self.keep_prob) {
            return config_err(format!("keep_prob must be in [0.6, 1.0], got {}", self.keep_prob));
        }
        if !(0.0..1.0).contains(&self.expert_dropout) {
            return config_err(format!("expert_dropout must be in [0, 1), got {}", self.expert_dropout));
        }
        if self.mixup_alpha < 0.0 || !self.mixup_alpha.is_finite() {
            return config_err(format!("mixup_alpha must be >= 0, got {}", self.mixup_alpha));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return config_err("clip_norm must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return config_err("learning_rate must be > 0, momentum in [0, 1), weight_decay >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<EpochMetrics>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,top1\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{:.6}", r.epoch, r.split, r.loss, r.top1).unwrap();
        }
        out
    }

    /// Last recorded row of `split`.
    pub fn last(&self, split: &str) -> Option<&EpochMetrics> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Mean cross-entropy and top-1 accuracy in inference mode.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    strategy: ExecutionStrategy,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let classes = model.spec().num_classes;
    if data.num_classes != classes {
        return config_err(format!(
            "model predicts {classes} classes, dataset has {}",
            data.num_classes
        ));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut hits) = (0.0, 0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.gather(chunk)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let pass = model.forward(&mut g, xv, &mut ForwardConfig::eval(strategy))?;
        let l = g.softmax_cross_entropy(pass.logits, one_hot(&y, classes)?)?;
        loss += g.value(l).data()[0].as_f64() * chunk.len() as f64;
        hits += correct(g.value(pass.logits), &y);
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Minibatch SGD on softmax cross-entropy. Deterministic given `cfg.seed`.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, History)> {
    cfg.validate()?;
    let classes = model.spec().num_classes;
    if train_set.num_classes != classes {
        return config_err(format!(
            "model predicts {classes} classes, dataset has {}",
            train_set.num_classes
        ));
    }
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut mix_rng = stream(cfg.seed, STREAM_MIXUP);
    let mut sgd = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);

    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.gather(chunk)?;
            let targets = one_hot(&y, classes)?;
            let (x, targets) = mixup(&x, &targets, cfg.mixup_alpha, &mut mix_rng)?;

            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut fc = ForwardConfig {
                strategy: cfg.strategy,
                differentiable: true,
                noise: Some(Noise {
                    rng: &mut noise_rng,
                    keep_prob: cfg.keep_prob,
                    expert_dropout: cfg.expert_dropout,
                }),
            };
            let pass = model.forward(&mut g, xv, &mut fc)?;
            let loss_var = g.softmax_cross_entropy(pass.logits, targets)?;
            let loss = g.value(loss_var).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: batch_no,
                    detail: format!("loss is {loss}"),
                });
            }
            let grads = g.backward(loss_var)?;
            let mut flat = Vec::with_capacity(pass.params.len());
            for (p, &v) in model.params().iter().zip(&pass.params) {
                let grad = grads.wrt(v, &p.value);
                if !grad.all_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        step: batch_no,
                        detail: format!("first non-finite gradient in {}", p.name),
                    });
                }
                if cfg.freeze_routing && p.role == ParamRole::Routing {
                    flat.push(Tensor::zeros_like(&p.value));
                } else {
                    flat.push(grad);
                }
            }
            if let Some(max) = cfg.clip_norm {
                let norm = flat
                    .iter()
                    .flat_map(|g| g.data().iter())
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    let s = T::of(max / norm);
                    for g in &mut flat {
                        *g = g.scale(s);
                    }
                }
            }
            let lr = cfg.schedule.rate(cfg.learning_rate, step, total, per_epoch);
            if cfg.freeze_routing {
                let frozen: Vec<_> = model
                    .params()
                    .iter()
                    .filter(|p| p.role == ParamRole::Routing)
                    .map(|p| p.value.clone())
                    .collect();
                sgd.step(model.params_mut(), &flat, lr)?;
                let mut it = frozen.into_iter();
                for p in model.params_mut().iter_mut().filter(|p| p.role == ParamRole::Routing) {
                    p.value = it.next().expect("one frozen value per router parameter");
                }
            } else {
                sgd.step(model.params_mut(), &flat, lr)?;
            }
            step += 1;
            loss_sum += loss * chunk.len() as f64;
            hits += correct(g.value(pass.logits), &y);
        }
        history.rows.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / train_set.len() as f64,
            top1: hits as f64 / train_set.len() as f64,
        });
        if let Some(val) = val_set {
            let (loss, top1) = evaluate(&model, val, cfg.strategy, cfg.batch_size.max(64))?;
            history.rows.push(EpochMetrics {
                epoch,
                split: "val".into(),
                loss,
                top1,
            });
        }
    }
    Ok((model, history))
}

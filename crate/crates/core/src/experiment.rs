//! Toy-scale runs: train the toy CNN on synthetic blobs, sweep expert counts.

use std::fmt::Write as _;

use crate::config::ConfigMap;
use crate::cost::model_madds;
use crate::error::{config_err, Error, Result};
use crate::routing::RouterConfig;
use crate::spec::ModelSpec;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::train::{evaluate, stream, train, ChannelStats, Dataset, History, TrainConfig, STREAM_INIT};
use crate::zoo::{mobilenet_v1_spec, toy_cnn_spec, MobileNetConfig, ToyConfig, DEFAULT_BEGIN_LAYER};

/// Architecture keys understood by [`spec_from_config`].
pub const MODEL_KEYS: &[&str] = &["arch", "experts", "blocks", "channels", "begin_layer", "cc_fc", "router", "width"];

/// `none` or a block number.
pub fn parse_begin(v: &str) -> Result<Option<usize>> {
    match v {
        "none" => Ok(None),
        b => b
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("begin_layer {b:?}: {e}"))),
    }
}

/// Builds the architecture named by `arch` (`toy` or `mobilenet_v1`) for
/// images of shape `input` and `classes` outputs.
pub fn spec_from_config(cfg: &ConfigMap, input: (usize, usize, usize), classes: usize) -> Result<ModelSpec> {
    let experts = cfg.parsed("experts")?.unwrap_or(4);
    let router: RouterConfig = cfg.parsed("router")?.unwrap_or_default();
    let cc_fc = cfg.bool("cc_fc")?;
    match cfg.get("arch").unwrap_or("toy") {
        "toy" => {
            let begin = cfg.get("begin_layer").map(parse_begin).transpose()?.unwrap_or(Some(1));
            toy_cnn_spec(&ToyConfig {
                input,
                channels: cfg.parsed("channels")?.unwrap_or(16),
                blocks: cfg.parsed("blocks")?.unwrap_or(2),
                num_experts: experts,
                begin_layer: begin,
                use_cc_classifier: cc_fc.unwrap_or(begin.is_some()),
                router,
                num_classes: classes,
            })
        }
        "mobilenet_v1" => {
            if input.0 != input.1 || input.2 != 3 {
                return config_err(format!("mobilenet_v1 takes square RGB images, got {input:?}"));
            }
            let begin = cfg
                .get("begin_layer")
                .map(parse_begin)
                .transpose()?
                .unwrap_or(Some(DEFAULT_BEGIN_LAYER));
            mobilenet_v1_spec(&MobileNetConfig {
                width_multiplier: cfg.parsed("width")?.unwrap_or(1.0),
                num_experts: experts,
                begin_layer: begin,
                use_cc_classifier: cc_fc.unwrap_or(begin.is_some()),
                router,
                num_classes: classes,
                resolution: input.0,
            })
        }
        other => config_err(format!("unknown arch {other:?} (toy | mobilenet_v1)")),
    }
}

/// Seeded train/validation split, both standardized with training statistics.
pub fn prepare<T: Scalar>(data: &Dataset<T>, val_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>, ChannelStats)> {
    let (tr, va) = data.split(val_fraction, seed)?;
    let stats = tr.stats.clone();
    Ok((tr.normalized(&stats)?, va.normalized(&stats)?, stats))
}

#[derive(Clone, Debug)]
pub struct ToyRun<T> {
    pub model: Model<T>,
    pub history: History,
    pub val_top1: f64,
}

/// Builds the toy model from `toy` with parameters drawn from `cfg.seed` and trains it.
pub fn run_toy<T: Scalar>(toy: &ToyConfig, train_set: &Dataset<T>, val_set: &Dataset<T>, cfg: &TrainConfig) -> Result<ToyRun<T>> {
    let spec = toy_cnn_spec(toy)?;
    let model = Model::new(spec, &mut stream(cfg.seed, STREAM_INIT))?;
    let (model, history) = train(model, train_set, Some(val_set), cfg)?;
    let (_, val_top1) = evaluate(&model, val_set, cfg.strategy, 256)?;
    Ok(ToyRun {
        model,
        history,
        val_top1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub experts: usize,
    pub params: u64,
    pub madds: u64,
    /// Final validation accuracy per seed.
    pub accuracies: Vec<f64>,
}

impl SweepRow {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

/// Trains one toy model per `(experts, seed)` pair. Each seed fixes the
/// data split, the parameter draw and the batch order for every `n`.
pub fn sweep<T: Scalar>(
    toy: &ToyConfig,
    data: &Dataset<T>,
    val_fraction: f64,
    experts: &[usize],
    seeds: &[u64],
    base: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if experts.is_empty() || seeds.is_empty() {
        return config_err("sweep needs at least one expert count and one seed");
    }
    let splits = seeds
        .iter()
        .map(|&s| prepare(data, val_fraction, s))
        .collect::<Result<Vec<_>>>()?;
    experts
        .iter()
        .map(|&n| {
            let cfg = ToyConfig {
                num_experts: n,
                ..toy.clone()
            };
            let cost = model_madds(&toy_cnn_spec(&cfg)?, None)?;
            let accuracies = seeds
                .iter()
                .zip(&splits)
                .map(|(&seed, (tr, va, _))| {
                    let tc = TrainConfig { seed, ..base.clone() };
                    run_toy(&cfg, tr, va, &tc).map(|r| r.val_top1)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                experts: n,
                params: cost.total.params,
                madds: cost.total.madds,
                accuracies,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("experts,params,madds,mean_val_top1,per_seed_val_top1\n");
    for r in rows {
        let per: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        writeln!(
            s,
            "{},{},{},{:.4},{}",
            r.experts,
            r.params,
            r.madds,
            r.mean_accuracy(),
            per.join(";")
        )
        .unwrap();
    }
    s
}

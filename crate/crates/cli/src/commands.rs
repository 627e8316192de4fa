use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use condconv::analysis::{
    class_specificity_by_depth, collect_trace, exemplars, per_class_mean, routing_histogram, top_classes_per_expert,
};
use condconv::condconv::ExecutionStrategy;
use condconv::config::ConfigMap;
use condconv::cost::model_madds;
use condconv::experiment::{parse_begin, prepare, spec_from_config, sweep as run_sweep, sweep_csv, MODEL_KEYS};
use condconv::io::write_atomic;
use condconv::model::Model;
use condconv::routing::RouterConfig;
use condconv::svg;
use condconv::train::{
    evaluate, load_dataset, stream, train as run_train, ChannelStats, Checkpoint, DataSource, Dataset, TrainConfig,
    STREAM_INIT, TRAIN_KEYS,
};
use condconv::zoo::{mobilenet_v1_spec, toy_cnn_spec, MobileNetConfig, ToyConfig, DEFAULT_BEGIN_LAYER};

use crate::Overrides;

/// Bad invocation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const DATA_KEYS: &[&str] = &["data", "val_fraction"];
const DEFAULT_VAL_FRACTION: f64 = 0.2;

fn merged_config(file: Option<&Path>, experts: Option<&str>, o: &Overrides) -> Result<ConfigMap> {
    let mut cfg = match file {
        Some(p) => ConfigMap::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ConfigMap::default(),
    };
    let pairs: [(&str, &Option<String>); 24] = [
        ("seed", &o.seed),
        ("epochs", &o.epochs),
        ("batch_size", &o.batch_size),
        ("learning_rate", &o.learning_rate),
        ("schedule", &o.schedule),
        ("momentum", &o.momentum),
        ("weight_decay", &o.weight_decay),
        ("keep_prob", &o.keep_prob),
        ("mixup_alpha", &o.mixup_alpha),
        ("expert_dropout", &o.expert_dropout),
        ("strategy", &o.strategy),
        ("autoaugment", &o.autoaugment),
        ("freeze_routing", &o.freeze_routing),
        ("clip_norm", &o.clip_norm),
        ("arch", &o.arch),
        ("blocks", &o.blocks),
        ("channels", &o.channels),
        ("begin_layer", &o.begin_layer),
        ("cc_fc", &o.cc_fc),
        ("router", &o.router),
        ("width", &o.width),
        ("data", &o.data),
        ("val_fraction", &o.val_fraction),
        ("experts", &experts.map(str::to_string)),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, v.clone());
        }
    }
    let known: Vec<&str> = TRAIN_KEYS.iter().chain(MODEL_KEYS).chain(DATA_KEYS).copied().collect();
    cfg.reject_unknown(&known)?;
    Ok(cfg)
}

fn require_seed(cfg: &ConfigMap) -> Result<()> {
    if !cfg.contains("seed") {
        return Err(usage("--seed is required"));
    }
    Ok(())
}

fn load(data: &str) -> Result<Dataset<f32>> {
    let source: DataSource = data.parse().with_context(|| format!("data source {data:?}"))?;
    Ok(load_dataset(&source)?)
}

fn val_fraction(cfg: &ConfigMap) -> Result<f64> {
    Ok(cfg.parsed("val_fraction")?.unwrap_or(DEFAULT_VAL_FRACTION))
}

pub fn train(config: Option<&Path>, out: &Path, experts: Option<&str>, o: &Overrides) -> Result<()> {
    let cfg = merged_config(config, experts, o)?;
    let Some(data) = cfg.get("data").map(str::to_string) else {
        return Err(usage("--data is required (or `data` in the config file)"));
    };
    require_seed(&cfg)?;
    let tc = TrainConfig::from_config(&cfg)?;
    let all = load(&data)?;
    let vf = val_fraction(&cfg)?;
    let (tr, va, stats) = prepare(&all, vf, tc.seed)?;
    let spec = spec_from_config(&cfg, all.image_shape(), all.num_classes)?;
    let model: Model<f32> = Model::new(spec, &mut stream(tc.seed, STREAM_INIT))?;
    let (model, history) = run_train(model, &tr, Some(&va), &tc)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut meta = BTreeMap::new();
    meta.insert("data".to_string(), data);
    meta.insert("seed".to_string(), tc.seed.to_string());
    meta.insert("epochs".to_string(), tc.epochs.to_string());
    meta.insert("val_fraction".to_string(), vf.to_string());
    meta.insert("normalization".to_string(), stats.to_field());
    let ckpt = Checkpoint { model, meta };
    ckpt.save(&out.join("model.ckpt"))?;
    write_atomic(&out.join("metrics.csv"), history.to_csv().as_bytes())?;
    if let (Some(t), Some(v)) = (history.last("train"), history.last("val")) {
        println!(
            "epoch {}: train loss {:.4} top1 {:.4} | val loss {:.4} top1 {:.4}",
            t.epoch, t.loss, t.top1, v.loss, v.top1
        );
    }
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn load_checkpoint_and_data(checkpoint: &Path, data: &str) -> Result<(Checkpoint<f32>, Dataset<f32>)> {
    let ckpt: Checkpoint<f32> =
        Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = load(data)?;
    let classes = ckpt.model.spec().num_classes;
    if ds.num_classes != classes {
        bail!("checkpoint predicts {classes} classes but the dataset has {}", ds.num_classes);
    }
    let (h, w, c) = ckpt.model.spec().input;
    if ds.image_shape() != (h, w, c) {
        bail!("checkpoint expects {h}x{w}x{c} images, dataset has {:?}", ds.image_shape());
    }
    let stats = match ckpt.meta.get("normalization") {
        Some(f) => ChannelStats::from_field(f)?,
        None => ChannelStats::identity(c),
    };
    let ds = ds.normalized(&stats)?;
    Ok((ckpt, ds))
}

fn strategy(s: &str) -> Result<ExecutionStrategy> {
    s.parse().map_err(|e: condconv::Error| usage(e.to_string()))
}

pub fn eval(checkpoint: &Path, data: &str, strat: &str, out: Option<&Path>) -> Result<()> {
    let strat = strategy(strat)?;
    let (ckpt, ds) = load_checkpoint_and_data(checkpoint, data)?;
    let (loss, top1) = evaluate(&ckpt.model, &ds, strat, 256)?;
    println!("top1={top1:.4} loss={loss:.6} examples={}", ds.len());
    if let Some(p) = out {
        let csv = format!("examples,loss,top1\n{},{loss:.6},{top1:.6}\n", ds.len());
        write_atomic(p, csv.as_bytes())?;
    }
    Ok(())
}

pub struct MaddsRequest {
    pub arch: String,
    pub width: f64,
    pub experts: usize,
    pub begin_layer: Option<String>,
    pub cc_fc: bool,
    pub resolution: Option<usize>,
    pub router: String,
    pub channels: usize,
    pub blocks: usize,
    pub format: String,
}

pub fn madds(r: &MaddsRequest) -> Result<()> {
    let router: RouterConfig = r.router.parse()?;
    let toy = r.arch == "toy";
    let begin = match &r.begin_layer {
        Some(b) => parse_begin(b)?,
        None if r.experts > 1 || r.cc_fc => Some(if toy { 1 } else { DEFAULT_BEGIN_LAYER }),
        None => None,
    };
    let resolution = r.resolution.unwrap_or(if toy { 16 } else { 224 });
    let spec = match r.arch.as_str() {
        "mobilenet_v1" => mobilenet_v1_spec(&MobileNetConfig {
            width_multiplier: r.width,
            num_experts: r.experts,
            begin_layer: begin,
            use_cc_classifier: r.cc_fc,
            router,
            num_classes: 1000,
            resolution,
        })?,
        "toy" => toy_cnn_spec(&ToyConfig {
            input: (resolution, resolution, 3),
            channels: r.channels,
            blocks: r.blocks,
            num_experts: r.experts,
            begin_layer: begin,
            use_cc_classifier: r.cc_fc,
            router,
            num_classes: 4,
        })?,
        other => return Err(usage(format!("unknown arch {other:?} (mobilenet_v1 | toy)"))),
    };
    let report = model_madds(&spec, None)?;
    match r.format.as_str() {
        "csv" => print!("{}", report.to_csv()),
        "text" => print!("{}", report.to_table()),
        other => return Err(usage(format!("unknown format {other:?} (text | csv)"))),
    }
    Ok(())
}

pub fn analyze(checkpoint: &Path, data: &str, out_dir: &Path, bins: usize, top_k: usize, strat: &str) -> Result<()> {
    let strat = strategy(strat)?;
    let (ckpt, ds) = load_checkpoint_and_data(checkpoint, data)?;
    if !ckpt.model.spec().has_condconv() {
        bail!("checkpoint has no CondConv layers to analyze");
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let trace = collect_trace(&ckpt.model, &ds, strat, 256)?;
    let put = |name: &str, body: &[u8]| write_atomic(&out_dir.join(name), body);
    put("trace.csv", trace.to_csv().as_bytes())?;
    put("trace.bin", &trace.to_bytes())?;

    let mut means = String::from("layer,depth,class,expert,count,mean,std\n");
    let mut hist_all = String::from("layer,bin,lo,hi,count\n");
    let mut tops = String::from("layer,expert,rank,class,mean\n");
    let mut ex = String::from("layer,expert,class,example_index\n");
    for (li, lt) in trace.layers.iter().enumerate() {
        let stats = per_class_mean(&trace, li)?;
        for c in 0..trace.num_classes {
            for e in 0..lt.num_experts {
                writeln!(
                    means,
                    "{},{},{c},{e},{},{:.6},{:.6}",
                    lt.layer, lt.depth, stats.counts[c], stats.mean[c][e], stats.std[c][e]
                )?;
            }
        }
        let hist = routing_histogram(&trace, li, bins)?;
        for (b, n) in hist.iter().enumerate() {
            writeln!(
                hist_all,
                "{},{b},{:.4},{:.4},{n}",
                lt.layer,
                b as f64 / bins as f64,
                (b + 1) as f64 / bins as f64
            )?;
        }
        put(
            &format!("histogram_l{:02}.svg", lt.layer),
            svg::histogram(&format!("routing weights, layer {}", lt.layer), &hist, 0.0, 1.0).as_bytes(),
        )?;
        let labels: Vec<String> = (0..trace.num_classes)
            .flat_map(|c| (0..lt.num_experts).map(move |e| format!("c{c}e{e}")))
            .collect();
        let values: Vec<f64> = stats.mean.iter().flatten().copied().collect();
        put(
            &format!("class_means_l{:02}.svg", lt.layer),
            svg::bar_chart(&format!("mean routing weight per class, layer {}", lt.layer), &labels, &values).as_bytes(),
        )?;
        for e in 0..lt.num_experts {
            for (rank, c) in top_classes_per_expert(&stats, e, top_k)?.into_iter().enumerate() {
                writeln!(tops, "{},{e},{},{c},{:.6}", lt.layer, rank + 1, stats.mean[c][e])?;
            }
            for (c, idx) in exemplars(&trace, li, e)?.into_iter().enumerate() {
                if let Some(i) = idx {
                    writeln!(ex, "{},{e},{c},{i}", lt.layer)?;
                }
            }
        }
    }
    put("per_class_mean.csv", means.as_bytes())?;
    put("histogram.csv", hist_all.as_bytes())?;
    put("top_classes.csv", tops.as_bytes())?;
    put("exemplars.csv", ex.as_bytes())?;

    let depth = class_specificity_by_depth(&trace)?;
    let mut spec_csv = String::from("layer,depth,specificity\n");
    for p in &depth {
        writeln!(spec_csv, "{},{},{:.8}", p.layer, p.depth, p.specificity)?;
    }
    put("specificity.csv", spec_csv.as_bytes())?;
    let x: Vec<f64> = depth.iter().map(|p| p.layer as f64).collect();
    let y: Vec<f64> = depth.iter().map(|p| p.specificity).collect();
    put(
        "specificity.svg",
        svg::line_chart("class specificity by layer", &x, &[("between-class variance".into(), y)]).as_bytes(),
    )?;
    println!(
        "analyzed {} examples over {} CondConv layers into {}",
        trace.len(),
        trace.layers.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn sweep(experts: &[usize], seeds: u64, config: Option<&Path>, out: Option<&Path>, o: &Overrides) -> Result<()> {
    let cfg = merged_config(config, None, o)?;
    require_seed(&cfg)?;
    if experts.is_empty() || seeds == 0 {
        return Err(usage("--experts and --seeds must be non-empty"));
    }
    if cfg.get("arch").is_some_and(|a| a != "toy") {
        return Err(usage("sweep trains the toy architecture only"));
    }
    let base = TrainConfig::from_config(&cfg)?;
    let data = load(cfg.get("data").unwrap_or("synthetic"))?;
    let begin = cfg.get("begin_layer").map(parse_begin).transpose()?.unwrap_or(Some(1));
    let toy = ToyConfig {
        input: data.image_shape(),
        channels: cfg.parsed("channels")?.unwrap_or(16),
        blocks: cfg.parsed("blocks")?.unwrap_or(2),
        num_experts: 1,
        begin_layer: begin,
        use_cc_classifier: cfg.bool("cc_fc")?.unwrap_or(begin.is_some()),
        router: cfg.parsed("router")?.unwrap_or_default(),
        num_classes: data.num_classes,
    };
    let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
    let rows = run_sweep(&toy, &data, val_fraction(&cfg)?, experts, &seed_list, &base)?;
    println!("{:>8}  {:>10}  {:>12}  {:>14}", "experts", "params", "madds", "mean_val_top1");
    for r in &rows {
        println!("{:>8}  {:>10}  {:>12}  {:>14.4}", r.experts, r.params, r.madds, r.mean_accuracy());
    }
    let monotone = rows.windows(2).all(|w| w[1].mean_accuracy() >= w[0].mean_accuracy());
    println!(
        "trend: validation accuracy {} with expert count",
        if monotone { "is non-decreasing" } else { "is not monotone" }
    );
    if let Some(p) = out {
        write_atomic(p, sweep_csv(&rows).as_bytes())?;
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "condconv", version, about = "Train, cost and inspect CondConv models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus metrics CSV.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-layer multiply-add table of an architecture.
    Madds(MaddsArgs),
    /// Routing-weight trace and statistics of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Train the toy model for several expert counts.
    Sweep(SweepArgs),
}

/// Keys shared with the config file; each flag overrides the key of the same name.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    /// `constant` or `cosine[:warmup_epochs]`.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub keep_prob: Option<String>,
    #[arg(long)]
    pub mixup_alpha: Option<String>,
    #[arg(long)]
    pub expert_dropout: Option<String>,
    /// `auto`, `fused` or `branched`.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub autoaugment: Option<String>,
    #[arg(long)]
    pub freeze_routing: Option<String>,
    /// Global gradient-norm bound, or `none`.
    #[arg(long)]
    pub clip_norm: Option<String>,
    /// `toy` or `mobilenet_v1`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long)]
    pub channels: Option<String>,
    /// First CondConv block, or `none`.
    #[arg(long)]
    pub begin_layer: Option<String>,
    #[arg(long)]
    pub cc_fc: Option<String>,
    /// Routing variant, e.g. `per_block`, `single@7`, `hidden_small`, `softmax`.
    #[arg(long)]
    pub router: Option<String>,
    #[arg(long)]
    pub width: Option<String>,
    /// `synthetic[:k=v,..]`, `idx:IMAGES,LABELS`, an IDX directory or an image-list CSV.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub val_fraction: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Sectioned `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `model.ckpt` and `metrics.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    experts: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "auto")]
    strategy: String,
    /// Also write the result as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaddsArgs {
    #[arg(long, default_value = "mobilenet_v1")]
    arch: String,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// 1 without a begin layer means the static model. The begin layer
    /// defaults to 7 for mobilenet_v1 and 1 for toy when experts > 1.
    #[arg(long, default_value_t = 1)]
    experts: usize,
    /// First CondConv block, or `none`.
    #[arg(long)]
    begin_layer: Option<String>,
    /// CondConv classifier.
    #[arg(long)]
    cc_fc: bool,
    /// Input side length; 224 for mobilenet_v1 and 16 for toy by default.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value = "per_block")]
    router: String,
    /// Toy-only: channels of the first block.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Toy-only.
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// `text` or `csv`.
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value = "auto")]
    strategy: String,
}

#[derive(Args)]
struct SweepArgs {
    /// Expert counts, comma separated.
    #[arg(long, default_value = "1,2,4,8", value_delimiter = ',')]
    experts: Vec<usize>,
    /// Number of seeds per expert count (seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the table as CSV here as well.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a.config.as_deref(), &a.out, a.experts.as_deref(), &a.overrides),
        Command::Eval(a) => commands::eval(&a.checkpoint, &a.data, &a.strategy, a.out.as_deref()),
        Command::Madds(a) => commands::madds(&commands::MaddsRequest {
            arch: a.arch,
            width: a.width,
            experts: a.experts,
            begin_layer: a.begin_layer,
            cc_fc: a.cc_fc,
            resolution: a.resolution,
            router: a.router,
            channels: a.channels,
            blocks: a.blocks,
            format: a.format,
        }),
        Command::Analyze(a) => commands::analyze(&a.checkpoint, &a.data, &a.out_dir, a.bins, a.top_k, &a.strategy),
        Command::Sweep(a) => commands::sweep(
            &a.experts,
            a.seeds,
            a.config.as_deref(),
            a.out.as_deref(),
            &a.overrides,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

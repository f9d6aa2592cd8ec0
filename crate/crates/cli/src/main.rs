//! `hmllm`: synthetic data, signal aggregation, scene detection, hypergraph
//! construction, training and evaluation from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

mod commands;
mod failure;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hmllm_core::harness::Protocol;

use failure::{Failure, VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "hmllm", version, about = "Audience-response pipeline and toy multimodal model")]
struct Cli {
    /// Force single-threaded execution. Results are identical either way.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic dataset generation.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Scene-level response indicators.
    #[command(subcommand)]
    Sri(SriCmd),
    /// Scene boundary detection.
    #[command(subcommand)]
    Fsvr(FsvrCmd),
    /// Feature hypergraphs.
    #[command(subcommand)]
    Hypergraph(HypergraphCmd),
    /// Train the toy model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on held-out videos.
    Eval(EvalArgs),
    /// Parameter sweeps.
    #[command(subcommand)]
    Ablate(AblateCmd),
    /// Reference baselines.
    #[command(subcommand)]
    Baseline(BaselineCmd),
}

#[derive(Debug, Subcommand)]
enum SynthCmd {
    /// Write a synthetic cohort, frames and model task to OUTDIR.
    Gen { spec: PathBuf, outdir: PathBuf },
}

#[derive(Debug, Subcommand)]
enum SriCmd {
    /// Per-participant scene indicators from raw EEG and gaze streams.
    Compute(ComputeArgs),
    /// Group-level aggregation and classification of participant records.
    Aggregate(AggregateArgs),
}

#[derive(Debug, Args)]
struct ComputeArgs {
    #[arg(long)]
    eeg: PathBuf,
    #[arg(long)]
    gaze: PathBuf,
    /// Scene windows, or detection output(s) carrying `scene_windows`.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the EEG file stem.
    #[arg(long)]
    participant: Option<String>,
}

#[derive(Debug, Args)]
struct AggregateArgs {
    #[arg(long)]
    profiles: PathBuf,
    /// Participant record files or directories of `.jsonl` files.
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    engagement_threshold: f64,
    /// Treat the whole audience as one group.
    #[arg(long)]
    population: bool,
    #[arg(long, default_value_t = 5)]
    min_group_size: usize,
    #[arg(long, default_value_t = 20)]
    max_group_size: usize,
    #[arg(long, default_value_t = 5)]
    max_age_span: u32,
}

#[derive(Debug, Subcommand)]
enum FsvrCmd {
    /// Detect scene cuts in a raw planar RGB frame file.
    Detect(DetectArgs),
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_scene_len: Option<usize>,
    #[arg(long)]
    window_width: Option<usize>,
    #[arg(long)]
    min_content_val: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum HypergraphCmd {
    /// k-nearest-neighbour hypergraph over feature rows.
    Build(BuildArgs),
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// Tensor file, or headerless numeric CSV when the extension is `.csv`.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    k: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    stage: Stage,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint; required for stage 2.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Per-epoch losses as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Model task file, a directory containing `model_task.json`, or a run config.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "p1", value_parser = parse_protocol)]
    protocol: Protocol,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AblateCmd {
    /// Sweep the classification-loss weight.
    Lambda(LambdaArgs),
}

#[derive(Debug, Args)]
struct LambdaArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, default_value = "p1", value_parser = parse_protocol)]
    protocol: Protocol,
}

#[derive(Debug, Subcommand)]
enum BaselineCmd {
    /// Uniform random guessing against reference class shares.
    Random(RandomArgs),
}

#[derive(Debug, Args)]
struct RandomArgs {
    #[arg(long, default_value_t = 100_000)]
    questions: usize,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = commands::Context::new(cli.sequential)?;
    match cli.command {
        Command::Synth(SynthCmd::Gen { spec, outdir }) => commands::synth_gen(&ctx, &spec, &outdir),
        Command::Sri(SriCmd::Compute(a)) => {
            commands::sri_compute(&a.eeg, &a.gaze, &a.scenes, &a.out, a.participant.as_deref())
        }
        Command::Sri(SriCmd::Aggregate(a)) => commands::sri_aggregate(&commands::AggregateOptions {
            profiles: a.profiles,
            records: a.records,
            out: a.out,
            engagement_threshold: a.engagement_threshold,
            population: a.population,
            rules: hmllm_core::aggregation::GroupingRules {
                min_size: a.min_group_size,
                max_size: a.max_group_size,
                max_age_span: a.max_age_span,
            },
        }),
        Command::Fsvr(FsvrCmd::Detect(a)) => {
            let mut cfg = hmllm_core::fsvr::DetectorConfig::default();
            cfg.adaptive_threshold = a.threshold.unwrap_or(cfg.adaptive_threshold);
            cfg.min_scene_len = a.min_scene_len.unwrap_or(cfg.min_scene_len);
            cfg.window_width = a.window_width.unwrap_or(cfg.window_width);
            cfg.min_content_val = a.min_content_val.unwrap_or(cfg.min_content_val);
            commands::fsvr_detect(&a.frames, &a.meta, &a.out, &cfg)
        }
        Command::Hypergraph(HypergraphCmd::Build(a)) => commands::hypergraph_build(&ctx, &a.features, &a.k, &a.out),
        Command::Train(a) => commands::train(&ctx, &a.config, a.stage, &a.out, a.init.as_deref(), a.report.as_deref()),
        Command::Eval(a) => commands::eval(&ctx, &a.ckpt, &a.data, a.protocol, &a.report),
        Command::Ablate(AblateCmd::Lambda(a)) => {
            commands::ablate_lambda(&ctx, &a.config, &a.out, a.lambdas.as_deref(), a.protocol)
        }
        Command::Baseline(BaselineCmd::Random(a)) => {
            commands::baseline_random(&ctx, a.questions, a.trials, a.seed, &a.report)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

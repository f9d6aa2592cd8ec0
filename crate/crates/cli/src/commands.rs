use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use hmllm_core::Execution;
use hmllm_core::aggregation::{
    self, AggregatedSri, Gender, Group, Grouping, GroupingRules, ParticipantSri, ParticipantStreams, SceneWindow,
};
use hmllm_core::fsvr::{self, DetectionOutput, DetectorConfig, FrameMeta};
use hmllm_core::harness::{self, EvalReport, Protocol, RunMetadata};
use hmllm_core::hypergraph::build_knn_hypergraph;
use hmllm_core::io::read_features;
use hmllm_core::salm::checkpoint::{CheckpointInfo, read_checkpoint, write_checkpoint};
use hmllm_core::salm::model::ModelParams;
use hmllm_core::salm::train::{Stage1Report, Stage2Report, TrainConfig, train_stage1, train_stage2};
use hmllm_core::signal::{self, ClassThresholds, Indicator};
use hmllm_core::synth::{self, ModelTask, ModelTaskSpec, SynthSpec};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Stage;
use crate::failure::{CliResult, Failure};
use crate::files;

const SEED_ENV: &str = "SRI_SEED";
const VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct Context {
    /// Replaces every configured seed when set.
    pub seed_override: Option<u64>,
    pub sequential: bool,
}

impl Context {
    pub fn new(sequential: bool) -> CliResult<Context> {
        let seed_override = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Failure::validation(anyhow!("{SEED_ENV}={s:?} is not an unsigned integer: {e}")))?,
            ),
            Err(std::env::VarError::NotPresent) => None,
            Err(e) => return Err(Failure::validation(anyhow!("{SEED_ENV}: {e}"))),
        };
        Ok(Context { seed_override, sequential })
    }

    fn exec(&self, configured: Execution) -> Execution {
        if self.sequential { Execution::Sequential } else { configured }
    }

    fn seed(&self, configured: u64) -> u64 {
        self.seed_override.unwrap_or(configured)
    }
}

pub fn synth_gen(ctx: &Context, spec_path: &Path, outdir: &Path) -> CliResult<()> {
    let mut spec: SynthSpec = files::read_json(spec_path)?;
    spec.seed = ctx.seed(spec.seed);
    let manifest = synth::write_dataset(&spec, outdir, ctx.exec(Execution::default()))
        .map_err(|e| Failure::from(e).context(format!("generating {}", outdir.display())))?;
    println!(
        "seed {}: {} participants in {} groups, {} videos, {} scene windows, model task {}/{}",
        manifest.seed,
        manifest.participants,
        manifest.groups.len(),
        manifest.videos.len(),
        manifest.windows,
        manifest.model_task_train,
        manifest.model_task_test
    );
    Ok(())
}

/// Scene windows from a bare window list, one detection output, or a list of
/// detection outputs.
fn read_windows(path: &Path) -> CliResult<Vec<SceneWindow>> {
    let doc: Value = files::read_json(path)?;
    let parse_err = |e: serde_json::Error| Failure::from(e).context(format!("parsing scene windows in {}", path.display()));
    let windows = if let Ok(w) = serde_json::from_value::<Vec<SceneWindow>>(doc.clone()) {
        w
    } else if doc.is_array() {
        let outs: Vec<DetectionOutput> = serde_json::from_value(doc).map_err(parse_err)?;
        outs.into_iter().flat_map(|o| o.scene_windows).collect()
    } else {
        let out: DetectionOutput = serde_json::from_value(doc).map_err(parse_err)?;
        out.scene_windows
    };
    if windows.is_empty() {
        return Err(Failure::validation(anyhow!("{} contains no scene windows", path.display())));
    }
    aggregation::validate_windows(&windows)?;
    Ok(windows)
}

pub fn sri_compute(eeg: &Path, gaze: &Path, scenes: &Path, out: &Path, participant: Option<&str>) -> CliResult<()> {
    let streams = ParticipantStreams {
        eeg: signal::read_eeg_csv(files::open(eeg)?).map_err(|e| Failure::from(e).context(format!("reading {}", eeg.display())))?,
        gaze: signal::read_gaze_csv(files::open(gaze)?)
            .map_err(|e| Failure::from(e).context(format!("reading {}", gaze.display())))?,
    };
    let windows = read_windows(scenes)?;
    let pid = participant.map(str::to_string).unwrap_or_else(|| files::file_stem(eeg));
    let sris = aggregation::participant_sris(&pid, &streams, &windows)?;
    aggregation::write_jsonl(files::create(out)?, &sris)?;
    println!("{pid}: {} records over {} windows", sris.len(), windows.len());
    Ok(())
}

pub struct AggregateOptions {
    pub profiles: PathBuf,
    pub records: Vec<PathBuf>,
    pub out: PathBuf,
    pub engagement_threshold: f64,
    pub population: bool,
    pub rules: GroupingRules,
}

fn record_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|f| f.extension().is_some_and(|x| x == "jsonl"));
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn class_shares(records: &[AggregatedSri]) -> String {
    let mut out = String::new();
    for ind in Indicator::ALL {
        let mut counts = vec![0usize; ind.n_classes()];
        for r in records.iter().filter(|r| r.indicator == ind) {
            counts[r.class_label.label as usize] += 1;
        }
        let total: usize = counts.iter().sum::<usize>().max(1);
        let shares: Vec<String> = ind
            .class_names()
            .iter()
            .zip(&counts)
            .map(|(name, c)| format!("{name} {:.2}%", 100.0 * *c as f64 / total as f64))
            .collect();
        out += &format!("{:<11} {}\n", ind.as_str(), shares.join("  "));
    }
    out
}

pub fn sri_aggregate(opts: &AggregateOptions) -> CliResult<()> {
    if !(opts.engagement_threshold.is_finite() && opts.engagement_threshold > 0.0) {
        return Err(Failure::validation(anyhow!("engagement threshold must be positive")));
    }
    let profiles = aggregation::read_profiles_csv(files::open(&opts.profiles)?)
        .map_err(|e| Failure::from(e).context(format!("reading {}", opts.profiles.display())))?;
    let mut sris: Vec<ParticipantSri> = Vec::new();
    for path in record_files(&opts.records)? {
        let batch: Vec<ParticipantSri> = aggregation::read_jsonl(files::open(&path)?)
            .map_err(|e| Failure::from(e).context(format!("reading {}", path.display())))?;
        sris.extend(batch);
    }
    let grouping = if opts.population {
        Grouping {
            groups: vec![Group {
                group_id: "all".into(),
                gender: Gender::Female,
                min_age: profiles.iter().map(|p| p.age).min().unwrap_or(0),
                max_age: profiles.iter().map(|p| p.age).max().unwrap_or(0),
                members: profiles.iter().map(|p| p.participant_id.clone()).collect(),
            }],
            unassigned: Vec::new(),
        }
    } else {
        aggregation::group_by_demographics(&profiles, &opts.rules)
    };
    if !grouping.unassigned.is_empty() {
        log::warn!("{} participants fit no group and are left out", grouping.unassigned.len());
    }
    let thresholds = ClassThresholds { engagement: opts.engagement_threshold };
    let records = aggregation::aggregate_participant_sris(&sris, &grouping, &thresholds)?;
    aggregation::write_jsonl(files::create(&opts.out)?, &records)?;
    print!("{} groups, {} records\n{}", grouping.groups.len(), records.len(), class_shares(&records));
    Ok(())
}

pub fn fsvr_detect(frames_path: &Path, meta_path: &Path, out: &Path, cfg: &DetectorConfig) -> CliResult<()> {
    if !(cfg.adaptive_threshold.is_finite() && cfg.adaptive_threshold > 0.0 && cfg.min_content_val.is_finite())
        || cfg.window_width == 0
    {
        return Err(Failure::validation(anyhow!("detector threshold, window width and min content value must be positive")));
    }
    let meta: FrameMeta = files::read_json(meta_path)?;
    let frames = fsvr::read_frames(files::open(frames_path)?, &meta)
        .map_err(|e| Failure::from(e).context(format!("reading {}", frames_path.display())))?;
    let scenes = fsvr::adaptive_detect(&frames, cfg)?;
    let video_id = meta.video_id.clone().unwrap_or_else(|| files::file_stem(frames_path));
    let storyboard = fsvr::storyboard(&video_id, &scenes)?;
    let scene_windows = match meta.fps {
        Some(fps) if fps.is_finite() && fps > 0.0 => scenes.windows(&video_id, fps, meta.t_offset.unwrap_or(0.0)),
        Some(fps) => return Err(Failure::validation(anyhow!("fps {fps} must be positive"))),
        None => Vec::new(),
    };
    let doc = DetectionOutput { video_id, config: *cfg, scenes, storyboard, scene_windows };
    files::write_json(out, &doc)?;
    println!("{}: {} frames, {} scenes, cuts {:?}", doc.video_id, doc.scenes.frame_count, doc.scenes.len(), doc.scenes.cuts);
    Ok(())
}

fn read_feature_csv(path: &Path) -> CliResult<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(files::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Failure::validation(anyhow!("row {}: {s:?}: {e}", i + 1))))
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Failure::validation(anyhow!("ragged feature rows in {}", path.display())));
    }
    Array2::from_shape_vec((rows.len(), width), rows.concat()).map_err(|e| Failure::validation(anyhow!(e)))
}

pub fn hypergraph_build(ctx: &Context, features: &Path, k: &[usize], out: &Path) -> CliResult<()> {
    let x = if features.extension().is_some_and(|e| e == "csv") {
        read_feature_csv(features)?
    } else {
        read_features(files::open(features)?).map_err(|e| Failure::from(e).context(format!("reading {}", features.display())))?
    };
    let built = build_knn_hypergraph(x.view(), k, ctx.exec(Execution::default()))?;
    files::write_json(out, &built.graph.to_json())?;
    println!(
        "{} vertices, {} hyperedges, mean vertex degree {:.2}",
        built.graph.n_vertices(),
        built.graph.n_edges(),
        built.graph.mean_vertex_degree()
    );
    Ok(())
}

/// Training configuration file: optimiser settings plus where the model task
/// comes from, either a generated task spec or a `model_task.json` path
/// relative to the config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub task: Option<ModelTaskSpec>,
    /// Seed for task generation; defaults to the training seed.
    pub task_seed: Option<u64>,
    pub data: Option<PathBuf>,
}

struct Run {
    train: TrainConfig,
    task: ModelTask,
    config_sha256: String,
}

fn load_task_file(path: &Path) -> CliResult<ModelTask> {
    files::read_json(&files::resolve_in_dir(path, "model_task.json"))
}

fn load_run(ctx: &Context, path: &Path) -> CliResult<Run> {
    let bytes = files::read_bytes(path)?;
    let cfg: RunConfig =
        serde_json::from_slice(&bytes).map_err(|e| Failure::from(e).context(format!("parsing {}", path.display())))?;
    let mut train = cfg.train;
    train.seed = ctx.seed(train.seed);
    train.execution = ctx.exec(train.execution);
    train.validate()?;
    let task = match (cfg.data, cfg.task) {
        (Some(_), Some(_)) => return Err(Failure::validation(anyhow!("config sets both `data` and `task`"))),
        (Some(data), None) => load_task_file(&path.parent().unwrap_or(Path::new(".")).join(data))?,
        (None, spec) => {
            let seed = ctx.seed_override.or(cfg.task_seed).unwrap_or(train.seed);
            let spec = SynthSpec { seed, model_task: spec.unwrap_or_default(), ..SynthSpec::default() };
            synth::gen_model_task(&spec)?
        }
    };
    Ok(Run { train, task, config_sha256: files::sha256_hex(&bytes) })
}

fn task_sha256(task: &ModelTask) -> CliResult<String> {
    Ok(files::sha256_hex(&serde_json::to_vec(task)?))
}

#[derive(Serialize)]
struct TrainLog<'a> {
    seed: u64,
    stage1: Option<&'a Stage1Report>,
    stage2: Option<&'a Stage2Report>,
}

fn load_checkpoint(path: &Path) -> CliResult<(ModelParams, CheckpointInfo)> {
    read_checkpoint(files::open(path)?).map_err(|e| Failure::from(e).context(format!("reading {}", path.display())))
}

pub fn train(
    ctx: &Context,
    config: &Path,
    stage: Stage,
    out: &Path,
    init: Option<&Path>,
    report: Option<&Path>,
) -> CliResult<()> {
    let run = load_run(ctx, config)?;
    let cfg = &run.train;
    let start = match init {
        Some(p) => {
            let (params, _) = load_checkpoint(p)?;
            if params.dims != run.task.dims {
                return Err(Failure::validation(anyhow!("checkpoint dims do not match the task")));
            }
            params
        }
        None if stage == Stage::Two => return Err(Failure::validation(anyhow!("stage 2 needs --init <checkpoint>"))),
        None => ModelParams::init(run.task.dims, cfg.seed)?,
    };
    let (mut params, mut s1, mut s2) = (start, None, None);
    if stage != Stage::Two {
        let (p, r) = train_stage1(&params, &run.task.train, cfg, cfg.stage1_epochs)?;
        println!(
            "stage 1: itg {:.4} -> {:.4} over {} epochs",
            r.epoch_loss.first().copied().unwrap_or(f64::NAN),
            r.epoch_loss.last().copied().unwrap_or(f64::NAN),
            r.epoch_loss.len()
        );
        params = p;
        s1 = Some(r);
    }
    if stage != Stage::One {
        let (p, r) = train_stage2(&params, &run.task.train, Some(&run.task.test), cfg, cfg.stage2_epochs)?;
        let acc = r.heldout_accuracy.last().copied().unwrap_or([f64::NAN; 3]);
        println!(
            "stage 2: loss {:.4} -> {:.4}, held-out acc {:.2}/{:.2}/{:.2}",
            r.epoch_loss.first().copied().unwrap_or(f64::NAN),
            r.epoch_loss.last().copied().unwrap_or(f64::NAN),
            100.0 * acc[0],
            100.0 * acc[1],
            100.0 * acc[2]
        );
        params = p;
        s2 = Some(r);
    }
    let mut extra = Map::new();
    extra.insert("k_list".into(), serde_json::to_value(&cfg.k_list)?);
    extra.insert("lambda".into(), Value::from(cfg.lambda));
    extra.insert("config_sha256".into(), Value::from(run.config_sha256.clone()));
    extra.insert("task_sha256".into(), Value::from(task_sha256(&run.task)?));
    let info = CheckpointInfo { stage: if stage == Stage::One { 1 } else { 2 }, seed: cfg.seed, extra };
    let mut w = files::create(out)?;
    write_checkpoint(&mut w, &params, &info)?;
    w.flush()?;
    if let Some(path) = report {
        files::write_json(path, &TrainLog { seed: cfg.seed, stage1: s1.as_ref(), stage2: s2.as_ref() })?;
    }
    Ok(())
}

/// A model task file, a directory holding one, or a run config.
fn load_eval_task(ctx: &Context, path: &Path) -> CliResult<ModelTask> {
    let path = files::resolve_in_dir(path, "model_task.json");
    let doc: Value = files::read_json(&path)?;
    if doc.get("test").is_some() {
        Ok(serde_json::from_value(doc).map_err(|e| Failure::from(e).context(format!("parsing {}", path.display())))?)
    } else {
        Ok(load_run(ctx, &path)?.task)
    }
}

pub fn eval(ctx: &Context, ckpt: &Path, data: &Path, protocol: Protocol, report: &Path) -> CliResult<()> {
    let (params, info) = load_checkpoint(ckpt)?;
    let task = load_eval_task(ctx, data)?;
    if params.dims != task.dims {
        return Err(Failure::validation(anyhow!("checkpoint dims do not match the task")));
    }
    let k_list: Vec<usize> = match info.extra.get("k_list") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => hmllm_core::hypergraph::DEFAULT_K.to_vec(),
    };
    let mut rep: EvalReport = harness::evaluate(&params, &task, protocol, &k_list, ctx.exec(Execution::default()))?;
    let mut inputs = BTreeMap::new();
    inputs.insert("ckpt".to_string(), files::file_sha256(ckpt)?);
    inputs.insert("task".to_string(), task_sha256(&task)?);
    let mut settings = BTreeMap::new();
    settings.insert("k_list".to_string(), serde_json::to_value(&k_list)?);
    settings.insert("stage".to_string(), Value::from(info.stage));
    rep.metadata = RunMetadata { seed: info.seed, version: VERSION.into(), inputs, settings };
    files::write_json(report, &rep)?;
    print!("{}", rep.summary());
    Ok(())
}

pub fn ablate_lambda(
    ctx: &Context,
    config: &Path,
    out: &Path,
    lambdas: Option<&[f64]>,
    protocol: Protocol,
) -> CliResult<()> {
    let run = load_run(ctx, config)?;
    let lambdas = lambdas.unwrap_or(&harness::DEFAULT_LAMBDAS);
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Failure::validation(anyhow!("λ values must be finite and non-negative")));
    }
    let table = harness::lambda_ablation(&run.task, &run.train, lambdas, protocol)?;
    let mut w = files::create(out)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    print!("{}", table.summary());
    Ok(())
}

pub fn baseline_random(ctx: &Context, questions: usize, trials: usize, seed: u64, report: &Path) -> CliResult<()> {
    let seed = ctx.seed(seed);
    let rep = harness::random_baseline(questions, trials, seed, ctx.exec(Execution::default()))?;
    files::write_json(report, &rep)?;
    print!("{}", rep.summary());
    Ok(())
}

//! File-level round trips through the synthetic dataset layout.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use hmllm_core::aggregation::{self, Cohort, ParticipantStreams, SceneWindow};
use hmllm_core::fsvr::{self, DetectorConfig, FrameMeta};
use hmllm_core::harness::{evaluate, Protocol};
use hmllm_core::salm::checkpoint::{read_checkpoint, write_checkpoint, CheckpointInfo};
use hmllm_core::salm::model::ModelParams;
use hmllm_core::salm::train::{train_stage1, train_stage2, TrainConfig};
use hmllm_core::signal::{self, ClassThresholds, Indicator};
use hmllm_core::synth::{self, ModelTask, PlantedCell, PlantedCuts, SynthSpec};
use hmllm_core::Execution;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_reader(BufReader::new(File::open(path).unwrap())).unwrap()
}

fn small_spec() -> SynthSpec {
    let mut spec = SynthSpec { seed: 5, ..SynthSpec::default() };
    spec.cohort.n_videos = 2;
    spec.model_task.n_train = 12;
    spec.model_task.n_test = 6;
    spec
}

#[test]
fn dataset_files_reproduce_planted_records() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let manifest = synth::write_dataset(&spec, dir.path(), Execution::default()).unwrap();
    let root = dir.path();

    let profiles = aggregation::read_profiles_csv(File::open(root.join("profiles.csv")).unwrap()).unwrap();
    assert_eq!(profiles.len(), manifest.participants);
    let mut streams = BTreeMap::new();
    for p in &profiles {
        let id = &p.participant_id;
        let eeg = signal::read_eeg_csv(File::open(root.join("eeg").join(format!("{id}.csv"))).unwrap()).unwrap();
        let gaze = signal::read_gaze_csv(File::open(root.join("gaze").join(format!("{id}.csv"))).unwrap()).unwrap();
        streams.insert(id.clone(), ParticipantStreams { eeg, gaze });
    }
    let cohort = Cohort { profiles, streams };
    let windows: Vec<SceneWindow> = read_json(&root.join("scenes.json"));
    let grouping = aggregation::group_by_demographics(&cohort.profiles, &Default::default());
    let thresholds = ClassThresholds { engagement: manifest.engagement_threshold };
    let records = aggregation::emit_records(&cohort, &grouping, &windows, &thresholds, Execution::default()).unwrap();
    let planted: Vec<PlantedCell> = aggregation::read_jsonl(BufReader::new(File::open(root.join("planted.jsonl")).unwrap())).unwrap();
    assert_eq!(records.len(), 3 * planted.len());
    let by_cell: BTreeMap<_, _> =
        planted.iter().map(|c| ((c.video_id.as_str(), c.scene_index, c.group_id.as_str()), c)).collect();
    for r in &records {
        let cell = by_cell[&(r.video_id.as_str(), r.scene_index, r.group_id.as_str())];
        let h = Indicator::ALL.iter().position(|i| *i == r.indicator).unwrap();
        assert!((r.value - cell.values[h]).abs() < 1e-12);
        assert_eq!(r.class_label.label, cell.labels[h]);
    }
}

#[test]
fn frame_files_yield_planted_cuts_and_windows() {
    let dir = tempfile::tempdir().unwrap();
    synth::write_dataset(&small_spec(), dir.path(), Execution::Sequential).unwrap();
    let cuts: Vec<PlantedCuts> = read_json(&dir.path().join("cuts.json"));
    let windows: Vec<SceneWindow> = read_json(&dir.path().join("scenes.json"));
    let mut recovered = Vec::new();
    for c in &cuts {
        let frames_dir = dir.path().join("frames");
        let meta: FrameMeta = read_json(&frames_dir.join(format!("{}.json", c.video_id)));
        let frames = fsvr::read_frames(File::open(frames_dir.join(format!("{}.bin", c.video_id))).unwrap(), &meta).unwrap();
        let scenes = fsvr::adaptive_detect(&frames, &DetectorConfig::default()).unwrap();
        assert_eq!(scenes.cuts, c.cuts);
        assert_eq!(scenes.frame_count, c.frame_count);
        recovered.extend(scenes.windows(&c.video_id, meta.fps.unwrap(), meta.t_offset.unwrap()));
    }
    assert_eq!(recovered, windows);
}

#[test]
fn model_task_file_trains_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    synth::write_dataset(&spec, dir.path(), Execution::default()).unwrap();
    let task: ModelTask = read_json(&dir.path().join("model_task.json"));
    assert_eq!(task, synth::gen_model_task(&spec).unwrap());

    let cfg = TrainConfig { stage1_lr: 0.1, stage2_lr: 0.05, batch_size: 4, ..TrainConfig::default() };
    let init = ModelParams::init(task.dims, cfg.seed).unwrap();
    let (warm, _) = train_stage1(&init, &task.train, &cfg, 2).unwrap();
    let (params, report) = train_stage2(&warm, &task.train, Some(&task.test), &cfg, 2).unwrap();
    assert_eq!(report.heldout_accuracy.len(), 2);

    let path = dir.path().join("model.ckpt");
    let info = CheckpointInfo { stage: 2, seed: cfg.seed, extra: Default::default() };
    write_checkpoint(File::create(&path).unwrap(), &params, &info).unwrap();
    let (loaded, loaded_info) = read_checkpoint(File::open(&path).unwrap()).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(loaded_info, info);

    let a = evaluate(&params, &task, Protocol::P2, &cfg.k_list, Execution::Sequential).unwrap();
    let b = evaluate(&loaded, &task, Protocol::P2, &cfg.k_list, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    for m in &a.indicators {
        assert_eq!(m.support.iter().sum::<usize>(), task.test.len() * task.groups.len());
    }
    fs::remove_file(path).unwrap();
}

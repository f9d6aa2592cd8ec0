#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hmllm_core::fsvr::DetectionOutput;
use hmllm_core::io::write_features;
use hmllm_core::synth::SynthManifest;
use ndarray::Array2;

pub const BIN: &str = env!("CARGO_BIN_EXE_hmllm");

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn hmllm(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SRI_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn hmllm")
}

#[track_caller]
pub fn ok(args: &[&str], env: &[(&str, &str)]) -> Output {
    let out = hmllm(args, env);
    assert!(
        out.status.success(),
        "hmllm {args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub const SYNTH_SPEC: &str = r#"{ "seed": 11, "cohort": { "n_videos": 2, "scenes_per_video": 4 } }"#;

pub const RUN_CONFIG: &str = r#"{
  "train": { "stage1_epochs": 3, "stage2_epochs": 4, "stage1_lr": 0.1, "stage2_lr": 0.05, "batch_size": 4, "seed": 7 },
  "task": { "n_train": 12, "n_test": 8 }
}"#;

/// Runs every subcommand in `dir`, chaining outputs the way a user would.
pub fn run_pipeline(dir: &Path, extra: &[&str]) {
    let with = |args: &[&str]| -> Vec<String> { extra.iter().chain(args).map(|a| a.to_string()).collect() };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs, &[]);
    };
    fs::write(dir.join("spec.json"), SYNTH_SPEC).unwrap();
    fs::write(dir.join("run.json"), RUN_CONFIG).unwrap();
    let ds = dir.join("ds");
    run(with(&["synth", "gen", s(&dir.join("spec.json")), s(&ds)]));
    let manifest: SynthManifest = serde_json::from_slice(&fs::read(ds.join("manifest.json")).unwrap()).unwrap();

    let mut detections = Vec::new();
    for v in &manifest.videos {
        let frames = ds.join("frames").join(format!("{v}.bin"));
        let meta = ds.join("frames").join(format!("{v}.json"));
        let out = dir.join(format!("detect-{v}.json"));
        run(with(&["fsvr", "detect", "--frames", s(&frames), "--meta", s(&meta), "--out", s(&out)]));
        let d: DetectionOutput = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
        detections.push(d);
    }
    let scenes = dir.join("detections.json");
    fs::write(&scenes, serde_json::to_vec_pretty(&detections).unwrap()).unwrap();

    let sri = dir.join("sri");
    let mut pids: Vec<String> = fs::read_dir(ds.join("eeg"))
        .unwrap()
        .map(|e| e.unwrap().path().file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    pids.sort();
    for pid in &pids {
        let eeg = ds.join("eeg").join(format!("{pid}.csv"));
        let gaze = ds.join("gaze").join(format!("{pid}.csv"));
        let out = sri.join(format!("{pid}.jsonl"));
        run(with(&["sri", "compute", "--eeg", s(&eeg), "--gaze", s(&gaze), "--scenes", s(&scenes), "--out", s(&out)]));
    }
    run(with(&[
        "sri",
        "aggregate",
        "--profiles",
        s(&ds.join("profiles.csv")),
        "--records",
        s(&sri),
        "--out",
        s(&dir.join("groups.jsonl")),
        "--engagement-threshold",
        "0.5",
    ]));

    let features = dir.join("features.bin");
    let x = Array2::from_shape_fn((24, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 + (i / 6) as f64);
    write_features(fs::File::create(&features).unwrap(), &x).unwrap();
    run(with(&["hypergraph", "build", "--features", s(&features), "--k", "3,4,5", "--out", s(&dir.join("graph.json"))]));

    let cfg = dir.join("run.json");
    let s1 = dir.join("stage1.ckpt");
    let s2 = dir.join("stage2.ckpt");
    run(with(&["train", "--config", s(&cfg), "--stage", "1", "--out", s(&s1)]));
    run(with(&[
        "train",
        "--config",
        s(&cfg),
        "--stage",
        "2",
        "--init",
        s(&s1),
        "--out",
        s(&s2),
        "--report",
        s(&dir.join("train-log.json")),
    ]));
    run(with(&["train", "--config", s(&cfg), "--stage", "all", "--out", s(&dir.join("all.ckpt"))]));
    for p in ["p1", "p2"] {
        let report = dir.join(format!("eval-{p}.json"));
        run(with(&["eval", "--ckpt", s(&s2), "--data", s(&cfg), "--protocol", p, "--report", s(&report)]));
    }
    run(with(&["eval", "--ckpt", s(&s2), "--data", s(&ds), "--protocol", "p2", "--report", s(&dir.join("eval-ds.json"))]));
    run(with(&["ablate", "lambda", "--config", s(&cfg), "--out", s(&dir.join("ablation.csv"))]));
    run(with(&[
        "baseline",
        "random",
        "--questions",
        "2000",
        "--trials",
        "3",
        "--report",
        s(&dir.join("baseline.json")),
    ]));
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Relative paths whose contents differ, plus files present on one side only.
pub fn differences(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let mut keys: Vec<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

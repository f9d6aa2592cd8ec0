//! Seeded generators with planted ground truth: audience cohorts with EEG and
//! gaze streams, frame sequences with known cuts, and the toy model task.
//!
//! Every generator is a pure function of the spec. Per-entity randomness is
//! drawn from a ChaCha stream seeded by mixing the spec seed with a stable
//! hash of the entity name, so entities can be generated in any order.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    self, AudienceProfile, Cohort, Gender, Grouping, GroupingRules, ParticipantStreams, SceneWindow,
};
use crate::fsvr::{self, DetectorConfig, Frame, FrameMeta, SceneList};
use crate::par::{self, Execution};
use crate::salm::{ModelDims, VideoExample};
use crate::signal::{self, BandPowerSample, ClassThresholds, GazeSample, Indicator};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Signal(#[from] signal::SignalError),
    #[error(transparent)]
    Aggregation(#[from] aggregation::AggregationError),
    #[error(transparent)]
    Fsvr(#[from] fsvr::FsvrError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::InvalidSpec(msg.into()))
}

/// Stable 64-bit seed for a named entity.
pub fn entity_seed(seed: u64, entity: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finaliser over the mix
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in entity.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, entity: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(entity_seed(seed, entity))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedMeans {
    pub engagement: f64,
    pub emotion: f64,
    pub emr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupBlueprint {
    pub gender: Gender,
    pub age_min: u32,
    pub age_max: u32,
    pub size: usize,
    /// Fixed indicator means for every scene. Without it, scene values are
    /// planted from the class proportions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<PlantedMeans>,
}

/// Per-sample noise standard deviations, in indicator units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub engagement: f64,
    pub emotion: f64,
    /// Applied once per participant and window to the on-screen probability.
    pub emr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub groups: Vec<GroupBlueprint>,
    pub n_videos: usize,
    pub scenes_per_video: usize,
    pub eeg_per_scene: usize,
    pub gaze_per_scene: usize,
    pub engagement_threshold: f64,
    /// Class shares per indicator (engagement, emotion, EMR).
    pub proportions: [Vec<f64>; 3],
    pub noise: NoiseSpec,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let bp = |gender, age_min, size| GroupBlueprint { gender, age_min, age_max: age_min + 4, size, means: None };
        CohortSpec {
            groups: vec![
                bp(Gender::Female, 20, 6),
                bp(Gender::Female, 40, 5),
                bp(Gender::Male, 22, 7),
                bp(Gender::Male, 45, 5),
            ],
            n_videos: 3,
            scenes_per_video: 4,
            eeg_per_scene: 8,
            gaze_per_scene: 40,
            engagement_threshold: 0.5,
            proportions: Indicator::ALL.map(|i| i.reference_proportions().to_vec()),
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FramesSpec {
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub min_scene_frames: usize,
    pub max_scene_frames: usize,
    /// Uniform per-pixel noise amplitude inside a scene.
    pub noise: u8,
}

impl Default for FramesSpec {
    fn default() -> Self {
        FramesSpec { height: 16, width: 16, fps: 10.0, min_scene_frames: 12, max_scene_frames: 30, noise: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelTaskSpec {
    pub dims: ModelDims,
    pub n_train: usize,
    pub n_test: usize,
    pub n_clusters: usize,
    /// Standard deviation of cluster centroids.
    pub cluster_scale: f64,
    pub video_noise: f64,
    pub frame_noise: f64,
    pub token_noise: f64,
    /// Audience groups with their own labels for the group-level protocol.
    pub n_groups: usize,
    /// Probability a group label equals the population label.
    pub group_agreement: f64,
    /// Permute labels across videos, destroying the feature signal.
    pub shuffle_labels: bool,
}

impl Default for ModelTaskSpec {
    fn default() -> Self {
        ModelTaskSpec {
            dims: ModelDims::default(),
            n_train: 48,
            n_test: 24,
            n_clusters: 6,
            cluster_scale: 1.0,
            video_noise: 0.3,
            frame_noise: 0.6,
            token_noise: 0.3,
            n_groups: 4,
            group_agreement: 0.8,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub cohort: CohortSpec,
    pub frames: FramesSpec,
    pub model_task: ModelTaskSpec,
}

/// Planted values of one (video, scene, group) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCell {
    pub video_id: String,
    pub scene_index: usize,
    pub group_id: String,
    pub values: [f64; 3],
    pub labels: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub grouping: Grouping,
    pub windows: Vec<SceneWindow>,
    pub planted: Vec<PlantedCell>,
    pub thresholds: ClassThresholds,
}

/// Frame layout of one video on the session timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPlan {
    pub video_id: String,
    pub scenes: SceneList,
    pub fps: f64,
    pub t_offset: f64,
}

pub fn video_id(v: usize) -> String {
    format!("video-{v:03}")
}

fn validate_cohort(spec: &CohortSpec, rules: &GroupingRules) -> Result<(), SynthError> {
    if spec.groups.is_empty() {
        return invalid("at least one group blueprint is required");
    }
    if spec.n_videos == 0 || spec.scenes_per_video == 0 {
        return invalid("n_videos and scenes_per_video must be positive");
    }
    if spec.eeg_per_scene == 0 || spec.gaze_per_scene == 0 {
        return invalid("every scene needs at least one EEG and one gaze sample");
    }
    if !(spec.engagement_threshold > 0.0 && spec.engagement_threshold < 1.0) {
        return invalid("engagement_threshold must lie in (0, 1) for plantable classes");
    }
    for (ind, p) in Indicator::ALL.iter().zip(&spec.proportions) {
        if p.len() != ind.n_classes() || p.iter().any(|v| !v.is_finite() || *v < 0.0) || p.iter().sum::<f64>() <= 0.0 {
            return invalid(format!("{ind} proportions need {} non-negative shares", ind.n_classes()));
        }
    }
    let n = spec.noise;
    if [n.engagement, n.emotion, n.emr].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return invalid("noise scales must be finite and non-negative");
    }
    for (i, g) in spec.groups.iter().enumerate() {
        if g.size < rules.min_size || g.size > rules.max_size {
            return invalid(format!("group {i}: size must be in {}..={}", rules.min_size, rules.max_size));
        }
        if g.age_max < g.age_min || g.age_max - g.age_min > rules.max_age_span {
            return invalid(format!("group {i}: age band wider than {}", rules.max_age_span));
        }
        if let Some(m) = g.means {
            if !(m.engagement > 0.0 && m.engagement < 1.0 && m.emotion.abs() < 100.0 && (0.0..=1.0).contains(&m.emr)) {
                return invalid(format!("group {i}: planted means out of range"));
            }
        }
        for (j, h) in spec.groups.iter().enumerate().skip(i + 1) {
            if g.gender == h.gender {
                let (lo, hi) = if g.age_min <= h.age_min { (g, h) } else { (h, g) };
                if hi.age_min <= lo.age_max + rules.max_age_span {
                    return invalid(format!("groups {i} and {j}: age bands too close to stay separate"));
                }
            }
        }
    }
    for (label, &v) in emr_representatives(spec.gaze_per_scene).iter().enumerate() {
        if signal::classify(Indicator::Emr, v)?.label as usize != label {
            return invalid("gaze_per_scene too small to plant every EMR class");
        }
    }
    Ok(())
}

fn validate_frames(spec: &FramesSpec) -> Result<(), SynthError> {
    let det = DetectorConfig::default();
    if spec.height == 0 || spec.width == 0 {
        return invalid("frame size must be positive");
    }
    if !(spec.fps.is_finite() && spec.fps > 0.0) {
        return invalid("fps must be positive");
    }
    if spec.min_scene_frames < det.min_scene_len + 2 || spec.max_scene_frames < spec.min_scene_frames {
        return invalid(format!(
            "scene lengths must satisfy {} <= min_scene_frames <= max_scene_frames",
            det.min_scene_len + 2
        ));
    }
    if 2.0 * f64::from(spec.noise) >= det.min_content_val {
        return invalid("frame noise must stay below half the minimum content value");
    }
    Ok(())
}

/// Class-interior values planted for each engagement class.
pub fn engagement_representatives(threshold: f64) -> [f64; 2] {
    [threshold / 2.0, (1.0 + threshold) / 2.0]
}

pub const EMOTION_REPRESENTATIVES: [f64; 3] = [-20.0, 0.0, 20.0];

/// EMR class values quantised to the gaze sampling grid.
pub fn emr_representatives(gaze_per_scene: usize) -> [f64; 3] {
    let n = gaze_per_scene as f64;
    [0.25, 0.525, 0.8].map(|p| (p * n).round() / n)
}

/// Class counts summing to `total` by the largest-remainder rule; ties go to
/// the lower class.
pub fn stratified_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Scene layout for every video: lengths drawn per video, cuts at the
/// running sums.
pub fn video_plans(seed: u64, n_videos: usize, scenes_per_video: usize, frames: &FramesSpec) -> Vec<VideoPlan> {
    let mut t_offset = 0.0;
    (0..n_videos)
        .map(|v| {
            let id = video_id(v);
            let mut rng = rng_for(seed, &format!("scenes/{id}"));
            let mut cuts = Vec::with_capacity(scenes_per_video);
            let mut at = 0;
            for _ in 0..scenes_per_video {
                cuts.push(at);
                at += rng.random_range(frames.min_scene_frames..=frames.max_scene_frames);
            }
            let plan = VideoPlan { video_id: id, scenes: SceneList { frame_count: at, cuts }, fps: frames.fps, t_offset };
            t_offset += at as f64 / frames.fps;
            plan
        })
        .collect()
}

fn band_powers(t: f64, engagement: f64, emotion: f64) -> BandPowerSample {
    // a2 + a3 = 10, (a3 - a2) / 10 = emotion / 100, b2 = b3, (b2 + b3) / (10 + b2 + b3) = engagement
    let beta = 10.0 * engagement / (1.0 - engagement);
    BandPowerSample { t, a1: 1.0, a2: 5.0 - emotion / 20.0, a3: 5.0 + emotion / 20.0, b1: 1.0, b2: beta / 2.0, b3: beta / 2.0 }
}

/// Sample times spread evenly inside `[t1, t2)`.
fn sample_times(w: &SceneWindow, n: usize) -> impl Iterator<Item = f64> + '_ {
    (0..n).map(move |j| w.t1 + (j as f64 + 0.5) / n as f64 * (w.t2 - w.t1))
}

/// Generates profiles and raw streams whose window means equal the planted
/// values when the noise is zero.
pub fn gen_cohort(spec: &SynthSpec, exec: Execution) -> Result<SynthCohort, SynthError> {
    let cs = &spec.cohort;
    let rules = GroupingRules::default();
    validate_cohort(cs, &rules)?;
    validate_frames(&spec.frames)?;

    let mut profiles = Vec::new();
    let mut blueprint_of = BTreeMap::new();
    let mut rng = rng_for(spec.seed, "profiles");
    for (b, g) in cs.groups.iter().enumerate() {
        for _ in 0..g.size {
            let id = format!("p{:03}", profiles.len());
            blueprint_of.insert(id.clone(), b);
            profiles.push(AudienceProfile { participant_id: id, gender: g.gender, age: rng.random_range(g.age_min..=g.age_max) });
        }
    }
    let grouping = aggregation::group_by_demographics(&profiles, &rules);
    if !grouping.unassigned.is_empty() || grouping.groups.len() != cs.groups.len() {
        return invalid("group blueprints do not reproduce under demographic grouping");
    }
    let mut group_blueprint = Vec::with_capacity(grouping.groups.len());
    for g in &grouping.groups {
        let b = blueprint_of[&g.members[0]];
        if g.members.iter().any(|m| blueprint_of[m] != b) {
            return invalid("group blueprints do not reproduce under demographic grouping");
        }
        group_blueprint.push(b);
    }

    let plans = video_plans(spec.seed, cs.n_videos, cs.scenes_per_video, &spec.frames);
    let windows: Vec<SceneWindow> = plans.iter().flat_map(|p| p.scenes.windows(&p.video_id, p.fps, p.t_offset)).collect();

    // planted classes per (window, group) cell, stratified per indicator
    let n_cells = windows.len() * grouping.groups.len();
    let mut labels = vec![[0u8; 3]; n_cells];
    for (h, props) in cs.proportions.iter().enumerate() {
        let counts = stratified_counts(props, n_cells);
        let mut pool: Vec<u8> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c as u8, k)).collect();
        pool.shuffle(&mut rng_for(spec.seed, &format!("plant/{}", Indicator::ALL[h])));
        for (cell, l) in labels.iter_mut().zip(pool) {
            cell[h] = l;
        }
    }
    let thresholds = ClassThresholds { engagement: cs.engagement_threshold };
    let en_rep = engagement_representatives(cs.engagement_threshold);
    let emr_rep = emr_representatives(cs.gaze_per_scene);
    let mut planted = Vec::with_capacity(n_cells);
    for (wi, w) in windows.iter().enumerate() {
        for (gi, g) in grouping.groups.iter().enumerate() {
            let cell = labels[wi * grouping.groups.len() + gi];
            let (values, labels) = match cs.groups[group_blueprint[gi]].means {
                Some(m) => {
                    let v = [m.engagement, m.emotion, m.emr];
                    let mut l = [0u8; 3];
                    for (h, ind) in Indicator::ALL.iter().enumerate() {
                        l[h] = signal::classify_with(&thresholds, *ind, v[h])?.label;
                    }
                    (v, l)
                }
                None => {
                    ([en_rep[cell[0] as usize], EMOTION_REPRESENTATIVES[cell[1] as usize], emr_rep[cell[2] as usize]], cell)
                }
            };
            planted.push(PlantedCell {
                video_id: w.video_id.clone(),
                scene_index: w.scene_index,
                group_id: g.group_id.clone(),
                values,
                labels,
            });
        }
    }

    let group_index: BTreeMap<&str, usize> =
        grouping.groups.iter().enumerate().flat_map(|(gi, g)| g.members.iter().map(move |m| (m.as_str(), gi))).collect();
    let n_groups = grouping.groups.len();
    let streams = par::map_indexed(exec, profiles.len(), |pi| {
        let pid = &profiles[pi].participant_id;
        let gi = group_index[pid.as_str()];
        let mut rng = rng_for(spec.seed, &format!("streams/{pid}"));
        let mut s = ParticipantStreams::default();
        for (wi, w) in windows.iter().enumerate() {
            let [en, em, emr] = planted[wi * n_groups + gi].values;
            for t in sample_times(w, cs.eeg_per_scene) {
                let en_s = (en + cs.noise.engagement * normal(&mut rng)).clamp(1e-3, 1.0 - 1e-3);
                let em_s = (em + cs.noise.emotion * normal(&mut rng)).clamp(-99.0, 99.0);
                s.eeg.push(band_powers(t, en_s, em_s));
            }
            let n = cs.gaze_per_scene;
            let p = (emr + cs.noise.emr * normal(&mut rng)).clamp(0.0, 1.0);
            let on = (p * n as f64).round() as usize;
            for (j, t) in sample_times(w, n).enumerate() {
                // spread `on` samples evenly over the window
                s.gaze.push(GazeSample { t, on_screen: (j + 1) * on / n > j * on / n });
            }
        }
        (pid.clone(), s)
    });
    Ok(SynthCohort {
        cohort: Cohort { profiles, streams: streams.into_iter().collect() },
        grouping,
        windows,
        planted,
        thresholds,
    })
}

/// Renders one video from scene lengths: a flat colour per scene, dark and
/// bright scenes alternating, plus bounded uniform pixel noise.
pub fn render_frames(scenes: &SceneList, frames: &FramesSpec, seed: u64, video: &str) -> Vec<Frame> {
    let mut rng = rng_for(seed, &format!("frames/{video}"));
    let n = frames.height * frames.width;
    let a = i16::from(frames.noise);
    let mut out = Vec::with_capacity(scenes.frame_count);
    for (si, (s, e)) in scenes.scenes().enumerate() {
        let base: [i16; 3] = if si % 2 == 0 {
            [0; 3].map(|_| rng.random_range(0..=60))
        } else {
            [0; 3].map(|_| rng.random_range(180..=255))
        };
        for f in s..e {
            let mut planes = Vec::with_capacity(3 * n);
            for c in base {
                for _ in 0..n {
                    let v = c + if a > 0 { rng.random_range(-a..=a) } else { 0 };
                    planes.push(v.clamp(0, 255) as u8);
                }
            }
            out.push(Frame { index: f, height: frames.height, width: frames.width, planes });
        }
    }
    out
}

/// Frame sequences for every video of the cohort layout.
pub fn gen_frames(spec: &SynthSpec, exec: Execution) -> Result<Vec<(VideoPlan, Vec<Frame>)>, SynthError> {
    validate_frames(&spec.frames)?;
    if spec.cohort.n_videos == 0 || spec.cohort.scenes_per_video == 0 {
        return invalid("n_videos and scenes_per_video must be positive");
    }
    let plans = video_plans(spec.seed, spec.cohort.n_videos, spec.cohort.scenes_per_video, &spec.frames);
    Ok(par::map_slice(exec, &plans, |p| (p.clone(), render_frames(&p.scenes, &spec.frames, spec.seed, &p.video_id))))
}

/// The toy model task: visual tokens, captions and per-indicator labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTask {
    pub dims: ModelDims,
    pub train: Vec<VideoExample>,
    pub test: Vec<VideoExample>,
    pub groups: Vec<String>,
    /// Per video id, one label triple per group in `groups` order.
    pub group_labels: BTreeMap<String, Vec<[usize; 3]>>,
}

/// Labels of cluster `k`.
pub fn cluster_labels(k: usize) -> [usize; 3] {
    [k % 2, k % 3, (k / 2) % 3]
}

/// Caption tokens: a fixed opener, the cluster token, a token chosen by the
/// sign of feature channel 0, and a fixed closer.
pub fn caption_for(cluster: usize, channel0_mean: f64) -> Vec<usize> {
    vec![1, 2 + cluster, 12 + usize::from(channel0_mean >= 0.0), 14]
}

pub fn gen_model_task(spec: &SynthSpec) -> Result<ModelTask, SynthError> {
    let ms = &spec.model_task;
    ms.dims.validate().map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    if ms.n_clusters == 0 || ms.n_clusters > 10 {
        return invalid("n_clusters must be in 1..=10");
    }
    if ms.dims.vocab < 16 || ms.dims.max_caption < 4 {
        return invalid("model task captions need vocab >= 16 and max_caption >= 4");
    }
    if ms.n_train == 0 || ms.n_test == 0 {
        return invalid("n_train and n_test must be positive");
    }
    if [ms.cluster_scale, ms.video_noise, ms.frame_noise, ms.token_noise].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return invalid("noise scales must be finite and non-negative");
    }
    if !(0.0..=1.0).contains(&ms.group_agreement) {
        return invalid("group_agreement must be a probability");
    }
    let d = ms.dims;
    let mut rng = rng_for(spec.seed, "task/centroids");
    let centroids = crate::nn::gaussian((ms.n_clusters, d.feat_channels), ms.cluster_scale, &mut rng);
    let make = |split: &str, i: usize| -> (VideoExample, usize) {
        let video_id = format!("{split}-{i:03}");
        let k = i % ms.n_clusters;
        let mut rng = rng_for(spec.seed, &format!("task/{video_id}"));
        let mut features = Array2::zeros((d.visual_tokens(), d.feat_channels));
        let offset: Vec<f64> = (0..d.feat_channels).map(|_| ms.video_noise * normal(&mut rng)).collect();
        let tpf = d.tokens_per_frame();
        for f in 0..d.n_frames {
            let frame: Vec<f64> = (0..d.feat_channels).map(|_| ms.frame_noise * normal(&mut rng)).collect();
            for t in 0..tpf {
                for c in 0..d.feat_channels {
                    features[[f * tpf + t, c]] = centroids[[k, c]] + offset[c] + frame[c] + ms.token_noise * normal(&mut rng);
                }
            }
        }
        let ch0 = features.column(0).mean().expect("non-empty");
        (VideoExample { video_id, features, caption: caption_for(k, ch0), labels: cluster_labels(k) }, k)
    };
    let mut train: Vec<VideoExample> = (0..ms.n_train).map(|i| make("train", i).0).collect();
    let mut test: Vec<VideoExample> = (0..ms.n_test).map(|i| make("test", i).0).collect();
    if ms.shuffle_labels {
        let mut rng = rng_for(spec.seed, "task/shuffle");
        for set in [&mut train, &mut test] {
            let mut labels: Vec<[usize; 3]> = set.iter().map(|e| e.labels).collect();
            labels.shuffle(&mut rng);
            for (e, l) in set.iter_mut().zip(labels) {
                e.labels = l;
            }
        }
    }
    let groups: Vec<String> = (0..ms.n_groups).map(|g| format!("group-{g:02}")).collect();
    let mut group_labels = BTreeMap::new();
    for e in train.iter().chain(&test) {
        let mut rng = rng_for(spec.seed, &format!("task/groups/{}", e.video_id));
        let per_group = (0..ms.n_groups)
            .map(|_| {
                let mut l = e.labels;
                for (h, ind) in Indicator::ALL.iter().enumerate() {
                    if !rng.random_bool(ms.group_agreement) {
                        let other = rng.random_range(1..ind.n_classes());
                        l[h] = (l[h] + other) % ind.n_classes();
                    }
                }
                l
            })
            .collect();
        group_labels.insert(e.video_id.clone(), per_group);
    }
    Ok(ModelTask { dims: d, train, test, groups, group_labels })
}

/// Ground-truth cuts written next to the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCuts {
    pub video_id: String,
    pub cuts: Vec<usize>,
    pub frame_count: usize,
}

/// Summary of a generated directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub engagement_threshold: f64,
    pub participants: usize,
    pub groups: Vec<String>,
    pub videos: Vec<String>,
    pub windows: usize,
    pub planted_cells: usize,
    pub model_task_train: usize,
    pub model_task_test: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

/// Writes the full synthetic dataset under `outdir`:
///
/// ```text
/// manifest.json  profiles.csv  scenes.json  planted.jsonl  cuts.json
/// eeg/<participant>.csv  gaze/<participant>.csv
/// frames/<video>.bin  frames/<video>.json
/// model_task.json
/// ```
pub fn write_dataset(spec: &SynthSpec, outdir: &Path, exec: Execution) -> Result<SynthManifest, SynthError> {
    let cohort = gen_cohort(spec, exec)?;
    let videos = gen_frames(spec, exec)?;
    let task = gen_model_task(spec)?;
    for sub in ["eeg", "gaze", "frames"] {
        fs::create_dir_all(outdir.join(sub))?;
    }
    aggregation::write_profiles_csv(fs::File::create(outdir.join("profiles.csv"))?, &cohort.cohort.profiles)?;
    for (pid, s) in &cohort.cohort.streams {
        signal::write_eeg_csv(BufWriter::new(fs::File::create(outdir.join("eeg").join(format!("{pid}.csv")))?), &s.eeg)?;
        signal::write_gaze_csv(BufWriter::new(fs::File::create(outdir.join("gaze").join(format!("{pid}.csv")))?), &s.gaze)?;
    }
    write_json(&outdir.join("scenes.json"), &cohort.windows)?;
    aggregation::write_jsonl(BufWriter::new(fs::File::create(outdir.join("planted.jsonl"))?), &cohort.planted)?;
    let mut cuts = Vec::with_capacity(videos.len());
    for (plan, frames) in &videos {
        let mut meta = fsvr::write_frames(
            BufWriter::new(fs::File::create(outdir.join("frames").join(format!("{}.bin", plan.video_id)))?),
            frames,
        )?;
        meta.video_id = Some(plan.video_id.clone());
        meta.fps = Some(plan.fps);
        meta.t_offset = Some(plan.t_offset);
        write_json::<FrameMeta>(&outdir.join("frames").join(format!("{}.json", plan.video_id)), &meta)?;
        cuts.push(PlantedCuts { video_id: plan.video_id.clone(), cuts: plan.scenes.cuts.clone(), frame_count: plan.scenes.frame_count });
    }
    write_json(&outdir.join("cuts.json"), &cuts)?;
    write_json(&outdir.join("model_task.json"), &task)?;
    let manifest = SynthManifest {
        seed: spec.seed,
        engagement_threshold: spec.cohort.engagement_threshold,
        participants: cohort.cohort.profiles.len(),
        groups: cohort.grouping.groups.iter().map(|g| g.group_id.clone()).collect(),
        videos: videos.iter().map(|(p, _)| p.video_id.clone()).collect(),
        windows: cohort.windows.len(),
        planted_cells: cohort.planted.len(),
        model_task_train: task.train.len(),
        model_task_test: task.test.len(),
    };
    write_json(&outdir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

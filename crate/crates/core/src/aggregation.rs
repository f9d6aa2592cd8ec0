//! Scene-window synchronisation and demographic aggregation.
//!
//! Participant streams are cut into scene windows (half-open `[t1, t2)`),
//! averaged per participant, then averaged across the members of each
//! demographic group to produce labelled [`AggregatedSri`] records.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::signal::{
    self, classify_with, BandPowerSample, ClassThresholds, GazeSample, Indicator, SignalError, SriClass,
};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("participant {participant_id} has no samples for {video_id} scene {scene_index}")]
    MissingParticipantData { participant_id: String, video_id: String, scene_index: usize },
    #[error("duplicate participant id {0}")]
    DuplicateParticipant(String),
    #[error("invalid scene window {video_id}#{scene_index}: {reason}")]
    InvalidWindow { video_id: String, scene_index: usize, reason: String },
    #[error("invalid profile at row {row}: {reason}")]
    InvalidProfile { row: usize, reason: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudienceProfile {
    pub participant_id: String,
    pub gender: Gender,
    pub age: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneWindow {
    pub video_id: String,
    pub scene_index: usize,
    pub t1: f64,
    pub t2: f64,
}

impl SceneWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.t1 && t < self.t2
    }

    fn validate(&self) -> Result<(), AggregationError> {
        if !(self.t1.is_finite() && self.t2.is_finite() && self.t1 < self.t2) {
            return Err(AggregationError::InvalidWindow {
                video_id: self.video_id.clone(),
                scene_index: self.scene_index,
                reason: format!("need finite t1 < t2, got [{}, {})", self.t1, self.t2),
            });
        }
        Ok(())
    }
}

/// Checks that windows are well formed and that windows of one video are
/// ordered and disjoint.
pub fn validate_windows(windows: &[SceneWindow]) -> Result<(), AggregationError> {
    let mut last: BTreeMap<&str, &SceneWindow> = BTreeMap::new();
    for w in windows {
        w.validate()?;
        if let Some(prev) = last.get(w.video_id.as_str()) {
            if w.scene_index <= prev.scene_index || w.t1 < prev.t2 {
                return Err(AggregationError::InvalidWindow {
                    video_id: w.video_id.clone(),
                    scene_index: w.scene_index,
                    reason: "windows of one video must be ordered and disjoint".into(),
                });
            }
        }
        last.insert(&w.video_id, w);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingRules {
    pub min_size: usize,
    pub max_size: usize,
    pub max_age_span: u32,
}

impl Default for GroupingRules {
    fn default() -> Self {
        GroupingRules { min_size: 5, max_size: 20, max_age_span: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub group_id: String,
    pub gender: Gender,
    pub min_age: u32,
    pub max_age: u32,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Vec<Group>,
    pub unassigned: Vec<String>,
}

/// Greedy single-gender grouping over ages.
///
/// Within each gender, participants are sorted by `(age, id)`. A group opens
/// at the youngest unassigned participant and grows while the age span stays
/// within `max_age_span` and the size below `max_size`. Groups smaller than
/// `min_size` are dissolved into `unassigned`.
pub fn group_by_demographics(profiles: &[AudienceProfile], rules: &GroupingRules) -> Grouping {
    let mut out = Grouping::default();
    for gender in [Gender::Female, Gender::Male] {
        let mut members: Vec<&AudienceProfile> = profiles.iter().filter(|p| p.gender == gender).collect();
        members.sort_by(|a, b| a.age.cmp(&b.age).then_with(|| a.participant_id.cmp(&b.participant_id)));
        let mut start = 0;
        let mut index = 0;
        while start < members.len() {
            let first_age = members[start].age;
            let mut end = start + 1;
            while end < members.len()
                && end - start < rules.max_size
                && members[end].age - first_age <= rules.max_age_span
            {
                end += 1;
            }
            let chunk = &members[start..end];
            if chunk.len() >= rules.min_size {
                out.groups.push(Group {
                    group_id: format!("{}-{:02}", gender.as_str(), index),
                    gender,
                    min_age: first_age,
                    max_age: chunk[chunk.len() - 1].age,
                    members: chunk.iter().map(|p| p.participant_id.clone()).collect(),
                });
                index += 1;
            } else {
                out.unassigned.extend(chunk.iter().map(|p| p.participant_id.clone()));
            }
            start = end;
        }
    }
    out
}

/// Mean via the running update `m += (x - m) / k`, which returns a constant
/// input exactly.
pub fn running_mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let mut mean = 0.0;
    let mut k = 0usize;
    for x in values {
        k += 1;
        mean += (x - mean) / k as f64;
    }
    (k > 0).then_some(mean)
}

/// Timestamped per-sample indicator values for each participant.
pub type ParticipantValues = BTreeMap<String, Vec<(f64, f64)>>;

/// Group-level aggregate over one window: per-participant means of the
/// in-window samples, then the mean of those means. With equal per-participant
/// sample counts this equals the pooled grand mean.
pub fn aggregate(values: &ParticipantValues, members: &[String], window: &SceneWindow) -> Result<f64, AggregationError> {
    let mut means = Vec::with_capacity(members.len());
    for pid in members {
        let m = values
            .get(pid)
            .and_then(|samples| running_mean(samples.iter().filter(|(t, _)| window.contains(*t)).map(|(_, v)| *v)))
            .ok_or_else(|| missing(pid, window))?;
        means.push(m);
    }
    running_mean(means).ok_or_else(|| AggregationError::InvalidWindow {
        video_id: window.video_id.clone(),
        scene_index: window.scene_index,
        reason: "empty group".into(),
    })
}

fn missing(pid: &str, w: &SceneWindow) -> AggregationError {
    AggregationError::MissingParticipantData {
        participant_id: pid.to_string(),
        video_id: w.video_id.clone(),
        scene_index: w.scene_index,
    }
}

/// Raw streams recorded for one participant over a whole session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticipantStreams {
    pub eeg: Vec<BandPowerSample>,
    pub gaze: Vec<GazeSample>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub profiles: Vec<AudienceProfile>,
    pub streams: BTreeMap<String, ParticipantStreams>,
}

impl Cohort {
    pub fn validate(&self) -> Result<(), AggregationError> {
        let mut seen = BTreeSet::new();
        for p in &self.profiles {
            if !seen.insert(p.participant_id.as_str()) {
                return Err(AggregationError::DuplicateParticipant(p.participant_id.clone()));
            }
        }
        Ok(())
    }
}

/// Time-averaged indicator of one participant over one scene window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSri {
    pub participant_id: String,
    pub video_id: String,
    pub scene_index: usize,
    pub indicator: Indicator,
    pub value: f64,
    pub samples: usize,
}

fn window_slice<T>(items: &[T], t_of: impl Fn(&T) -> f64, w: &SceneWindow) -> std::ops::Range<usize> {
    let lo = items.partition_point(|x| t_of(x) < w.t1);
    let hi = items.partition_point(|x| t_of(x) < w.t2);
    lo..hi.max(lo)
}

/// Per-participant scene SRIs for all three indicators. Windows without data
/// for this participant are reported as `MissingParticipantData`.
pub fn participant_sris(
    participant_id: &str,
    streams: &ParticipantStreams,
    windows: &[SceneWindow],
) -> Result<Vec<ParticipantSri>, AggregationError> {
    let mut out = Vec::with_capacity(windows.len() * 3);
    for w in windows {
        let eeg = &streams.eeg[window_slice(&streams.eeg, |s| s.t, w)];
        if eeg.is_empty() {
            return Err(missing(participant_id, w));
        }
        for ind in [Indicator::Engagement, Indicator::Emotion] {
            let mut vals = Vec::with_capacity(eeg.len());
            for s in eeg {
                vals.push(signal::compute_indicator(ind, s).expect("eeg indicator")?);
            }
            out.push(ParticipantSri {
                participant_id: participant_id.to_string(),
                video_id: w.video_id.clone(),
                scene_index: w.scene_index,
                indicator: ind,
                value: running_mean(vals).expect("non-empty"),
                samples: eeg.len(),
            });
        }
        let gaze = &streams.gaze[window_slice(&streams.gaze, |g| g.t, w)];
        if gaze.is_empty() {
            return Err(missing(participant_id, w));
        }
        out.push(ParticipantSri {
            participant_id: participant_id.to_string(),
            video_id: w.video_id.clone(),
            scene_index: w.scene_index,
            indicator: Indicator::Emr,
            value: signal::compute_emr(gaze, w.t1, w.t2)?,
            samples: gaze.len(),
        });
    }
    Ok(out)
}

/// One group-level, scene-level aggregated indicator with its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSri {
    pub video_id: String,
    pub scene_index: usize,
    pub group_id: String,
    pub indicator: Indicator,
    pub value: f64,
    pub class_label: SriClass,
}

/// Combines participant-level SRIs into group records, one per
/// (group, video, scene, indicator), ordered by
/// `(video_id, scene_index, group_id, indicator)`.
///
/// The set of scenes is the union of scenes present in `sris`; every group
/// member must have a value for every scene and indicator.
pub fn aggregate_participant_sris(
    sris: &[ParticipantSri],
    grouping: &Grouping,
    thresholds: &ClassThresholds,
) -> Result<Vec<AggregatedSri>, AggregationError> {
    let mut by_key: BTreeMap<(&str, usize, Indicator, &str), f64> = BTreeMap::new();
    let mut scenes: BTreeSet<(&str, usize)> = BTreeSet::new();
    for s in sris {
        scenes.insert((&s.video_id, s.scene_index));
        by_key.insert((&s.video_id, s.scene_index, s.indicator, &s.participant_id), s.value);
    }
    let mut groups: Vec<&Group> = grouping.groups.iter().collect();
    groups.sort_by(|a, b| a.group_id.cmp(&b.group_id));

    let mut out = Vec::with_capacity(scenes.len() * groups.len() * 3);
    for &(video_id, scene_index) in &scenes {
        for g in &groups {
            for ind in Indicator::ALL {
                let mut vals = Vec::with_capacity(g.members.len());
                for pid in &g.members {
                    let v = by_key.get(&(video_id, scene_index, ind, pid.as_str())).ok_or_else(|| {
                        AggregationError::MissingParticipantData {
                            participant_id: pid.clone(),
                            video_id: video_id.to_string(),
                            scene_index,
                        }
                    })?;
                    vals.push(*v);
                }
                let value = running_mean(vals).expect("groups are non-empty");
                out.push(AggregatedSri {
                    video_id: video_id.to_string(),
                    scene_index,
                    group_id: g.group_id.clone(),
                    indicator: ind,
                    value,
                    class_label: classify_with(thresholds, ind, value)?,
                });
            }
        }
    }
    Ok(out)
}

/// Full aggregation from raw streams: per-participant window means (computed
/// in parallel per participant), then group means.
pub fn emit_records(
    cohort: &Cohort,
    grouping: &Grouping,
    windows: &[SceneWindow],
    thresholds: &ClassThresholds,
    exec: Execution,
) -> Result<Vec<AggregatedSri>, AggregationError> {
    cohort.validate()?;
    validate_windows(windows)?;
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let members: Vec<&String> = grouping.groups.iter().flat_map(|g| g.members.iter()).collect();
    let empty = ParticipantStreams::default();
    let per_participant = par::try_map_indexed(exec, members.len(), |i| {
        let pid = members[i];
        participant_sris(pid, cohort.streams.get(pid).unwrap_or(&empty), windows)
    })?;
    let sris: Vec<ParticipantSri> = per_participant.into_iter().flatten().collect();
    aggregate_participant_sris(&sris, grouping, thresholds)
}

/// Population-level records: the whole cohort treated as a single group
/// named `all`.
pub fn emit_population_records(
    cohort: &Cohort,
    windows: &[SceneWindow],
    thresholds: &ClassThresholds,
    exec: Execution,
) -> Result<Vec<AggregatedSri>, AggregationError> {
    let everyone = Grouping {
        groups: vec![Group {
            group_id: "all".into(),
            gender: Gender::Female,
            min_age: cohort.profiles.iter().map(|p| p.age).min().unwrap_or(0),
            max_age: cohort.profiles.iter().map(|p| p.age).max().unwrap_or(0),
            members: cohort.profiles.iter().map(|p| p.participant_id.clone()).collect(),
        }],
        unassigned: Vec::new(),
    };
    emit_records(cohort, &everyone, windows, thresholds, exec)
}

pub fn read_profiles_csv<R: Read>(reader: R) -> Result<Vec<AudienceProfile>, AggregationError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<AudienceProfile> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let p: AudienceProfile = rec?;
        if p.participant_id.is_empty() {
            return Err(AggregationError::InvalidProfile { row: i + 1, reason: "empty participant_id".into() });
        }
        if !seen.insert(p.participant_id.clone()) {
            return Err(AggregationError::DuplicateParticipant(p.participant_id));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_profiles_csv<W: Write>(writer: W, profiles: &[AudienceProfile]) -> Result<(), AggregationError> {
    let mut w = csv::Writer::from_writer(writer);
    for p in profiles {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, items: &[T]) -> Result<(), AggregationError> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R) -> Result<Vec<T>, AggregationError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(id: &str, gender: Gender, age: u32) -> AudienceProfile {
        AudienceProfile { participant_id: id.into(), gender, age }
    }

    fn window(t1: f64, t2: f64) -> SceneWindow {
        SceneWindow { video_id: "v0".into(), scene_index: 0, t1, t2 }
    }

    /// Independent partition oracle: walk sorted ages and cut whenever the
    /// span or size rule would break.
    fn oracle_sizes(mut ages: Vec<u32>, rules: &GroupingRules) -> (Vec<usize>, usize) {
        ages.sort();
        let mut sizes = Vec::new();
        let mut dropped = 0;
        let mut current: Vec<u32> = Vec::new();
        for a in ages {
            if !current.is_empty() && (a - current[0] > rules.max_age_span || current.len() == rules.max_size) {
                if current.len() >= rules.min_size {
                    sizes.push(current.len());
                } else {
                    dropped += current.len();
                }
                current.clear();
            }
            current.push(a);
        }
        if current.len() >= rules.min_size {
            sizes.push(current.len());
        } else {
            dropped += current.len();
        }
        (sizes, dropped)
    }

    #[test]
    fn grouping_examples() {
        let rules = GroupingRules::default();
        let ten: Vec<_> = (0..10).map(|i| profile(&format!("f{i}"), Gender::Female, 21 + (i % 4))).collect();
        let g = group_by_demographics(&ten, &rules);
        assert_eq!(g.groups.len(), 1);
        assert_eq!(g.groups[0].members.len(), 10);
        assert!(g.unassigned.is_empty());

        let four: Vec<_> = (0..4).map(|i| profile(&format!("m{i}"), Gender::Male, 30)).collect();
        let g = group_by_demographics(&four, &rules);
        assert!(g.groups.is_empty());
        assert_eq!(g.unassigned.len(), 4);

        let twelve: Vec<_> = (0..12)
            .map(|i| profile(&format!("f{i:02}"), Gender::Female, if i < 6 { 20 } else { 40 }))
            .collect();
        let g = group_by_demographics(&twelve, &rules);
        assert_eq!(g.groups.iter().map(|g| g.members.len()).collect::<Vec<_>>(), vec![6, 6]);
        assert_eq!(oracle_sizes(twelve.iter().map(|p| p.age).collect(), &rules), (vec![6, 6], 0));
    }

    #[test]
    fn grouping_caps_size_and_splits_gender() {
        let mut ps: Vec<_> = (0..45).map(|i| profile(&format!("f{i:02}"), Gender::Female, 25)).collect();
        ps.extend((0..5).map(|i| profile(&format!("m{i}"), Gender::Male, 25)));
        let g = group_by_demographics(&ps, &GroupingRules::default());
        let sizes: Vec<usize> = g.groups.iter().map(|g| g.members.len()).collect();
        assert_eq!(sizes, vec![20, 20, 5, 5]);
        assert_eq!(g.groups[3].gender, Gender::Male);
        assert!(g.unassigned.is_empty());
    }

    proptest! {
        #[test]
        fn grouping_invariants(ages in proptest::collection::vec((0u32..2, 15u32..70), 1..120)) {
            let rules = GroupingRules::default();
            let ps: Vec<_> = ages.iter().enumerate().map(|(i, (g, a))| {
                profile(&format!("p{i:03}"), if *g == 0 { Gender::Female } else { Gender::Male }, *a)
            }).collect();
            let out = group_by_demographics(&ps, &rules);
            let by_id: BTreeMap<&str, &AudienceProfile> = ps.iter().map(|p| (p.participant_id.as_str(), p)).collect();
            let mut seen = BTreeSet::new();
            for g in &out.groups {
                prop_assert!(g.members.len() >= rules.min_size && g.members.len() <= rules.max_size);
                let ages: Vec<u32> = g.members.iter().map(|m| by_id[m.as_str()].age).collect();
                prop_assert!(ages.iter().max().unwrap() - ages.iter().min().unwrap() <= rules.max_age_span);
                prop_assert!(g.members.iter().all(|m| by_id[m.as_str()].gender == g.gender));
                for m in &g.members { prop_assert!(seen.insert(m.clone())); }
            }
            for m in &out.unassigned { prop_assert!(seen.insert(m.clone())); }
            prop_assert_eq!(seen.len(), ps.len());
            for gender in [Gender::Female, Gender::Male] {
                let gender_ages: Vec<u32> = ps.iter().filter(|p| p.gender == gender).map(|p| p.age).collect();
                let (sizes, _) = oracle_sizes(gender_ages, &rules);
                let got: Vec<usize> = out.groups.iter().filter(|g| g.gender == gender).map(|g| g.members.len()).collect();
                prop_assert_eq!(got, sizes);
            }
        }
    }

    fn values(data: &[(&str, &[f64])]) -> ParticipantValues {
        data.iter()
            .map(|(pid, vs)| (pid.to_string(), vs.iter().enumerate().map(|(j, v)| (j as f64 * 0.1, *v)).collect()))
            .collect()
    }

    #[test]
    fn aggregate_examples() {
        let w = window(0.0, 10.0);
        let members = vec!["a".to_string(), "b".to_string()];
        let v = values(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.0])]);
        assert_eq!(aggregate(&v, &members, &w).unwrap(), 2.5);

        let v = values(&[("a", &[0.7])]);
        assert_eq!(aggregate(&v, &members[..1], &w).unwrap(), 0.7);

        // per-participant means {1, 2} -> 1.5, whereas pooling would give 1.2
        let v = values(&[("a", &[0.0, 0.0, 0.0, 4.0]), ("b", &[2.0])]);
        assert_eq!(aggregate(&v, &members, &w).unwrap(), 1.5);

        let err = aggregate(&v, &members, &window(5.0, 6.0)).unwrap_err();
        assert!(matches!(err, AggregationError::MissingParticipantData { ref participant_id, .. } if participant_id == "a"));
        let v = values(&[("a", &[1.0])]);
        let err = aggregate(&v, &members, &w).unwrap_err();
        assert!(matches!(err, AggregationError::MissingParticipantData { ref participant_id, .. } if participant_id == "b"));
    }

    #[test]
    fn window_is_half_open() {
        let members = vec!["a".to_string()];
        let v: ParticipantValues = [("a".to_string(), vec![(0.0, 1.0), (1.0, 100.0)])].into();
        assert_eq!(aggregate(&v, &members, &window(0.0, 1.0)).unwrap(), 1.0);
        assert_eq!(aggregate(&v, &members, &window(1.0, 2.0)).unwrap(), 100.0);
    }

    proptest! {
        #[test]
        fn constant_signal_is_exact(c in -1e6f64..1e6, counts in proptest::collection::vec(1usize..40, 1..12)) {
            let members: Vec<String> = (0..counts.len()).map(|i| format!("p{i}")).collect();
            let v: ParticipantValues = members.iter().zip(&counts)
                .map(|(m, n)| (m.clone(), (0..*n).map(|j| (j as f64 * 0.01, c)).collect()))
                .collect();
            prop_assert_eq!(aggregate(&v, &members, &window(0.0, 100.0)).unwrap(), c);
        }

        #[test]
        fn permutation_invariant(rows in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 1..20), 1..10), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let members: Vec<String> = (0..rows.len()).map(|i| format!("p{i}")).collect();
            let build = |rows: &[Vec<f64>]| -> ParticipantValues {
                members.iter().zip(rows).map(|(m, r)| (m.clone(), r.iter().enumerate().map(|(j, v)| (j as f64, *v)).collect())).collect()
            };
            let w = window(0.0, 1e9);
            let base = aggregate(&build(&rows), &members, &w).unwrap();
            let mut shuffled = rows.clone();
            for r in shuffled.iter_mut() { r.shuffle(&mut rng); }
            let mut order = members.clone();
            order.shuffle(&mut rng);
            let other = aggregate(&build(&shuffled), &order, &w).unwrap();
            prop_assert!((base - other).abs() <= 1e-12 * (1.0 + base.abs()));
        }

        #[test]
        fn balanced_two_level_equals_pooled(rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 5), 1..10)) {
            let members: Vec<String> = (0..rows.len()).map(|i| format!("p{i}")).collect();
            let v: ParticipantValues = members.iter().zip(&rows)
                .map(|(m, r)| (m.clone(), r.iter().enumerate().map(|(j, x)| (j as f64, *x)).collect()))
                .collect();
            let pooled: f64 = rows.iter().flatten().sum::<f64>() / (rows.len() * 5) as f64;
            let got = aggregate(&v, &members, &window(0.0, 10.0)).unwrap();
            prop_assert!((got - pooled).abs() < 1e-12);
        }
    }

    fn tiny_cohort(n_groups: usize, per_group: usize, windows: &[SceneWindow]) -> (Cohort, Grouping) {
        let mut cohort = Cohort::default();
        for g in 0..n_groups {
            for i in 0..per_group {
                let pid = format!("g{g}p{i}");
                cohort.profiles.push(profile(&pid, Gender::Female, 20 + 10 * g as u32));
                let mut st = ParticipantStreams::default();
                for w in windows {
                    for j in 0..4 {
                        let t = w.t1 + (j as f64 + 0.5) * (w.t2 - w.t1) / 4.0;
                        st.eeg.push(BandPowerSample { t, a1: 1.0, a2: 6.0, a3: 4.0, b1: 1.0, b2: 5.0, b3: 5.0 });
                        st.gaze.push(GazeSample { t, on_screen: j % 2 == 0 });
                    }
                }
                cohort.streams.insert(pid, st);
            }
        }
        let grouping = group_by_demographics(&cohort.profiles, &GroupingRules::default());
        (cohort, grouping)
    }

    fn three_scenes() -> Vec<SceneWindow> {
        (0..3).map(|s| SceneWindow { video_id: "v0".into(), scene_index: s, t1: s as f64, t2: s as f64 + 1.0 }).collect()
    }

    #[test]
    fn emit_records_cardinality_and_order() {
        let windows = three_scenes();
        let (cohort, grouping) = tiny_cohort(2, 5, &windows);
        assert_eq!(grouping.groups.len(), 2);
        let recs = emit_records(&cohort, &grouping, &windows, &ClassThresholds::default(), Execution::Sequential).unwrap();
        assert_eq!(recs.len(), 18);
        let keys: Vec<_> = recs.iter().map(|r| (r.video_id.clone(), r.scene_index, r.group_id.clone(), r.indicator)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for r in &recs {
            let expected = match r.indicator {
                Indicator::Engagement => 0.5,
                Indicator::Emotion => -20.0,
                Indicator::Emr => 0.5,
            };
            assert_eq!(r.value, expected, "{r:?}");
            assert_eq!(r.class_label, classify_with(&ClassThresholds::default(), r.indicator, r.value).unwrap());
        }
        let par = emit_records(&cohort, &grouping, &windows, &ClassThresholds::default(), Execution::Parallel).unwrap();
        assert_eq!(recs, par);
        assert!(emit_records(&cohort, &grouping, &[], &ClassThresholds::default(), Execution::Sequential).unwrap().is_empty());
    }

    #[test]
    fn emit_records_reports_missing_participant() {
        let windows = three_scenes();
        let (mut cohort, grouping) = tiny_cohort(1, 5, &windows);
        cohort.streams.get_mut("g0p3").unwrap().eeg.retain(|s| s.t < 1.0);
        let err = emit_records(&cohort, &grouping, &windows, &ClassThresholds::default(), Execution::Parallel).unwrap_err();
        assert!(matches!(err, AggregationError::MissingParticipantData { ref participant_id, scene_index: 1, .. } if participant_id == "g0p3"));
    }

    #[test]
    fn overlapping_windows_rejected() {
        let mut w = three_scenes();
        w[1].t1 = 0.5;
        assert!(validate_windows(&w).is_err());
        assert!(validate_windows(&[window(1.0, 1.0)]).is_err());
    }

    #[test]
    fn profiles_csv() {
        let text = "participant_id,gender,age\na,female,21\nb,male,40\n";
        let ps = read_profiles_csv(text.as_bytes()).unwrap();
        assert_eq!(ps[1], profile("b", Gender::Male, 40));
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &ps).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
        assert!(read_profiles_csv("participant_id,gender,age\na,female,21\na,male,3\n".as_bytes()).is_err());
        assert!(read_profiles_csv("participant_id,gender,age\na,other,21\n".as_bytes()).is_err());
    }
}

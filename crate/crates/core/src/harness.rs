//! Metrics, the random baseline, model evaluation under both protocols and
//! the λ ablation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::salm::model::ModelParams;
use crate::salm::train::{train_stage1, train_stage2, Stage1Report, Stage2Report};
use crate::salm::{SalmError, TrainConfig, VideoExample};
use crate::signal::Indicator;
use crate::synth::{entity_seed, ModelTask};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("no predictions to score")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Salm(#[from] SalmError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn check(preds: &[usize], labels: &[usize]) -> Result<(), HarnessError> {
    if preds.len() != labels.len() {
        return Err(HarnessError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if preds.is_empty() {
        return Err(HarnessError::Empty);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, HarnessError> {
    check(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `confusion[true][predicted]`, sized to cover every label seen and at
/// least `n_classes`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>, HarnessError> {
    check(preds, labels)?;
    let n = preds.iter().chain(labels).copied().max().map_or(0, |m| m + 1).max(n_classes);
    let mut m = vec![vec![0; n]; n];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1 over classes that occur in `preds` or
/// `labels`.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> Result<f64, HarnessError> {
    let m = confusion_matrix(preds, labels, 0)?;
    Ok(macro_f1_from_confusion(&m))
}

fn macro_f1_from_confusion(m: &[Vec<usize>]) -> f64 {
    let (mut sum, mut classes) = (0.0, 0usize);
    for c in 0..m.len() {
        let tp = m[c][c];
        let support: usize = m[c].iter().sum();
        let predicted: usize = m.iter().map(|row| row[c]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        classes += 1;
        // 2TP / (2TP + FP + FN), zero when TP is zero
        if tp > 0 {
            sum += 2.0 * tp as f64 / (support + predicted) as f64;
        }
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Population-level labels.
    P1,
    /// Per-group labels.
    P2,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(Protocol::P1),
            "p2" => Ok(Protocol::P2),
            other => Err(format!("unknown protocol {other:?} (expected p1 or p2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorMetrics {
    pub indicator: Indicator,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
}

impl IndicatorMetrics {
    pub fn from_pairs(indicator: Indicator, preds: &[usize], labels: &[usize]) -> Result<IndicatorMetrics, HarnessError> {
        let confusion = confusion_matrix(preds, labels, indicator.n_classes())?;
        Ok(IndicatorMetrics {
            indicator,
            accuracy: accuracy(preds, labels)?,
            macro_f1: macro_f1_from_confusion(&confusion),
            support: confusion.iter().map(|r| r.iter().sum()).collect(),
            confusion,
        })
    }
}

/// Provenance recorded with every report. Contains no timestamps so reruns
/// reproduce byte-identical output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub version: String,
    /// Hashes of the inputs, keyed by role.
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub indicators: Vec<IndicatorMetrics>,
    pub metadata: RunMetadata,
}

impl EvalReport {
    /// Two-decimal percentage table.
    pub fn summary(&self) -> String {
        let mut out = format!("protocol {:?}\n", self.protocol);
        for m in &self.indicators {
            out += &format!("{:<11} acc {:6.2}  f1 {:6.2}\n", m.indicator.as_str(), 100.0 * m.accuracy, 100.0 * m.macro_f1);
        }
        out
    }
}

/// Uniform random guesses against labels drawn from the reference class
/// shares, `questions` per indicator and trial. Accuracy and F1 are
/// averaged over trials; confusion matrices are summed.
pub fn random_baseline(questions: usize, trials: usize, seed: u64, exec: Execution) -> Result<EvalReport, HarnessError> {
    if questions == 0 || trials == 0 {
        return Err(HarnessError::Invalid("questions and trials must be positive".into()));
    }
    let mut indicators = Vec::with_capacity(3);
    for ind in Indicator::ALL {
        let k = ind.n_classes();
        let props = ind.reference_proportions();
        let label_dist = WeightedIndex::new(props).expect("positive shares");
        let runs = par::try_map_indexed(exec, trials, |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(entity_seed(seed, &format!("baseline/{ind}/{t}")));
            let mut preds = Vec::with_capacity(questions);
            let mut labels = Vec::with_capacity(questions);
            for _ in 0..questions {
                labels.push(label_dist.sample(&mut rng));
                preds.push(rng.random_range(0..k));
            }
            IndicatorMetrics::from_pairs(ind, &preds, &labels)
        })?;
        let n = runs.len() as f64;
        let mut confusion = vec![vec![0; k]; k];
        for r in &runs {
            for (row, add) in confusion.iter_mut().zip(&r.confusion) {
                for (c, a) in row.iter_mut().zip(add) {
                    *c += a;
                }
            }
        }
        indicators.push(IndicatorMetrics {
            indicator: ind,
            accuracy: runs.iter().map(|r| r.accuracy).sum::<f64>() / n,
            macro_f1: runs.iter().map(|r| r.macro_f1).sum::<f64>() / n,
            support: confusion.iter().map(|r| r.iter().sum()).collect(),
            confusion,
        });
    }
    let mut metadata = RunMetadata { seed, version: env!("CARGO_PKG_VERSION").into(), ..RunMetadata::default() };
    metadata.settings.insert("questions".into(), questions.into());
    metadata.settings.insert("trials".into(), trials.into());
    Ok(EvalReport { protocol: Protocol::P2, indicators, metadata })
}

/// Scores the model on the task's held-out videos. P1 compares each video's
/// prediction with its population label; P2 compares the same prediction
/// with every group's label for that video.
pub fn evaluate(
    params: &ModelParams,
    task: &ModelTask,
    protocol: Protocol,
    k_list: &[usize],
    exec: Execution,
) -> Result<EvalReport, HarnessError> {
    let refs: Vec<&VideoExample> = task.test.iter().collect();
    let preds = params.predict(&refs, k_list, exec)?;
    let mut indicators = Vec::with_capacity(3);
    for (h, ind) in Indicator::ALL.iter().enumerate() {
        let (mut p, mut l) = (Vec::new(), Vec::new());
        for (pred, e) in preds.iter().zip(&task.test) {
            match protocol {
                Protocol::P1 => {
                    p.push(pred[h]);
                    l.push(e.labels[h]);
                }
                Protocol::P2 => {
                    let groups = task.group_labels.get(&e.video_id).ok_or_else(|| {
                        HarnessError::Invalid(format!("no group labels for {}", e.video_id))
                    })?;
                    for g in groups {
                        p.push(pred[h]);
                        l.push(g[h]);
                    }
                }
            }
        }
        indicators.push(IndicatorMetrics::from_pairs(*ind, &p, &l)?);
    }
    Ok(EvalReport { protocol, indicators, metadata: RunMetadata::default() })
}

/// Result of running both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub stage1: Stage1Report,
    pub stage2: Stage2Report,
}

/// Initialises from `cfg.seed` and runs stage 1 then stage 2 on the task's
/// training split.
pub fn train_full(task: &ModelTask, cfg: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    let init = ModelParams::init(task.dims, cfg.seed)?;
    let (warm, stage1) = train_stage1(&init, &task.train, cfg, cfg.stage1_epochs)?;
    let (params, stage2) = train_stage2(&warm, &task.train, Some(&task.test), cfg, cfg.stage2_epochs)?;
    Ok(TrainOutcome { params, stage1, stage2 })
}

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    /// Accuracy per indicator.
    pub accuracy: [f64; 3],
    pub macro_f1: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub protocol: Protocol,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// True if `row` is strictly better than `baseline` on all six metrics.
    pub fn dominates(row: &AblationRow, baseline: &AblationRow) -> bool {
        (0..3).all(|h| row.accuracy[h] > baseline.accuracy[h] && row.macro_f1[h] > baseline.macro_f1[h])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["lambda".to_string()];
        for ind in Indicator::ALL {
            header.push(format!("{ind}_acc"));
            header.push(format!("{ind}_f1"));
        }
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.lambda.to_string()];
            for h in 0..3 {
                rec.push(r.accuracy[h].to_string());
                rec.push(r.macro_f1[h].to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Two-decimal percentage table.
    pub fn summary(&self) -> String {
        let mut out = String::from("lambda  eng_acc eng_f1  emo_acc emo_f1  emr_acc emr_f1\n");
        for r in &self.rows {
            out += &format!("{:<6.2}", r.lambda);
            for h in 0..3 {
                out += &format!("  {:6.2} {:6.2}", 100.0 * r.accuracy[h], 100.0 * r.macro_f1[h]);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains once per λ from the same seed and data and scores each run on the
/// held-out split. Stage 1 does not involve λ, so it runs once and every λ
/// continues from the same warmed-up parameters.
pub fn lambda_ablation(
    task: &ModelTask,
    cfg: &TrainConfig,
    lambdas: &[f64],
    protocol: Protocol,
) -> Result<AblationTable, HarnessError> {
    if lambdas.is_empty() {
        return Err(HarnessError::Invalid("no λ values given".into()));
    }
    let init = ModelParams::init(task.dims, cfg.seed)?;
    let (warm, _) = train_stage1(&init, &task.train, cfg, cfg.stage1_epochs)?;
    let rows = par::try_map_indexed(cfg.execution, lambdas.len(), |i| -> Result<AblationRow, HarnessError> {
        let run_cfg = TrainConfig { lambda: lambdas[i], ..cfg.clone() };
        let (params, _) = train_stage2(&warm, &task.train, None, &run_cfg, cfg.stage2_epochs)?;
        let report = evaluate(&params, task, protocol, &cfg.k_list, cfg.execution)?;
        Ok(AblationRow {
            lambda: lambdas[i],
            accuracy: [0, 1, 2].map(|h| report.indicators[h].accuracy),
            macro_f1: [0, 1, 2].map(|h| report.indicators[h].macro_f1),
        })
    })?;
    Ok(AblationTable { protocol, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn metric_examples() {
        let l = [0, 1, 2, 1, 0];
        assert_eq!(accuracy(&l, &l).unwrap(), 1.0);
        assert_eq!(macro_f1(&l, &l).unwrap(), 1.0);
        let labels = [0, 0, 1, 1];
        let preds = [0, 0, 0, 0];
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.5);
        assert!((macro_f1(&preds, &labels).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(HarnessError::LengthMismatch { .. })));
        assert!(matches!(macro_f1(&[], &[]), Err(HarnessError::Empty)));
    }

    #[test]
    fn uniform_three_class_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..3)).collect();
        let l: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..3)).collect();
        assert!((accuracy(&p, &l).unwrap() - 1.0 / 3.0).abs() < 0.01);
    }

    /// Independent per-class counting, no confusion matrix.
    fn brute_macro_f1(p: &[usize], l: &[usize]) -> f64 {
        let classes: std::collections::BTreeSet<usize> = p.iter().chain(l).copied().collect();
        let mut f = Vec::new();
        for &c in &classes {
            let tp = p.iter().zip(l).filter(|(a, b)| **a == c && **b == c).count() as f64;
            let fp = p.iter().zip(l).filter(|(a, b)| **a == c && **b != c).count() as f64;
            let fneg = p.iter().zip(l).filter(|(a, b)| **a != c && **b == c).count() as f64;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            f.push(if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 });
        }
        f.iter().sum::<f64>() / f.len() as f64
    }

    #[test]
    fn metrics_match_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let k = rng.random_range(1..5);
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            assert!((macro_f1(&p, &l).unwrap() - brute_macro_f1(&p, &l)).abs() < 1e-12);
            let acc = p.iter().zip(&l).filter(|(a, b)| a == b).count() as f64 / n as f64;
            assert_eq!(accuracy(&p, &l).unwrap(), acc);
        }
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_confusion_consistent(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = IndicatorMetrics::from_pairs(Indicator::Emotion, &p, &l).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.accuracy));
            prop_assert!((0.0..=1.0).contains(&m.macro_f1));
            for c in 0..3 {
                prop_assert_eq!(m.support[c], l.iter().filter(|&&x| x == c).count());
            }
        }
    }

    #[test]
    fn random_baseline_is_reproducible() {
        let a = random_baseline(2000, 3, 7, Execution::Sequential).unwrap();
        let b = random_baseline(2000, 3, 7, Execution::Parallel).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.indicators[0].support.iter().sum::<usize>(), 6000);
        assert!(random_baseline(0, 1, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn ablation_csv_shape() {
        let t = AblationTable {
            protocol: Protocol::P2,
            rows: DEFAULT_LAMBDAS.iter().map(|&l| AblationRow { lambda: l, accuracy: [0.5; 3], macro_f1: [0.25; 3] }).collect(),
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines.iter().all(|l| l.split(',').count() == 7));
        assert_eq!(lines[2], "0.05,0.5,0.25,0.5,0.25,0.5,0.25");
    }
}

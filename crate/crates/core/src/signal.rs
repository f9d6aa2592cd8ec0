//! Per-timestamp subjective-response indicators.
//!
//! Engagement and emotion come from EEG band powers; the eye-movement ratio
//! (EMR) comes from gaze samples. [`classify`] maps an indicator value onto
//! the discrete class table used for the subjectivity task.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("zero denominator in {indicator} at t={t}")]
    ZeroDenominator { indicator: Indicator, t: f64 },
    #[error("no gaze samples in window [{t1}, {t2})")]
    EmptyWindow { t1: f64, t2: f64 },
    #[error("window [{t1}, {t2}) is empty or inverted")]
    InvalidWindow { t1: f64, t2: f64 },
    #[error("non-finite {indicator} value {value}")]
    NonFiniteValue { indicator: Indicator, value: f64 },
    #[error("invalid sample at row {row}: {reason}")]
    InvalidSample { row: usize, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One timestamped EEG reading with the six band powers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPowerSample {
    pub t: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl BandPowerSample {
    fn validate(&self) -> Result<(), String> {
        let bands = [self.a1, self.a2, self.a3, self.b1, self.b2, self.b3];
        if !self.t.is_finite() || self.t < 0.0 {
            return Err(format!("timestamp {} must be finite and non-negative", self.t));
        }
        if bands.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err("band powers must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t: f64,
    pub on_screen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    Engagement,
    Emotion,
    Emr,
}

impl Indicator {
    pub const ALL: [Indicator; 3] = [Indicator::Engagement, Indicator::Emotion, Indicator::Emr];

    pub fn n_classes(self) -> usize {
        match self {
            Indicator::Engagement => 2,
            Indicator::Emotion | Indicator::Emr => 3,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Indicator::Engagement => &["non-cognitive", "cognitive"],
            Indicator::Emotion => &["negative", "neutral", "positive"],
            Indicator::Emr => &["not attended", "partially attended", "fully attended"],
        }
    }

    /// Class shares reported for the real dataset, in label order.
    pub fn reference_proportions(self) -> &'static [f64] {
        match self {
            Indicator::Engagement => &[0.550, 0.450],
            Indicator::Emotion => &[0.297, 0.390, 0.312],
            Indicator::Emr => &[0.293, 0.416, 0.290],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Indicator::Engagement => "engagement",
            Indicator::Emotion => "emotion",
            Indicator::Emr => "emr",
        }
    }
}

impl std::fmt::Display for Indicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A discrete class for one indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SriClass {
    pub indicator: Indicator,
    pub label: u8,
    pub name: String,
}

impl SriClass {
    pub fn new(indicator: Indicator, label: u8) -> Self {
        let name = indicator.class_names()[label as usize].to_string();
        SriClass { indicator, label, name }
    }
}

/// Class boundaries. Emotion (±6) and EMR (0.45, 0.6) are fixed by the class
/// table; the engagement cut is configurable because the ratio form of the
/// engagement index never reaches the tabulated boundary of 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub engagement: f64,
}

impl Default for ClassThresholds {
    fn default() -> Self {
        ClassThresholds { engagement: 1.0 }
    }
}

pub const EMOTION_NEUTRAL_BAND: f64 = 6.0;
pub const EMR_PARTIAL: f64 = 0.45;
pub const EMR_FULL: f64 = 0.6;

/// Engagement index: (β2+β3) / (α3+α2+β2+β3).
pub fn compute_engagement(s: &BandPowerSample) -> Result<f64, SignalError> {
    let beta = s.b2 + s.b3;
    let denom = s.a3 + s.a2 + beta;
    if denom <= 0.0 {
        return Err(SignalError::ZeroDenominator { indicator: Indicator::Engagement, t: s.t });
    }
    Ok(beta / denom)
}

/// Emotion index: (α3−α2) / (α3+α2) × 100.
pub fn compute_emotion(s: &BandPowerSample) -> Result<f64, SignalError> {
    let denom = s.a3 + s.a2;
    if denom <= 0.0 {
        return Err(SignalError::ZeroDenominator { indicator: Indicator::Emotion, t: s.t });
    }
    Ok((s.a3 - s.a2) / denom * 100.0)
}

/// Fraction of gaze samples in `[t1, t2)` that land on the display.
///
/// Gaze is assumed uniformly sampled, so the sample-count ratio stands in
/// for the fixation-time ratio.
pub fn compute_emr(gaze: &[GazeSample], t1: f64, t2: f64) -> Result<f64, SignalError> {
    if t2.partial_cmp(&t1) != Some(std::cmp::Ordering::Greater) {
        return Err(SignalError::InvalidWindow { t1, t2 });
    }
    let (mut total, mut on) = (0usize, 0usize);
    for g in gaze.iter().filter(|g| g.t >= t1 && g.t < t2) {
        total += 1;
        on += usize::from(g.on_screen);
    }
    if total == 0 {
        return Err(SignalError::EmptyWindow { t1, t2 });
    }
    Ok(on as f64 / total as f64)
}

/// Per-sample indicator for EEG-derived indicators. `Emr` is not a
/// per-sample quantity and yields `None`.
pub fn compute_indicator(ind: Indicator, s: &BandPowerSample) -> Option<Result<f64, SignalError>> {
    match ind {
        Indicator::Engagement => Some(compute_engagement(s)),
        Indicator::Emotion => Some(compute_emotion(s)),
        Indicator::Emr => None,
    }
}

pub fn classify(indicator: Indicator, value: f64) -> Result<SriClass, SignalError> {
    classify_with(&ClassThresholds::default(), indicator, value)
}

pub fn classify_with(
    thresholds: &ClassThresholds,
    indicator: Indicator,
    value: f64,
) -> Result<SriClass, SignalError> {
    if !value.is_finite() {
        return Err(SignalError::NonFiniteValue { indicator, value });
    }
    let label = match indicator {
        Indicator::Engagement => u8::from(value >= thresholds.engagement),
        // ±6 itself counts as neutral so the three ranges cover every real.
        Indicator::Emotion if value < -EMOTION_NEUTRAL_BAND => 0,
        Indicator::Emotion if value <= EMOTION_NEUTRAL_BAND => 1,
        Indicator::Emotion => 2,
        Indicator::Emr if value < EMR_PARTIAL => 0,
        Indicator::Emr if value < EMR_FULL => 1,
        Indicator::Emr => 2,
    };
    Ok(SriClass::new(indicator, label))
}

fn check_increasing(row: usize, prev: Option<f64>, t: f64) -> Result<(), SignalError> {
    match prev {
        Some(p) if t <= p => Err(SignalError::InvalidSample {
            row,
            reason: format!("timestamp {t} does not increase (previous {p})"),
        }),
        _ => Ok(()),
    }
}

/// Reads a `t,a1,a2,a3,b1,b2,b3` stream, validating non-negative powers and
/// strictly increasing timestamps.
pub fn read_eeg_csv<R: Read>(reader: R) -> Result<Vec<BandPowerSample>, SignalError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<BandPowerSample> = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let s: BandPowerSample = rec?;
        s.validate().map_err(|reason| SignalError::InvalidSample { row: i + 1, reason })?;
        check_increasing(i + 1, out.last().map(|p| p.t), s.t)?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_eeg_csv<W: Write>(writer: W, samples: &[BandPowerSample]) -> Result<(), SignalError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GazeRow {
    t: f64,
    on_screen: u8,
}

/// Reads a `t,on_screen` stream where `on_screen` is 0 or 1.
pub fn read_gaze_csv<R: Read>(reader: R) -> Result<Vec<GazeSample>, SignalError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<GazeSample> = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: GazeRow = rec?;
        if !row.t.is_finite() || row.t < 0.0 || row.on_screen > 1 {
            return Err(SignalError::InvalidSample {
                row: i + 1,
                reason: "expected finite t >= 0 and on_screen in {0,1}".into(),
            });
        }
        check_increasing(i + 1, out.last().map(|p| p.t), row.t)?;
        out.push(GazeSample { t: row.t, on_screen: row.on_screen == 1 });
    }
    Ok(out)
}

pub fn write_gaze_csv<W: Write>(writer: W, samples: &[GazeSample]) -> Result<(), SignalError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(GazeRow { t: s.t, on_screen: u8::from(s.on_screen) })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(a2: f64, a3: f64, b2: f64, b3: f64) -> BandPowerSample {
        BandPowerSample { t: 0.0, a1: 1.0, a2, a3, b1: 1.0, b2, b3 }
    }

    #[test]
    fn engagement_examples() {
        let v = compute_engagement(&sample(2.0, 3.0, 1.0, 1.0)).unwrap();
        assert!((v - 2.0 / 7.0).abs() < 1e-12);
        assert_eq!(compute_engagement(&sample(1.0, 1.0, 0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(compute_engagement(&sample(0.0, 0.0, 4.0, 6.0)).unwrap(), 1.0);
        assert!(matches!(
            compute_engagement(&sample(0.0, 0.0, 0.0, 0.0)),
            Err(SignalError::ZeroDenominator { .. })
        ));
    }

    #[test]
    fn emotion_examples() {
        assert_eq!(compute_emotion(&sample(5.0, 5.0, 0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(compute_emotion(&sample(0.0, 5.0, 0.0, 0.0)).unwrap(), 100.0);
        assert!((compute_emotion(&sample(3.0, 1.0, 0.0, 0.0)).unwrap() + 50.0).abs() < 1e-12);
        assert!(compute_emotion(&sample(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn emr_examples() {
        let gaze: Vec<GazeSample> =
            (0..1000).map(|i| GazeSample { t: i as f64 * 0.01, on_screen: i % 20 < 9 }).collect();
        assert!((compute_emr(&gaze, 0.0, 10.0).unwrap() - 0.45).abs() < 1e-12);
        let all: Vec<GazeSample> = (0..10).map(|i| GazeSample { t: i as f64, on_screen: true }).collect();
        assert_eq!(compute_emr(&all, 0.0, 10.0).unwrap(), 1.0);
        let none: Vec<GazeSample> = (0..10).map(|i| GazeSample { t: i as f64, on_screen: false }).collect();
        assert_eq!(compute_emr(&none, 0.0, 10.0).unwrap(), 0.0);
        assert!(matches!(compute_emr(&none, 20.0, 30.0), Err(SignalError::EmptyWindow { .. })));
        assert!(matches!(compute_emr(&none, 3.0, 3.0), Err(SignalError::InvalidWindow { .. })));
        // half-open: t2 excluded
        assert_eq!(compute_emr(&all[..2], 0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn class_table() {
        assert_eq!(classify(Indicator::Emotion, -10.0).unwrap().name, "negative");
        assert_eq!(classify(Indicator::Emr, 0.5).unwrap().name, "partially attended");
        assert_eq!(classify(Indicator::Emotion, 6.0).unwrap().name, "neutral");
        assert_eq!(classify(Indicator::Emotion, -6.0).unwrap().name, "neutral");
        assert_eq!(classify(Indicator::Emotion, 6.000001).unwrap().label, 2);
        assert_eq!(classify(Indicator::Engagement, 0.999).unwrap().name, "non-cognitive");
        assert_eq!(classify(Indicator::Engagement, 1.0).unwrap().name, "cognitive");
        assert_eq!(classify(Indicator::Emr, 0.45).unwrap().label, 1);
        assert_eq!(classify(Indicator::Emr, 0.6).unwrap().name, "fully attended");
        assert_eq!(classify(Indicator::Emr, 0.0).unwrap().name, "not attended");
        let t = ClassThresholds { engagement: 0.5 };
        assert_eq!(classify_with(&t, Indicator::Engagement, 0.5).unwrap().label, 1);
        assert!(matches!(
            classify(Indicator::Emr, f64::NAN),
            Err(SignalError::NonFiniteValue { .. })
        ));
        assert!(classify(Indicator::Emotion, f64::INFINITY).is_err());
    }

    #[test]
    fn csv_roundtrip_and_validation() {
        let s = vec![
            BandPowerSample { t: 0.0, a1: 1.0, a2: 2.0, a3: 3.0, b1: 0.5, b2: 1.0, b3: 1.25 },
            BandPowerSample { t: 0.1, a1: 1.0, a2: 2.5, a3: 3.0, b1: 0.5, b2: 1.0, b3: 0.1 },
        ];
        let mut buf = Vec::new();
        write_eeg_csv(&mut buf, &s).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t,a1,a2,a3,b1,b2,b3\n"));
        assert_eq!(read_eeg_csv(buf.as_slice()).unwrap(), s);

        let bad = "t,a1,a2,a3,b1,b2,b3\n0,1,1,1,1,1,1\n0,1,1,1,1,1,1\n";
        assert!(matches!(read_eeg_csv(bad.as_bytes()), Err(SignalError::InvalidSample { row: 2, .. })));
        let neg = "t,a1,a2,a3,b1,b2,b3\n0,1,-1,1,1,1,1\n";
        assert!(read_eeg_csv(neg.as_bytes()).is_err());

        let g = "t,on_screen\n0.0,1\n0.5,0\n";
        let gaze = read_gaze_csv(g.as_bytes()).unwrap();
        assert_eq!(gaze, vec![GazeSample { t: 0.0, on_screen: true }, GazeSample { t: 0.5, on_screen: false }]);
        assert!(read_gaze_csv("t,on_screen\n0,2\n".as_bytes()).is_err());
    }

    fn band() -> impl Strategy<Value = f64> {
        0.0f64..1e3
    }

    proptest! {
        #[test]
        fn indicator_ranges(a2 in band(), a3 in band(), b2 in band(), b3 in band()) {
            let s = sample(a2, a3, b2, b3);
            if a2 + a3 + b2 + b3 > 0.0 {
                let en = compute_engagement(&s).unwrap();
                prop_assert!((0.0..=1.0).contains(&en));
            }
            if a2 + a3 > 0.0 {
                let em = compute_emotion(&s).unwrap();
                prop_assert!((-100.0..=100.0).contains(&em));
                let swapped = compute_emotion(&sample(a3, a2, b2, b3)).unwrap();
                prop_assert_eq!(em, -swapped);
            }
        }

        #[test]
        fn engagement_scale_invariant(a2 in 0.01f64..1e3, a3 in band(), b2 in band(), b3 in band(), c in 1e-3f64..1e3) {
            let s = sample(a2, a3, b2, b3);
            let scaled = BandPowerSample { t: 0.0, a1: c, a2: a2 * c, a3: a3 * c, b1: c, b2: b2 * c, b3: b3 * c };
            let (x, y) = (compute_engagement(&s).unwrap(), compute_engagement(&scaled).unwrap());
            prop_assert!((x - y).abs() <= 1e-12);
        }

        #[test]
        fn emr_classes_partition(v in 0.0f64..1e6) {
            let c = classify(Indicator::Emr, v).unwrap();
            let expected = if v < 0.45 { 0 } else if v < 0.6 { 1 } else { 2 };
            prop_assert_eq!(c.label, expected);
        }

        #[test]
        fn classify_total(v in proptest::num::f64::NORMAL | proptest::num::f64::ZERO | proptest::num::f64::SUBNORMAL) {
            for ind in Indicator::ALL {
                let c = classify(ind, v).unwrap();
                prop_assert!((c.label as usize) < ind.n_classes());
                prop_assert_eq!(c.name.as_str(), ind.class_names()[c.label as usize]);
            }
        }
    }

    #[test]
    fn fuzz_classify_of_computed_values() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let s = sample(
                rng.random_range(0.001..100.0),
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
            );
            classify(Indicator::Engagement, compute_engagement(&s).unwrap()).unwrap();
            classify(Indicator::Emotion, compute_emotion(&s).unwrap()).unwrap();
            classify(Indicator::Emr, rng.random_range(0.0..=1.0)).unwrap();
        }
    }
}

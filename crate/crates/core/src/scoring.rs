//! Per-coordinate evidence aggregation: class hit counts over the four street
//! headings, the count threshold decision, and the combined probability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{DetectionClass, DetectionSet, SatelliteScore};

pub const DEFAULT_THRESHOLD: u32 = 20;
pub const DEFAULT_SAT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SAT_WEIGHT: f64 = 0.5;
pub const HEADINGS_PER_COORDINATE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("expected {HEADINGS_PER_COORDINATE} heading detection sets, got {0}")]
    HeadingCount(usize),
    #[error("mode {0:?} needs a satellite score")]
    MissingSatellite(ScoringMode),
    #[error("invalid scoring config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub short_wall: u32,
    pub railing: u32,
    pub stairs: u32,
    pub total: u32,
}

impl ClassCounts {
    pub fn new(short_wall: u32, railing: u32, stairs: u32) -> Self {
        ClassCounts {
            short_wall,
            railing,
            stairs,
            total: short_wall + railing + stairs,
        }
    }

    pub fn get(&self, class: DetectionClass) -> u32 {
        match class {
            DetectionClass::ShortWall => self.short_wall,
            DetectionClass::Railing => self.railing,
            DetectionClass::Stairs => self.stairs,
        }
    }
}

/// How satellite and street evidence are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Street counts alone; the satellite score is recorded but ignored.
    #[default]
    StreetOnly,
    /// Satellite score below the threshold vetoes the coordinate.
    Prefilter,
    /// Probability blends both sources; the decision stays count-based.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub threshold: u32,
    pub sat_threshold: f64,
    pub mode: ScoringMode,
    pub sat_weight: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            threshold: DEFAULT_THRESHOLD,
            sat_threshold: DEFAULT_SAT_THRESHOLD,
            mode: ScoringMode::StreetOnly,
            sat_weight: DEFAULT_SAT_WEIGHT,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.threshold == 0 {
            return Err(ScoringError::Config("threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sat_threshold) {
            return Err(ScoringError::Config(format!(
                "sat_threshold {} outside [0, 1]",
                self.sat_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.sat_weight) {
            return Err(ScoringError::Config(format!("sat_weight {} outside [0, 1]", self.sat_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotScore {
    pub counts: ClassCounts,
    pub sat: Option<SatelliteScore>,
    pub probability: f64,
    pub positive: bool,
    pub mode: ScoringMode,
}

/// Sums per-class detections over the four heading sets. Objects visible
/// from two headings are counted twice.
pub fn count_hits(sets: &[DetectionSet]) -> Result<ClassCounts, ScoringError> {
    if sets.len() != HEADINGS_PER_COORDINATE {
        return Err(ScoringError::HeadingCount(sets.len()));
    }
    let sum = |class| sets.iter().map(|s| s.count(class) as u32).sum();
    Ok(ClassCounts::new(
        sum(DetectionClass::ShortWall),
        sum(DetectionClass::Railing),
        sum(DetectionClass::Stairs),
    ))
}

/// Positive when strictly more than `threshold` objects were hit.
pub fn decide(counts: &ClassCounts, threshold: u32) -> bool {
    counts.total > threshold
}

/// `min(1, total / 2T)`: crosses 0.5 exactly at the decision boundary.
pub fn street_probability(counts: &ClassCounts, threshold: u32) -> f64 {
    (counts.total as f64 / (2.0 * threshold as f64)).min(1.0)
}

pub fn combine(
    sat: Option<SatelliteScore>,
    counts: ClassCounts,
    config: &ScoringConfig,
) -> Result<SpotScore, ScoringError> {
    config.validate()?;
    let street = street_probability(&counts, config.threshold);
    let positive = decide(&counts, config.threshold);
    let (probability, positive) = match config.mode {
        ScoringMode::StreetOnly => (street, positive),
        ScoringMode::Prefilter => {
            let s = sat.ok_or(ScoringError::MissingSatellite(config.mode))?;
            if s.max_prob < config.sat_threshold {
                (0.0, false)
            } else {
                (street, positive)
            }
        }
        ScoringMode::Weighted => {
            let s = sat.ok_or(ScoringError::MissingSatellite(config.mode))?;
            let w = config.sat_weight;
            (w * s.max_prob + (1.0 - w) * street, positive)
        }
    };
    Ok(SpotScore {
        counts,
        sat,
        probability: probability.clamp(0.0, 1.0),
        positive,
        mode: config.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::tests::det;
    use crate::detectors::Detection;
    use proptest::prelude::*;

    fn set(classes: &[DetectionClass]) -> DetectionSet {
        DetectionSet {
            image: "img".into(),
            detections: classes.iter().map(|&c| det(c, 1.0)).collect::<Vec<Detection>>(),
        }
    }

    fn sized(n: usize) -> DetectionSet {
        set(&vec![DetectionClass::Stairs; n])
    }

    #[test]
    fn count_examples() {
        let empty = vec![DetectionSet::empty("a"); 4];
        assert_eq!(count_hits(&empty).unwrap(), ClassCounts::default());
        let sets = [sized(3), sized(5), sized(7), sized(6)];
        assert_eq!(count_hits(&sets).unwrap().total, 21);
        assert_eq!(count_hits(&sets[..3]), Err(ScoringError::HeadingCount(3)));
    }

    #[test]
    fn per_class_split() {
        use DetectionClass::*;
        let sets = [
            set(&[ShortWall, Railing, Stairs, Stairs]),
            set(&[Railing; 6]),
            set(&[ShortWall, ShortWall, Stairs, Railing, Railing]),
            set(&[Stairs; 6]),
        ];
        assert_eq!(count_hits(&sets).unwrap(), ClassCounts::new(3, 9, 9));
    }

    #[test]
    fn decision_boundary_is_strict() {
        assert!(decide(&ClassCounts::new(21, 0, 0), 20));
        assert!(!decide(&ClassCounts::new(20, 0, 0), 20));
        assert!(!decide(&ClassCounts::default(), 0));
    }

    #[test]
    fn combine_examples() {
        let cfg = ScoringConfig::default();
        let zero = combine(None, ClassCounts::default(), &cfg).unwrap();
        assert_eq!(zero.probability, 0.0);
        assert!(!zero.positive);
        let full = combine(None, ClassCounts::new(40, 0, 0), &cfg).unwrap();
        assert_eq!(full.probability, 1.0);

        let pre = ScoringConfig { mode: ScoringMode::Prefilter, ..cfg };
        let closed = combine(Some(SatelliteScore::from_probs([0.0; 4])), ClassCounts::new(30, 0, 0), &pre).unwrap();
        assert_eq!(closed.probability, 0.0);
        assert!(!closed.positive);
        let open = combine(Some(SatelliteScore::from_probs([0.0, 0.6, 0.0, 0.0])), ClassCounts::new(30, 0, 0), &pre)
            .unwrap();
        assert_eq!(open.probability, 0.75);
        assert!(open.positive);
    }

    #[test]
    fn weighted_mode_blends() {
        let cfg = ScoringConfig { mode: ScoringMode::Weighted, sat_weight: 0.25, ..Default::default() };
        let s = combine(Some(SatelliteScore::from_probs([1.0, 0.0, 0.0, 0.0])), ClassCounts::new(10, 0, 0), &cfg)
            .unwrap();
        assert!((s.probability - (0.25 + 0.75 * 0.25)).abs() < 1e-12);
        assert!(!s.positive);
    }

    #[test]
    fn satellite_required_outside_street_only() {
        for mode in [ScoringMode::Prefilter, ScoringMode::Weighted] {
            let cfg = ScoringConfig { mode, ..Default::default() };
            assert_eq!(
                combine(None, ClassCounts::default(), &cfg),
                Err(ScoringError::MissingSatellite(mode))
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(ScoringConfig { threshold: 0, ..Default::default() }.validate().is_err());
        assert!(ScoringConfig { sat_threshold: 1.5, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn adding_a_detection_is_monotone(
            sizes in prop::array::uniform4(0usize..30),
            heading in 0usize..4,
            class in 0usize..3,
            threshold in 1u32..60,
        ) {
            let cfg = ScoringConfig { threshold, ..Default::default() };
            let before: Vec<DetectionSet> = sizes.iter().map(|&n| sized(n)).collect();
            let mut after = before.clone();
            after[heading].detections.push(det(DetectionClass::ALL[class], 1.0));
            let a = combine(None, count_hits(&before).unwrap(), &cfg).unwrap();
            let b = combine(None, count_hits(&after).unwrap(), &cfg).unwrap();
            prop_assert_eq!(b.counts.total, a.counts.total + 1);
            prop_assert!(b.probability >= a.probability);
            prop_assert!(!(a.positive && !b.positive));
        }

        #[test]
        fn decision_ignores_heading_order(sizes in prop::array::uniform4(0usize..30), rot in 0usize..4) {
            let sets: Vec<DetectionSet> = sizes.iter().map(|&n| sized(n)).collect();
            let mut rotated = sets.clone();
            rotated.rotate_left(rot);
            rotated.swap(0, 3);
            let (a, b) = (count_hits(&sets).unwrap(), count_hits(&rotated).unwrap());
            prop_assert_eq!(a, b);
            prop_assert_eq!(decide(&a, 20), decide(&b, 20));
        }

        #[test]
        fn probability_agrees_with_decision(total in 0u32..500, threshold in 1u32..100) {
            let c = ClassCounts::new(total, 0, 0);
            let p = street_probability(&c, threshold);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert_eq!(p > 0.5, decide(&c, threshold));
            let next = street_probability(&ClassCounts::new(total + 1, 0, 0), threshold);
            prop_assert!(next >= p);
        }
    }
}

//! The fixed 51-coefficient blendshape vocabulary, the upper/mouth face
//! partition over it, and the nine emotion categories.

use crate::error::{Error, Result};

pub const NUM_COEFFS: usize = 51;

/// Version tag for the name→index table below. Bump on any reordering.
pub const COEFF_TABLE_VERSION: u32 = 1;

/// Coefficient names in index order: eye block, jaw block, mouth block, brow
/// block, cheeks, nose.
pub const COEFF_NAMES: [&str; NUM_COEFFS] = [
    "eyeBlinkLeft",
    "eyeBlinkRight",
    "eyeLookDownLeft",
    "eyeLookDownRight",
    "eyeLookInLeft",
    "eyeLookInRight",
    "eyeLookOutLeft",
    "eyeLookOutRight",
    "eyeLookUpLeft",
    "eyeLookUpRight",
    "eyeSquintLeft",
    "eyeSquintRight",
    "eyeWideLeft",
    "eyeWideRight",
    "jawForward",
    "jawLeft",
    "jawRight",
    "jawOpen",
    "mouthClose",
    "mouthDimpleLeft",
    "mouthDimpleRight",
    "mouthFrownLeft",
    "mouthFrownRight",
    "mouthFunnel",
    "mouthLeft",
    "mouthLowerDownLeft",
    "mouthLowerDownRight",
    "mouthPressLeft",
    "mouthPressRight",
    "mouthPucker",
    "mouthRight",
    "mouthRollLower",
    "mouthRollUpper",
    "mouthShrugLower",
    "mouthShrugUpper",
    "mouthSmileLeft",
    "mouthSmileRight",
    "mouthStretchLeft",
    "mouthStretchRight",
    "mouthUpperUpLeft",
    "mouthUpperUpRight",
    "browDownLeft",
    "browDownRight",
    "browInnerUp",
    "browOuterUpLeft",
    "browOuterUpRight",
    "cheekPuff",
    "cheekSquintLeft",
    "cheekSquintRight",
    "noseSneerLeft",
    "noseSneerRight",
];

pub fn coeff_index(name: &str) -> Option<usize> {
    COEFF_NAMES.iter().position(|n| *n == name)
}

/// Index split of the 51 coefficients into an upper-face region (eyes and
/// brows, 19 coefficients) and a mouth region (jaw, lips, cheeks, nose,
/// 32 coefficients), plus the 5-coefficient brow subset used by the
/// brow-displacement metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FacePartition {
    pub upper_idx: Vec<usize>,
    pub mouth_idx: Vec<usize>,
    pub brow_idx: Vec<usize>,
}

impl FacePartition {
    /// The canonical split over the table above.
    pub fn standard() -> Self {
        let upper_idx: Vec<usize> = (0..14).chain(41..46).collect();
        let mouth_idx: Vec<usize> = (14..41).chain(46..51).collect();
        let brow_idx: Vec<usize> = (41..46).collect();
        let p = FacePartition {
            upper_idx,
            mouth_idx,
            brow_idx,
        };
        p.validate().expect("standard partition is valid");
        p
    }

    /// Check disjointness, full coverage of 0..51, ascending order, and brow
    /// containment.
    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.upper_idx) || !sorted(&self.mouth_idx) || !sorted(&self.brow_idx) {
            return Err(Error::InvalidPartition(
                "index lists must be strictly ascending".into(),
            ));
        }
        let mut seen = [false; NUM_COEFFS];
        for &i in self.upper_idx.iter().chain(self.mouth_idx.iter()) {
            if i >= NUM_COEFFS {
                return Err(Error::InvalidPartition(format!(
                    "index {i} out of range for {NUM_COEFFS} coefficients"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidPartition(format!(
                    "index {i} appears in both regions"
                )));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            let missing: Vec<usize> = (0..NUM_COEFFS).filter(|&i| !seen[i]).collect();
            return Err(Error::InvalidPartition(format!(
                "indices not covered by either region: {missing:?}"
            )));
        }
        for &b in &self.brow_idx {
            if !self.upper_idx.contains(&b) {
                return Err(Error::InvalidPartition(format!(
                    "brow index {b} is not in the upper region"
                )));
            }
        }
        Ok(())
    }
}

/// The nine emotion categories, stored by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionLabel {
    Neutral = 0,
    Angry = 1,
    Doubtful = 2,
    Surprised = 3,
    Happy = 4,
    Sad = 5,
    Scared = 6,
    Serious = 7,
    Proud = 8,
}

pub const NUM_EMOTIONS: usize = 9;

pub const ALL_EMOTIONS: [EmotionLabel; NUM_EMOTIONS] = [
    EmotionLabel::Neutral,
    EmotionLabel::Angry,
    EmotionLabel::Doubtful,
    EmotionLabel::Surprised,
    EmotionLabel::Happy,
    EmotionLabel::Sad,
    EmotionLabel::Scared,
    EmotionLabel::Serious,
    EmotionLabel::Proud,
];

impl EmotionLabel {
    pub fn from_index(i: usize) -> Result<Self> {
        ALL_EMOTIONS.get(i).copied().ok_or_else(|| {
            Error::Validation(format!("emotion index {i} out of range 0..{NUM_EMOTIONS}"))
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Doubtful => "doubtful",
            EmotionLabel::Surprised => "surprised",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Scared => "scared",
            EmotionLabel::Serious => "serious",
            EmotionLabel::Proud => "proud",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ALL_EMOTIONS
            .iter()
            .copied()
            .find(|e| e.name() == name)
            .ok_or_else(|| Error::Validation(format!("unknown emotion name {name:?}")))
    }
}

impl std::fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_51_unique_names() {
        assert_eq!(COEFF_NAMES.len(), 51);
        let mut sorted: Vec<&str> = COEFF_NAMES.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 51);
    }

    #[test]
    fn standard_partition_sizes_and_membership() {
        let p = FacePartition::standard();
        assert_eq!(p.upper_idx.len(), 19);
        assert_eq!(p.mouth_idx.len(), 32);
        assert_eq!(p.brow_idx.len(), 5);
        assert!(p.validate().is_ok());

        for &i in &p.upper_idx {
            let n = COEFF_NAMES[i];
            assert!(n.starts_with("eye") || n.starts_with("brow"), "{n}");
        }
        for &i in &p.brow_idx {
            assert!(COEFF_NAMES[i].starts_with("brow"));
        }
        assert_eq!(coeff_index("browInnerUp"), Some(43));
        assert_eq!(coeff_index("jawOpen"), Some(17));
        assert_eq!(coeff_index("tongueOut"), None);
    }

    #[test]
    fn partition_validation_rejects_overlap_and_gaps() {
        let mut p = FacePartition::standard();
        p.mouth_idx[0] = p.upper_idx[0];
        assert!(p.validate().is_err());

        let mut q = FacePartition::standard();
        q.mouth_idx.retain(|&i| i != 17);
        assert!(q.validate().is_err());

        let mut r = FacePartition::standard();
        r.brow_idx = vec![17];
        assert!(r.validate().is_err());
    }

    #[test]
    fn emotion_round_trip_and_order() {
        for (i, e) in ALL_EMOTIONS.iter().enumerate() {
            assert_eq!(e.index(), i);
            assert_eq!(EmotionLabel::from_index(i).unwrap(), *e);
            assert_eq!(EmotionLabel::from_name(e.name()).unwrap(), *e);
        }
        assert_eq!(EmotionLabel::from_index(0).unwrap().name(), "neutral");
        assert_eq!(EmotionLabel::from_index(8).unwrap().name(), "proud");
        assert!(EmotionLabel::from_index(9).is_err());
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of room categories.
pub const NUM_CLASSES: usize = 6;

/// Room category of a listing photo.
///
/// The declaration order is the canonical label order used everywhere a
/// class index appears: model outputs, confusion matrices, bundle label files
/// and JSON responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Balcony,
    Bathroom,
    Bedroom,
    Hall,
    Kitchen,
    Others,
}

impl ClassLabel {
    /// All labels in canonical order.
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Balcony,
        ClassLabel::Bathroom,
        ClassLabel::Bedroom,
        ClassLabel::Hall,
        ClassLabel::Kitchen,
        ClassLabel::Others,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Balcony => "balcony",
            ClassLabel::Bathroom => "bathroom",
            ClassLabel::Bedroom => "bedroom",
            ClassLabel::Hall => "hall",
            ClassLabel::Kitchen => "kitchen",
            ClassLabel::Others => "others",
        }
    }

    /// Label names in canonical order.
    pub fn names() -> [&'static str; NUM_CLASSES] {
        Self::ALL.map(ClassLabel::name)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown class label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for ClassLabel {
    type Err = UnknownLabel;

    /// Parses a canonical label name (case-insensitive). Raw annotation tags
    /// go through [`crate::dataset::map_raw_tag`] instead.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_is_alphabetical() {
        let names = ClassLabel::names();
        let mut sorted = names;
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(names.len(), 6);
    }

    #[test]
    fn index_roundtrip() {
        for (i, l) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(ClassLabel::from_index(i), Some(*l));
            assert_eq!(l.name().parse::<ClassLabel>().unwrap(), *l);
        }
        assert_eq!(ClassLabel::from_index(6), None);
        assert!("living_room".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn serde_uses_lowercase_names() {
        let s = serde_json::to_string(&ClassLabel::ALL).unwrap();
        assert_eq!(
            s,
            r#"["balcony","bathroom","bedroom","hall","kitchen","others"]"#
        );
    }
}

//! The eight cognitive function labels.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FunctionLabel {
    SpatialPerception,
    RelationalReasoning,
    LowLevelVisual,
    HighLevelVisual,
    InfoExtraction,
    KnowledgeRecall,
    MathReasoning,
    DecisionMaking,
}

impl FunctionLabel {
    pub const COUNT: usize = 8;
    pub const ALL: [FunctionLabel; 8] = [
        FunctionLabel::SpatialPerception,
        FunctionLabel::RelationalReasoning,
        FunctionLabel::LowLevelVisual,
        FunctionLabel::HighLevelVisual,
        FunctionLabel::InfoExtraction,
        FunctionLabel::KnowledgeRecall,
        FunctionLabel::MathReasoning,
        FunctionLabel::DecisionMaking,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FunctionLabel::SpatialPerception => "SpatialPerception",
            FunctionLabel::RelationalReasoning => "RelationalReasoning",
            FunctionLabel::LowLevelVisual => "LowLevelVisual",
            FunctionLabel::HighLevelVisual => "HighLevelVisual",
            FunctionLabel::InfoExtraction => "InfoExtraction",
            FunctionLabel::KnowledgeRecall => "KnowledgeRecall",
            FunctionLabel::MathReasoning => "MathReasoning",
            FunctionLabel::DecisionMaking => "DecisionMaking",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|f| f.name() == s)
    }

    /// Bit for the 8-bit label mask.
    pub fn bit(self) -> u8 {
        1 << self.index()
    }
}

impl fmt::Display for FunctionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for FunctionLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FunctionLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        FunctionLabel::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown function label `{s}`")))
    }
}

/// Label set packed into one byte.
pub fn mask_of(labels: &[FunctionLabel]) -> u8 {
    labels.iter().fold(0, |m, f| m | f.bit())
}

pub fn labels_of(mask: u8) -> Vec<FunctionLabel> {
    FunctionLabel::ALL.iter().copied().filter(|f| mask & f.bit() != 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip() {
        for m in 0..=255u8 {
            assert_eq!(mask_of(&labels_of(m)), m);
        }
    }

    #[test]
    fn serde_round_trip() {
        for f in FunctionLabel::ALL {
            let s = serde_json::to_string(&f).unwrap();
            assert_eq!(serde_json::from_str::<FunctionLabel>(&s).unwrap(), f);
        }
    }
}

//! Event-stream stacking, the synthetic sequence fixture, and the sample
//! loader that serves aligned RGB/event crops.

mod dataset;
mod fixture;
mod stack;

pub use dataset::{box_side, load_sample, CropSettings, Dataset, Sample, Sequence};
pub use fixture::{generate_fixture, DegradationRecord, FixtureOptions, Manifest, SequenceRecord, MANIFEST_FILE};
pub use stack::{count_events, stack_events, EventCounts, EventFrame, RawEvent, TimeWindow};

pub use crate::bbox::BoundingBox;

use serde::{Deserialize, Serialize};

use crate::config::ATTRIBUTE_NAMES;
use crate::error::{Error, Result};

/// Per-video binary environmental attribute vector, ordered
/// `[illumination variation, motion blur, scale variance, occlusion]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLabel(Vec<u8>);

impl AttributeLabel {
    /// Fails unless `bits` has exactly `k` entries, each 0 or 1.
    pub fn new(bits: Vec<u8>, k: usize) -> Result<Self> {
        if bits.len() != k {
            return Err(Error::Data(format!("attribute label has {} entries, expected {k}", bits.len())));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Data(format!("attribute label entry {b} is not 0 or 1")));
        }
        Ok(Self(bits))
    }

    /// Parses a comma-separated digit line and keeps the first `k`
    /// attributes. Fewer than `k` digits is an error.
    pub fn parse_truncated(line: &str, k: usize) -> Result<Self> {
        let bits: Vec<u8> = line
            .trim()
            .split(',')
            .map(|s| match s.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Data(format!("attribute entry {other:?} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        if bits.len() < k {
            return Err(Error::Data(format!("attribute label has {} entries, expected at least {k}", bits.len())));
        }
        Self::new(bits[..k].to_vec(), k)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }

    /// Names of the attributes whose bit is set.
    pub fn active_names(&self) -> Vec<&'static str> {
        self.0.iter().zip(ATTRIBUTE_NAMES).filter(|(b, _)| **b == 1).map(|(_, n)| n).collect()
    }

    pub fn to_line(&self) -> String {
        self.0.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_length_must_match_k() {
        assert!(AttributeLabel::new(vec![0, 1, 0, 0], 4).is_ok());
        assert!(AttributeLabel::new(vec![0, 1, 0], 4).is_err());
        assert!(AttributeLabel::new(vec![0, 2, 0, 0], 4).is_err());
    }

    #[test]
    fn truncation_keeps_leading_attributes() {
        let l = AttributeLabel::parse_truncated("1,0,1,1\n", 2).unwrap();
        assert_eq!(l.bits(), &[1, 0]);
        assert!(AttributeLabel::parse_truncated("1,0", 4).is_err());
        assert!(AttributeLabel::parse_truncated("1,x,0,0", 4).is_err());
        assert_eq!(AttributeLabel::parse_truncated("0,1,0,1", 4).unwrap().active_names(), vec!["motion_blur", "occlusion"]);
    }
}

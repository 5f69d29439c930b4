//! User behavior sequences, time windows, JSONL storage and label derivation.

mod generator;
mod jsonl;
mod windows;

pub use generator::{generate_synthetic, task_name, CategoryMap, GeneratorConfig};
pub use jsonl::{read_jsonl, write_jsonl};
pub use windows::{bucketize, derive_label, prediction_events, SampleWindows, WindowPlan};

use std::collections::BTreeMap;

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: u64 = 86_400;

/// IDs of one behavior.
pub type BehaviorIds = SmallVec<[u32; 4]>;

/// One timestamped behavior carrying one or more integer IDs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorEvent {
    /// Seconds since the dataset epoch.
    pub timestamp: u64,
    pub ids: BehaviorIds,
}

impl BehaviorEvent {
    pub fn new(timestamp: u64, ids: &[u32]) -> Self {
        Self {
            timestamp,
            ids: ids.iter().copied().collect(),
        }
    }
}

// Stored as `[t, [id, ...]]`.
impl Serialize for BehaviorEvent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.timestamp, &self.ids).serialize(s)
    }
}

impl<'de> Deserialize<'de> for BehaviorEvent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (timestamp, ids) = <(u64, BehaviorIds)>::deserialize(d)?;
        Ok(Self { timestamp, ids })
    }
}

/// One user's behavior sequence, sorted by time, with optional task labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UbsSample {
    pub user_id: String,
    pub events: Vec<BehaviorEvent>,
    #[serde(default)]
    pub labels: BTreeMap<String, usize>,
}

impl UbsSample {
    pub fn validate(&self) -> Result<()> {
        if self.events.is_empty() {
            return Err(Error::Validation(format!("user {}: no events", self.user_id)));
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.ids.is_empty() {
                return Err(Error::Validation(format!(
                    "user {}: event {} has no ids",
                    self.user_id, i
                )));
            }
            if i > 0 && e.timestamp < self.events[i - 1].timestamp {
                return Err(Error::Validation(format!(
                    "user {}: timestamps decrease at event {} ({} < {})",
                    self.user_id,
                    i,
                    e.timestamp,
                    self.events[i - 1].timestamp
                )));
            }
        }
        Ok(())
    }

    /// Number of events strictly before `t`.
    pub fn count_before(&self, t: u64) -> usize {
        self.events.partition_point(|e| e.timestamp < t)
    }
}

pub type Dataset = Vec<UbsSample>;

/// Sorted list of task names present in any sample's labels.
pub fn task_names(dataset: &[UbsSample]) -> Vec<String> {
    let mut names: Vec<String> = dataset
        .iter()
        .flat_map(|s| s.labels.keys().cloned())
        .collect();
    names.sort();
    names.dedup();
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_json_shape() {
        let e = BehaviorEvent::new(5, &[1, 2]);
        assert_eq!(serde_json::to_string(&e).unwrap(), "[5,[1,2]]");
        let back: BehaviorEvent = serde_json::from_str("[5,[1,2]]").unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn validate_rejects_decreasing_and_empty() {
        let s = UbsSample {
            user_id: "u".into(),
            events: vec![BehaviorEvent::new(5, &[1]), BehaviorEvent::new(3, &[2])],
            labels: Default::default(),
        };
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        let s = UbsSample {
            user_id: "u".into(),
            events: vec![],
            labels: Default::default(),
        };
        assert!(s.validate().is_err());
        let s = UbsSample {
            user_id: "u".into(),
            events: vec![BehaviorEvent::new(5, &[])],
            labels: Default::default(),
        };
        assert!(s.validate().is_err());
    }
}

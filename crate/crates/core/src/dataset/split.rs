//! Seen/unseen partition of test records by the training label set.

use std::collections::BTreeSet;

use serde::Serialize;

use super::manifest::SampleRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    pub seen_classes: BTreeSet<String>,
    pub unseen_classes: BTreeSet<String>,
    /// Sorted test ids.
    pub seen_samples: Vec<String>,
    pub unseen_samples: Vec<String>,
}

/// A test record is seen only if every one of its labels occurs in `train`.
/// Class sets cover the labels that occur in `test`.
pub fn split_seen_unseen(train: &[SampleRecord], test: &[SampleRecord]) -> SplitReport {
    let known: BTreeSet<&str> = train.iter().flat_map(|r| r.masks.keys()).map(String::as_str).collect();
    let mut report = SplitReport {
        seen_classes: BTreeSet::new(),
        unseen_classes: BTreeSet::new(),
        seen_samples: Vec::new(),
        unseen_samples: Vec::new(),
    };
    for r in test {
        let mut all_seen = true;
        for label in r.masks.keys() {
            if known.contains(label.as_str()) {
                report.seen_classes.insert(label.clone());
            } else {
                report.unseen_classes.insert(label.clone());
                all_seen = false;
            }
        }
        if all_seen {
            report.seen_samples.push(r.id.clone());
        } else {
            report.unseen_samples.push(r.id.clone());
        }
    }
    report.seen_samples.sort();
    report.unseen_samples.sort();
    report
}

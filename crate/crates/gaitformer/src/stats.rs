//! Dataset summary counts and the published reference counts.

use std::fmt;

use gaitformer_core::data::{segment_count, subjects_of, Group, WalkRecord};
use gaitformer_core::model::SEGMENT_LEN;

use crate::error::Result;

/// Reference counts of the PhysioNet gaitpdb recordings.
pub const REFERENCE_WALKS: usize = 306;
pub const REFERENCE_PARKINSON_WALKS: usize = 214;
pub const REFERENCE_CONTROL_WALKS: usize = 92;
pub const REFERENCE_SUBJECTS: usize = 166;
pub const REFERENCE_PARKINSON_SUBJECTS: usize = 93;
pub const REFERENCE_CONTROL_SUBJECTS: usize = 73;
/// Segments at window 100, stride 50.
pub const REFERENCE_SEGMENTS: usize = 64468;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub walks: usize,
    pub parkinson_walks: usize,
    pub control_walks: usize,
    pub subjects: usize,
    pub parkinson_subjects: usize,
    pub control_subjects: usize,
    pub window: usize,
    pub stride: usize,
    pub segments: usize,
    pub samples: usize,
    pub shortest_walk: usize,
    pub longest_walk: usize,
}

pub fn dataset_stats(walks: &[WalkRecord]) -> Result<DatasetStats> {
    let (window, stride) = (SEGMENT_LEN, SEGMENT_LEN / 2);
    let subjects = subjects_of(walks)?;
    let count_subjects = |g: Group| subjects.iter().filter(|(_, x)| *x == g).count();
    let count_walks = |g: Group| walks.iter().filter(|w| w.group == g).count();
    Ok(DatasetStats {
        walks: walks.len(),
        parkinson_walks: count_walks(Group::Parkinson),
        control_walks: count_walks(Group::Control),
        subjects: subjects.len(),
        parkinson_subjects: count_subjects(Group::Parkinson),
        control_subjects: count_subjects(Group::Control),
        window,
        stride,
        segments: walks
            .iter()
            .map(|w| segment_count(w.duration_samples(), window, stride))
            .sum(),
        samples: walks.iter().map(WalkRecord::duration_samples).sum(),
        shortest_walk: walks.iter().map(WalkRecord::duration_samples).min().unwrap_or(0),
        longest_walk: walks.iter().map(WalkRecord::duration_samples).max().unwrap_or(0),
    })
}

impl DatasetStats {
    /// One line per count that differs from the reference dataset.
    pub fn deviations(&self) -> Vec<String> {
        [
            ("walks", self.walks, REFERENCE_WALKS),
            ("Parkinson walks", self.parkinson_walks, REFERENCE_PARKINSON_WALKS),
            ("control walks", self.control_walks, REFERENCE_CONTROL_WALKS),
            ("subjects", self.subjects, REFERENCE_SUBJECTS),
            ("Parkinson subjects", self.parkinson_subjects, REFERENCE_PARKINSON_SUBJECTS),
            ("control subjects", self.control_subjects, REFERENCE_CONTROL_SUBJECTS),
            ("segments", self.segments, REFERENCE_SEGMENTS),
        ]
        .into_iter()
        .filter(|(_, got, want)| got != want)
        .map(|(what, got, want)| format!("{what}: {got}, reference {want}"))
        .collect()
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "walks: {} (Parkinson {}, control {})",
            self.walks, self.parkinson_walks, self.control_walks
        )?;
        writeln!(
            f,
            "subjects: {} (Parkinson {}, control {})",
            self.subjects, self.parkinson_subjects, self.control_subjects
        )?;
        writeln!(
            f,
            "segments: {} (window {}, stride {})",
            self.segments, self.window, self.stride
        )?;
        writeln!(
            f,
            "samples: {} (walks of {} to {} samples)",
            self.samples, self.shortest_walk, self.longest_walk
        )
    }
}

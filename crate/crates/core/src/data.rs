//! Walk records, input scaling, fixed-window segmentation and subject-level
//! fold planning.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::NUM_CHANNELS;

pub const SAMPLE_RATE_HZ: f64 = 100.0;

/// Canonical channel order: the file column order after the time stamp.
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "L1", "L2", "L3", "L4", "L5", "L6", "L7", "L8", "R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8",
    "TotalL", "TotalR",
];

/// Originating study of a recording, as encoded in the file name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Study {
    Ga,
    Ju,
    Si,
}

impl Study {
    pub fn as_str(self) -> &'static str {
        match self {
            Study::Ga => "Ga",
            Study::Ju => "Ju",
            Study::Si => "Si",
        }
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Ga" => Ok(Study::Ga),
            "Ju" => Ok(Study::Ju),
            "Si" => Ok(Study::Si),
            other => Err(Error::invalid("study", format!("unknown study `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Parkinson,
    Control,
}

impl Group {
    /// 1 for Parkinson (positive class), 0 for control.
    pub fn label(self) -> u8 {
        match self {
            Group::Parkinson => 1,
            Group::Control => 0,
        }
    }

    pub fn from_label(label: u8) -> Self {
        if label == 1 {
            Group::Parkinson
        } else {
            Group::Control
        }
    }

    /// File name code: `Pt` or `Co`.
    pub fn code(self) -> &'static str {
        match self {
            Group::Parkinson => "Pt",
            Group::Control => "Co",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Parkinson => "Parkinson",
            Group::Control => "Control",
        })
    }
}

/// One recorded walk: 18 time-aligned VGRF channels sampled at 100 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkRecord {
    pub subject_id: String,
    pub study: Study,
    pub group: Group,
    pub walk_index: u32,
    channels: Vec<Vec<f64>>,
}

impl WalkRecord {
    pub fn new(
        subject_id: impl Into<String>,
        study: Study,
        group: Group,
        walk_index: u32,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if channels.len() != NUM_CHANNELS {
            return Err(Error::invalid(
                "walk",
                format!("expected {NUM_CHANNELS} channels, got {}", channels.len()),
            ));
        }
        let len = channels[0].len();
        if len == 0 {
            return Err(Error::invalid("walk", "walk has no samples"));
        }
        if let Some((i, c)) = channels.iter().enumerate().find(|(_, c)| c.len() != len) {
            return Err(Error::invalid(
                "walk",
                format!("channel {i} has {} samples, channel 0 has {len}", c.len()),
            ));
        }
        Ok(WalkRecord {
            subject_id: subject_id.into(),
            study,
            group,
            walk_index,
            channels,
        })
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn duration_samples(&self) -> usize {
        self.channels[0].len()
    }

    /// `<subject>_<walk>` as in the dataset file names, e.g. `GaPt03_01`.
    pub fn walk_id(&self) -> String {
        format!("{}_{:02}", self.subject_id, self.walk_index)
    }
}

/// Subject id in the dataset convention, e.g. `GaPt03`.
pub fn subject_id(study: Study, group: Group, number: u32) -> String {
    format!("{}{}{:02}", study.as_str(), group.code(), number)
}

// ---------------------------------------------------------- normalization

/// Per-channel minimum and maximum over a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    /// Min-max scaling of one value of `channel`; constant channels map to 0.
    /// Values outside the fitted range are not clamped.
    pub fn scale(&self, channel: usize, value: f64) -> f64 {
        let (lo, hi) = (self.min[channel], self.max[channel]);
        if hi > lo {
            (value - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn apply(&self, walk: &WalkRecord) -> WalkRecord {
        let channels = walk
            .channels
            .iter()
            .enumerate()
            .map(|(c, xs)| xs.iter().map(|&x| self.scale(c, x)).collect())
            .collect();
        WalkRecord {
            channels,
            ..walk.clone()
        }
    }
}

pub fn fit_normalization(train_walks: &[WalkRecord]) -> Result<NormalizationStats> {
    if train_walks.is_empty() {
        return Err(Error::invalid("fit_normalization", "empty training set"));
    }
    let mut min = alloc::vec![f64::INFINITY; NUM_CHANNELS];
    let mut max = alloc::vec![f64::NEG_INFINITY; NUM_CHANNELS];
    for walk in train_walks {
        for (c, xs) in walk.channels.iter().enumerate() {
            for &x in xs {
                min[c] = min[c].min(x);
                max[c] = max[c].max(x);
            }
        }
    }
    Ok(NormalizationStats { min, max })
}

pub fn apply_normalization(walk: &WalkRecord, stats: &NormalizationStats) -> WalkRecord {
    stats.apply(walk)
}

// ----------------------------------------------------------- segmentation

/// An `[18, L]` window of a walk.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub values: Tensor,
    /// 1 Parkinson, 0 control.
    pub label: u8,
    pub walk_ref: String,
    pub subject_ref: String,
    pub start_sample: usize,
}

/// `floor((T − window) / stride) + 1` for `T ≥ window`, else 0.
pub fn segment_count(duration: usize, window: usize, stride: usize) -> usize {
    if duration < window || stride == 0 {
        0
    } else {
        (duration - window) / stride + 1
    }
}

/// Windows starting at `0, stride, 2·stride, …`; a trailing partial window is
/// dropped.
pub fn segment_walk(walk: &WalkRecord, window: usize, stride: usize) -> Result<Vec<Segment>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::invalid(
            "segment_walk",
            format!(
                "need window ≥ 1 and 1 ≤ stride ≤ window, got window {window}, stride {stride}"
            ),
        ));
    }
    let n = segment_count(walk.duration_samples(), window, stride);
    let walk_ref = walk.walk_id();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * stride;
        let mut values = Vec::with_capacity(NUM_CHANNELS * window);
        for c in &walk.channels {
            values.extend_from_slice(&c[start..start + window]);
        }
        out.push(Segment {
            values: Tensor::new([NUM_CHANNELS, window], values)?,
            label: walk.group.label(),
            walk_ref: walk_ref.clone(),
            subject_ref: walk.subject_id.clone(),
            start_sample: start,
        });
    }
    Ok(out)
}

/// Segments of every walk, in walk order.
pub fn segment_walks(walks: &[WalkRecord], window: usize, stride: usize) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for w in walks {
        out.extend(segment_walk(w, window, stride)?);
    }
    Ok(out)
}

// ---------------------------------------------------------- fold planning

/// Distinct subjects of a walk list with their group, sorted by id.
pub fn subjects_of(walks: &[WalkRecord]) -> Result<Vec<(String, Group)>> {
    let mut map: BTreeMap<&str, Group> = BTreeMap::new();
    for w in walks {
        match map.get(w.subject_id.as_str()) {
            Some(&g) if g != w.group => {
                return Err(Error::invalid(
                    "subjects",
                    format!("subject `{}` has walks in both groups", w.subject_id),
                ))
            }
            _ => {
                map.insert(&w.subject_id, w.group);
            }
        }
    }
    Ok(map.into_iter().map(|(s, g)| (s.to_string(), g)).collect())
}

/// Subject-to-fold assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = alloc::vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Class-stratified subject-level folds.
///
/// Within each class (Parkinson first) subjects are shuffled by `seed` and
/// dealt round-robin; the control deal continues from the fold after the last
/// Parkinson subject so fold sizes differ by at most one.
pub fn build_folds(subjects: &[(String, Group)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(
            "build_folds",
            format!("k = {k}, need at least 2 folds"),
        ));
    }
    let mut rng = rng::stream(seed, "folds");
    let mut assignments = BTreeMap::new();
    let mut next = 0;
    for group in [Group::Parkinson, Group::Control] {
        let mut ids: Vec<&str> = subjects
            .iter()
            .filter(|(_, g)| *g == group)
            .map(|(s, _)| s.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < k {
            return Err(Error::invalid(
                "build_folds",
                format!("{} {group} subjects cannot fill {k} folds", ids.len()),
            ));
        }
        ids.shuffle(&mut rng);
        for id in ids {
            assignments.insert(id.to_string(), next % k);
            next += 1;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

/// Class-stratified subject holdout for early-stopping monitoring.
///
/// Holds out `round(n · fraction)` subjects split across classes by largest
/// remainder, with at least one (and never all) subjects of each class.
/// Returns `(train, validation)` subject ids.
pub fn validation_split(
    subjects: &[(String, Group)],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "validation_split",
            format!("fraction {fraction} outside (0, 1)"),
        ));
    }
    let mut by_class: Vec<Vec<&str>> = Vec::new();
    for group in [Group::Parkinson, Group::Control] {
        let mut ids: Vec<&str> = subjects
            .iter()
            .filter(|(_, g)| *g == group)
            .map(|(s, _)| s.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::invalid(
                "validation_split",
                format!(
                    "{} {group} subjects, need at least 2 to hold one out",
                    ids.len()
                ),
            ));
        }
        by_class.push(ids);
    }
    let total_n: usize = by_class.iter().map(Vec::len).sum();
    let target = libm::round(total_n as f64 * fraction) as usize;
    let exact: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|&e| libm::floor(e) as usize).collect();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - take[a] as f64, exact[b] - take[b] as f64);
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut assigned: usize = take.iter().sum();
    for &c in order.iter().cycle().take(order.len()) {
        if assigned >= target {
            break;
        }
        take[c] += 1;
        assigned += 1;
    }
    for (t, ids) in take.iter_mut().zip(&by_class) {
        *t = (*t).clamp(1, ids.len() - 1);
    }

    let mut rng = rng::stream(seed, "validation");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (mut ids, t) in by_class.into_iter().zip(take) {
        ids.shuffle(&mut rng);
        val.extend(ids[..t].iter().map(|s| s.to_string()));
        train.extend(ids[t..].iter().map(|s| s.to_string()));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Copy of `walks` with group labels shuffled across subjects (all walks of a
/// subject keep a common label). Class sizes are preserved.
pub fn permute_subject_labels(walks: &[WalkRecord], seed: u64) -> Result<Vec<WalkRecord>> {
    let subjects = subjects_of(walks)?;
    let mut groups: Vec<Group> = subjects.iter().map(|(_, g)| *g).collect();
    groups.shuffle(&mut rng::stream(seed, "permute"));
    let new_group: BTreeMap<&str, Group> = subjects
        .iter()
        .map(|(s, _)| s.as_str())
        .zip(groups)
        .collect();
    Ok(walks
        .iter()
        .map(|w| WalkRecord {
            group: new_group[w.subject_id.as_str()],
            ..w.clone()
        })
        .collect())
}

/// Subjects present in both segment sets.
pub fn leakage_violations(train: &[Segment], test: &[Segment]) -> Vec<String> {
    let train_subjects: BTreeSet<&str> = train.iter().map(|s| s.subject_ref.as_str()).collect();
    let test_subjects: BTreeSet<&str> = test.iter().map(|s| s.subject_ref.as_str()).collect();
    train_subjects
        .intersection(&test_subjects)
        .map(|s| s.to_string())
        .collect()
}

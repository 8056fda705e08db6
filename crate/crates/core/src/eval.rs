//! Segment votes, walk-level majority voting, confusion metrics and the
//! subject-level cross-validation driver.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{
    build_folds, fit_normalization, leakage_violations, segment_walks, subjects_of,
    validation_split, Group, Segment, WalkRecord,
};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{GaitformerModel, Variant};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainObserver};

/// Probabilities at or above this vote Parkinson.
pub const VOTE_THRESHOLD: f64 = 0.5;

pub fn vote(probability: f64) -> u8 {
    u8::from(probability >= VOTE_THRESHOLD)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentResult {
    pub probability: f64,
    pub vote: u8,
}

impl SegmentResult {
    pub fn from_probability(probability: f64) -> Self {
        SegmentResult {
            probability,
            vote: vote(probability),
        }
    }
}

/// Inference-mode probability and vote of one segment.
pub fn classify_segment(model: &GaitformerModel, segment: &Tensor) -> Result<SegmentResult> {
    Ok(SegmentResult::from_probability(model.predict(segment)?))
}

/// Walk label from its segment results: the majority vote, with an exact
/// tie going to Parkinson iff the mean probability is ≥ 0.5.
pub fn majority_vote(results: &[SegmentResult]) -> Result<u8> {
    if results.is_empty() {
        return Err(Error::invalid("majority_vote", "no segment results"));
    }
    let positive = results.iter().filter(|r| r.vote == 1).count();
    let negative = results.len() - positive;
    Ok(match positive.cmp(&negative) {
        core::cmp::Ordering::Greater => 1,
        core::cmp::Ordering::Less => 0,
        core::cmp::Ordering::Equal => {
            let mean = results.iter().map(|r| r.probability).sum::<f64>() / results.len() as f64;
            vote(mean)
        }
    })
}

/// Walk-level confusion counts; Parkinson is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: u8, predicted: u8) {
        match (truth, predicted) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fn_ += 1,
            (_, 0) => self.tn += 1,
            _ => self.fp += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (t, p) in pairs {
            c.record(t, p);
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
        }
    }
}

/// Sensitivity, specificity and accuracy; `None` where the ratio's
/// denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

/// Mean and population standard deviation of the defined values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    /// Number of folds contributing.
    pub n: usize,
}

pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Option<Summary> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some(Summary {
        mean,
        sd: math::sqrt(var),
        n: v.len(),
    })
}

// ----------------------------------------------------------- cross-validation

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValConfig {
    pub variant: Variant,
    pub train: TrainConfig,
    pub k: usize,
    pub seed: u64,
    /// Fraction of each fold's training subjects held out for early stopping.
    pub validation_fraction: f64,
}

impl CrossValConfig {
    pub fn new(variant: Variant, train: TrainConfig, k: usize, seed: u64) -> Self {
        CrossValConfig {
            variant,
            train,
            k,
            seed,
            validation_fraction: 0.1,
        }
    }

    /// Per-fold seed: run seed plus fold index.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }

    pub fn window(&self) -> usize {
        self.variant.segment_len()
    }

    /// Half-window stride (50% overlap).
    pub fn stride(&self) -> usize {
        self.window() / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkPrediction {
    pub walk_id: String,
    pub subject_id: String,
    pub truth: u8,
    pub predicted: u8,
    pub positive_votes: usize,
    pub segments: usize,
    pub mean_probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub test_subjects: Vec<String>,
    pub validation_subjects: Vec<String>,
    pub train_segments: usize,
    pub validation_segments: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub segment_correct: usize,
    pub segment_total: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub walks: Vec<WalkPrediction>,
}

impl FoldResult {
    pub fn segment_accuracy(&self) -> Option<f64> {
        ratio(self.segment_correct, self.segment_total)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: CrossValConfig,
    pub per_fold: Vec<FoldResult>,
}

impl EvalReport {
    pub fn sensitivity(&self) -> Option<Summary> {
        summarize(self.per_fold.iter().map(|f| f.metrics.sensitivity))
    }

    pub fn specificity(&self) -> Option<Summary> {
        summarize(self.per_fold.iter().map(|f| f.metrics.specificity))
    }

    pub fn accuracy(&self) -> Option<Summary> {
        summarize(self.per_fold.iter().map(|f| f.metrics.accuracy))
    }

    /// Segment accuracy pooled over all test segments of all folds.
    pub fn pooled_segment_accuracy(&self) -> Option<f64> {
        let correct = self.per_fold.iter().map(|f| f.segment_correct).sum();
        let total = self.per_fold.iter().map(|f| f.segment_total).sum();
        ratio(correct, total)
    }

    pub fn total_counts(&self) -> ConfusionCounts {
        self.per_fold
            .iter()
            .fold(ConfusionCounts::default(), |acc, f| acc.merge(&f.counts))
    }
}

/// Progress hooks of [`cross_validate`].
pub trait FoldObserver {
    fn on_fold_start(&mut self, _fold: usize, _k: usize) {}
    /// Observer for the training run of `fold`.
    fn trainer(&mut self, fold: usize) -> &mut dyn TrainObserver;
    fn on_fold_end(&mut self, _result: &FoldResult) {}
}

impl FoldObserver for () {
    fn trainer(&mut self, _: usize) -> &mut dyn TrainObserver {
        self
    }
}

/// Classifies every segment and votes per walk (walks in first-seen order).
pub fn predict_walks(
    model: &GaitformerModel,
    segments: &[Segment],
) -> Result<(Vec<WalkPrediction>, usize)> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_walk: BTreeMap<&str, (&Segment, Vec<SegmentResult>)> = BTreeMap::new();
    let mut correct = 0;
    for s in segments {
        let r = classify_segment(model, &s.values)?;
        correct += usize::from(r.vote == s.label);
        by_walk
            .entry(s.walk_ref.as_str())
            .or_insert_with(|| {
                order.push(&s.walk_ref);
                (s, Vec::new())
            })
            .1
            .push(r);
    }
    let mut out = Vec::with_capacity(order.len());
    for walk in order {
        let (first, results) = &by_walk[walk];
        out.push(WalkPrediction {
            walk_id: String::from(walk),
            subject_id: first.subject_ref.clone(),
            truth: first.label,
            predicted: majority_vote(results)?,
            positive_votes: results.iter().filter(|r| r.vote == 1).count(),
            segments: results.len(),
            mean_probability: results.iter().map(|r| r.probability).sum::<f64>()
                / results.len() as f64,
        });
    }
    Ok((out, correct))
}

fn walks_of<'a>(walks: &'a [WalkRecord], subjects: &[String]) -> Vec<&'a WalkRecord> {
    walks
        .iter()
        .filter(|w| subjects.binary_search(&w.subject_id).is_ok())
        .collect()
}

fn run_fold(
    walks: &[WalkRecord],
    subjects: &[(String, Group)],
    plan: &crate::data::FoldPlan,
    fold: usize,
    config: &CrossValConfig,
    observer: &mut dyn FoldObserver,
) -> Result<FoldResult> {
    let seed = config.fold_seed(fold);
    let mut test_subjects: Vec<String> =
        plan.subjects_in(fold).into_iter().map(String::from).collect();
    test_subjects.sort_unstable();
    let rest: Vec<(String, Group)> = subjects
        .iter()
        .filter(|(s, _)| plan.fold_of(s) != Some(fold))
        .cloned()
        .collect();
    let (train_subjects, validation_subjects) =
        validation_split(&rest, config.validation_fraction, seed)?;

    let clone_all = |ws: Vec<&WalkRecord>| ws.into_iter().cloned().collect::<Vec<_>>();
    let train_walks = clone_all(walks_of(walks, &train_subjects));
    let validation_walks = clone_all(walks_of(walks, &validation_subjects));
    let test_walks = clone_all(walks_of(walks, &test_subjects));

    let stats = fit_normalization(&train_walks)?;
    let (window, stride) = (config.window(), config.stride());
    let prepare = |ws: &[WalkRecord]| -> Result<Vec<Segment>> {
        let normalized: Vec<WalkRecord> = ws.iter().map(|w| stats.apply(w)).collect();
        segment_walks(&normalized, window, stride)
    };
    let train_segments = prepare(&train_walks)?;
    let validation_segments = prepare(&validation_walks)?;
    let test_segments = prepare(&test_walks)?;

    let mut leaked = leakage_violations(&train_segments, &test_segments);
    leaked.extend(leakage_violations(&validation_segments, &test_segments));
    if !leaked.is_empty() {
        return Err(Error::Leakage(leaked.join(", ")));
    }

    let mut model = GaitformerModel::new(config.variant, seed);
    model.normalization = Some(stats.clone());
    let train_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let (model, state) = train(
        model,
        &train_segments,
        &validation_segments,
        &train_config,
        observer.trainer(fold),
    )?;

    let (predictions, segment_correct) = predict_walks(&model, &test_segments)?;
    let counts = ConfusionCounts::from_pairs(predictions.iter().map(|p| (p.truth, p.predicted)));
    Ok(FoldResult {
        fold,
        seed,
        test_subjects,
        validation_subjects,
        train_segments: train_segments.len(),
        validation_segments: validation_segments.len(),
        counts,
        metrics: metrics(&counts),
        segment_correct,
        segment_total: test_segments.len(),
        epochs: state.epoch,
        best_epoch: state.best_epoch,
        best_validation_loss: state.best_validation_loss,
        walks: predictions,
    })
}

/// Subject-level k-fold cross-validation.
///
/// For each fold: hold out its subjects for testing, split validation
/// subjects from the rest, fit normalization on the training subjects,
/// segment, train, and majority-vote the test walks. Any failure aborts the
/// run with the fold index.
pub fn cross_validate(
    walks: &[WalkRecord],
    config: &CrossValConfig,
    observer: &mut dyn FoldObserver,
) -> Result<EvalReport> {
    config.train.validate()?;
    let subjects = subjects_of(walks)?;
    for group in [Group::Parkinson, Group::Control] {
        if !subjects.iter().any(|(_, g)| *g == group) {
            return Err(Error::invalid(
                "cross_validate",
                format!("no {group} subjects"),
            ));
        }
    }
    let plan = build_folds(&subjects, config.k, config.seed)?;
    let mut per_fold = Vec::with_capacity(config.k);
    for fold in 0..config.k {
        observer.on_fold_start(fold, config.k);
        let result = run_fold(walks, &subjects, &plan, fold, config, observer).map_err(|e| {
            Error::Fold {
                fold,
                source: alloc::boxed::Box::new(e),
            }
        })?;
        observer.on_fold_end(&result);
        per_fold.push(result);
    }
    Ok(EvalReport {
        config: config.clone(),
        per_fold,
    })
}

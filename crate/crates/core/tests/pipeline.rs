use std::collections::BTreeSet;

use gaitformer_core::data::{
    build_folds, fit_normalization, segment_count, segment_walks, subjects_of, Group,
};
use gaitformer_core::eval::{cross_validate, CrossValConfig};
use gaitformer_core::synth::{synth_dataset, SynthConfig};
use gaitformer_core::train::{train, TrainConfig};
use gaitformer_core::{GaitformerModel, Variant};
use proptest::prelude::*;

fn tiny_config(seed: u64) -> CrossValConfig {
    let train = TrainConfig {
        max_epochs: 3,
        batch_size: 8,
        patience: 2,
        ..TrainConfig::default()
    };
    CrossValConfig::new(Variant::C, train, 2, seed)
}

#[test]
fn cross_validation_is_reproducible_and_subject_disjoint() {
    let walks = synth_dataset(&SynthConfig::new(4, 600, 2, 1.0)).unwrap();
    let a = cross_validate(&walks, &tiny_config(2), &mut ()).unwrap();
    let b = cross_validate(&walks, &tiny_config(2), &mut ()).unwrap();
    assert_eq!(a, b);

    let mut tested = BTreeSet::new();
    for fold in &a.per_fold {
        for s in &fold.test_subjects {
            assert!(tested.insert(s.clone()), "{s} tested twice");
            assert!(!fold.validation_subjects.contains(s));
        }
        assert_eq!(fold.counts.total(), fold.walks.len());
    }
    assert_eq!(tested.len(), 8);
    assert_eq!(a.total_counts().total(), walks.len());
}

#[test]
fn another_seed_changes_the_run() {
    let walks = synth_dataset(&SynthConfig::new(4, 600, 2, 1.0)).unwrap();
    let a = cross_validate(&walks, &tiny_config(2), &mut ()).unwrap();
    let b = cross_validate(&walks, &tiny_config(3), &mut ()).unwrap();
    assert_ne!(a, b);
}

#[test]
fn training_lowers_the_training_loss() {
    let walks = synth_dataset(&SynthConfig::new(3, 400, 5, 1.0)).unwrap();
    let stats = fit_normalization(&walks).unwrap();
    let normalized: Vec<_> = walks.iter().map(|w| stats.apply(w)).collect();
    let segments = segment_walks(&normalized, 50, 25).unwrap();
    let config = TrainConfig {
        max_epochs: 15,
        batch_size: 16,
        early_stopping: false,
        dropout_enabled: false,
        seed: 5,
        ..TrainConfig::default()
    };
    let (_, state) = train(
        GaitformerModel::new(Variant::C, 5),
        &segments,
        &segments,
        &config,
        &mut (),
    )
    .unwrap();
    let first = state.history.first().unwrap().train_loss;
    let last = state.history.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalized_training_walks_lie_in_unit_range(seed in 0u64..1000) {
        let walks = synth_dataset(&SynthConfig::new(2, 150, seed, 0.5)).unwrap();
        let stats = fit_normalization(&walks).unwrap();
        for w in &walks {
            for channel in stats.apply(w).channels() {
                prop_assert!(channel.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn segments_cover_every_walk(
        seed in 0u64..1000,
        samples in 50usize..400,
        window in 10usize..120,
        stride_frac in 0.05f64..1.0,
    ) {
        let stride = ((window as f64 * stride_frac) as usize).max(1);
        let walks = synth_dataset(&SynthConfig::new(2, samples, seed, 1.0)).unwrap();
        let segments = segment_walks(&walks, window, stride).unwrap();
        prop_assert_eq!(segments.len(), walks.len() * segment_count(samples, window, stride));
        for s in &segments {
            prop_assert_eq!(s.values.shape(), &[18, window]);
        }
    }

    #[test]
    fn folds_partition_subjects_by_class(
        per_class in 2usize..15,
        k_raw in 2usize..10,
        seed in any::<u64>(),
    ) {
        let k = k_raw.min(per_class);
        let walks = synth_dataset(&SynthConfig::new(per_class, 120, 1, 1.0)).unwrap();
        let subjects = subjects_of(&walks).unwrap();
        let plan = build_folds(&subjects, k, seed).unwrap();
        prop_assert_eq!(plan.assignments.len(), subjects.len());
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for fold in 0..k {
            let members = plan.subjects_in(fold);
            let pd = members
                .iter()
                .filter(|s| subjects.iter().any(|(id, g)| id == *s && *g == Group::Parkinson))
                .count();
            // Each class is dealt round-robin, so per-class counts differ by at most one.
            prop_assert!(pd >= per_class / k && pd <= per_class.div_ceil(k));
        }
    }
}

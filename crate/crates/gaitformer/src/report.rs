//! Cross-validation report files.
//!
//! `report.txt` is a table for reading; `report.kv` holds the same numbers
//! as `key = value` lines (the config grammar) with floats in shortest
//! round-trip form. Undefined ratios are written as `undefined`. Both
//! renderings depend only on the report, so equal runs give equal bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gaitformer_core::eval::{EvalReport, Summary};
use gaitformer_core::Variant;

use crate::error::{Error, Result};

pub const REPORT_FORMAT: &str = "gaitformer-eval-report 1";

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn pct_sd(s: Option<Summary>) -> String {
    s.map_or_else(
        || "n/a".to_string(),
        |s| format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.sd),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

pub fn render_table(report: &EvalReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let w = &mut s;
    writeln!(
        w,
        "Cross-validation of variant {} ({} folds, seed {})",
        c.variant, c.k, c.seed
    )
    .unwrap();
    writeln!(w).unwrap();
    writeln!(
        w,
        "{:>4}  {:>5}  {:>3}  {:>3}  {:>3}  {:>3}  {:>6}  {:>6}  {:>6}  {:>10}  {:>6}  {:>4}",
        "fold", "walks", "TP", "FN", "TN", "FP", "Se %", "Sp %", "Acc %", "seg acc %", "epochs", "best"
    )
    .unwrap();
    for f in &report.per_fold {
        writeln!(
            w,
            "{:>4}  {:>5}  {:>3}  {:>3}  {:>3}  {:>3}  {:>6}  {:>6}  {:>6}  {:>10}  {:>6}  {:>4}",
            f.fold,
            f.counts.total(),
            f.counts.tp,
            f.counts.fn_,
            f.counts.tn,
            f.counts.fp,
            pct(f.metrics.sensitivity),
            pct(f.metrics.specificity),
            pct(f.metrics.accuracy),
            pct(f.segment_accuracy()),
            f.epochs,
            f.best_epoch
        )
        .unwrap();
    }
    writeln!(w).unwrap();
    writeln!(w, "{:<10}  {:>14}  {:>14}  {:>14}", "Method", "Se ± SD %", "Sp ± SD %", "Acc ± SD %").unwrap();
    writeln!(
        w,
        "{:<10}  {:>14}  {:>14}  {:>14}",
        format!("Model {}", c.variant),
        pct_sd(report.sensitivity()),
        pct_sd(report.specificity()),
        pct_sd(report.accuracy())
    )
    .unwrap();
    writeln!(w).unwrap();
    let total = report.total_counts();
    writeln!(
        w,
        "walks: {} (TP {}, FN {}, TN {}, FP {})",
        total.total(),
        total.tp,
        total.fn_,
        total.tn,
        total.fp
    )
    .unwrap();
    writeln!(
        w,
        "pooled segment accuracy: {} %",
        pct(report.pooled_segment_accuracy())
    )
    .unwrap();
    writeln!(w, "SD is the population standard deviation over folds.").unwrap();
    s
}

pub fn render_kv(report: &EvalReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").unwrap();
    kv("format", &REPORT_FORMAT);
    kv("variant", &c.variant);
    kv("k", &c.k);
    kv("seed", &c.seed);
    kv("validation_fraction", &c.validation_fraction);
    kv("train.learning_rate", &c.train.learning_rate);
    kv("train.batch_size", &c.train.batch_size);
    kv("train.max_epochs", &c.train.max_epochs);
    kv("train.min_delta", &c.train.min_delta);
    kv("train.patience", &c.train.patience);
    kv("train.dropout", &c.train.dropout_enabled);
    kv("train.early_stopping", &c.train.early_stopping);
    for f in &report.per_fold {
        let p = format!("fold.{}", f.fold);
        kv(&format!("{p}.seed"), &f.seed);
        kv(&format!("{p}.test_subjects"), &f.test_subjects.join(","));
        kv(&format!("{p}.validation_subjects"), &f.validation_subjects.join(","));
        kv(&format!("{p}.train_segments"), &f.train_segments);
        kv(&format!("{p}.validation_segments"), &f.validation_segments);
        kv(&format!("{p}.tp"), &f.counts.tp);
        kv(&format!("{p}.fn"), &f.counts.fn_);
        kv(&format!("{p}.tn"), &f.counts.tn);
        kv(&format!("{p}.fp"), &f.counts.fp);
        kv(&format!("{p}.sensitivity"), &opt(f.metrics.sensitivity));
        kv(&format!("{p}.specificity"), &opt(f.metrics.specificity));
        kv(&format!("{p}.accuracy"), &opt(f.metrics.accuracy));
        kv(&format!("{p}.segment_correct"), &f.segment_correct);
        kv(&format!("{p}.segment_total"), &f.segment_total);
        kv(&format!("{p}.segment_accuracy"), &opt(f.segment_accuracy()));
        kv(&format!("{p}.epochs"), &f.epochs);
        kv(&format!("{p}.best_epoch"), &f.best_epoch);
        kv(&format!("{p}.best_validation_loss"), &f.best_validation_loss);
        for wp in &f.walks {
            kv(
                &format!("{p}.walk.{}", wp.walk_id),
                &format!(
                    "truth={} predicted={} positive_votes={} segments={} mean_probability={}",
                    wp.truth, wp.predicted, wp.positive_votes, wp.segments, wp.mean_probability
                ),
            );
        }
    }
    for (name, summary) in [
        ("sensitivity", report.sensitivity()),
        ("specificity", report.specificity()),
        ("accuracy", report.accuracy()),
    ] {
        kv(&format!("aggregate.{name}.mean"), &opt(summary.map(|s| s.mean)));
        kv(&format!("aggregate.{name}.sd"), &opt(summary.map(|s| s.sd)));
        kv(&format!("aggregate.{name}.folds"), &summary.map_or(0, |s| s.n));
    }
    kv(
        "aggregate.pooled_segment_accuracy",
        &opt(report.pooled_segment_accuracy()),
    );
    s
}

/// Model-by-model comparison in the layout of an ablation table.
pub fn render_ablation(rows: &[(Variant, &EvalReport)]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<10}  {:>14}  {:>14}  {:>14}  {:>12}", "Model", "Se ± SD %", "Sp ± SD %", "Acc ± SD %", "seg acc %").unwrap();
    for (variant, r) in rows {
        writeln!(
            s,
            "{:<10}  {:>14}  {:>14}  {:>14}  {:>12}",
            format!("Model {variant}"),
            pct_sd(r.sensitivity()),
            pct_sd(r.specificity()),
            pct_sd(r.accuracy()),
            pct(r.pooled_segment_accuracy())
        )
        .unwrap();
    }
    s
}

/// Writes `report.txt` and `report.kv` into `dir`.
pub fn write_reports(dir: &Path, report: &EvalReport) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let table = dir.join("report.txt");
    let kv = dir.join("report.kv");
    fs::write(&table, render_table(report)).map_err(Error::io(&table))?;
    fs::write(&kv, render_kv(report)).map_err(Error::io(&kv))?;
    Ok((table, kv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_pairs;
    use gaitformer_core::eval::{
        metrics, summarize, ConfusionCounts, CrossValConfig, FoldResult,
    };
    use gaitformer_core::train::TrainConfig;
    use std::collections::BTreeMap;

    fn fold(i: usize, counts: ConfusionCounts) -> FoldResult {
        FoldResult {
            fold: i,
            seed: 10 + i as u64,
            test_subjects: vec![format!("GaPt{i:02}"), format!("GaCo{i:02}")],
            validation_subjects: vec![],
            train_segments: 50,
            validation_segments: 5,
            counts,
            metrics: metrics(&counts),
            segment_correct: 9 + i,
            segment_total: 12,
            epochs: 4,
            best_epoch: 2,
            best_validation_loss: 0.25,
            walks: vec![],
        }
    }

    fn sample() -> EvalReport {
        EvalReport {
            config: CrossValConfig::new(Variant::Full, TrainConfig::default(), 3, 10),
            per_fold: vec![
                fold(0, ConfusionCounts { tp: 3, fn_: 1, tn: 2, fp: 0 }),
                fold(1, ConfusionCounts { tp: 4, fn_: 0, tn: 1, fp: 1 }),
                fold(2, ConfusionCounts { tp: 2, fn_: 0, tn: 0, fp: 0 }),
            ],
        }
    }

    #[test]
    fn aggregates_recompute_from_folds() {
        let r = sample();
        let kv: BTreeMap<String, String> = parse_pairs(&render_kv(&r)).unwrap().into_iter().collect();
        let num = |k: &str| kv[k].parse::<f64>().ok();
        let per = |name: &str| (0..3).map(|i| num(&format!("fold.{i}.{name}"))).collect::<Vec<_>>();
        for name in ["sensitivity", "specificity", "accuracy"] {
            let s = summarize(per(name)).unwrap();
            assert_eq!(num(&format!("aggregate.{name}.mean")), Some(s.mean));
            assert_eq!(num(&format!("aggregate.{name}.sd")), Some(s.sd));
        }
        // Fold 2 has no control walks.
        assert_eq!(kv["fold.2.specificity"], "undefined");
        assert_eq!(kv["aggregate.specificity.folds"], "2");
        assert_eq!(num("aggregate.pooled_segment_accuracy"), Some(30.0 / 36.0));
    }

    #[test]
    fn renderings_are_stable() {
        let r = sample();
        assert_eq!(render_kv(&r), render_kv(&r.clone()));
        let table = render_table(&r);
        assert!(table.contains("Model full"));
        assert!(table.contains("n/a"));
        let ablation = render_ablation(&[(Variant::Full, &r), (Variant::B, &r)]);
        assert_eq!(ablation.lines().count(), 3);
    }
}

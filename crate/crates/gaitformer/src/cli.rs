//! Command-line interface.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gaitformer_core::data::{
    fit_normalization, segment_walk, segment_walks, subjects_of, validation_split, WalkRecord,
};
use gaitformer_core::eval::{classify_segment, majority_vote, cross_validate, FoldObserver, FoldResult};
use gaitformer_core::gradcheck::{
    grad_check, standard_suite, Corrupted, DenseFragment, GradCheckOptions, DEFAULT_TOLERANCE,
};
use gaitformer_core::train::{train, Control, EpochRecord, TrainObserver};
use gaitformer_core::{GaitformerModel, Variant};

use crate::config::{RunConfig, SynthSettings};
use crate::modelfile::{load_model, load_model_expecting, save_model};
use crate::report::{render_table, write_reports};
use crate::segstore::write_segments;
use crate::stats::dataset_stats;
use crate::walkfile::{load_dataset, read_walk_file, write_dataset};

#[derive(Debug, Parser)]
#[command(name = "gaitformer", version, about = "Transformer classifier for VGRF gait recordings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on a train/validation split and save it.
    Train(RunArgs),
    /// Subject-level k-fold cross-validation with walk-level voting.
    Crossval(RunArgs),
    /// Classify one walk file with a saved model.
    Predict(PredictArgs),
    /// Write a synthetic dataset in the walk-file layout.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Count walks, subjects and segments of a dataset directory.
    DatasetStats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file (`key = value` lines); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory [fallback: $GAITFORMER_DATA].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading one.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub subjects_per_class: Option<usize>,
    #[arg(long)]
    pub walk_seconds: Option<f64>,
    #[arg(long)]
    pub walks_per_subject: Option<u32>,
    #[arg(long)]
    pub separation: Option<f64>,
    /// Shuffle group labels across synthetic subjects (null control).
    #[arg(long)]
    pub permute_labels: bool,
    /// Model variant: full, B or C.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub no_dropout: bool,
    #[arg(long)]
    pub no_early_stopping: bool,
    /// Number of folds (crossval).
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Walk file to classify.
    pub walk: PathBuf,
    /// Fail unless the model is of this variant.
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub subjects_per_class: usize,
    #[arg(long, default_value_t = 30.0)]
    pub walk_seconds: f64,
    #[arg(long, default_value_t = 1)]
    pub walks_per_subject: u32,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long)]
    pub permute_labels: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset directory [fallback: $GAITFORMER_DATA].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write all segments (window 100, stride 50) to this store file.
    #[arg(long)]
    pub segments_out: Option<PathBuf>,
    /// Exit nonzero when a count differs from the reference dataset.
    #[arg(long)]
    pub strict: bool,
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self, command: &str) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        c.command = command.to_string();
        if let Some(d) = &self.data {
            c.data = Some(d.clone());
        }
        c.synthetic |= self.synthetic;
        let s = &mut c.synth;
        if let Some(v) = self.subjects_per_class {
            s.subjects_per_class = v;
        }
        if let Some(v) = self.walk_seconds {
            s.walk_seconds = v;
        }
        if let Some(v) = self.walks_per_subject {
            s.walks_per_subject = v;
        }
        if let Some(v) = self.separation {
            s.separation = v;
        }
        s.permute_labels |= self.permute_labels;
        if let Some(v) = self.variant {
            c.variant = v;
        }
        let t = &mut c.train;
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.min_delta {
            t.min_delta = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if self.no_dropout {
            t.dropout_enabled = false;
        }
        if self.no_early_stopping {
            t.early_stopping = false;
        }
        if let Some(v) = self.k {
            c.k = v as usize;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.validation_fraction {
            c.validation_fraction = v;
        }
        if let Some(v) = &self.out {
            c.out = Some(v.clone());
        }
        c.resolve_data_from_env();
        c.validate()?;
        if c.out.is_none() {
            bail!("no output directory: pass --out or set `out` in the config file");
        }
        Ok(c)
    }
}

/// Writes per-epoch lines to stderr and to a log file.
struct EpochLog {
    file: fs::File,
    start: Instant,
    fold: Option<usize>,
}

impl EpochLog {
    fn create(path: &Path) -> anyhow::Result<Self> {
        Ok(EpochLog {
            file: fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
            start: Instant::now(),
            fold: None,
        })
    }
}

impl TrainObserver for EpochLog {
    fn on_epoch(&mut self, r: &EpochRecord) -> Control {
        let fold = self.fold.map(|f| format!("fold={f} ")).unwrap_or_default();
        let line = format!(
            "{fold}epoch={} train_loss={:.6} train_acc={:.4} val_loss={:.6} val_acc={:.4} elapsed_s={:.1}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.validation_loss,
            r.validation_accuracy,
            self.start.elapsed().as_secs_f64()
        );
        eprintln!("{line}");
        // A failed log write should not abort a long training run.
        let _ = writeln!(self.file, "{line}");
        Control::Continue
    }
}

impl FoldObserver for EpochLog {
    fn on_fold_start(&mut self, fold: usize, k: usize) {
        self.fold = Some(fold);
        eprintln!("fold {}/{k}", fold + 1);
    }

    fn trainer(&mut self, _fold: usize) -> &mut dyn TrainObserver {
        self
    }

    fn on_fold_end(&mut self, r: &FoldResult) {
        eprintln!(
            "fold={} walks={} tp={} fn={} tn={} fp={} best_epoch={}",
            r.fold,
            r.counts.total(),
            r.counts.tp,
            r.counts.fn_,
            r.counts.tn,
            r.counts.fp,
            r.best_epoch
        );
    }
}

fn prepare_out(config: &RunConfig) -> anyhow::Result<PathBuf> {
    let out = config.out.clone().expect("resolved config has an output directory");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("config.txt");
    fs::write(&path, config.to_text()).with_context(|| format!("writing {}", path.display()))?;
    Ok(out)
}

pub fn cmd_train(config: &RunConfig) -> anyhow::Result<()> {
    let walks = config.load_walks()?;
    let out = prepare_out(config)?;
    let subjects = subjects_of(&walks)?;
    let (train_ids, val_ids) = validation_split(&subjects, config.validation_fraction, config.seed)?;
    let pick = |ids: &[String]| -> Vec<WalkRecord> {
        walks
            .iter()
            .filter(|w| ids.binary_search(&w.subject_id).is_ok())
            .cloned()
            .collect()
    };
    let (train_walks, val_walks) = (pick(&train_ids), pick(&val_ids));
    let stats = fit_normalization(&train_walks)?;
    let window = config.variant.segment_len();
    let segments = |ws: &[WalkRecord]| {
        let normalized: Vec<WalkRecord> = ws.iter().map(|w| stats.apply(w)).collect();
        segment_walks(&normalized, window, window / 2)
    };
    let (train_segments, val_segments) = (segments(&train_walks)?, segments(&val_walks)?);
    eprintln!(
        "training variant {} on {} segments ({} subjects), validating on {} segments ({} subjects)",
        config.variant,
        train_segments.len(),
        train_ids.len(),
        val_segments.len(),
        val_ids.len()
    );
    let mut model = GaitformerModel::new(config.variant, config.seed);
    model.normalization = Some(stats);
    let mut log = EpochLog::create(&out.join("epochs.log"))?;
    let (model, state) = train(
        model,
        &train_segments,
        &val_segments,
        &config.train_config(),
        &mut log,
    )?;
    let model_path = out.join("model.gfm");
    save_model(&model_path, &model)?;
    let best = &state.history[state.best_epoch - 1];
    println!("model: {}", model_path.display());
    println!(
        "best epoch {} of {}: val_loss={:.6} val_acc={:.4}",
        state.best_epoch, state.epoch, best.validation_loss, best.validation_accuracy
    );
    Ok(())
}

pub fn cmd_crossval(config: &RunConfig) -> anyhow::Result<()> {
    let walks = config.load_walks()?;
    let out = prepare_out(config)?;
    let mut log = EpochLog::create(&out.join("epochs.log"))?;
    let report = cross_validate(&walks, &config.crossval_config(), &mut log)?;
    let (table, kv) = write_reports(&out, &report)?;
    print!("{}", render_table(&report));
    println!("reports: {} {}", table.display(), kv.display());
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> anyhow::Result<()> {
    let model = match args.variant {
        Some(v) => load_model_expecting(&args.model, v)?,
        None => load_model(&args.model)?,
    };
    let walk = read_walk_file(&args.walk)?;
    let walk = match &model.normalization {
        Some(stats) => stats.apply(&walk),
        None => walk,
    };
    let window = model.variant().segment_len();
    let segments = segment_walk(&walk, window, window / 2)?;
    if segments.is_empty() {
        bail!(
            "walk {} has {} samples, fewer than one {window}-sample segment",
            walk.walk_id(),
            walk.duration_samples()
        );
    }
    println!("model: variant {}, seed {}", model.variant(), model.seed());
    println!("walk: {} ({} samples)", walk.walk_id(), walk.duration_samples());
    println!("segment\tstart\tprobability\tvote");
    let mut results = Vec::with_capacity(segments.len());
    for (i, s) in segments.iter().enumerate() {
        let r = classify_segment(&model, &s.values)?;
        println!("{i}\t{}\t{:.6}\t{}", s.start_sample, r.probability, r.vote);
        results.push(r);
    }
    let positive = results.iter().filter(|r| r.vote == 1).count();
    let mean = results.iter().map(|r| r.probability).sum::<f64>() / results.len() as f64;
    let label = majority_vote(&results)?;
    println!("segments: {}", results.len());
    println!("votes: {positive} Parkinson, {} control", results.len() - positive);
    println!("mean probability: {mean:.6}");
    println!(
        "label: {}",
        if label == 1 { "Parkinson" } else { "control" }
    );
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let settings = SynthSettings {
        subjects_per_class: args.subjects_per_class,
        walk_seconds: args.walk_seconds,
        walks_per_subject: args.walks_per_subject,
        separation: args.separation,
        permute_labels: args.permute_labels,
    };
    let walks = settings.generate(args.seed)?;
    let files = write_dataset(&args.out, &walks)?;
    let config = RunConfig {
        command: "synth".into(),
        synthetic: true,
        synth: settings,
        seed: args.seed,
        out: Some(args.out.clone()),
        ..RunConfig::default()
    };
    fs::write(args.out.join("config.txt"), config.to_text())
        .with_context(|| format!("writing config into {}", args.out.display()))?;
    println!("wrote {} walk files to {}", files.len(), args.out.display());
    Ok(())
}

/// Returns whether every check passed.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> anyhow::Result<bool> {
    let start = Instant::now();
    let mut ok = true;
    for (name, r) in standard_suite(args.seed, args.tolerance)? {
        let worst = r.worst().map(|(n, _)| n).unwrap_or("-");
        println!(
            "{:<32} {:>4}  max_rel_err={:.3e}  coords={}  kink_steps={}  worst={}",
            name,
            if r.passed() { "ok" } else { "FAIL" },
            r.max_relative_error,
            r.coordinates_checked,
            r.reduced_steps,
            worst
        );
        ok &= r.passed();
    }
    let mut corrupted = Corrupted {
        inner: DenseFragment::new(12, 7, 4, args.seed),
        factor: 1.5,
    };
    let control = grad_check(
        &mut corrupted,
        &GradCheckOptions {
            tolerance: args.tolerance,
            ..GradCheckOptions::default()
        },
    )?;
    let detected = !control.passed();
    println!(
        "{:<32} {:>4}  max_rel_err={:.3e}  (corrupted SELU backward must fail)",
        "negative control",
        if detected { "ok" } else { "FAIL" },
        control.max_relative_error
    );
    println!("elapsed: {:.1} s", start.elapsed().as_secs_f64());
    Ok(ok && detected)
}

/// Returns false when `--strict` is set and counts deviate.
pub fn cmd_dataset_stats(args: &StatsArgs) -> anyhow::Result<bool> {
    let dir = args
        .data
        .clone()
        .or_else(|| std::env::var_os(crate::config::DATA_ENV).map(PathBuf::from))
        .context("no data directory: pass --data or set GAITFORMER_DATA")?;
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let walks = load_dataset(&dir)?;
    let stats = dataset_stats(&walks)?;
    print!("{stats}");
    let deviations = stats.deviations();
    if deviations.is_empty() {
        println!("all counts match the reference dataset");
    }
    for d in &deviations {
        println!("deviation: {d}");
    }
    if let Some(path) = &args.segments_out {
        let segments = segment_walks(&walks, stats.window, stats.stride)?;
        write_segments(path, &segments)?;
        println!("segments written to {}", path.display());
    }
    Ok(!(args.strict && !deviations.is_empty()))
}

/// Runs a parsed command line; `Ok(false)` means a check failed.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.resolve("train")?).map(|()| true),
        Command::Crossval(a) => cmd_crossval(&a.resolve("crossval")?).map(|()| true),
        Command::Predict(a) => cmd_predict(&a).map(|()| true),
        Command::Synth(a) => cmd_synth(&a).map(|()| true),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::DatasetStats(a) => cmd_dataset_stats(&a),
    }
}

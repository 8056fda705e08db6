//! Adam optimisation with mini-batches and early stopping on validation loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Mode};
use crate::data::Segment;
use crate::error::{Error, Result};
use crate::eval::vote;
use crate::math;
use crate::model::GaitformerModel;
use crate::params::{Gradients, ParamStore};
use crate::rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// A validation loss must undercut the best so far by more than this to
    /// count as an improvement.
    pub min_delta: f64,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub dropout_enabled: bool,
    pub early_stopping: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 110,
            max_epochs: 100,
            min_delta: 0.01,
            patience: 20,
            seed: 0,
            dropout_enabled: true,
            early_stopping: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: alloc::string::String| Err(Error::invalid("train_config", reason));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad(format!(
                "batch size {}, max epochs {} and patience {} must be positive",
                self.batch_size, self.max_epochs, self.patience
            ));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad(format!("min delta {} must be ≥ 0", self.min_delta));
        }
        Ok(())
    }
}

/// Sizes of the mini-batches covering `n` items; the last may be short.
pub fn batch_sizes(n: usize, batch_size: usize) -> Vec<usize> {
    (0..n)
        .step_by(batch_size.max(1))
        .map(|start| batch_size.min(n - start))
        .collect()
}

// ------------------------------------------------------------------ adam

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::MissingGradient(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for id in params.ids() {
        let numel = params.get(id).numel();
        if grads.get(id).len() != numel || state.first_moment[id.index()].len() != numel {
            return Err(Error::MissingGradient(format!(
                "`{}` has {numel} values but {} gradient entries",
                params.name(id),
                grads.get(id).len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, f64::from(t));
    let c2 = 1.0 - libm::pow(ADAM_BETA2, f64::from(t));
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.get(id);
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        let theta = params.get_mut(id).data_mut();
        for i in 0..theta.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= learning_rate * m_hat / (math::sqrt(v_hat) + ADAM_EPSILON);
        }
    }
    Ok(())
}

// -------------------------------------------------------- early stopping

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience counter over validation losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub min_delta: f64,
    pub patience: usize,
    /// Reference loss: the last value that counted as an improvement.
    pub best: f64,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(min_delta: f64, patience: usize) -> Self {
        EarlyStopping {
            min_delta,
            patience,
            best: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    pub fn update(&mut self, loss: f64) -> Verdict {
        if self.best - loss > self.min_delta {
            self.best = loss;
            self.epochs_since_improvement = 0;
            Verdict::Improved
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                Verdict::Stop
            } else {
                Verdict::NoImprovement
            }
        }
    }
}

// ----------------------------------------------------------------- loop

/// Metrics of one finished epoch (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss, with dropout if enabled.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Called after each epoch; returning [`Control::Stop`] ends training.
pub trait TrainObserver {
    fn on_epoch(&mut self, record: &EpochRecord) -> Control;
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord) -> Control {
        Control::Continue
    }
}

impl<F: FnMut(&EpochRecord) -> Control> TrainObserver for F {
    fn on_epoch(&mut self, record: &EpochRecord) -> Control {
        self(record)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub adam: AdamState,
    pub early_stopping: EarlyStopping,
    /// Lowest validation loss seen; the returned parameters are from its epoch.
    pub best_validation_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn epochs_since_improvement(&self) -> usize {
        self.early_stopping.epochs_since_improvement
    }
}

/// Probability and BCE loss of one segment, dropout off.
pub fn segment_loss(model: &GaitformerModel, segment: &Segment) -> Result<(f64, f64)> {
    let mut g = Graph::with_params(model.params());
    let p = model.forward_graph(&mut g, &segment.values, &mut Mode::Inference)?;
    let loss = g.bce_loss(p, &[f64::from(segment.label)])?;
    Ok((g.item(p), g.item(loss)))
}

/// Mean loss and vote accuracy over `segments`, dropout off.
pub fn evaluate_segments(model: &GaitformerModel, segments: &[Segment]) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut correct = 0usize;
    for s in segments {
        let (p, loss) = segment_loss(model, s)?;
        total += loss;
        correct += usize::from(vote(p) == s.label);
    }
    let n = segments.len() as f64;
    Ok((total / n, correct as f64 / n))
}

/// Trains `model` and returns it with the parameters of its best validation
/// epoch.
pub fn train(
    mut model: GaitformerModel,
    train_segments: &[Segment],
    validation_segments: &[Segment],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(GaitformerModel, TrainState)> {
    config.validate()?;
    if train_segments.is_empty() || validation_segments.is_empty() {
        return Err(Error::invalid(
            "train",
            format!(
                "{} training and {} validation segments; both must be nonempty",
                train_segments.len(),
                validation_segments.len()
            ),
        ));
    }
    let expected = [crate::NUM_CHANNELS, model.variant().segment_len()];
    if let Some(s) = train_segments
        .iter()
        .chain(validation_segments)
        .find(|s| s.values.shape() != expected)
    {
        return Err(Error::shape("train", s.values.shape(), &expected));
    }

    let mut shuffle_rng = rng::stream(config.seed, "train.shuffle");
    let mut dropout_rng = rng::stream(config.seed, "train.dropout");
    let mut state = TrainState {
        epoch: 0,
        adam: AdamState::new(model.params()),
        early_stopping: EarlyStopping::new(config.min_delta, config.patience),
        best_validation_loss: f64::INFINITY,
        best_epoch: 0,
        history: Vec::new(),
        stopped_early: false,
    };
    let mut best_params = model.params().clone();
    let mut grads = Gradients::zeros_like(model.params());
    let mut order: Vec<usize> = (0..train_segments.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            grads.zero();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let segment = &train_segments[i];
                let mut g = Graph::with_params(model.params());
                let mut mode = if config.dropout_enabled {
                    Mode::Training(&mut dropout_rng)
                } else {
                    Mode::Inference
                };
                let p = model.forward_graph(&mut g, &segment.values, &mut mode)?;
                let loss = g.bce_loss(p, &[f64::from(segment.label)])?;
                let value = g.item(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch + 1,
                        loss: value,
                    });
                }
                loss_sum += value;
                correct += usize::from(vote(g.item(p)) == segment.label);
                g.backward_scaled(loss, scale)?;
                grads.accumulate(&g);
            }
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch + 1,
                    loss: f64::NAN,
                });
            }
            adam_step(model.params_mut(), &grads, &mut state.adam, config.learning_rate)?;
        }

        let (validation_loss, validation_accuracy) =
            evaluate_segments(&model, validation_segments)?;
        if !validation_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                loss: validation_loss,
            });
        }
        let n = train_segments.len() as f64;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            validation_loss,
            validation_accuracy,
        };
        state.epoch = epoch;
        if validation_loss < state.best_validation_loss {
            state.best_validation_loss = validation_loss;
            state.best_epoch = epoch;
            best_params.clone_from(model.params());
        }
        let verdict = state.early_stopping.update(validation_loss);
        state.history.push(record.clone());
        let observer_stop = observer.on_epoch(&record) == Control::Stop;
        if config.early_stopping && verdict == Verdict::Stop {
            state.stopped_early = true;
            break;
        }
        if observer_stop {
            break;
        }
    }
    model.load_params(best_params)?;
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (110, 100, 20));
        assert!(TrainConfig { patience: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn batches_keep_short_tail() {
        assert_eq!(batch_sizes(200, 110), vec![110, 90]);
        assert_eq!(batch_sizes(220, 110), vec![110, 110]);
        assert_eq!(batch_sizes(5, 110), vec![5]);
        assert!(batch_sizes(0, 3).is_empty());
    }

    fn single(value: f64) -> (ParamStore, Gradients, AdamState) {
        let mut p = ParamStore::new();
        p.add("theta", Tensor::vector(vec![value]));
        let g = Gradients::zeros_like(&p);
        let s = AdamState::new(&p);
        (p, g, s)
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let (mut p, mut g, mut s) = single(0.0);
        let id = p.find("theta").unwrap();
        g.get_mut(id)[0] = 1.0;
        adam_step(&mut p, &g, &mut s, 0.001).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε).
        let expected = -0.001 / (1.0 + ADAM_EPSILON);
        assert!((p.get(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut p, g, mut s) = single(0.7);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        }
        assert_eq!(p.get(p.find("theta").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let mut p = ParamStore::new();
        let a = p.add("a", Tensor::vector(vec![0.3, 0.3]));
        let b = p.add("b", Tensor::vector(vec![0.3]));
        let mut g = Gradients::zeros_like(&p);
        let mut s = AdamState::new(&p);
        for step in 0..4 {
            let v = 0.5 - step as f64;
            g.get_mut(a).copy_from_slice(&[v, v]);
            g.get_mut(b)[0] = v;
            adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        }
        let (x, y) = (p.get(a).data(), p.get(b).data()[0]);
        assert_eq!(x[0], x[1]);
        assert_eq!(x[0], y);
    }

    #[test]
    fn adam_rejects_mismatched_gradients() {
        let (mut p, _, mut s) = single(0.0);
        let other = single(0.0).0;
        let mut bigger = other.clone();
        bigger.add("extra", Tensor::vector(vec![0.0]));
        let g = Gradients::zeros_like(&bigger);
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, 0.1),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn plateau_stops_after_patience() {
        // Small drops never beat the reference 1.0 by more than 0.01. (In f64,
        // 1.0 − 0.99 exceeds 0.01, so 0.99 itself would count.)
        let mut losses = vec![1.0, 0.995, 0.991];
        losses.resize(40, 0.992);
        let mut es = EarlyStopping::new(0.01, 20);
        let stop = losses
            .iter()
            .position(|&l| es.update(l) == Verdict::Stop)
            .map(|i| i + 1);
        assert_eq!(stop, Some(21));
    }

    #[test]
    fn improvement_resets_counter() {
        let mut es = EarlyStopping::new(0.01, 3);
        assert_eq!(es.update(1.0), Verdict::Improved);
        assert_eq!(es.update(0.995), Verdict::NoImprovement);
        assert_eq!(es.update(0.989), Verdict::Improved);
        assert_eq!(es.epochs_since_improvement, 0);
        assert_eq!(es.best, 0.989);
        // Exactly min_delta is not enough.
        let mut es = EarlyStopping::new(0.25, 3);
        es.update(1.0);
        assert_eq!(es.update(0.75), Verdict::NoImprovement);
    }

    fn toy_segments(n: usize, variant: Variant) -> Vec<Segment> {
        let len = variant.segment_len();
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let level = if label == 1 { 0.8 } else { 0.2 };
                let data = (0..crate::NUM_CHANNELS * len)
                    .map(|j| level + 0.05 * libm::sin((i * 7 + j) as f64))
                    .collect();
                Segment {
                    values: Tensor::new([crate::NUM_CHANNELS, len], data).unwrap(),
                    label,
                    walk_ref: format!("w{i}"),
                    subject_ref: format!("s{i}"),
                    start_sample: 0,
                }
            })
            .collect()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            patience: 3,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_segments(10, Variant::C);
        let run = || {
            let model = GaitformerModel::new(Variant::C, 1);
            train(model, &data[..8], &data[8..], &quick_config(), &mut ()).unwrap()
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(s1.history, s2.history);
        assert_eq!(m1.params(), m2.params());
    }

    #[test]
    fn returns_best_validation_snapshot() {
        let data = toy_segments(10, Variant::C);
        let config = TrainConfig {
            max_epochs: 6,
            patience: 6,
            learning_rate: 0.02,
            ..quick_config()
        };
        let model = GaitformerModel::new(Variant::C, 2);
        let (trained, state) = train(model, &data[..8], &data[8..], &config, &mut ()).unwrap();
        let min = state
            .history
            .iter()
            .map(|r| r.validation_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(state.best_validation_loss, min);
        let (loss, _) = evaluate_segments(&trained, &data[8..]).unwrap();
        assert_eq!(loss, min);
    }

    #[test]
    fn observer_can_stop_training() {
        let data = toy_segments(6, Variant::C);
        let mut seen = 0;
        let mut stop_after_two = |r: &EpochRecord| {
            seen = r.epoch;
            if r.epoch == 2 {
                Control::Stop
            } else {
                Control::Continue
            }
        };
        let model = GaitformerModel::new(Variant::C, 3);
        let (_, state) = train(model, &data[..4], &data[4..], &quick_config(), &mut stop_after_two).unwrap();
        assert_eq!(state.history.len(), 2);
        assert_eq!(seen, 2);
    }

    #[test]
    fn rejects_empty_and_misshaped_input() {
        let data = toy_segments(4, Variant::C);
        let model = GaitformerModel::new(Variant::Full, 3);
        assert!(train(model.clone(), &data, &data, &quick_config(), &mut ()).is_err());
        let model = GaitformerModel::new(Variant::C, 3);
        assert!(train(model, &[], &data, &quick_config(), &mut ()).is_err());
    }

    #[test]
    fn nonfinite_input_aborts_with_location() {
        let mut data = toy_segments(4, Variant::C);
        data[0].values.data_mut()[0] = f64::NAN;
        let config = TrainConfig {
            batch_size: 10,
            ..quick_config()
        };
        let err = train(GaitformerModel::new(Variant::C, 3), &data, &data, &config, &mut ()).unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, batch, .. } => assert_eq!((epoch, batch), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! Finite-difference verification of the analytic gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::Result;
use crate::layers::{
    Activation, BlockGeometry, DenseLayer, EncoderBlock, Initializer, MultiHeadAttention,
    NUM_HEADS, SCALAR_HEAD_DIM,
};
use crate::model::{GaitformerModel, Variant};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::NUM_CHANNELS;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const RELATIVE_FLOOR: f64 = 1e-8;
/// Smallest step tried when dodging a kink.
const MIN_KINK_STEP: f64 = 1e-9;

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Something with parameters that evaluates to a scalar loss.
pub trait Fragment {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records the loss on `g`, a graph over `self.params()`.
    fn loss<'p>(&'p self, g: &mut Graph<'p>) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor; `None` probes all of them.
    pub coords_per_param: Option<usize>,
    /// Seed for choosing the probed coordinates.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: FD_STEP,
            tolerance: DEFAULT_TOLERANCE,
            coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub max_relative_error: f64,
    /// Worst relative error over the probed coordinates of each parameter.
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub coordinates_checked: usize,
    /// Coordinates whose step was cut to avoid a SELU kink.
    pub reduced_steps: usize,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }

    /// Parameter with the largest error.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_parameter_errors
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Loss and SELU sign pattern of one forward pass.
fn eval_loss<F: Fragment>(fragment: &F) -> Result<(f64, Vec<u64>)> {
    let mut g = Graph::with_params(fragment.params());
    let loss = fragment.loss(&mut g)?;
    Ok((g.item(loss), g.selu_sign_pattern()))
}

/// Central difference at coordinate `i` of `id`. The step is cut tenfold
/// while the two evaluations straddle a SELU kink (some SELU input changes
/// sign), since a difference across the kink is not a derivative. Returns
/// the estimate and the step used.
fn central_difference<F: Fragment>(
    fragment: &mut F,
    id: ParamId,
    i: usize,
    step: f64,
) -> Result<(f64, f64)> {
    let original = fragment.params().get(id).data()[i];
    let mut h = step;
    loop {
        fragment.params_mut().get_mut(id).data_mut()[i] = original + h;
        let plus = eval_loss(fragment);
        fragment.params_mut().get_mut(id).data_mut()[i] = original - h;
        let minus = eval_loss(fragment);
        fragment.params_mut().get_mut(id).data_mut()[i] = original;
        let ((plus, plus_signs), (minus, minus_signs)) = (plus?, minus?);
        if plus_signs == minus_signs || h / 10.0 < MIN_KINK_STEP {
            return Ok(((plus - minus) / (2.0 * h), h));
        }
        h /= 10.0;
    }
}

/// Compares backpropagated gradients of `fragment`'s loss with central
/// differences, parameter by parameter. Parameters are restored afterwards.
pub fn grad_check<F: Fragment>(
    fragment: &mut F,
    options: &GradCheckOptions,
) -> Result<GradCheckResult> {
    let analytic = {
        let mut g = Graph::with_params(fragment.params());
        let loss = fragment.loss(&mut g)?;
        g.backward(loss)?;
        let mut grads = Gradients::zeros_like(fragment.params());
        grads.accumulate(&g);
        grads
    };

    let mut picker = rng::stream(options.seed, "gradcheck");
    let ids: Vec<_> = fragment.params().ids().collect();
    let mut per_parameter_errors = BTreeMap::new();
    let mut coordinates_checked = 0;
    let mut reduced_steps = 0;
    for id in ids {
        let numel = fragment.params().get(id).numel();
        let coords: Vec<usize> = match options.coords_per_param {
            Some(k) if k < numel => {
                let mut c = index::sample(&mut picker, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let (numeric, h) = central_difference(fragment, id, i, options.step)?;
            if h < options.step {
                reduced_steps += 1;
            }
            let err = relative_error(analytic.get(id)[i], numeric);
            // NaN must register as a failure.
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            coordinates_checked += 1;
        }
        per_parameter_errors.insert(String::from(fragment.params().name(id)), worst);
    }
    let max_relative_error = per_parameter_errors.values().copied().fold(0.0, f64::max);
    Ok(GradCheckResult {
        max_relative_error,
        per_parameter_errors,
        coordinates_checked,
        reduced_steps,
        tolerance: options.tolerance,
    })
}

// ------------------------------------------------------------- fragments

fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(lo, hi).expect("finite bounds");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("matching length")
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn projected<'p>(g: &mut Graph<'p>, out: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// A SELU dense layer on a fixed batch.
pub struct DenseFragment {
    params: ParamStore,
    layer: DenseLayer,
    input: Tensor,
    probe: Tensor,
}

impl DenseFragment {
    pub fn new(in_dim: usize, out_dim: usize, batch: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Initializer::glorot(seed);
        let layer = DenseLayer::new(
            &mut params,
            "dense",
            in_dim,
            out_dim,
            Activation::Selu,
            &mut init,
        );
        let mut data = rng::stream(seed, "gradcheck.dense");
        // Nonzero biases move pre-activations off a common point.
        for v in params.get_mut(layer_bias(&params)).data_mut() {
            *v = Uniform::new_inclusive(-0.5, 0.5).expect("finite").sample(&mut data);
        }
        DenseFragment {
            input: uniform_tensor(&[batch, in_dim], -1.0, 1.0, &mut data),
            probe: uniform_tensor(&[batch, out_dim], -1.0, 1.0, &mut data),
            params,
            layer,
        }
    }
}

fn layer_bias(params: &ParamStore) -> crate::params::ParamId {
    params.find("dense.bias").expect("dense layer has a bias")
}

impl Fragment for DenseFragment {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn loss<'p>(&'p self, g: &mut Graph<'p>) -> Result<Var> {
        let x = g.constant(self.input.clone());
        let y = self.layer.forward(g, x)?;
        projected(g, y, &self.probe)
    }
}

/// Multi-head self-attention on a fixed token sequence.
pub struct AttentionFragment {
    params: ParamStore,
    attention: MultiHeadAttention,
    input: Tensor,
    probe: Tensor,
}

impl AttentionFragment {
    pub fn new(tokens: usize, token_dim: usize, head_dim: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Initializer::glorot(seed);
        let attention =
            MultiHeadAttention::new(&mut params, "attn", token_dim, NUM_HEADS, head_dim, &mut init)?;
        let mut data = rng::stream(seed, "gradcheck.attention");
        Ok(AttentionFragment {
            input: uniform_tensor(&[tokens, token_dim], -1.0, 1.0, &mut data),
            probe: uniform_tensor(&[tokens, token_dim], -1.0, 1.0, &mut data),
            params,
            attention,
        })
    }
}

impl Fragment for AttentionFragment {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn loss<'p>(&'p self, g: &mut Graph<'p>) -> Result<Var> {
        let x = g.constant(self.input.clone());
        let y = self.attention.forward(g, x)?;
        projected(g, y, &self.probe)
    }
}

/// One encoder block in inference mode.
pub struct BlockFragment {
    params: ParamStore,
    block: EncoderBlock,
    input: Tensor,
    probe: Tensor,
}

impl BlockFragment {
    pub fn new(geometry: BlockGeometry, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Initializer::glorot(seed);
        let block = EncoderBlock::new(&mut params, "block", geometry, &mut init)?;
        let mut data = rng::stream(seed, "gradcheck.block");
        // Perturbed gains and offsets exercise their gradients away from 1 and 0.
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id).contains(".norm") {
                let base = if params.name(id).ends_with("gain") { 1.0 } else { 0.0 };
                for v in params.get_mut(id).data_mut() {
                    *v = base + Uniform::new_inclusive(-0.3, 0.3).expect("finite").sample(&mut data);
                }
            }
        }
        let shape = geometry.input_shape();
        Ok(BlockFragment {
            input: uniform_tensor(&shape, 0.0, 2.0, &mut data),
            probe: uniform_tensor(&shape, -1.0, 1.0, &mut data),
            params,
            block,
        })
    }
}

impl Fragment for BlockFragment {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn loss<'p>(&'p self, g: &mut Graph<'p>) -> Result<Var> {
        let x = g.constant(self.input.clone());
        let y = self.block.forward(g, x, &mut Mode::Inference)?;
        projected(g, y, &self.probe)
    }
}

/// BCE loss of a whole model on one segment, dropout off.
pub struct ModelFragment {
    model: GaitformerModel,
    segment: Tensor,
    label: f64,
}

impl ModelFragment {
    pub fn new(variant: Variant, seed: u64, label: u8) -> Self {
        let mut data = rng::stream(seed, "gradcheck.model");
        ModelFragment {
            model: GaitformerModel::new(variant, seed),
            segment: uniform_tensor(&[NUM_CHANNELS, variant.segment_len()], 0.0, 1.0, &mut data),
            label: f64::from(label),
        }
    }
}

impl Fragment for ModelFragment {
    fn params(&self) -> &ParamStore {
        self.model.params()
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }
    fn loss<'p>(&'p self, g: &mut Graph<'p>) -> Result<Var> {
        let p = self.model.forward_graph(g, &self.segment, &mut Mode::Inference)?;
        g.bce_loss(p, &[self.label])
    }
}

/// Wraps a fragment so its SELU gradients come out scaled by `factor`.
pub struct Corrupted<F> {
    pub inner: F,
    pub factor: f64,
}

impl<F: Fragment> Fragment for Corrupted<F> {
    fn params(&self) -> &ParamStore {
        self.inner.params()
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner.params_mut()
    }
    fn loss<'p>(&'p self, g: &mut Graph<'p>) -> Result<Var> {
        g.corrupt_selu_backward(self.factor);
        self.inner.loss(g)
    }
}

/// Coordinates probed per tensor for whole models; smaller fragments are
/// checked exhaustively.
pub const MODEL_COORDS_PER_PARAM: usize = 2;
/// Difference step for whole models. Many of their gradients are below 1e-6,
/// where rounding in a 1e-5 central difference alone approaches 1e-4 relative
/// error; the larger step keeps the reference an order of magnitude tighter.
pub const MODEL_FD_STEP: f64 = 1e-4;

/// Checks dense, attention, encoder-block and whole-model gradients.
/// Returns one named result per fragment.
pub fn standard_suite(seed: u64, tolerance: f64) -> Result<Vec<(String, GradCheckResult)>> {
    let exhaustive = GradCheckOptions {
        tolerance,
        seed,
        ..GradCheckOptions::default()
    };
    let sampled = GradCheckOptions {
        coords_per_param: Some(MODEL_COORDS_PER_PARAM),
        step: MODEL_FD_STEP,
        ..exhaustive.clone()
    };
    let mut out = Vec::new();
    out.push((
        String::from("dense"),
        grad_check(&mut DenseFragment::new(12, 7, 4, seed), &exhaustive)?,
    ));
    out.push((
        String::from("attention"),
        grad_check(
            &mut AttentionFragment::new(16, 1, SCALAR_HEAD_DIM, seed)?,
            &exhaustive,
        )?,
    ));
    out.push((
        String::from("attention (wide tokens)"),
        grad_check(&mut AttentionFragment::new(6, 10, 5, seed)?, &exhaustive)?,
    ));
    out.push((
        String::from("encoder block (scalar tokens)"),
        grad_check(
            &mut BlockFragment::new(BlockGeometry::ScalarTokens { len: 20 }, seed)?,
            &exhaustive,
        )?,
    ));
    out.push((
        String::from("encoder block (wide tokens)"),
        grad_check(
            &mut BlockFragment::new(BlockGeometry::Tokens { count: 6, width: 10 }, seed)?,
            &exhaustive,
        )?,
    ));
    for variant in Variant::ALL {
        out.push((
            format!("model {variant}"),
            grad_check(&mut ModelFragment::new(variant, seed, 1), &sampled)?,
        ));
    }
    Ok(out)
}

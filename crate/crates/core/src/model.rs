//! The full decoupled temporal/spatial classifier and its two ablations.
//!
//! * [`Variant::Full`]: per sensor, temporal ramp + temporal encoder stack +
//!   FC-0 (100 → 10); sensor shift added to each reduced vector; the 18
//!   vectors concatenated to 180 scalar tokens for the spatial encoder stack;
//!   classifier head.
//! * [`Variant::B`]: temporal encoders only, their 18 × 100 outputs
//!   concatenated to 1800 features for the head.
//! * [`Variant::C`]: one spatio-temporal encoder stack over 18 tokens of
//!   width 50 (sensor shift added per token), flattened to 900 features.
//!
//! The classifier head is FC-1 (100, SELU) → FC-2 (20, SELU) → Output (1,
//! sigmoid), with dropout after FC-0, FC-1 and FC-2.
//!
//! Closed-form parameter counts, with `E(L) = L² + 5L + 65` for a
//! scalar-token block and `H(n) = 100n + 2141` for the head:
//!
//! | variant | count |
//! |---------|-------|
//! | full    | 18·(2·E(100) + 1010) + 2·E(180) + H(180) |
//! | B       | 18·2·E(100) + H(1800) |
//! | C       | 2·(4·50 + 10050 + 2550) + H(900) |

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Graph, Mode, Var};
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::layers::{
    spatial_pe, temporal_pe, Activation, BlockGeometry, DenseLayer, EncoderStack, Initializer,
    BLOCKS_PER_STACK, DROPOUT_RATE,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::NUM_CHANNELS;

/// Samples per segment for the full model and variant B.
pub const SEGMENT_LEN: usize = 100;
/// Samples per segment for variant C.
pub const SHORT_SEGMENT_LEN: usize = 50;
/// Width of each sensor's FC-0 output.
pub const REDUCED_LEN: usize = 10;
pub const FC1_UNITS: usize = 100;
pub const FC2_UNITS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    /// No FC-0 and no spatial encoder.
    B,
    /// Single spatio-temporal encoder over 18 × 50 inputs.
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::B, Variant::C];

    /// Segment length the variant consumes.
    pub fn segment_len(self) -> usize {
        match self {
            Variant::Full | Variant::B => SEGMENT_LEN,
            Variant::C => SHORT_SEGMENT_LEN,
        }
    }

    /// Width of the classifier head input.
    pub fn head_input(self) -> usize {
        match self {
            Variant::Full => NUM_CHANNELS * REDUCED_LEN,
            Variant::B => NUM_CHANNELS * SEGMENT_LEN,
            Variant::C => NUM_CHANNELS * SHORT_SEGMENT_LEN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::B => "B",
            Variant::C => "C",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::B => 1,
            Variant::C => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.tag() == tag)
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(self) -> usize {
        let temporal = EncoderStack::param_count(
            BlockGeometry::ScalarTokens { len: SEGMENT_LEN },
            BLOCKS_PER_STACK,
        );
        let head = ClassifierHead::param_count(self.head_input());
        match self {
            Variant::Full => {
                NUM_CHANNELS * (temporal + DenseLayer::param_count(SEGMENT_LEN, REDUCED_LEN))
                    + EncoderStack::param_count(
                        BlockGeometry::ScalarTokens {
                            len: NUM_CHANNELS * REDUCED_LEN,
                        },
                        BLOCKS_PER_STACK,
                    )
                    + head
            }
            Variant::B => NUM_CHANNELS * temporal + head,
            Variant::C => {
                EncoderStack::param_count(
                    BlockGeometry::Tokens {
                        count: NUM_CHANNELS,
                        width: SHORT_SEGMENT_LEN,
                    },
                    BLOCKS_PER_STACK,
                ) + head
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            other => Err(Error::invalid(
                "variant",
                format!("unknown variant `{other}`, expected one of {{full,B,C}}"),
            )),
        }
    }
}

/// FC-1 → FC-2 → Output.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub output: DenseLayer,
}

impl ClassifierHead {
    fn new(store: &mut ParamStore, input: usize, init: &mut Initializer) -> Self {
        ClassifierHead {
            fc1: DenseLayer::new(store, "head.fc1", input, FC1_UNITS, Activation::Selu, init),
            fc2: DenseLayer::new(
                store,
                "head.fc2",
                FC1_UNITS,
                FC2_UNITS,
                Activation::Selu,
                init,
            ),
            output: DenseLayer::new(
                store,
                "head.output",
                FC2_UNITS,
                1,
                Activation::Sigmoid,
                init,
            ),
        }
    }

    pub fn param_count(input: usize) -> usize {
        DenseLayer::param_count(input, FC1_UNITS)
            + DenseLayer::param_count(FC1_UNITS, FC2_UNITS)
            + DenseLayer::param_count(FC2_UNITS, 1)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.dropout(h, DROPOUT_RATE, mode)?;
        let h = self.fc2.forward(g, h)?;
        let h = g.dropout(h, DROPOUT_RATE, mode)?;
        self.output.forward(g, h)
    }
}

/// Parameters and wiring of one model variant.
#[derive(Clone, Debug)]
pub struct GaitformerModel {
    variant: Variant,
    seed: u64,
    params: ParamStore,
    temporal: Vec<EncoderStack>,
    fc0: Vec<DenseLayer>,
    spatial: Option<EncoderStack>,
    spatiotemporal: Option<EncoderStack>,
    head: ClassifierHead,
    /// Input scaling fitted on the training data, carried so a saved model can
    /// classify raw walks.
    pub normalization: Option<NormalizationStats>,
}

impl GaitformerModel {
    /// Glorot-initialized model drawn from `seed`.
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self::build(variant, seed, &mut Initializer::glorot(seed))
    }

    /// Model with every parameter (layer-norm gains included) set to zero.
    pub fn zeros(variant: Variant) -> Self {
        Self::build(variant, 0, &mut Initializer::Zeros)
    }

    fn build(variant: Variant, seed: u64, init: &mut Initializer) -> Self {
        let mut params = ParamStore::new();
        let mut temporal = Vec::new();
        let mut fc0 = Vec::new();
        let mut spatial = None;
        let mut spatiotemporal = None;
        let stack = |params: &mut ParamStore, name: &str, geometry, init: &mut Initializer| {
            EncoderStack::new(params, name, geometry, BLOCKS_PER_STACK, init)
                .expect("fixed geometry is valid")
        };
        if matches!(variant, Variant::Full | Variant::B) {
            for s in 0..NUM_CHANNELS {
                temporal.push(stack(
                    &mut params,
                    &format!("temporal{s}"),
                    BlockGeometry::ScalarTokens { len: SEGMENT_LEN },
                    init,
                ));
                if variant == Variant::Full {
                    fc0.push(DenseLayer::new(
                        &mut params,
                        &format!("fc0.sensor{s}"),
                        SEGMENT_LEN,
                        REDUCED_LEN,
                        Activation::Selu,
                        init,
                    ));
                }
            }
        }
        match variant {
            Variant::Full => {
                spatial = Some(stack(
                    &mut params,
                    "spatial",
                    BlockGeometry::ScalarTokens {
                        len: NUM_CHANNELS * REDUCED_LEN,
                    },
                    init,
                ));
            }
            Variant::C => {
                spatiotemporal = Some(stack(
                    &mut params,
                    "spatiotemporal",
                    BlockGeometry::Tokens {
                        count: NUM_CHANNELS,
                        width: SHORT_SEGMENT_LEN,
                    },
                    init,
                ));
            }
            Variant::B => {}
        }
        let head = ClassifierHead::new(&mut params, variant.head_input(), init);
        GaitformerModel {
            variant,
            seed,
            params,
            temporal,
            fc0,
            spatial,
            spatiotemporal,
            head,
            normalization: None,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter value; names and shapes must match.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "load_params",
                format!(
                    "expected {} tensors, got {}",
                    self.params.len(),
                    params.len()
                ),
            ));
        }
        for ((_, name, ours), (_, their_name, theirs)) in self.params.iter().zip(params.iter()) {
            if name != their_name || ours.shape() != theirs.shape() {
                return Err(Error::invalid(
                    "load_params",
                    format!(
                        "`{their_name}` {:?} does not match `{name}` {:?}",
                        theirs.shape(),
                        ours.shape()
                    ),
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    /// Total trainable scalars, counted over the parameter store.
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn temporal_encoders(&self) -> &[EncoderStack] {
        &self.temporal
    }

    pub fn reducers(&self) -> &[DenseLayer] {
        &self.fc0
    }

    pub fn spatial_encoder(&self) -> Option<&EncoderStack> {
        self.spatial.as_ref()
    }

    pub fn spatiotemporal_encoder(&self) -> Option<&EncoderStack> {
        self.spatiotemporal.as_ref()
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    fn check_segment(&self, segment: &Tensor) -> Result<()> {
        let expected = [NUM_CHANNELS, self.variant.segment_len()];
        if segment.shape() != expected {
            return Err(Error::shape("forward", segment.shape(), &expected));
        }
        Ok(())
    }

    /// Records the forward pass of one `[18, L]` segment and returns the
    /// `[1]`-shaped Parkinson probability node.
    pub fn forward_graph<'p>(
        &'p self,
        g: &mut Graph<'p>,
        segment: &Tensor,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.check_segment(segment)?;
        let features = match self.variant {
            Variant::Full => {
                let reduced = self.sensor_features_graph(g, segment, mode)?;
                let joined = g.concat(&reduced, 0)?;
                let tokens = g.reshape(joined, &[NUM_CHANNELS * REDUCED_LEN, 1])?;
                let spatial = self
                    .spatial
                    .as_ref()
                    .expect("full variant has a spatial encoder");
                let encoded = spatial.forward(g, tokens, mode)?;
                g.flatten(encoded)?
            }
            Variant::B => {
                let encoded = self.sensor_features_graph(g, segment, mode)?;
                g.concat(&encoded, 0)?
            }
            Variant::C => {
                let mut rows = segment.clone();
                let len = self.variant.segment_len();
                for s in 0..NUM_CHANNELS {
                    let shift = spatial_pe(s)?;
                    rows.data_mut()[s * len..(s + 1) * len]
                        .iter_mut()
                        .for_each(|v| *v += shift);
                }
                let x = g.constant(rows);
                let encoder = self
                    .spatiotemporal
                    .as_ref()
                    .expect("variant C has a spatio-temporal encoder");
                let encoded = encoder.forward(g, x, mode)?;
                g.flatten(encoded)?
            }
        };
        self.head.forward(g, features, mode)
    }

    /// Per-sensor features entering the join: FC-0 outputs plus their sensor
    /// shift (full) or temporal encoder outputs (B).
    fn sensor_features_graph<'p>(
        &'p self,
        g: &mut Graph<'p>,
        segment: &Tensor,
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Var>> {
        let ramp = temporal_pe(SEGMENT_LEN)?;
        let mut out = Vec::with_capacity(NUM_CHANNELS);
        for (s, encoder) in self.temporal.iter().enumerate() {
            let row: Vec<f64> = segment
                .row(s)
                .iter()
                .zip(&ramp)
                .map(|(x, p)| x + p)
                .collect();
            let x = g.constant(Tensor::new([SEGMENT_LEN, 1], row)?);
            let encoded = encoder.forward(g, x, mode)?;
            let flat = g.flatten(encoded)?;
            let feature = match self.fc0.get(s) {
                Some(fc0) => {
                    let reduced = fc0.forward(g, flat)?;
                    let reduced = g.dropout(reduced, DROPOUT_RATE, mode)?;
                    g.add_scalar(reduced, spatial_pe(s)?)
                }
                None => flat,
            };
            out.push(feature);
        }
        Ok(out)
    }

    /// Inference-mode per-sensor features of a full or B model (see
    /// [`GaitformerModel::forward_graph`]); empty for variant C.
    pub fn sensor_features(&self, segment: &Tensor) -> Result<Vec<Tensor>> {
        self.check_segment(segment)?;
        let mut g = Graph::with_params(&self.params);
        let vars = self.sensor_features_graph(&mut g, segment, &mut Mode::Inference)?;
        Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Parkinson probability of one segment.
    pub fn forward(&self, segment: &Tensor, mode: &mut Mode<'_>) -> Result<f64> {
        let mut g = Graph::with_params(&self.params);
        let p = self.forward_graph(&mut g, segment, mode)?;
        Ok(g.item(p))
    }

    /// Inference-mode probability (dropout off).
    pub fn predict(&self, segment: &Tensor) -> Result<f64> {
        self.forward(segment, &mut Mode::Inference)
    }
}

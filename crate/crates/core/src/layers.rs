//! Dense layers, multi-head self-attention, pre-norm encoder blocks and the
//! two fixed positional encodings.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; the values live in the
//! store so that the optimizer, serializer and gradient checker all see a
//! single flat parameter list.

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Attention heads per encoder block.
pub const NUM_HEADS: usize = 2;
/// Per-head projection width for scalar-token sequences.
pub const SCALAR_HEAD_DIM: usize = 8;
/// Dropout after the attention and feed-forward sublayers and after every
/// hidden dense layer.
pub const DROPOUT_RATE: f64 = 0.1;
/// Variance floor of every layer normalization.
pub const LAYER_NORM_EPSILON: f64 = 1e-6;
/// Encoder blocks per Transformer stack.
pub const BLOCKS_PER_STACK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Selu,
    Sigmoid,
    Identity,
}

/// Source of initial parameter values.
///
/// `Glorot` draws weights uniformly from ±√(6 / (fan_in + fan_out)) with unit
/// gains and zero biases; `Zeros` sets every parameter (gains included) to 0.
pub enum Initializer {
    Glorot(Rng),
    Zeros,
}

impl Initializer {
    pub fn glorot(seed: u64) -> Self {
        Initializer::Glorot(rng::stream(seed, "init"))
    }

    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        match self {
            Initializer::Zeros => Tensor::zeros([fan_in, fan_out]),
            Initializer::Glorot(rng) => {
                let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                Tensor::new([fan_in, fan_out], data).expect("matching length")
            }
        }
    }

    fn gain(&self, n: usize) -> Tensor {
        match self {
            Initializer::Zeros => Tensor::zeros([n]),
            Initializer::Glorot(_) => Tensor::filled([n], 1.0),
        }
    }

    fn bias(&self, n: usize) -> Tensor {
        Tensor::zeros([n])
    }
}

// ------------------------------------------------------------------ dense

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        init: &mut Initializer,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.weight(in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), init.bias(out_dim));
        DenseLayer {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `in_dim · out_dim + out_dim`.
    pub const fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    /// `activation(x W + b)` over the trailing dimension of a 1-D or 2-D `x`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) || shape.len() > 2 {
            return Err(Error::shape("dense", &shape, &[self.in_dim, self.out_dim]));
        }
        let x2 = if shape.len() == 1 {
            g.reshape(x, &[1, self.in_dim])?
        } else {
            x
        };
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x2, w)?;
        let h = g.add(h, b)?;
        let h = match self.activation {
            Activation::Selu => g.selu(h),
            Activation::Sigmoid => g.sigmoid(h),
            Activation::Identity => h,
        };
        if shape.len() == 1 {
            g.reshape(h, &[self.out_dim])
        } else {
            Ok(h)
        }
    }
}

// -------------------------------------------------------------- attention

/// Multi-head self-attention over a `[tokens, token_dim]` sequence.
///
/// Per head: `Q = xW_q`, `K = xW_k`, `V = xW_v`,
/// `A = softmax(QKᵀ / √head_dim)` row-wise, head output `AV`. Heads are
/// concatenated and projected back to `token_dim` with a biased output
/// projection. Query/key/value projections carry no bias.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    token_dim: usize,
    head_dim: usize,
    query: Vec<ParamId>,
    key: Vec<ParamId>,
    value: Vec<ParamId>,
    out_weight: ParamId,
    out_bias: ParamId,
    /// Disables the scalar-token shortcut (used to test it).
    generic_only: bool,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        token_dim: usize,
        num_heads: usize,
        head_dim: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 || token_dim == 0 {
            return Err(Error::invalid(
                "attention",
                "heads, head width and token width must be positive",
            ));
        }
        let mut proj = |kind: &str, h: usize, init: &mut Initializer| {
            store.add(
                format!("{name}.{kind}{h}"),
                init.weight(token_dim, head_dim),
            )
        };
        let (mut query, mut key, mut value) = (Vec::new(), Vec::new(), Vec::new());
        for h in 0..num_heads {
            query.push(proj("query", h, init));
            key.push(proj("key", h, init));
            value.push(proj("value", h, init));
        }
        let out_weight = store.add(
            format!("{name}.out.weight"),
            init.weight(num_heads * head_dim, token_dim),
        );
        let out_bias = store.add(format!("{name}.out.bias"), init.bias(token_dim));
        Ok(MultiHeadAttention {
            token_dim,
            head_dim,
            query,
            key,
            value,
            out_weight,
            out_bias,
            generic_only: false,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.query.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn value_projections(&self) -> &[ParamId] {
        &self.value
    }

    /// `3·H·(d·hd) + (H·hd)·d + d`.
    pub const fn param_count(token_dim: usize, num_heads: usize, head_dim: usize) -> usize {
        3 * num_heads * token_dim * head_dim + num_heads * head_dim * token_dim + token_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.forward_with_weights(g, x).map(|(out, _)| out)
    }

    /// Output together with each head's `[tokens, tokens]` attention matrix.
    pub fn forward_with_weights(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.token_dim {
            return Err(Error::shape(
                "attention",
                shape,
                &[shape.first().copied().unwrap_or(0), self.token_dim],
            ));
        }
        let scale = 1.0 / math::sqrt(self.head_dim as f64);
        let mut heads = Vec::with_capacity(self.num_heads());
        let mut weights = Vec::with_capacity(self.num_heads());
        for h in 0..self.num_heads() {
            let (wq, wk, wv) = (
                g.param(self.query[h]),
                g.param(self.key[h]),
                g.param(self.value[h]),
            );
            let (head, attn) = if self.token_dim == 1 && !self.generic_only {
                // Scalar tokens make every projection rank one, so
                // q kᵀ = x (wq·wk) xᵀ and softmax(·) (x wv) = (softmax(·) x) wv.
                // Reassociating skips the [tokens, head_dim] intermediates.
                let wkt = g.transpose(wk)?;
                let c = g.matmul(wq, wkt)?;
                let c = g.scale(c, scale);
                let xc = g.matmul(x, c)?;
                let xt = g.transpose(x)?;
                let scores = g.matmul(xc, xt)?;
                let attn = g.softmax(scores, 1)?;
                let ax = g.matmul(attn, x)?;
                (g.matmul(ax, wv)?, attn)
            } else {
                let q = g.matmul(x, wq)?;
                let k = g.matmul(x, wk)?;
                let v = g.matmul(x, wv)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, scale);
                let attn = g.softmax(scores, 1)?;
                (g.matmul(attn, v)?, attn)
            };
            heads.push(head);
            weights.push(attn);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        };
        let wo = g.param(self.out_weight);
        let bo = g.param(self.out_bias);
        let out = g.matmul(joined, wo)?;
        Ok((g.add(out, bo)?, weights))
    }
}

// ---------------------------------------------------------------- encoder

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, len: usize, init: &mut Initializer) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), init.gain(len)),
            offset: store.add(format!("{name}.offset"), init.bias(len)),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let offset = g.param(self.offset);
        g.layer_norm(x, gain, offset, LAYER_NORM_EPSILON)
    }
}

/// Token geometry of an encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockGeometry {
    /// `len` scalar tokens (`[len, 1]`). Normalization runs across the
    /// sequence with per-position gain/offset and the feed-forward layer acts
    /// on the flattened sequence with width `len`.
    ScalarTokens { len: usize },
    /// `count` tokens of width `width` (`[count, width]`). Normalization and
    /// the feed-forward layer act per token.
    Tokens { count: usize, width: usize },
}

impl BlockGeometry {
    pub fn input_shape(self) -> [usize; 2] {
        match self {
            BlockGeometry::ScalarTokens { len } => [len, 1],
            BlockGeometry::Tokens { count, width } => [count, width],
        }
    }

    fn norm_len(self) -> usize {
        match self {
            BlockGeometry::ScalarTokens { len } => len,
            BlockGeometry::Tokens { width, .. } => width,
        }
    }

    fn token_dim(self) -> usize {
        match self {
            BlockGeometry::ScalarTokens { .. } => 1,
            BlockGeometry::Tokens { width, .. } => width,
        }
    }

    fn head_dim(self) -> usize {
        match self {
            BlockGeometry::ScalarTokens { .. } => SCALAR_HEAD_DIM,
            BlockGeometry::Tokens { width, .. } => width.div_ceil(NUM_HEADS),
        }
    }
}

/// Pre-norm Transformer encoder block:
/// `y₁ = x + dropout(attention(norm₁(x)))`,
/// `y₂ = y₁ + dropout(ff(norm₂(y₁)))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    geometry: BlockGeometry,
    pub pre_attention_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub pre_ff_norm: LayerNorm,
    pub feed_forward: DenseLayer,
    dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        geometry: BlockGeometry,
        init: &mut Initializer,
    ) -> Result<Self> {
        let n = geometry.norm_len();
        let pre_attention_norm = LayerNorm::new(store, &format!("{name}.norm1"), n, init);
        let attention = MultiHeadAttention::new(
            store,
            &format!("{name}.attn"),
            geometry.token_dim(),
            NUM_HEADS,
            geometry.head_dim(),
            init,
        )?;
        let pre_ff_norm = LayerNorm::new(store, &format!("{name}.norm2"), n, init);
        let feed_forward =
            DenseLayer::new(store, &format!("{name}.ff"), n, n, Activation::Selu, init);
        Ok(EncoderBlock {
            geometry,
            pre_attention_norm,
            attention,
            pre_ff_norm,
            feed_forward,
            dropout: DROPOUT_RATE,
        })
    }

    pub fn geometry(&self) -> BlockGeometry {
        self.geometry
    }

    pub fn param_count(geometry: BlockGeometry) -> usize {
        let n = geometry.norm_len();
        4 * n
            + MultiHeadAttention::param_count(geometry.token_dim(), NUM_HEADS, geometry.head_dim())
            + DenseLayer::param_count(n, n)
    }

    /// Pre-attention normalization output, shaped like the block input.
    pub fn normalize_input(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.norm(&self.pre_attention_norm, g, x)
    }

    fn norm(&self, norm: &LayerNorm, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self.geometry {
            BlockGeometry::ScalarTokens { len } => {
                let row = g.reshape(x, &[1, len])?;
                let n = norm.forward(g, row)?;
                g.reshape(n, &[len, 1])
            }
            BlockGeometry::Tokens { .. } => norm.forward(g, x),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let expected = self.geometry.input_shape();
        if g.shape(x) != expected {
            return Err(Error::shape("encoder_block", g.shape(x), &expected));
        }
        let n1 = self.normalize_input(g, x)?;
        let a = self.attention.forward(g, n1)?;
        let a = g.dropout(a, self.dropout, mode)?;
        let y1 = g.add(x, a)?;

        let n2 = self.norm(&self.pre_ff_norm, g, y1)?;
        let f = match self.geometry {
            BlockGeometry::ScalarTokens { len } => {
                let flat = g.reshape(n2, &[1, len])?;
                let f = self.feed_forward.forward(g, flat)?;
                g.reshape(f, &[len, 1])?
            }
            BlockGeometry::Tokens { .. } => self.feed_forward.forward(g, n2)?,
        };
        let f = g.dropout(f, self.dropout, mode)?;
        g.add(y1, f)
    }
}

/// A stack of encoder blocks sharing one geometry.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        geometry: BlockGeometry,
        depth: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), geometry, init))
            .collect::<Result<_>>()?;
        Ok(EncoderStack { blocks })
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, x, mode)?;
        }
        Ok(x)
    }

    pub fn param_count(geometry: BlockGeometry, depth: usize) -> usize {
        depth * EncoderBlock::param_count(geometry)
    }
}

// ---------------------------------------------------- positional encoding

/// Fixed additive positional encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalEncoding {
    /// Linear ramp `i / (len - 1)` added elementwise along a sensor segment.
    Temporal { len: usize },
    /// Constant `sensor / 17` added to every element of a sensor's features.
    Spatial { sensor: usize },
}

impl PositionalEncoding {
    /// Encoding values over a sequence of `len` elements.
    pub fn values(self, len: usize) -> Result<Vec<f64>> {
        match self {
            PositionalEncoding::Temporal { len: l } if l == len => temporal_pe(l),
            PositionalEncoding::Temporal { len: l } => {
                Err(Error::shape("positional_encoding", &[l], &[len]))
            }
            PositionalEncoding::Spatial { sensor } => Ok(alloc::vec![spatial_pe(sensor)?; len]),
        }
    }
}

/// `[0/(L−1), 1/(L−1), …, 1]`.
pub fn temporal_pe(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(Error::invalid("temporal_pe", format!("length {len} < 2")));
    }
    let last = (len - 1) as f64;
    Ok((0..len).map(|i| i as f64 / last).collect())
}

/// `sensor / 17` for sensor indices `0..=17`.
pub fn spatial_pe(sensor: usize) -> Result<f64> {
    let last = crate::NUM_CHANNELS - 1;
    if sensor > last {
        return Err(Error::invalid(
            "spatial_pe",
            format!("sensor {sensor} outside 0..={last}"),
        ));
    }
    Ok(sensor as f64 / last as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_tensor(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn scalar_token_shortcut_matches_generic_attention() {
        let mut store = ParamStore::new();
        let mut init = Initializer::glorot(5);
        let fast = MultiHeadAttention::new(&mut store, "a", 1, 2, 8, &mut init).unwrap();
        let slow = MultiHeadAttention {
            generic_only: true,
            ..fast.clone()
        };
        let x = random_tensor(&mut crate::rng::stream(6, "x"), &[30, 1]);
        let run = |attn: &MultiHeadAttention| {
            let mut g = Graph::with_params(&store);
            let xv = g.leaf(x.clone());
            let y = attn.forward(&mut g, xv).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            let mut grads = crate::params::Gradients::zeros_like(&store);
            grads.accumulate(&g);
            (g.value(y).clone(), g.grad(xv).unwrap().to_vec(), grads)
        };
        let (y1, dx1, g1) = run(&fast);
        let (y2, dx2, g2) = run(&slow);
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
        }
        for (a, b) in dx1.iter().zip(&dx2) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-10);
        }
        for id in store.ids() {
            for (a, b) in g1.get(id).iter().zip(g2.get(id)) {
                assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn temporal_encoding_values() {
        let pe = temporal_pe(100).unwrap();
        assert_eq!(pe[0], 0.0);
        assert_eq!(pe[99], 1.0);
        assert_relative_eq!(pe[49], 0.494_949_494_949_495, epsilon = 1e-12);
        assert_eq!(temporal_pe(2).unwrap(), [0.0, 1.0]);
        assert!(temporal_pe(1).is_err());
        assert!(pe.windows(2).all(|w| w[0] < w[1]));
        assert!(pe.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn spatial_encoding_values() {
        assert_eq!(spatial_pe(0).unwrap(), 0.0);
        assert_eq!(spatial_pe(17).unwrap(), 1.0);
        assert_relative_eq!(
            spatial_pe(9).unwrap(),
            0.529_411_764_705_882_4,
            epsilon = 1e-12
        );
        assert!(spatial_pe(18).is_err());
        let v: Vec<f64> = (0..18).map(|s| spatial_pe(s).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            PositionalEncoding::Spatial { sensor: 17 }
                .values(3)
                .unwrap(),
            [1.0; 3]
        );
        assert!(PositionalEncoding::Temporal { len: 100 }
            .values(50)
            .is_err());
    }

    #[test]
    fn dense_shapes_and_identity() {
        let mut store = ParamStore::new();
        let mut init = Initializer::Zeros;
        let id = DenseLayer::new(&mut store, "id", 3, 3, Activation::Identity, &mut init);
        *store.get_mut(id.weight) = Tensor::identity(3);
        let fc0 = DenseLayer::new(
            &mut store,
            "fc0",
            100,
            10,
            Activation::Selu,
            &mut Initializer::glorot(1),
        );
        let out = DenseLayer::new(
            &mut store,
            "out",
            20,
            1,
            Activation::Sigmoid,
            &mut Initializer::glorot(2),
        );
        assert_eq!(DenseLayer::param_count(100, 10), 1010);

        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::vector(vec![0.5, -2.0, 3.0]));
        let y = id.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0, 3.0]);

        let x = g.constant(Tensor::filled([100], 0.3));
        let y = fc0.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[10]);

        let x = g.constant(Tensor::filled([20], 0.7));
        let y = out.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1]);
        let p = g.item(y);
        assert!(p > 0.0 && p < 1.0);

        let bad = g.constant(Tensor::zeros([7]));
        assert!(matches!(
            fc0.forward(&mut g, bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn attention_param_count() {
        assert_eq!(MultiHeadAttention::param_count(1, 2, 8), 65);
        let mut store = ParamStore::new();
        MultiHeadAttention::new(&mut store, "a", 1, 2, 8, &mut Initializer::Zeros).unwrap();
        assert_eq!(store.numel(), 65);
    }

    #[test]
    fn attention_with_zero_values_is_zero() {
        let mut store = ParamStore::new();
        let mha =
            MultiHeadAttention::new(&mut store, "a", 1, 2, 8, &mut Initializer::glorot(4)).unwrap();
        for &v in mha.value_projections() {
            *store.get_mut(v) = Tensor::zeros([1, 8]);
        }
        let mut rng = rng::stream(5, "x");
        let x = random_tensor(&mut rng, &[6, 1]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let y = mha.forward(&mut g, xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_attention_is_trivial() {
        let mut store = ParamStore::new();
        let mha =
            MultiHeadAttention::new(&mut store, "a", 1, 2, 8, &mut Initializer::glorot(6)).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_rows(&[[0.8]]).unwrap());
        let (y, weights) = mha.forward_with_weights(&mut g, x).unwrap();
        for w in &weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        // output = concat_h(x W_v^h) W_o + b_o
        let mut expected = store.get(mha.out_bias).data()[0];
        let wo = store.get(mha.out_weight).data();
        for (h, &v) in mha.value_projections().iter().enumerate() {
            for (j, wv) in store.get(v).data().iter().enumerate() {
                expected += 0.8 * wv * wo[h * 8 + j];
            }
        }
        assert_relative_eq!(g.item(y), expected, epsilon = 1e-14);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut store = ParamStore::new();
        let mha =
            MultiHeadAttention::new(&mut store, "a", 1, 2, 8, &mut Initializer::glorot(8)).unwrap();
        let mut rng = rng::stream(9, "x");
        let mut g = Graph::with_params(&store);
        let x = g.constant(random_tensor(&mut rng, &[4, 1]));
        let (y, weights) = mha.forward_with_weights(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[4, 1]);
        for w in weights {
            let a = g.value(w);
            for r in 0..4 {
                let row = a.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        let bad = g.constant(Tensor::zeros([4, 2]));
        assert!(mha.forward(&mut g, bad).is_err());
    }

    fn block(geometry: BlockGeometry, init: &mut Initializer) -> (ParamStore, EncoderBlock) {
        let mut store = ParamStore::new();
        let b = EncoderBlock::new(&mut store, "blk", geometry, init).unwrap();
        (store, b)
    }

    #[test]
    fn zero_block_is_identity() {
        for geometry in [
            BlockGeometry::ScalarTokens { len: 100 },
            BlockGeometry::ScalarTokens { len: 180 },
            BlockGeometry::Tokens {
                count: 18,
                width: 50,
            },
        ] {
            let (store, b) = block(geometry, &mut Initializer::Zeros);
            let mut rng = rng::stream(10, "x");
            let x = random_tensor(&mut rng, &geometry.input_shape());
            let mut g = Graph::with_params(&store);
            let xv = g.constant(x.clone());
            let y = b.forward(&mut g, xv, &mut Mode::Inference).unwrap();
            assert_eq!(g.value(y), &x);
        }
    }

    #[test]
    fn blocks_preserve_shape_and_count_params() {
        for (geometry, expected) in [
            (
                BlockGeometry::ScalarTokens { len: 100 },
                4 * 100 + 65 + 100 * 100 + 100,
            ),
            (
                BlockGeometry::ScalarTokens { len: 180 },
                4 * 180 + 65 + 180 * 180 + 180,
            ),
            (
                BlockGeometry::Tokens {
                    count: 18,
                    width: 50,
                },
                4 * 50 + 3 * 2 * 50 * 25 + 50 * 50 + 50 + 50 * 50 + 50,
            ),
        ] {
            let (store, b) = block(geometry, &mut Initializer::glorot(11));
            assert_eq!(store.numel(), expected);
            assert_eq!(EncoderBlock::param_count(geometry), expected);
            let mut rng = rng::stream(12, "x");
            let mut g = Graph::with_params(&store);
            let xv = g.constant(random_tensor(&mut rng, &geometry.input_shape()));
            let mut drop_rng = rng::stream(13, "dropout");
            let y = b
                .forward(&mut g, xv, &mut Mode::Training(&mut drop_rng))
                .unwrap();
            assert_eq!(g.shape(y), geometry.input_shape());
            let bad = g.constant(Tensor::zeros([7, 1]));
            assert!(b.forward(&mut g, bad, &mut Mode::Inference).is_err());
        }
    }

    proptest! {
        #[test]
        fn pre_attention_norm_ignores_constant_shift(seed in 0u64..1000, c in -5.0f64..5.0) {
            let geometry = BlockGeometry::ScalarTokens { len: 12 };
            let (store, b) = block(geometry, &mut Initializer::glorot(seed));
            let mut rng = rng::stream(seed, "x");
            let x = random_tensor(&mut rng, &[12, 1]);
            let shifted = x.map(|v| v + c);
            let mut g = Graph::with_params(&store);
            let xv = g.constant(x);
            let sv = g.constant(shifted);
            let a = b.normalize_input(&mut g, xv).unwrap();
            let s = b.normalize_input(&mut g, sv).unwrap();
            for (p, q) in g.value(a).data().iter().zip(g.value(s).data()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}

//! Convolution layers, dense blocks, attention blocks and the two residual
//! dense attention modules built from them.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] so the
//! same structure can run in `f32` for training and `f64` for gradient
//! checks.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Forward,
    Transposed,
}

/// One convolution layer: kernel `(out_ch, in_ch, kh, kw)`, bias and geometry.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kind: ConvKind,
}

impl ConvParams {
    /// Registers a convolution with fan-in scaled uniform weights and zero bias.
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        Self::build(store, rng, name, in_ch, out_ch, geom, ConvKind::Forward)
    }

    pub fn transposed<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        Self::build(store, rng, name, in_ch, out_ch, geom, ConvKind::Transposed)
    }

    fn build<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
        kind: ConvKind,
    ) -> Result<Self> {
        geom.validate()?;
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::Config(format!("{name}: channel counts must be positive")));
        }
        let (kh, kw) = geom.kernel;
        let taps = match kind {
            ConvKind::Forward => kh * kw,
            // Each output pixel of a strided transpose sees only a subset of taps.
            ConvKind::Transposed => kh.div_ceil(geom.stride.0) * kw.div_ceil(geom.stride.1),
        };
        let bound = 1.0 / ((in_ch * taps) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), Shape::new(out_ch, in_ch, kh, kw), bound, rng);
        let bias = store.add(
            format!("{name}.bias"),
            crate::tensor::Tensor::zeros(Shape::new(1, out_ch, 1, 1)),
        );
        Ok(ConvParams {
            weight,
            bias,
            geom,
            in_ch,
            out_ch,
            kind,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.forward_cat(tape, store, &[x])
    }

    /// Applies the layer to the channel concatenation of `xs`.
    pub fn forward_cat<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, xs: &[Var]) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        match self.kind {
            ConvKind::Forward => tape.conv2d_cat(xs, w, Some(b), self.geom),
            ConvKind::Transposed => match xs {
                [x] => tape.conv_transpose2d(*x, w, Some(b), self.geom),
                _ => Err(Error::shape("transposed convolution takes a single input")),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.geom.kernel_len() + self.out_ch
    }
}

/// Eight densely connected `3×3` conv+ReLU layers followed by a linear `1×1`
/// fusion back to the block width. Each layer may use its own dilation.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<ConvParams>,
    pub fusion: ConvParams,
    pub width: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub const LAYERS: usize = 8;

    pub fn standard<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        growth: usize,
    ) -> Result<Self> {
        Self::with_dilations(store, rng, name, width, growth, &[1; Self::LAYERS])
    }

    /// Hybrid dilated variant; every rate must lie in `1..=4`.
    pub fn hybrid<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        growth: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        if let Some(r) = dilations.iter().find(|r| !(1..=4).contains(*r)) {
            return Err(Error::Config(format!("dilation rate {r} outside [1, 4]")));
        }
        Self::with_dilations(store, rng, name, width, growth, dilations)
    }

    fn with_dilations<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        growth: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        if dilations.len() != Self::LAYERS {
            return Err(Error::Config(format!(
                "dense block needs {} dilation rates, got {}",
                Self::LAYERS,
                dilations.len()
            )));
        }
        if growth == 0 {
            return Err(Error::Config("growth rate must be positive".into()));
        }
        let layers = dilations
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                ConvParams::new(
                    store,
                    rng,
                    &format!("{name}.layer{}", i + 1),
                    Self::layer_input_channels(width, growth, i + 1),
                    growth,
                    ConvGeom::same(3, r),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = ConvParams::new(
            store,
            rng,
            &format!("{name}.fusion"),
            width + Self::LAYERS * growth,
            width,
            ConvGeom::new(1, 1),
        )?;
        Ok(DenseBlock {
            layers,
            fusion,
            width,
            growth,
        })
    }

    /// Input channels of 1-based inner layer `i`.
    pub fn layer_input_channels(width: usize, growth: usize, i: usize) -> usize {
        width + (i - 1) * growth
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.geom.dilation.0).collect()
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x)?.c;
        if c != self.width {
            return Err(Error::shape(format!(
                "dense block of width {} got {c} channels",
                self.width
            )));
        }
        let mut features = Vec::with_capacity(Self::LAYERS + 1);
        features.push(x);
        for layer in &self.layers {
            let y = layer.forward_cat(tape, store, &features)?;
            features.push(tape.relu(y)?);
        }
        self.fusion.forward_cat(tape, store, &features)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvParams::param_count).sum::<usize>() + self.fusion.param_count()
    }
}

/// Spatial gate: `sigmoid(conv7x7([mean_c(x), max_c(x)]))` multiplied over
/// every channel.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: ConvParams,
}

impl SpatialAttention {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str) -> Result<Self> {
        Ok(SpatialAttention {
            conv: ConvParams::new(store, rng, &format!("{name}.conv"), 2, 1, ConvGeom::same(7, 1))?,
        })
    }

    /// The `(N,1,H,W)` gate.
    pub fn map<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mean = tape.channel_mean(x)?;
        let max = tape.channel_max(x)?;
        let pooled = tape.concat_channels(&[mean, max])?;
        let logits = self.conv.forward(tape, store, pooled)?;
        tape.sigmoid(logits)
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gate = self.map(tape, store, x)?;
        tape.mul_broadcast(x, gate)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

/// Squeeze-excitation channel gate:
/// `sigmoid(expand(relu(reduce(gap(x)))))` multiplied over every pixel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub reduce: ConvParams,
    pub expand: ConvParams,
    pub ratio: usize,
}

impl ChannelAttention {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Config(format!(
                "channel count {channels} is not divisible by reduction ratio {ratio}"
            )));
        }
        let hidden = channels / ratio;
        Ok(ChannelAttention {
            reduce: ConvParams::new(store, rng, &format!("{name}.reduce"), channels, hidden, ConvGeom::new(1, 1))?,
            expand: ConvParams::new(store, rng, &format!("{name}.expand"), hidden, channels, ConvGeom::new(1, 1))?,
            ratio,
        })
    }

    /// The `(N,C,1,1)` gate.
    pub fn gate<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = tape.spatial_gap(x)?;
        let hidden = self.reduce.forward(tape, store, pooled)?;
        let hidden = tape.relu(hidden)?;
        let logits = self.expand.forward(tape, store, hidden)?;
        tape.sigmoid(logits)
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gate = self.gate(tape, store, x)?;
        tape.mul_broadcast(x, gate)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }
}

/// Residual dense attention module: `SAB(DB(x)) + x`.
#[derive(Clone, Debug)]
pub struct Rdam {
    pub dense: DenseBlock,
    pub attention: SpatialAttention,
}

impl Rdam {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        growth: usize,
    ) -> Result<Self> {
        Ok(Rdam {
            dense: DenseBlock::standard(store, rng, &format!("{name}.dense"), width, growth)?,
            attention: SpatialAttention::new(store, rng, &format!("{name}.sab"))?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = self.dense.forward(tape, store, x)?;
        let a = self.attention.forward(tape, store, d)?;
        tape.add(a, x)
    }

    pub fn param_count(&self) -> usize {
        self.dense.param_count() + self.attention.param_count()
    }
}

/// Hybrid dilated residual dense attention module: `CAB(HDDB(x)) + x`.
#[derive(Clone, Debug)]
pub struct Hdrdam {
    pub dense: DenseBlock,
    pub attention: ChannelAttention,
}

impl Hdrdam {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        growth: usize,
        dilations: &[usize],
        ratio: usize,
    ) -> Result<Self> {
        Ok(Hdrdam {
            dense: DenseBlock::hybrid(store, rng, &format!("{name}.hddb"), width, growth, dilations)?,
            attention: ChannelAttention::new(store, rng, &format!("{name}.cab"), width, ratio)?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = self.dense.forward(tape, store, x)?;
        let a = self.attention.forward(tape, store, d)?;
        tape.add(a, x)
    }

    pub fn param_count(&self) -> usize {
        self.dense.param_count() + self.attention.param_count()
    }
}

/// Zeroes every weight and bias of a dense block.
pub fn zero_dense_block<T: Float>(block: &DenseBlock, store: &mut ParamStore<T>) {
    for conv in block.layers.iter().chain(std::iter::once(&block.fusion)) {
        store.get_mut(conv.weight).data_mut().fill(T::zero());
        store.get_mut(conv.bias).data_mut().fill(T::zero());
    }
}

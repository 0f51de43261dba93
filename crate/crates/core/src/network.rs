//! The full two-stage network.
//!
//! Stage 1 is an encoder-decoder of RDAMs: `m` strided `2×2` downsamplings
//! and `m` transposed `2×2` upsamplings with additive skips between matching
//! scales. Stage 2 is a flat chain of HDRDAMs with the same skip pattern, fed
//! by its own head convolution plus the last stage-1 feature map. Both heads
//! are added back before each stage's tail convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, ConvParams, Hdrdam, Rdam, SpatialAttention};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ChannelPolicy {
    /// Width doubles on each downsampling and halves on each upsampling.
    #[default]
    Double,
    Constant,
}

impl ChannelPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelPolicy::Double => "double",
            ChannelPolicy::Constant => "constant",
        }
    }
}

impl std::str::FromStr for ChannelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double" => Ok(ChannelPolicy::Double),
            "constant" => Ok(ChannelPolicy::Constant),
            other => Err(Error::Config(format!("unknown channel policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    /// RDAMs in stage 1 and HDRDAMs in stage 2.
    pub modules: usize,
    /// Down/up-sampling pairs in stage 1.
    pub sampling_depth: usize,
    pub base_width: usize,
    pub image_channels: usize,
    pub growth: usize,
    pub dilations: Vec<usize>,
    pub attention_ratio: usize,
    pub channel_policy: ChannelPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modules: 5,
            sampling_depth: 2,
            base_width: 64,
            image_channels: 1,
            growth: 32,
            dilations: vec![1, 2, 3, 4, 4, 3, 2, 1],
            attention_ratio: 8,
            channel_policy: ChannelPolicy::Double,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for desk-scale experiments: one module per
    /// stage, no sampling, width 16, growth 8.
    pub fn tiny() -> Self {
        ModelConfig {
            modules: 1,
            sampling_depth: 0,
            base_width: 16,
            growth: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules == 0 {
            return Err(Error::Config("at least one module per stage is required".into()));
        }
        if self.modules < 2 * self.sampling_depth + 1 {
            return Err(Error::Config(format!(
                "{} modules cannot host {} down/up-sampling pairs (need at least {})",
                self.modules,
                self.sampling_depth,
                2 * self.sampling_depth + 1
            )));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "image channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if self.base_width == 0 || self.growth == 0 {
            return Err(Error::Config("base width and growth must be positive".into()));
        }
        if self.sampling_depth > 16 {
            return Err(Error::Config("sampling depth is unreasonably large".into()));
        }
        if self.attention_ratio == 0 || !self.base_width.is_multiple_of(self.attention_ratio) {
            return Err(Error::Config(format!(
                "base width {} is not divisible by attention ratio {}",
                self.base_width, self.attention_ratio
            )));
        }
        Ok(())
    }

    /// Stage-1 feature width at scale `level` (0 = full resolution).
    pub fn width_at(&self, level: usize) -> usize {
        match self.channel_policy {
            ChannelPolicy::Double => self.base_width << level,
            ChannelPolicy::Constant => self.base_width,
        }
    }

    /// Spatial sizes must be multiples of this inside the network.
    pub fn size_multiple(&self) -> usize {
        1 << self.sampling_depth
    }

    /// Modules placed at the innermost position beyond the `2m + 1` needed by
    /// the encoder-decoder.
    pub fn extra_modules(&self) -> usize {
        self.modules - (2 * self.sampling_depth + 1)
    }
}

/// Parameter layout of the network.
#[derive(Clone, Debug)]
pub struct TwoStageNet {
    pub config: ModelConfig,
    pub head1: ConvParams,
    pub sab0: SpatialAttention,
    pub rdams: Vec<Rdam>,
    pub downs: Vec<ConvParams>,
    pub ups: Vec<ConvParams>,
    pub tail1: ConvParams,
    pub head2: ConvParams,
    pub cab0: ChannelAttention,
    pub hdrdams: Vec<Hdrdam>,
    pub tail2: ConvParams,
}

/// Which stored feature map, if any, is added to a module's input.
fn skip_source(config: &ModelConfig, position: usize) -> Option<usize> {
    let m = config.sampling_depth;
    let up_start = config.modules - m;
    (position >= up_start).then(|| m - 1 - (position - up_start))
}

/// Scale level of stage-1 module `position`.
fn level_of(config: &ModelConfig, position: usize) -> usize {
    let m = config.sampling_depth;
    let up_start = config.modules - m;
    if position <= m {
        position
    } else if position < up_start {
        m
    } else {
        m - 1 - (position - up_start)
    }
}

impl TwoStageNet {
    pub fn new<T: Float, R: rand::Rng>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.base_width;
        let ic = config.image_channels;
        let g = config.growth;
        let conv3 = ConvGeom::same(3, 1);
        let sample = ConvGeom::new(2, 2).with_stride(2);

        let head1 = ConvParams::new(store, rng, "stage1.head", ic, c, conv3)?;
        let sab0 = SpatialAttention::new(store, rng, "stage1.sab")?;
        let mut rdams = Vec::with_capacity(config.modules);
        let mut downs = Vec::with_capacity(config.sampling_depth);
        let mut ups = vec![None; config.sampling_depth];
        for pos in 0..config.modules {
            let level = level_of(config, pos);
            if pos >= 1 && pos <= config.sampling_depth {
                downs.push(ConvParams::new(
                    store,
                    rng,
                    &format!("stage1.down{pos}"),
                    config.width_at(level - 1),
                    config.width_at(level),
                    sample,
                )?);
            }
            if let Some(l) = skip_source(config, pos) {
                ups[l] = Some(ConvParams::transposed(
                    store,
                    rng,
                    &format!("stage1.up{}", l + 1),
                    config.width_at(l + 1),
                    config.width_at(l),
                    sample,
                )?);
            }
            rdams.push(Rdam::new(store, rng, &format!("stage1.rdam{}", pos + 1), config.width_at(level), g)?);
        }
        let tail1 = ConvParams::new(store, rng, "stage1.tail", c, ic, conv3)?;

        let head2 = ConvParams::new(store, rng, "stage2.head", ic, c, conv3)?;
        let cab0 = ChannelAttention::new(store, rng, "stage2.cab", c, config.attention_ratio)?;
        let hdrdams = (0..config.modules)
            .map(|pos| {
                Hdrdam::new(
                    store,
                    rng,
                    &format!("stage2.hdrdam{}", pos + 1),
                    c,
                    g,
                    &config.dilations,
                    config.attention_ratio,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let tail2 = ConvParams::new(store, rng, "stage2.tail", c, ic, conv3)?;

        Ok(TwoStageNet {
            config: config.clone(),
            head1,
            sab0,
            rdams,
            downs,
            ups: ups.into_iter().map(|u| u.expect("every level has an upsampler")).collect(),
            tail1,
            head2,
            cab0,
            hdrdams,
            tail2,
        })
    }

    /// Stage 1. Returns `x1` and the last RDAM output.
    pub fn stage1<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<(Var, Var)> {
        let s = tape.shape(y)?;
        let mult = self.config.size_multiple();
        if s.h % mult != 0 || s.w % mult != 0 {
            return Err(Error::shape(format!(
                "stage 1 input {s} is not a multiple of {mult} in height and width"
            )));
        }
        let m = self.config.sampling_depth;
        let head = self.head1.forward(tape, store, y)?;
        let mut x = self.sab0.forward(tape, store, head)?;
        let mut skips = Vec::with_capacity(m);
        for (pos, rdam) in self.rdams.iter().enumerate() {
            if pos >= 1 && pos <= m {
                skips.push(x);
                x = self.downs[pos - 1].forward(tape, store, x)?;
            }
            if let Some(l) = skip_source(&self.config, pos) {
                let up = self.ups[l].forward(tape, store, x)?;
                x = tape.add(up, skips[l])?;
            }
            x = rdam.forward(tape, store, x)?;
        }
        let fused = tape.add(x, head)?;
        let x1 = self.tail1.forward(tape, store, fused)?;
        Ok((x1, x))
    }

    pub fn stage2<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var, stage1_features: Var) -> Result<Var> {
        let m = self.config.sampling_depth;
        let head = self.head2.forward(tape, store, y)?;
        let gated = self.cab0.forward(tape, store, head)?;
        let (hs, fs) = (tape.shape(gated)?, tape.shape(stage1_features)?);
        if hs != fs {
            return Err(Error::shape(format!(
                "cross-stage skip: stage-2 features {hs} vs stage-1 features {fs}"
            )));
        }
        let mut x = tape.add(gated, stage1_features)?;
        let mut skips = Vec::with_capacity(m);
        for (pos, module) in self.hdrdams.iter().enumerate() {
            if pos >= 1 && pos <= m {
                skips.push(x);
            }
            if let Some(l) = skip_source(&self.config, pos) {
                x = tape.add(x, skips[l])?;
            }
            x = module.forward(tape, store, x)?;
        }
        let fused = tape.add(x, head)?;
        self.tail2.forward(tape, store, fused)
    }

    /// Both stage outputs for any spatial size: the input is reflect-padded
    /// to the sampling multiple and the outputs are cropped back.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<(Var, Var)> {
        let s = tape.shape(y)?;
        if s.c != self.config.image_channels {
            return Err(Error::shape(format!(
                "model expects {} image channels, input is {s}",
                self.config.image_channels
            )));
        }
        let mult = self.config.size_multiple();
        let (ph, pw) = (s.h.div_ceil(mult) * mult, s.w.div_ceil(mult) * mult);
        let padded = if (ph, pw) != (s.h, s.w) {
            tape.reflect_pad(y, ph, pw)?
        } else {
            y
        };
        let (x1, features) = self.stage1(tape, store, padded)?;
        let x2 = self.stage2(tape, store, padded, features)?;
        if (ph, pw) == (s.h, s.w) {
            Ok((x1, x2))
        } else {
            Ok((tape.crop(x1, s.h, s.w)?, tape.crop(x2, s.h, s.w)?))
        }
    }

    pub fn param_count(&self) -> usize {
        let convs = [&self.head1, &self.tail1, &self.head2, &self.tail2]
            .iter()
            .map(|c| c.param_count())
            .sum::<usize>();
        convs
            + self.sab0.param_count()
            + self.cab0.param_count()
            + self.rdams.iter().map(Rdam::param_count).sum::<usize>()
            + self.downs.iter().chain(&self.ups).map(ConvParams::param_count).sum::<usize>()
            + self.hdrdams.iter().map(Hdrdam::param_count).sum::<usize>()
    }
}

/// A network layout together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: TwoStageNet,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = TwoStageNet::new(config, &mut params, &mut rng)?;
        Ok(Model { net, params })
    }

    /// Rebuilds the layout for `config` and adopts `params`, which must match
    /// it name for name and shape for shape.
    pub fn from_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::build(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Config(format!(
                "configuration expects {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in template.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {n1} {}, got {n2} {}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        Ok(Model {
            net: template.net,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn forward(&self, tape: &mut Tape<T>, y: Var) -> Result<(Var, Var)> {
        self.net.forward(tape, &self.params, y)
    }

    /// Runs both stages on `y` without recording gradients for the caller.
    pub fn infer(&self, y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let input = tape.constant(y.clone());
        let (x1, x2) = self.forward(&mut tape, input)?;
        let strip = |t: &Tensor<T>| t.clone().with_requires_grad(false);
        Ok((strip(tape.value(x1)?), strip(tape.value(x2)?)))
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}

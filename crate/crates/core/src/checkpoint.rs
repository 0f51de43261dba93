//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RDANCKPT" | version u32
//! config: modules, sampling_depth, base_width, image_channels, growth,
//!         n_dilations, dilations..., attention_ratio (u32 each), policy u8
//! iteration u64 | seed u64 | next_batch u64
//! n_params u32, then per parameter:
//!     name_len u32, name bytes, n u32, c u32, h u32, w u32, n*c*h*w f32
//! has_optimizer u8, then if 1: step u64, and per parameter m then v (f32)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ChannelPolicy, Model, ModelConfig};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"RDANCKPT";
pub const VERSION: u32 = 1;

/// Position of the data stream at save time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub next_batch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub iteration: u64,
    pub rng: RngState,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params.clone(),
            iteration: 0,
            rng: RngState::default(),
            optimizer: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        Model::from_params(&self.config, self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(16 + 4 * self.params.numel()));
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let c = &self.config;
        for v in [c.modules, c.sampling_depth, c.base_width, c.image_channels, c.growth] {
            w.u32(v as u32);
        }
        w.u32(c.dilations.len() as u32);
        for &d in &c.dilations {
            w.u32(d as u32);
        }
        w.u32(c.attention_ratio as u32);
        w.0.push(match c.channel_policy {
            ChannelPolicy::Double => 0,
            ChannelPolicy::Constant => 1,
        });
        w.u64(self.iteration);
        w.u64(self.rng.seed);
        w.u64(self.rng.next_batch);
        w.u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            let s = t.shape();
            for d in [s.n, s.c, s.h, s.w] {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(state) => {
                w.0.push(1);
                w.u64(state.step);
                for (m, v) in state.m.iter().zip(&state.v) {
                    w.f32s(m);
                    w.f32s(v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) { Error::Truncated } else { Error::BadMagic });
        }
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let n_dil = r.u32()? as usize;
        let dilations = (0..n_dil).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let attention_ratio = r.u32()? as usize;
        let channel_policy = match r.take(1)?[0] {
            0 => ChannelPolicy::Double,
            1 => ChannelPolicy::Constant,
            other => return Err(Error::MalformedCheckpoint(format!("unknown channel policy tag {other}"))),
        };
        let config = ModelConfig {
            modules: dims[0],
            sampling_depth: dims[1],
            base_width: dims[2],
            image_channels: dims[3],
            growth: dims[4],
            dilations,
            attention_ratio,
            channel_policy,
        };
        let iteration = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            next_batch: r.u64()?,
        };
        let n_params = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::MalformedCheckpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let mut s = [0usize; 4];
            for d in &mut s {
                *d = r.u32()? as usize;
            }
            let shape = Shape::new(s[0], s[1], s[2], s[3]);
            let data = r.f32s(shape.numel())?;
            params.add(name, Tensor::from_vec(shape, data)?);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut m = Vec::with_capacity(n_params);
                let mut v = Vec::with_capacity(n_params);
                for (_, _, t) in params.iter() {
                    m.push(r.f32s(t.data().len())?);
                    v.push(r.f32s(t.data().len())?);
                }
                Some(AdamState { step, m, v })
            }
            other => return Err(Error::MalformedCheckpoint(format!("unknown optimizer tag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            iteration,
            rng,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, values: &[f32]) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or(Error::Truncated)?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = Model::<f32>::build(&ModelConfig::tiny(), 3).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.iteration = 17;
        ck.rng = RngState { seed: 9, next_batch: 17 };
        let mut state = AdamState::new(&ck.params);
        state.step = 17;
        state.m[0][0] = -0.5;
        state.v[1][0] = f32::MIN_POSITIVE;
        ck.optimizer = Some(state);
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn error_kinds() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut newer = bytes.clone();
        newer[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&newer),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated)), "cut {cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::MalformedCheckpoint(_))));
    }
}

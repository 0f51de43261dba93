//! A two-stage image denoiser made of residual dense blocks with attention,
//! built on a small reverse-mode autodiff core.
//!
//! Stage one is an encoder-decoder of residual dense attention modules with
//! spatial attention; stage two is a flat chain of hybrid dilated modules
//! with channel attention. Both stages are supervised against the same clean
//! image and the second stage's output is the final result.

pub mod autograd;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use checkpoint::Checkpoint;
pub use conv::{ConvAlgo, ConvGeom, PaddingMode};
pub use data::{Image, NoiseSpec, StreamConfig, TrainingStream};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossMode};
pub use network::{ChannelPolicy, Model, ModelConfig, TwoStageNet};
pub use optim::{Adam, AdamConfig, Schedule};
pub use params::{ParamId, ParamStore};
pub use tensor::{Float, Shape, Tensor};
pub use train::{TrainConfig, Trainer};

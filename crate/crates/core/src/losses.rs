//! Training losses: per-stage MSE for synthetic noise, and Charbonnier plus
//! Laplacian edge loss for real noise.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LossMode {
    #[default]
    Mse,
    CharbonnierEdge,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mse => "mse",
            LossMode::CharbonnierEdge => "charbonnier",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossMode::Mse),
            "charbonnier" | "charbonnier_edge" => Ok(LossMode::CharbonnierEdge),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    pub epsilon: f64,
    pub lambda_edge: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Mse,
            epsilon: 1e-3,
            lambda_edge: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda_edge >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_edge must be non-negative, got {}",
                self.lambda_edge
            )));
        }
        Ok(())
    }
}

fn check_shapes<T: Float>(tape: &Tape<T>, x: Var, gt: Var) -> Result<()> {
    let (a, b) = (tape.shape(x)?, tape.shape(gt)?);
    if a != b {
        return Err(Error::shape(format!("loss between {a} and {b}")));
    }
    Ok(())
}

/// Mean of `(x - gt)²` over every element.
pub fn mse_loss<T: Float>(tape: &mut Tape<T>, x: Var, gt: Var) -> Result<Var> {
    check_shapes(tape, x, gt)?;
    let d = tape.sub(x, gt)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// `sqrt(‖d‖² + ε²)` per batch item, averaged over the batch.
fn charbonnier<T: Float>(tape: &mut Tape<T>, d: Var, epsilon: f64) -> Result<Var> {
    let sq = tape.square(d)?;
    let norm2 = tape.sum_per_item(sq)?;
    let eps2 = T::from_f64(epsilon) * T::from_f64(epsilon);
    let shifted = tape.add_scalar(norm2, eps2)?;
    let root = tape.sqrt(shifted)?;
    tape.mean(root)
}

/// Charbonnier distance of the images plus `lambda_edge` times the
/// Charbonnier distance of their Laplacians.
pub fn charbonnier_edge_loss<T: Float>(tape: &mut Tape<T>, x: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    check_shapes(tape, x, gt)?;
    cfg.validate()?;
    let d = tape.sub(x, gt)?;
    let char_term = charbonnier(tape, d, cfg.epsilon)?;
    let lx = tape.laplacian(x)?;
    let lg = tape.laplacian(gt)?;
    let dl = tape.sub(lx, lg)?;
    let edge = charbonnier(tape, dl, cfg.epsilon)?;
    let edge = tape.scale(edge, T::from_f64(cfg.lambda_edge))?;
    tape.add(char_term, edge)
}

pub fn stage_loss<T: Float>(tape: &mut Tape<T>, x: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    match cfg.mode {
        LossMode::Mse => mse_loss(tape, x, gt),
        LossMode::CharbonnierEdge => charbonnier_edge_loss(tape, x, gt, cfg),
    }
}

/// Sum of the configured per-stage loss over both stage outputs.
pub fn total_loss<T: Float>(tape: &mut Tape<T>, x1: Var, x2: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    let l1 = stage_loss(tape, x1, gt, cfg)?;
    let l2 = stage_loss(tape, x2, gt, cfg)?;
    tape.add(l1, l2)
}

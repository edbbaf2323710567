//! Segmentation losses and the deep-supervision combination.

use candle_core::Tensor;

use crate::error::{shape_err, Error, Result};
use crate::nn::ops::{self, sigmoid};

pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_f: 1.0, lambda_i: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f >= 0.0 && self.lambda_i >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

fn check_same(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.dims() != target.dims() {
        return Err(shape_err!("logits {:?} and target {:?} differ", logits.dims(), target.dims()));
    }
    Ok(())
}

/// Mean of `max(x, 0) - x t + log(1 + exp(-|x|))`.
pub fn bce_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(logits, target)?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((logits.relu()? - (logits * target)?)? + softplus)?;
    Ok(per.mean_all()?)
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)` with `p = sigmoid(logits)`.
pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(logits, target)?;
    let p = sigmoid(logits)?;
    let inter = (&p * target)?.sum_all()?;
    let num = ((inter * 2.0)? + DICE_EPS)?;
    let den = ((p.sum_all()? + target.sum_all()?)? + DICE_EPS)?;
    Ok((1.0 - (num / den)?)?)
}

pub fn bce_dice(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((bce_loss(logits, target)? + dice_loss(logits, target)?)?)
}

/// Soft target at a coarser side by area averaging. `target` is `[B, 1, R, R]`.
pub fn downsample_target(target: &Tensor, side: usize) -> Result<Tensor> {
    let r = target.dims4()?.2;
    if side == 0 || r % side != 0 {
        return Err(shape_err!("cannot area-average {r} down to {side}"));
    }
    ops::avg_pool(target, r / side)
}

/// `lambda_f * L(final) + lambda_i * sum_i L(intermediate_i)`, `L = BCE + Dice`.
pub fn total_loss(final_logits: &Tensor, intermediates: &[Tensor], target: &Tensor, weights: LossWeights) -> Result<Tensor> {
    weights.validate()?;
    if intermediates.len() != 3 {
        return Err(shape_err!("expected 3 intermediate maps, got {}", intermediates.len()));
    }
    let mut total = (bce_dice(final_logits, target)? * weights.lambda_f)?;
    for m in intermediates {
        let t = downsample_target(target, m.dims4()?.2)?;
        total = (total + (bce_dice(m, &t)? * weights.lambda_i)?)?;
    }
    Ok(total)
}

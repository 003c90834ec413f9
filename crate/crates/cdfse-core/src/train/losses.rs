//! Loss terms assembled per training utterance. Classification terms use the
//! tape's weighted cross-entropy directly; the regression terms live here.

use crate::error::{Error, Result};
use crate::nnprim::{Tape, Tensor, Var};

/// Mean absolute error between equally-shaped `T×D` tensors, averaged over
/// the mask-selected cells. Rows with mask weight zero contribute exactly
/// nothing, so padded frames cannot leak into the loss.
pub fn masked_mae(tape: &mut Tape, pred: Var, target: Var, mask: &[f64]) -> Result<Var> {
    let (p, t) = (tape.value(pred), tape.value(target));
    if p.shape() != t.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_mae",
            detail: format!("prediction {:?} vs target {:?}", p.shape(), t.shape()),
        });
    }
    if mask.len() != p.rows() {
        return Err(Error::ShapeMismatch {
            op: "masked_mae",
            detail: format!("{} mask weights for {} rows", mask.len(), p.rows()),
        });
    }
    if mask.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
        return Err(Error::InvalidInput("mask weights must be finite and >= 0".into()));
    }
    let active: f64 = mask.iter().sum();
    if active <= 0.0 {
        return Err(Error::InvalidInput("mask selects no frames".into()));
    }
    let cols = p.cols() as f64;
    let diff = tape.sub(pred, target)?;
    let dist = tape.abs(diff);
    let weighted = tape.scale_rows(dist, mask)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / (active * cols)))
}

/// Duration-predictor regression targets: `ln(d + 1)` per phoneme, `L×1`.
pub fn log_duration_targets(durations: &[usize]) -> Tensor {
    let data = durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect();
    Tensor::from_vec(&[durations.len(), 1], data).expect("duration target shape")
}

/// Mean squared error between log-domain duration predictions (`L×1`) and
/// ground-truth frame counts.
pub fn duration_loss(tape: &mut Tape, log_pred: Var, durations: &[usize]) -> Result<Var> {
    let p = tape.value(log_pred);
    if p.cols() != 1 || p.rows() != durations.len() {
        return Err(Error::ShapeMismatch {
            op: "duration_loss",
            detail: format!("predictions {:?} vs {} durations", p.shape(), durations.len()),
        });
    }
    if durations.is_empty() {
        return Err(Error::InvalidInput("duration loss over zero phonemes".into()));
    }
    let target = tape.constant(log_duration_targets(durations));
    let diff = tape.sub(log_pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / durations.len() as f64))
}

//! Dynamic label refinement: a round-indexed convex blend of given labels
//! and current model predictions.

use crate::error::{Error, Result};
use crate::losses::ProbDist;
use crate::tensor::Tensor;

/// Schedule for the prediction weight `w_t = t / (zeta * total_rounds + t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DlrSchedule {
    pub zeta: f64,
    pub total_rounds: u32,
}

impl DlrSchedule {
    pub fn new(zeta: f64, total_rounds: u32) -> Result<Self> {
        if zeta <= 0.0 {
            return Err(Error::Config(format!("zeta must be positive, got {zeta}")));
        }
        if total_rounds == 0 {
            return Err(Error::Config("schedule needs at least one round".into()));
        }
        Ok(DlrSchedule { zeta, total_rounds })
    }
}

/// Refined per-sample label distributions for one round.
#[derive(Debug, Clone)]
pub struct SoftLabelBatch {
    pub distributions: ProbDist,
    pub source_round: u32,
}

/// Prediction weight at round `t`: zero before any collaboration, strictly
/// increasing, always below one.
pub fn dlr_weight(t: u32, schedule: &DlrSchedule) -> f64 {
    let t = f64::from(t);
    t / (schedule.zeta * f64::from(schedule.total_rounds) + t)
}

/// Convex blend `(1-w) * given + w * predictions`, row by row. Predictions
/// are targets here, never a gradient path.
pub fn refine_labels(given: &ProbDist, predictions: &ProbDist, w: f64, source_round: u32) -> Result<SoftLabelBatch> {
    if !(0.0..1.0).contains(&w) {
        return Err(Error::Usage(format!("refinement weight must be in [0, 1), got {w}")));
    }
    if given.tensor().shape() != predictions.tensor().shape() {
        return Err(Error::Shape(format!(
            "given labels {:?} and predictions {:?} differ in shape",
            given.tensor().shape(),
            predictions.tensor().shape()
        )));
    }
    let blended: Vec<f64> = given
        .tensor()
        .data()
        .iter()
        .zip(predictions.tensor().data())
        .map(|(g, p)| (1.0 - w) * g + w * p)
        .collect();
    let t = Tensor::new(given.tensor().shape().to_vec(), blended)?;
    Ok(SoftLabelBatch {
        distributions: ProbDist::new(t)?,
        source_round,
    })
}

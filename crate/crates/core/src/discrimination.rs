//! Non-parametric instance predictions: each pixel embedding is compared by
//! cosine similarity against every bank row and the scores pass through a
//! temperature softmax, giving a distribution over the `K` stored instances.

use serde::{Deserialize, Serialize};

use crate::bank::InstanceBank;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, softmax_temp_in_place, DenseGrid};

/// Probability floor inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePredictionMap {
    /// `H × W × K` slot probabilities.
    pub grid: DenseGrid,
    /// `updates_applied` of the bank the predictions were made against.
    pub bank_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    /// Sum divided by the pixel count.
    #[default]
    Mean,
}

/// Slot distribution for one query embedding, written into `out` (length `K`).
/// Returns false, leaving `out` uniform, when the query has zero norm.
pub fn predict_pixel(query: &[f64], bank: &InstanceBank, tp: f64, out: &mut [f64]) -> bool {
    let n = norm(query);
    if n == 0.0 {
        out.fill(1.0 / out.len() as f64);
        return false;
    }
    for (k, o) in out.iter_mut().enumerate() {
        *o = dot(query, bank.row(k)) / n;
    }
    softmax_temp_in_place(out, tp);
    true
}

pub fn instance_predict(
    features: &DenseGrid,
    bank: &InstanceBank,
    tp: f64,
) -> Result<InstancePredictionMap> {
    if !(tp > 0.0) {
        return Err(Error::BadTemperature(tp));
    }
    if features.channels() != bank.dim() {
        return Err(Error::Shape(format!(
            "feature dimension {} vs bank dimension {}",
            features.channels(),
            bank.dim()
        )));
    }
    let k = bank.size();
    let mut grid = DenseGrid::zeros(features.height(), features.width(), k);
    for p in 0..features.pixel_count() {
        predict_pixel(features.at(p), bank, tp, grid.at_mut(p));
    }
    Ok(InstancePredictionMap {
        grid,
        bank_version: bank.updates_applied(),
    })
}

/// Cross-entropy of `pred` against the `target` distribution at every pixel.
pub fn cross_entropy_map(pred: &DenseGrid, target: &DenseGrid, reduction: Reduction) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    let mut total = 0.0;
    for (q, y) in pred.pixels().zip(target.pixels()) {
        for (&qk, &yk) in q.iter().zip(y) {
            if yk != 0.0 {
                total -= yk * qk.max(LOG_FLOOR).ln();
            }
        }
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / pred.pixel_count().max(1) as f64,
    })
}

/// Instance consistency loss between strong-view predictions and the
/// weak-view (or regenerated) instance pseudo-labels.
pub fn instance_loss(
    pred_strong: &InstancePredictionMap,
    pseudo: &InstancePredictionMap,
    reduction: Reduction,
) -> Result<f64> {
    cross_entropy_map(&pred_strong.grid, &pseudo.grid, reduction)
}

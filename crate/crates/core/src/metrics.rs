//! Standard depth-error statistics and mask IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, DepthMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Fraction with `max(p/g, g/p) < 1.25`.
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

/// Metrics over ground-truth pixels inside `[d_min, d_max]`; predictions are
/// clamped into the same range first. No median scaling.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, d_min: f64, d_max: f64) -> Result<DepthMetrics> {
    depth_metrics_masked(pred, gt, d_min, d_max, None)
}

/// As [`depth_metrics`], restricted to pixels where `region` is 1.
pub fn depth_metrics_masked(
    pred: &DepthMap,
    gt: &DepthMap,
    d_min: f64,
    d_max: f64,
    region: Option<&BinaryMask>,
) -> Result<DepthMetrics> {
    pred.ensure_same_dims(gt.dims())?;
    if let Some(r) = region {
        r.ensure_same_dims(gt.dims())?;
    }
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut a1, mut a2, mut a3) = (0usize, 0usize, 0usize);
    let mut n = 0usize;
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if !(g >= d_min && g <= d_max) {
            continue;
        }
        if region.is_some_and(|r| !r.data()[i]) {
            continue;
        }
        let p = p.clamp(d_min, d_max);
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        a1 += (ratio < 1.25) as usize;
        a2 += (ratio < 1.25f64.powi(2)) as usize;
        a3 += (ratio < 1.25f64.powi(3)) as usize;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        a1: a1 as f64 / nf,
        a2: a2 as f64 / nf,
        a3: a3 as f64 / nf,
    })
}

/// Intersection over union of the pixels equal to `positive`. 1 when both are empty.
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask, positive: bool) -> Result<f64> {
    pred.ensure_same_dims(gt.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == positive, g == positive);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

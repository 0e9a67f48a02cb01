//! Pseudo-depth fusion of two teachers and the log-L1 distillation loss.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, DepthMap};

/// Takes `d_org` where `M_R = 1` (non-reflective) and `d_refl` where `M_R = 0`.
pub fn fuse_pseudo_depth(d_org: &DepthMap, d_refl: &DepthMap, m_r: &BinaryMask) -> Result<DepthMap> {
    d_org.ensure_same_dims(d_refl.dims())?;
    m_r.ensure_same_dims(d_org.dims())?;
    d_org.check_bounds()?;
    d_refl.check_bounds()?;
    let (h, w) = d_org.dims();
    let data = d_org
        .data()
        .iter()
        .zip(d_refl.data())
        .zip(m_r.data())
        .map(|((&o, &r), &keep)| if keep { o } else { r })
        .collect();
    DepthMap::new(h, w, data)
}

/// Mean of `|log D̂ - log D_pseudo|`.
pub fn distill_loss(d_hat: &DepthMap, d_pseudo: &DepthMap) -> Result<f64> {
    d_hat.ensure_same_dims(d_pseudo.dims())?;
    if d_hat.data().iter().chain(d_pseudo.data()).any(|&d| !(d > 0.0)) {
        return Err(Error::NonPositiveDepth);
    }
    let n = d_hat.data().len();
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    let sum: f64 = d_hat
        .data()
        .iter()
        .zip(d_pseudo.data())
        .map(|(a, b)| (a.ln() - b.ln()).abs())
        .sum();
    Ok(sum / n as f64)
}

//! Log-space diffuse/residual model `log I = log L + log R` and its losses.
//!
//! Diffuse images are 3-channel; residuals are single-channel and broadcast
//! across color channels. Diffuse values are clamped to `[LOG_EPS, 1]` and
//! residuals to `[LOG_EPS, RESIDUAL_MAX]` before taking logarithms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Domain, ImageBuffer, LOG_EPS, RESIDUAL_MAX};

#[inline]
pub(crate) fn log_intensity(v: f64) -> f64 {
    v.clamp(LOG_EPS, 1.0).ln()
}

#[inline]
pub(crate) fn log_residual(v: f64) -> f64 {
    v.clamp(LOG_EPS, RESIDUAL_MAX).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicPair {
    diffuse: ImageBuffer,
    residual: ImageBuffer,
}

impl IntrinsicPair {
    pub fn new(diffuse: ImageBuffer, residual: ImageBuffer) -> Result<Self> {
        diffuse.ensure_same_dims(&residual)?;
        if residual.channels() != 1 {
            return Err(Error::Format("residual must be single-channel".into()));
        }
        Ok(Self { diffuse, residual })
    }

    pub fn diffuse(&self) -> &ImageBuffer {
        &self.diffuse
    }

    pub fn residual(&self) -> &ImageBuffer {
        &self.residual
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntrinsicLossWeights {
    pub recon: f64,
    pub cross: f64,
    pub cts: f64,
    /// Contrastive margin δ.
    pub cts_margin: f64,
}

impl Default for IntrinsicLossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            cross: 1.0,
            cts: 0.01,
            cts_margin: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicLosses {
    pub recon: f64,
    pub cross: f64,
    pub cts: f64,
}

/// How the contrastive distance between two diffuse images is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceNorm {
    /// Euclidean norm over all samples divided by `√(pixel count)`.
    #[default]
    PerPixel,
    /// Plain Euclidean norm.
    Raw,
}

/// `exp(log L + log R)` clamped into `[ε, 1]`.
pub fn compose(pair: &IntrinsicPair) -> ImageBuffer {
    let l = &pair.diffuse;
    let (h, w) = l.dims();
    ImageBuffer::from_fn(h, w, l.channels(), |y, x, c| {
        (log_intensity(l.get(y, x, c)) + log_residual(pair.residual.get(y, x, 0)))
            .exp()
            .clamp(LOG_EPS, 1.0)
    })
}

/// `L' = exp(log I - log R)` clamped into `[ε, 1]`.
pub fn pseudo_diffuse(image: &ImageBuffer, residual: &ImageBuffer) -> Result<ImageBuffer> {
    image.ensure_same_dims(residual)?;
    if residual.channels() != 1 && residual.channels() != image.channels() {
        return Err(Error::dims(
            format!("1 or {} residual channels", image.channels()),
            residual.channels(),
        ));
    }
    let (h, w) = image.dims();
    Ok(ImageBuffer::from_fn(h, w, image.channels(), |y, x, c| {
        // I / R rather than exp(log I - log R): exact when R = 1
        (image.get(y, x, c).clamp(LOG_EPS, 1.0) / residual.get_broadcast(y, x, c).clamp(LOG_EPS, RESIDUAL_MAX))
            .clamp(LOG_EPS, 1.0)
    }))
}

/// Mean of `|log I - log L - log R|` over every pixel and channel.
pub fn recon_loss(image: &ImageBuffer, pair: &IntrinsicPair) -> Result<f64> {
    image.ensure_same_shape(&pair.diffuse)?;
    let (h, w) = image.dims();
    let valid = BinaryMask::filled(h, w, true);
    Ok(log_l1(image, &pair.diffuse, &pair.residual, &valid)?.0)
}

/// Mean of `|log I_r - log L_s2r - log R_r|` over valid pixels and channels.
pub fn cross_recon_loss(
    image_r: &ImageBuffer,
    diffuse_s2r: &ImageBuffer,
    residual_r: &ImageBuffer,
    valid: &BinaryMask,
) -> Result<f64> {
    image_r.ensure_same_shape(diffuse_s2r)?;
    image_r.ensure_same_dims(residual_r)?;
    valid.ensure_same_dims(image_r.dims())?;
    Ok(log_l1(image_r, diffuse_s2r, residual_r, valid)?.0)
}

fn log_l1(
    image: &ImageBuffer,
    diffuse: &ImageBuffer,
    residual: &ImageBuffer,
    valid: &BinaryMask,
) -> Result<(f64, usize)> {
    let (h, w) = image.dims();
    let ch = image.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !valid.get(y, x) {
                continue;
            }
            let lr = log_residual(residual.get(y, x, 0));
            for c in 0..ch {
                sum += (log_intensity(image.get(y, x, c)) - log_intensity(diffuse.get(y, x, c)) - lr).abs();
            }
            n += ch;
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    Ok((sum / n as f64, n))
}

/// Value and gradients of `mean |log_i - log_l - log_r|` taken directly in log
/// space. `log_r` is single-channel. Gradients are zero at exact ties.
pub fn log_l1_with_grad(
    log_i: &[f64],
    log_l: &[f64],
    log_r: &[f64],
    channels: usize,
    valid: &[bool],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let npx = valid.len();
    if log_i.len() != npx * channels || log_l.len() != npx * channels || log_r.len() != npx {
        return Err(Error::dims(
            format!("{npx} pixels x {channels} channels"),
            format!("{}/{}/{}", log_i.len(), log_l.len(), log_r.len()),
        ));
    }
    let count = valid.iter().filter(|&&v| v).count() * channels;
    if count == 0 {
        return Err(Error::EmptyValidSet);
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut g_l = vec![0.0; npx * channels];
    let mut g_r = vec![0.0; npx];
    for p in 0..npx {
        if !valid[p] {
            continue;
        }
        for c in 0..channels {
            let k = p * channels + c;
            let r = log_i[k] - log_l[k] - log_r[p];
            loss += r.abs() * inv;
            if r != 0.0 {
                let s = -r.signum() * inv;
                g_l[k] += s;
                g_r[p] += s;
            }
        }
    }
    Ok((loss, g_l, g_r))
}

fn distance(a: &ImageBuffer, b: &ImageBuffer, norm: DistanceNorm) -> (f64, f64) {
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let scale = match norm {
        DistanceNorm::PerPixel => 1.0 / (a.pixel_count() as f64).sqrt(),
        DistanceNorm::Raw => 1.0,
    };
    (sq.sqrt() * scale, scale)
}

/// `Σ_{i≠j} max(δ - ‖L_s2r^i - L_r^j‖, 0)` over a batch of
/// `(warped source diffuse, reference diffuse)` pairs.
pub fn contrastive_loss(batch: &[(ImageBuffer, ImageBuffer)], margin: f64, norm: DistanceNorm) -> Result<f64> {
    Ok(contrastive_loss_with_grad(batch, margin, norm)?.0)
}

/// Contrastive loss plus gradients with respect to each warped diffuse and
/// each reference diffuse.
pub fn contrastive_loss_with_grad(
    batch: &[(ImageBuffer, ImageBuffer)],
    margin: f64,
    norm: DistanceNorm,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if let Some((first, _)) = batch.first() {
        for (a, b) in batch {
            first.ensure_same_shape(a)?;
            first.ensure_same_shape(b)?;
        }
    }
    let mut loss = 0.0;
    let mut g_warped: Vec<Vec<f64>> = batch.iter().map(|(a, _)| vec![0.0; a.data().len()]).collect();
    let mut g_ref: Vec<Vec<f64>> = batch.iter().map(|(_, b)| vec![0.0; b.data().len()]).collect();
    for (i, (warped_i, _)) in batch.iter().enumerate() {
        for (j, (_, ref_j)) in batch.iter().enumerate() {
            if i == j {
                continue;
            }
            let (dist, scale) = distance(warped_i, ref_j, norm);
            if dist >= margin {
                continue;
            }
            loss += margin - dist;
            if dist > 0.0 {
                // d(-dist)/d warped = -scale² (a - b) / dist
                let k = scale * scale / dist;
                for (t, (a, b)) in warped_i.data().iter().zip(ref_j.data()).enumerate() {
                    let g = k * (a - b);
                    g_warped[i][t] -= g;
                    g_ref[j][t] += g;
                }
            }
        }
    }
    Ok((loss, g_warped, g_ref))
}

/// `λ_recon L_recon + λ_cross L_cross + λ_cts L_cts`.
pub fn intrinsic_total(losses: &IntrinsicLosses, weights: &IntrinsicLossWeights) -> Result<f64> {
    if !(losses.recon.is_finite() && losses.cross.is_finite() && losses.cts.is_finite()) {
        return Err(Error::NonFinite("intrinsic loss component"));
    }
    Ok(weights.recon * losses.recon + weights.cross * losses.cross + weights.cts * losses.cts)
}

/// Single-channel residual filled with `value`.
pub fn constant_residual(height: usize, width: usize, value: f64) -> ImageBuffer {
    ImageBuffer::new(height, width, 1, vec![value; height * width], Domain::Linear).expect("finite residual")
}

//! SSIM + L1 photometric error, per-pixel minimum fusion, auto-masking and
//! edge-aware disparity smoothness, each with an analytic backward pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Domain, ImageBuffer};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_ALPHA: f64 = 0.85;
pub const SMOOTHNESS_WEIGHT: f64 = 1e-3;

/// Per-pixel non-negative error with its validity mask. Invalid pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: BinaryMask,
}

impl ErrorMap {
    pub fn new(values: Vec<f64>, valid: BinaryMask) -> Result<Self> {
        let (height, width) = valid.dims();
        if values.len() != height * width {
            return Err(Error::dims(
                format!("{height}x{width}"),
                format!("{} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("error map"));
        }
        let values = values
            .into_iter()
            .zip(valid.data())
            .map(|(v, &ok)| if ok { v } else { 0.0 })
            .collect();
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &BinaryMask {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.count_ones()
    }

    /// Mean over valid pixels, `None` when nothing is valid.
    pub fn valid_mean(&self) -> Option<f64> {
        let n = self.valid_count();
        (n > 0).then(|| {
            self.values
                .iter()
                .zip(self.valid.data())
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| v)
                .sum::<f64>()
                / n as f64
        })
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::new(self.height, self.width, 1, self.values.clone(), Domain::Linear).expect("finite error map")
    }
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// The 9 pixel indices of the reflect-padded 3x3 window centred at `(y, x)`.
#[inline]
fn window(y: usize, x: usize, h: usize, w: usize) -> [usize; 9] {
    let mut out = [0; 9];
    let mut k = 0;
    for dy in -1..=1isize {
        let yy = reflect(y as isize + dy, h);
        for dx in -1..=1isize {
            out[k] = yy * w + reflect(x as isize + dx, w);
            k += 1;
        }
    }
    out
}

/// Local statistics of one channel at one pixel.
#[derive(Debug, Clone, Copy)]
struct LocalStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

impl LocalStats {
    #[inline]
    fn gather(a: &[f64], b: &[f64], win: &[usize; 9], ch: usize, c: usize) -> Self {
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &i in win {
            let va = a[i * ch + c];
            let vb = b[i * ch + c];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
        let n = 9.0;
        let mu_a = sa / n;
        let mu_b = sb / n;
        Self {
            mu_a,
            mu_b,
            var_a: saa / n - mu_a * mu_a,
            var_b: sbb / n - mu_b * mu_b,
            cov: sab / n - mu_a * mu_b,
        }
    }

    #[inline]
    fn ssim(&self) -> f64 {
        let num = (2.0 * self.mu_a * self.mu_b + SSIM_C1) * (2.0 * self.cov + SSIM_C2);
        let den = (self.mu_a * self.mu_a + self.mu_b * self.mu_b + SSIM_C1) * (self.var_a + self.var_b + SSIM_C2);
        num / den
    }

    /// Partials of SSIM with respect to (μ_b, E[b²], E[ab]).
    #[inline]
    fn ssim_partials_b(&self) -> (f64, f64, f64) {
        let (ma, mb) = (self.mu_a, self.mu_b);
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * self.cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = self.var_a + self.var_b + SSIM_C2;
        let num = a1 * a2;
        let den = b1 * b2;
        let d_num_mu = 2.0 * ma * a2 - 2.0 * ma * a1;
        let d_den_mu = 2.0 * mb * b2 - 2.0 * mb * b1;
        let d_mu = (d_num_mu * den - num * d_den_mu) / (den * den);
        let d_ebb = -num * b1 / (den * den);
        let d_eab = 2.0 * a1 / den;
        (d_mu, d_ebb, d_eab)
    }
}

/// Per-pixel SSIM over 3x3 reflect-padded windows, averaged over channels.
pub fn ssim_map(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageBuffer> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.dims();
    let ch = a.channels();
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let win = window(y, x, h, w);
            let mut s = 0.0;
            for c in 0..ch {
                s += LocalStats::gather(a.data(), b.data(), &win, ch, c).ssim();
            }
            *o = s / ch as f64;
        }
    });
    ImageBuffer::new(h, w, 1, out, Domain::Linear)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(())
}

/// `α (1 - SSIM)/2 + (1 - α) |ref - warped|₁` (channel mean), zero off `valid`.
pub fn photometric_error(
    reference: &ImageBuffer,
    warped: &ImageBuffer,
    valid: &BinaryMask,
    alpha: f64,
) -> Result<ErrorMap> {
    check_alpha(alpha)?;
    reference.ensure_same_shape(warped)?;
    valid.ensure_same_dims(reference.dims())?;
    let (h, w) = reference.dims();
    let ch = reference.channels();
    let (ra, wb) = (reference.data(), warped.data());
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            if !valid.get(y, x) {
                continue;
            }
            let win = window(y, x, h, w);
            let i = y * w + x;
            let mut ssim = 0.0;
            let mut l1 = 0.0;
            for c in 0..ch {
                ssim += LocalStats::gather(ra, wb, &win, ch, c).ssim();
                l1 += (ra[i * ch + c] - wb[i * ch + c]).abs();
            }
            ssim /= ch as f64;
            l1 /= ch as f64;
            *o = alpha * (1.0 - ssim) / 2.0 + (1.0 - alpha) * l1;
        }
    });
    ErrorMap::new(out, valid.clone())
}

/// Gradient of `Σ_p upstream[p] · E[p]` with respect to `warped` (shape `HWC`).
///
/// `upstream` should be zero off `valid`; the SSIM term still reaches invalid
/// neighbours that sit inside a valid pixel's window.
pub fn photometric_error_backward(
    reference: &ImageBuffer,
    warped: &ImageBuffer,
    valid: &BinaryMask,
    alpha: f64,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    reference.ensure_same_shape(warped)?;
    valid.ensure_same_dims(reference.dims())?;
    let (h, w) = reference.dims();
    let ch = reference.channels();
    let (ra, wb) = (reference.data(), warped.data());
    let chf = ch as f64;
    let mut grad = vec![0.0; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = upstream[i];
            if g == 0.0 || !valid.get(y, x) {
                continue;
            }
            let l1_scale = g * (1.0 - alpha) / chf;
            // dE/dSSIM_c = -α / (2C)
            let ssim_scale = -g * alpha / (2.0 * chf);
            let win = window(y, x, h, w);
            for c in 0..ch {
                let diff = wb[i * ch + c] - ra[i * ch + c];
                if diff != 0.0 {
                    grad[i * ch + c] += l1_scale * diff.signum();
                }
                if alpha == 0.0 {
                    continue;
                }
                let st = LocalStats::gather(ra, wb, &win, ch, c);
                let (d_mu, d_ebb, d_eab) = st.ssim_partials_b();
                for &q in &win {
                    let bq = wb[q * ch + c];
                    let aq = ra[q * ch + c];
                    grad[q * ch + c] += ssim_scale * (d_mu + 2.0 * bq * d_ebb + aq * d_eab) / 9.0;
                }
            }
        }
    }
    Ok(grad)
}

/// Per-pixel minimum over valid maps, plus which map supplied each pixel.
#[derive(Debug, Clone)]
pub struct MinFused {
    pub error: ErrorMap,
    /// Index of the winning map, `None` where no map is valid.
    pub source: Vec<Option<usize>>,
}

pub fn min_reprojection(errors: &[ErrorMap]) -> Result<ErrorMap> {
    Ok(min_reprojection_indexed(errors)?.error)
}

pub fn min_reprojection_indexed(errors: &[ErrorMap]) -> Result<MinFused> {
    let first = errors.first().ok_or(Error::EmptyList)?;
    let (h, w) = first.dims();
    for e in errors {
        e.valid.ensure_same_dims((h, w))?;
    }
    let mut values = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    let mut source = vec![None; h * w];
    for i in 0..h * w {
        let mut best: Option<(usize, f64)> = None;
        for (k, e) in errors.iter().enumerate() {
            if !e.valid.data()[i] {
                continue;
            }
            let v = e.values[i];
            if best.map_or(true, |(_, b)| v < b) {
                best = Some((k, v));
            }
        }
        if let Some((k, v)) = best {
            values[i] = v;
            valid[i] = true;
            source[i] = Some(k);
        }
    }
    Ok(MinFused {
        error: ErrorMap::new(values, BinaryMask::new(h, w, valid)?)?,
        source,
    })
}

/// 1 where warping strictly beats the unwarped source, 0 elsewhere.
pub fn auto_mask(
    reference: &ImageBuffer,
    src_unwarped: &ImageBuffer,
    warped: &ImageBuffer,
    valid: &BinaryMask,
    alpha: f64,
) -> Result<BinaryMask> {
    let (h, w) = reference.dims();
    let warped_err = photometric_error(reference, warped, valid, alpha)?;
    let identity_err = photometric_error(reference, src_unwarped, &BinaryMask::filled(h, w, true), alpha)?;
    auto_mask_from_errors(&warped_err, &identity_err)
}

/// Auto-mask from precomputed reprojection and identity errors (both may be
/// minimum-fused over several sources).
pub fn auto_mask_from_errors(reprojection: &ErrorMap, identity: &ErrorMap) -> Result<BinaryMask> {
    reprojection.valid.ensure_same_dims(identity.dims())?;
    let (h, w) = reprojection.dims();
    let bits = (0..h * w)
        .map(|i| {
            reprojection.valid.data()[i] && (!identity.valid.data()[i] || reprojection.values[i] < identity.values[i])
        })
        .collect();
    BinaryMask::new(h, w, bits)
}

/// Edge-aware first-order smoothness of mean-normalised disparity.
///
/// Returns `mean_x(|∂x d*| e^{-|∂x I|}) + mean_y(|∂y d*| e^{-|∂y I|})` with
/// `d* = d / mean(d)` and image gradients averaged over channels. Unweighted:
/// callers apply [`SMOOTHNESS_WEIGHT`].
pub fn smoothness(disparity: &[f64], image: &ImageBuffer) -> Result<f64> {
    Ok(smoothness_with_grad(disparity, image)?.0)
}

pub fn smoothness_with_grad(disparity: &[f64], image: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    let (h, w) = image.dims();
    if disparity.len() != h * w {
        return Err(Error::dims(
            format!("{h}x{w}"),
            format!("{} disparities", disparity.len()),
        ));
    }
    if disparity.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::NonPositiveDisparity);
    }
    let n = (h * w) as f64;
    let mean = disparity.iter().sum::<f64>() / n;
    let ch = image.channels();
    let edge_weight = |i: usize, j: usize| {
        let (pi, pj) = (&image.data()[i * ch..(i + 1) * ch], &image.data()[j * ch..(j + 1) * ch]);
        let g = pi.iter().zip(pj).map(|(a, b)| (a - b).abs()).sum::<f64>() / ch as f64;
        (-g).exp()
    };

    let mut loss = 0.0;
    // gradient with respect to the normalised disparity
    let mut g_norm = vec![0.0; h * w];
    let mut accumulate = |pairs: &mut dyn Iterator<Item = (usize, usize)>, count: usize| {
        if count == 0 {
            return;
        }
        let inv = 1.0 / count as f64;
        for (i, j) in pairs {
            let wgt = edge_weight(i, j);
            let diff = (disparity[i] - disparity[j]) / mean;
            loss += wgt * diff.abs() * inv;
            if diff != 0.0 {
                let s = wgt * diff.signum() * inv;
                g_norm[i] += s;
                g_norm[j] -= s;
            }
        }
    };
    let nx = h * w.saturating_sub(1);
    let ny = h.saturating_sub(1) * w;
    accumulate(
        &mut (0..h).flat_map(|y| (0..w.saturating_sub(1)).map(move |x| (y * w + x, y * w + x + 1))),
        nx,
    );
    accumulate(
        &mut (0..h.saturating_sub(1)).flat_map(|y| (0..w).map(move |x| (y * w + x, (y + 1) * w + x))),
        ny,
    );

    // d(d_k / mean)/d d_j = δ_kj / mean - d_k / (mean² n)
    let coupling: f64 = g_norm.iter().zip(disparity).map(|(g, d)| g * d).sum::<f64>() / (mean * mean * n);
    let grad = g_norm.iter().map(|g| g / mean - coupling).collect();
    Ok((loss, grad))
}

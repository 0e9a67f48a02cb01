//! Mahalanobis-distance reflection masking and the masked depth loss.
//!
//! A pixel is flagged reflective (`M_R = 0`) when removing the residual makes
//! it markedly less of an outlier: `z_L < z_I + δ_m`, where `z` is the
//! per-pixel Mahalanobis distance of the photometric error from the error
//! distribution of its own map.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::photometric::{ErrorMap, SMOOTHNESS_WEIGHT};

/// Variances (or covariance eigenvalues) below this are treated as degenerate.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Margin used for the fusion/distillation mask.
pub const DISTILL_MARGIN: f64 = 0.1;

/// Mean and (population) covariance of per-pixel error vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub covariance: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

impl ErrorStats {
    /// `samples` holds `count` vectors of length `dim`, back to back.
    pub fn from_samples(samples: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || samples.len() % dim != 0 {
            return Err(Error::dims(format!("multiple of {dim}"), samples.len()));
        }
        let count = samples.len() / dim;
        if count < 2 {
            return Err(Error::EmptyValidSet);
        }
        let n = count as f64;
        let mut mean = vec![0.0; dim];
        for v in samples.chunks_exact(dim) {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut covariance = vec![0.0; dim * dim];
        for v in samples.chunks_exact(dim) {
            for a in 0..dim {
                let da = v[a] - mean[a];
                for b in 0..dim {
                    covariance[a * dim + b] += da * (v[b] - mean[b]);
                }
            }
        }
        covariance.iter_mut().for_each(|c| *c /= n);
        Ok(Self {
            mean,
            covariance,
            dim,
            count,
        })
    }

    /// Inverse covariance, or `None` when it is not safely positive definite.
    fn precision(&self) -> Option<DMatrix<f64>> {
        if self.dim == 1 {
            let var = self.covariance[0];
            return (var >= SIGMA_FLOOR).then(|| DMatrix::from_element(1, 1, 1.0 / var));
        }
        let cov = DMatrix::from_row_slice(self.dim, self.dim, &self.covariance);
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < SIGMA_FLOOR) {
            return None;
        }
        cov.cholesky().map(|c| c.inverse())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisMap {
    /// Per-pixel distance, 0 at invalid pixels.
    pub z: Vec<f64>,
    pub valid: BinaryMask,
    pub stats: ErrorStats,
    /// Set when the covariance collapsed; `z` is then all zero.
    pub degenerate: bool,
}

/// Per-pixel Mahalanobis distance of a scalar error map.
pub fn mahalanobis_map(errors: &ErrorMap) -> Result<MahalanobisMap> {
    mahalanobis_vectors(errors.values(), 1, errors.valid())
}

/// Mahalanobis distance for `dim`-vectors stored per pixel (`HW x dim`).
pub fn mahalanobis_vectors(values: &[f64], dim: usize, valid: &BinaryMask) -> Result<MahalanobisMap> {
    let npx = valid.data().len();
    if values.len() != npx * dim {
        return Err(Error::dims(format!("{npx} x {dim}"), values.len()));
    }
    let samples: Vec<f64> = values
        .chunks_exact(dim)
        .zip(valid.data())
        .filter(|(_, &ok)| ok)
        .flat_map(|(v, _)| v.iter().copied())
        .collect();
    let stats = ErrorStats::from_samples(&samples, dim)?;
    let Some(precision) = stats.precision() else {
        return Ok(MahalanobisMap {
            z: vec![0.0; npx],
            valid: valid.clone(),
            stats,
            degenerate: true,
        });
    };
    let mean = DVector::from_column_slice(&stats.mean);
    let z = values
        .chunks_exact(dim)
        .zip(valid.data())
        .map(|(v, &ok)| {
            if !ok {
                return 0.0;
            }
            if dim == 1 {
                return (v[0] - stats.mean[0]).abs() * precision[(0, 0)].sqrt();
            }
            let d = DVector::from_column_slice(v) - &mean;
            d.dot(&(&precision * &d)).max(0.0).sqrt()
        })
        .collect();
    Ok(MahalanobisMap {
        z,
        valid: valid.clone(),
        stats,
        degenerate: false,
    })
}

/// Mask plus the distance maps it was derived from.
#[derive(Debug, Clone)]
pub struct ReflectionMask {
    pub mask: BinaryMask,
    pub z_image: MahalanobisMap,
    pub z_diffuse: MahalanobisMap,
}

impl ReflectionMask {
    /// Fraction of jointly valid pixels flagged reflective.
    pub fn masked_fraction(&self) -> f64 {
        let valid = self.z_image.valid.and(&self.z_diffuse.valid).expect("same dims");
        let n = valid.count_ones();
        if n == 0 {
            return 0.0;
        }
        let flagged = valid
            .data()
            .iter()
            .zip(self.mask.data())
            .filter(|(&v, &m)| v && !m)
            .count();
        flagged as f64 / n as f64
    }
}

/// `M_R = 0` where `z_L < z_I + margin`, else 1. Invalid pixels stay 1.
pub fn reflection_mask(e_image: &ErrorMap, e_diffuse: &ErrorMap, margin: f64) -> Result<BinaryMask> {
    Ok(reflection_mask_detailed(e_image, e_diffuse, margin)?.mask)
}

pub fn reflection_mask_detailed(e_image: &ErrorMap, e_diffuse: &ErrorMap, margin: f64) -> Result<ReflectionMask> {
    if e_image.dims() != e_diffuse.dims() {
        return Err(Error::dims(
            format!("{:?}", e_image.dims()),
            format!("{:?}", e_diffuse.dims()),
        ));
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidConfig(format!("margin must be >= 0, got {margin}")));
    }
    let z_image = mahalanobis_map(e_image)?;
    let z_diffuse = mahalanobis_map(e_diffuse)?;
    let (h, w) = e_image.dims();
    let bits = (0..h * w)
        .map(|i| {
            let both = e_image.valid().data()[i] && e_diffuse.valid().data()[i];
            !(both && z_diffuse.z[i] < z_image.z[i] + margin)
        })
        .collect();
    Ok(ReflectionMask {
        mask: BinaryMask::new(h, w, bits)?,
        z_image,
        z_diffuse,
    })
}

/// `Σ M_R M_auto E_I / |valid|` over the valid pixels of `E_I`.
///
/// The denominator counts valid pixels, not surviving ones, so masking more
/// pixels never inflates the loss.
pub fn masked_depth_loss(e_image: &ErrorMap, m_r: &BinaryMask, m_auto: &BinaryMask) -> Result<f64> {
    Ok(masked_depth_weights(e_image, m_r, m_auto)?.0)
}

/// Loss value and `dL/dE_I` per pixel.
pub fn masked_depth_weights(e_image: &ErrorMap, m_r: &BinaryMask, m_auto: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    m_r.ensure_same_dims(e_image.dims())?;
    m_auto.ensure_same_dims(e_image.dims())?;
    let n = e_image.valid_count();
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let weights = e_image
        .values()
        .iter()
        .zip(e_image.valid().data())
        .zip(m_r.data().iter().zip(m_auto.data()))
        .map(|((&e, &ok), (&r, &a))| {
            if ok && r && a {
                loss += e * inv;
                inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, weights))
}

/// `L_itr + L_depth + λ_s · smoothness`.
pub fn total_loss(depth_loss: f64, intrinsic_loss: f64, smoothness: f64) -> Result<f64> {
    if !(depth_loss.is_finite() && intrinsic_loss.is_finite() && smoothness.is_finite()) {
        return Err(Error::NonFinite("total loss component"));
    }
    Ok(intrinsic_loss + depth_loss + SMOOTHNESS_WEIGHT * smoothness)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, w: usize) -> ErrorMap {
        let h = values.len() / w;
        ErrorMap::new(values, BinaryMask::filled(h, w, true)).unwrap()
    }

    #[test]
    fn fixture_z_values() {
        let z = mahalanobis_map(&map(vec![1.0, 1.0, 1.0, 5.0], 2)).unwrap();
        assert_eq!(z.stats.mean, vec![2.0]);
        assert_eq!(z.stats.covariance, vec![3.0]);
        let s3 = 3f64.sqrt();
        for (a, b) in z.z.iter().zip([1.0 / s3, 1.0 / s3, 1.0 / s3, 3.0 / s3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_is_degenerate() {
        let z = mahalanobis_map(&map(vec![0.2; 6], 3)).unwrap();
        assert!(z.degenerate);
        assert!(z.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn needs_two_valid_pixels() {
        let valid = BinaryMask::from_fn(1, 3, |_, x| x == 0);
        let e = ErrorMap::new(vec![1.0, 2.0, 3.0], valid).unwrap();
        assert!(matches!(mahalanobis_map(&e), Err(Error::EmptyValidSet)));
    }

    #[test]
    fn vector_errors_match_scalar_case_on_diagonal() {
        let values = vec![1.0, 0.0, 2.0, 1.0, 4.0, 0.5, 3.0, 2.0];
        let valid = BinaryMask::filled(2, 2, true);
        let z = mahalanobis_vectors(&values, 2, &valid).unwrap();
        assert!(!z.degenerate);
        // whitening check: mean squared distance equals the dimension
        let msq: f64 = z.z.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((msq - 2.0).abs() < 1e-9);
    }

    #[test]
    fn margin_semantics() {
        let e = map(vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.4], 3);
        let strict = reflection_mask(&e, &e, 0.0).unwrap();
        assert_eq!(strict.count_ones(), 6);
        let loose = reflection_mask(&e, &e, DISTILL_MARGIN).unwrap();
        assert_eq!(loose.count_ones(), 0);
    }

    #[test]
    fn masked_loss_cases() {
        let e = map(vec![0.4; 16], 4);
        let ones = BinaryMask::filled(4, 4, true);
        assert!((masked_depth_loss(&e, &ones, &ones).unwrap() - 0.4).abs() < 1e-15);
        let zeros = BinaryMask::filled(4, 4, false);
        assert_eq!(masked_depth_loss(&e, &zeros, &ones).unwrap(), 0.0);
        let checker = BinaryMask::from_fn(4, 4, |y, x| (x + y) % 2 == 0);
        assert!((masked_depth_loss(&e, &checker, &ones).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn total_cases() {
        assert_eq!(total_loss(2.0, 3.0, 0.0).unwrap(), 5.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((total_loss(0.0, 0.0, 10.0).unwrap() - 0.01).abs() < 1e-15);
        assert!(total_loss(f64::INFINITY, 0.0, 0.0).is_err());
    }
}

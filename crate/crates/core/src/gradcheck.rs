//! Central-difference checks of the analytic loss gradients.
//!
//! A coordinate is skipped when the analytic gradient is not locally linear
//! across `x ± h` (an L1 kink, a clamp, a validity change or a bilinear cell
//! boundary lies inside the probe interval).

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::geometry::{sample_grid, sample_grid_adjoint, PixelGrid};
use crate::image::{BinaryMask, DepthMap, Domain, ImageBuffer, LOG_EPS};
use crate::intrinsic::log_l1_with_grad;
use crate::photometric::{photometric_error, photometric_error_backward, smoothness_with_grad};
use crate::synthetic::{hash_unit, render_sequence, Rig, SceneSpec};
use crate::trainer::internals::FrozenDepthObjective;
use crate::trainer::{DepthInit, FitConfig};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_SAMPLES: usize = 200;

/// Relative asymmetry of the gradient across the probe interval above which
/// a coordinate counts as non-smooth.
const KINK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradLoss {
    Recon,
    CrossRecon,
    L1Photometric,
    SsimPhotometric,
    Smoothness,
    MaskedDepth,
}

impl GradLoss {
    pub const ALL: [GradLoss; 6] = [
        GradLoss::Recon,
        GradLoss::CrossRecon,
        GradLoss::L1Photometric,
        GradLoss::SsimPhotometric,
        GradLoss::Smoothness,
        GradLoss::MaskedDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradLoss::Recon => "recon",
            GradLoss::CrossRecon => "cross_recon",
            GradLoss::L1Photometric => "l1_photometric",
            GradLoss::SsimPhotometric => "ssim_photometric",
            GradLoss::Smoothness => "smoothness",
            GradLoss::MaskedDepth => "masked_depth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: GradLoss,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// `|g_a - g_fd| / max(1e-6, |g_a| + |g_fd|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compares `f`'s gradient with central differences at `coords`.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<(f64, usize, usize)> {
    let (_, g0) = f(x)?;
    if let Some(i) = g0.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("coordinate {i}")));
    }
    let mut probe = x.to_vec();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for &i in coords {
        probe[i] = x[i] + h;
        let (fp, gp) = f(&probe)?;
        probe[i] = x[i] - h;
        let (fm, gm) = f(&probe)?;
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFiniteGradient(format!("finite difference at {i}")));
        }
        let asym = ((gp[i] - g0[i]) - (g0[i] - gm[i])).abs();
        let scale = gp[i].abs() + gm[i].abs() + g0[i].abs();
        if asym > KINK_TOL * scale + 1e-15 {
            skipped += 1;
            continue;
        }
        worst = worst.max(relative_error(g0[i], numeric));
        checked += 1;
    }
    Ok((worst, checked, skipped))
}

/// Up to `samples` distinct coordinates of `0..n`, chosen by `seed`.
pub fn sample_coords(n: usize, samples: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        hash_unit(seed, a as i64, 0, 1)
            .partial_cmp(&hash_unit(seed, b as i64, 0, 1))
            .expect("finite hash")
    });
    idx.truncate(samples);
    idx
}

/// Runs the check for one loss on its seeded fixture.
pub fn grad_check(loss: GradLoss, seed: u64, h: f64, samples: usize) -> Result<GradCheckReport> {
    let rnd = |i: usize, salt: u64| hash_unit(seed, i as i64, salt as i64, loss as u64);
    let (max_rel_error, checked, skipped) = match loss {
        GradLoss::Recon => {
            let (n, ch) = (10 * 12, 3);
            let log_i: Vec<f64> = (0..n * ch).map(|i| (0.05 + 0.95 * rnd(i, 1)).ln()).collect();
            let mut x: Vec<f64> = (0..n * ch).map(|i| (0.05 + 0.95 * rnd(i, 2)).ln()).collect();
            x.extend((0..n).map(|i| -1.0 + 1.5 * rnd(i, 3)));
            let valid = vec![true; n];
            let f = |p: &[f64]| {
                let (l, r) = p.split_at(n * ch);
                let (v, gl, gr) = log_l1_with_grad(&log_i, l, r, ch, &valid)?;
                Ok((v, [gl, gr].concat()))
            };
            check_gradient(f, &x, &sample_coords(x.len(), samples, seed), h)?
        }
        GradLoss::CrossRecon => {
            let fx = WarpFixture::new(seed)?;
            let (h_, w_) = fx.reference.dims();
            let n = h_ * w_;
            let depth = fx.depth.clone();
            let grid = PixelGrid::new(&depth, &fx.camera.intrinsics, &fx.camera.intrinsics, &fx.pose);
            let log_i: Vec<f64> = fx.reference.data().iter().map(|v| v.ln()).collect();
            let mut x: Vec<f64> = fx.source.data().to_vec();
            x.extend((0..n).map(|i| -0.5 + rnd(i, 4)));
            let valid = grid.valid_mask();
            let f = |p: &[f64]| {
                let (l, r) = p.split_at(n * 3);
                let src = ImageBuffer::new(h_, w_, 3, l.to_vec(), Domain::Linear)?;
                let warped = sample_grid(&src, &grid)?;
                let log_w: Vec<f64> = warped.image.data().iter().map(|v| v.clamp(LOG_EPS, 1.0).ln()).collect();
                let (v, g_lw, g_r) = log_l1_with_grad(&log_i, &log_w, r, 3, valid.data())?;
                let g_lin: Vec<f64> = g_lw
                    .iter()
                    .zip(warped.image.data())
                    .map(|(g, &w)| if w > LOG_EPS && w < 1.0 { g / w } else { 0.0 })
                    .collect();
                Ok((v, [sample_grid_adjoint(&grid, &g_lin, 3), g_r].concat()))
            };
            check_gradient(f, &x, &sample_coords(x.len(), samples, seed), h)?
        }
        GradLoss::L1Photometric => {
            let fx = WarpFixture::new(seed)?;
            let x = fx.depth.data().to_vec();
            let f = |p: &[f64]| fx.photometric_wrt_depth(p, 0.0);
            check_gradient(f, &x, &sample_coords(x.len(), samples, seed), h)?
        }
        GradLoss::SsimPhotometric => {
            let fx = WarpFixture::new(seed)?;
            let (h_, w_) = fx.reference.dims();
            let valid = BinaryMask::filled(h_, w_, true);
            let n = (h_ * w_) as f64;
            let x = fx.source.data().to_vec();
            let f = |p: &[f64]| {
                let b = ImageBuffer::new(h_, w_, 3, p.to_vec(), Domain::Linear)?;
                let e = photometric_error(&fx.reference, &b, &valid, 1.0)?;
                let upstream = vec![1.0 / n; h_ * w_];
                let g = photometric_error_backward(&fx.reference, &b, &valid, 1.0, &upstream)?;
                Ok((e.values().iter().sum::<f64>() / n, g))
            };
            check_gradient(f, &x, &sample_coords(x.len(), samples, seed), h)?
        }
        GradLoss::Smoothness => {
            let fx = WarpFixture::new(seed)?;
            let x: Vec<f64> = fx.depth.data().iter().map(|d| 1.0 / d).collect();
            let f = |p: &[f64]| smoothness_with_grad(p, &fx.reference);
            check_gradient(f, &x, &sample_coords(x.len(), samples, seed), h)?
        }
        GradLoss::MaskedDepth => {
            let rig = Rig {
                width: 32,
                height: 24,
                focal: 26.0,
                baseline: 0.2,
                converge_depth: Some(2.0),
            };
            let o = render_sequence(&SceneSpec::default().with_seed(seed), &rig, 3)?;
            let cfg = FitConfig {
                depth_init: DepthInit::Constant(1.9),
                init_jitter: 0.3,
                seed,
                ..FitConfig::default()
            };
            let mut obj = FrozenDepthObjective::new(&o.sequence, &cfg)?;
            let x = obj.theta();
            let coords = sample_coords(x.len(), samples, seed);
            check_gradient(|p| obj.eval(p), &x, &coords, h)?
        }
    };
    Ok(GradCheckReport {
        loss,
        max_rel_error,
        checked,
        skipped,
    })
}

/// Every loss on its fixture.
pub fn grad_check_all(seed: u64, h: f64, samples: usize) -> Result<Vec<GradCheckReport>> {
    GradLoss::ALL.iter().map(|&l| grad_check(l, seed, h, samples)).collect()
}

/// Random smooth textures, a bumpy depth map and a small stereo offset.
struct WarpFixture {
    reference: ImageBuffer,
    source: ImageBuffer,
    depth: DepthMap,
    camera: Camera,
    pose: Pose,
}

impl WarpFixture {
    fn new(seed: u64) -> Result<Self> {
        let (h, w) = (12, 16);
        let tex = |salt: u64| {
            let phase: Vec<f64> = (0..6).map(|i| 6.0 * hash_unit(seed, i, salt as i64, 9)).collect();
            ImageBuffer::from_fn(h, w, 3, move |y, x, c| {
                let (y, x, c) = (y as f64, x as f64, c as f64);
                0.5 + 0.2 * (0.7 * x + 0.3 * y + phase[0] + c).sin()
                    + 0.15 * (0.5 * y - 0.4 * x + phase[1] * (c + 1.0)).cos()
            })
        };
        let depth = DepthMap::from_fn(h, w, |y, x| {
            2.0 + 0.1 * hash_unit(seed, (y * w + x) as i64, 7, 7) + 0.05 * (x as f64 * 0.3).sin()
        });
        let camera = Camera::new(Intrinsics::new(20.0, 20.0, 7.5, 5.5)?, Pose::identity());
        let pose = Pose::new(nalgebra::Matrix3::identity(), nalgebra::Vector3::new(-0.13, 0.02, 0.01))?;
        Ok(Self {
            reference: tex(1),
            source: tex(2),
            depth,
            camera,
            pose,
        })
    }

    /// Mean photometric error of the source warped at `depth`, and its depth gradient.
    fn photometric_wrt_depth(&self, depth: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
        let (h, w) = self.reference.dims();
        let d = DepthMap::new(h, w, depth.to_vec())?;
        let k = self.camera.intrinsics;
        let grid = PixelGrid::new(&d, &k, &k, &self.pose);
        let warped = sample_grid(&self.source, &grid)?;
        let e = photometric_error(&self.reference, &warped.image, &warped.valid, alpha)?;
        let n = e.valid_count().max(1) as f64;
        let upstream: Vec<f64> = warped
            .valid
            .data()
            .iter()
            .map(|&v| if v { 1.0 / n } else { 0.0 })
            .collect();
        let g_w = photometric_error_backward(&self.reference, &warped.image, &warped.valid, alpha, &upstream)?;
        let g = (0..h * w)
            .map(|p| (0..3).map(|c| g_w[p * 3 + c] * warped.d_depth[p * 3 + c]).sum())
            .collect();
        Ok((e.values().iter().sum::<f64>() / n, g))
    }
}

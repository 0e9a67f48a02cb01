//! Depth-driven inverse warping of a source view into the reference camera.
//!
//! Pixel `(u, v)` sits at continuous coordinate `(u, v)`; sampling is bilinear
//! and a sample is valid only when it lands inside `[0, W-1] x [0, H-1]` in
//! front of the source camera. Invalid pixels are filled with 0.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{Intrinsics, Pose};
use crate::error::Result;
use crate::image::{BinaryMask, DepthMap, Domain, ImageBuffer};

/// Source-frame depths at or below this are degenerate (behind or at the camera).
pub const MIN_SOURCE_DEPTH: f64 = 1e-9;

/// Coordinates this close to an integer are sampled exactly at that integer.
const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Depth of the point in the source frame.
    pub z: f64,
}

impl Projection {
    pub fn is_degenerate(&self) -> bool {
        !(self.z > MIN_SOURCE_DEPTH)
    }
}

/// Back-projects `(u, v)` at `depth` through `k`, moves it by `pose_r2s` and
/// reprojects with the same intrinsics. Check [`Projection::is_degenerate`].
pub fn project_pixel(u: f64, v: f64, depth: f64, k: &Intrinsics, pose_r2s: &Pose) -> Projection {
    project_between(u, v, depth, k, k, pose_r2s).0
}

/// As [`project_pixel`] with separate reference/source intrinsics. Also returns
/// `d(û, v̂)/d depth`.
#[inline]
pub(crate) fn project_between(
    u: f64,
    v: f64,
    depth: f64,
    k_ref: &Intrinsics,
    k_src: &Intrinsics,
    pose_r2s: &Pose,
) -> (Projection, (f64, f64)) {
    let ray = k_ref.unproject(u, v);
    let dir = pose_r2s.rotation * ray;
    let p: Vector3<f64> = dir * depth + pose_r2s.translation;
    let (pu, pv) = k_src.project(&p);
    let z2 = p.z * p.z;
    let du = k_src.fx * (dir.x * p.z - p.x * dir.z) / z2;
    let dv = k_src.fy * (dir.y * p.z - p.y * dir.z) / z2;
    (Projection { u: pu, v: pv, z: p.z }, (du, dv))
}

/// Where every reference pixel lands in the source image.
#[derive(Debug, Clone)]
pub struct PixelGrid {
    height: usize,
    width: usize,
    coords: Vec<(f64, f64)>,
    /// `d(û, v̂)/d depth` per pixel.
    d_coords: Vec<(f64, f64)>,
    valid: Vec<bool>,
}

impl PixelGrid {
    pub fn new(depth: &DepthMap, k_ref: &Intrinsics, k_src: &Intrinsics, pose_r2s: &Pose) -> Self {
        let (h, w) = depth.dims();
        let mut cells = vec![((0.0, 0.0), (0.0, 0.0), false); h * w];
        cells.par_chunks_mut(w.max(1)).enumerate().for_each(|(y, row)| {
            for (x, cell) in row.iter_mut().enumerate() {
                let d = depth.get(y, x);
                let (mut p, dp) = project_between(x as f64, y as f64, d, k_ref, k_src, pose_r2s);
                // round-off must not push an on-grid sample off the image
                p.u = snap(p.u);
                p.v = snap(p.v);
                let valid = !p.is_degenerate()
                    && d > 0.0
                    && p.u >= 0.0
                    && p.u <= (w - 1) as f64
                    && p.v >= 0.0
                    && p.v <= (h - 1) as f64;
                *cell = ((p.u, p.v), dp, valid);
            }
        });
        let mut coords = Vec::with_capacity(h * w);
        let mut d_coords = Vec::with_capacity(h * w);
        let mut valid = Vec::with_capacity(h * w);
        for (c, d, v) in cells {
            coords.push(c);
            d_coords.push(d);
            valid.push(v);
        }
        Self {
            height: h,
            width: w,
            coords,
            d_coords,
            valid,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (f64, f64) {
        self.coords[i]
    }

    #[inline]
    pub fn d_coords(&self, i: usize) -> (f64, f64) {
        self.d_coords[i]
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid_mask(&self) -> BinaryMask {
        BinaryMask::new(self.height, self.width, self.valid.clone()).expect("grid shape")
    }
}

/// Bilinear stencil for one sample point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    /// Indices (pixel, not sample) of the four neighbors: (x0,y0) (x1,y0) (x0,y1) (x1,y1).
    pub idx: [usize; 4],
    pub fx: f64,
    pub fy: f64,
}

impl Stencil {
    /// `x`, `y` must already be inside the image.
    #[inline]
    pub fn new(x: f64, y: f64, width: usize, height: usize) -> Self {
        let (x0, fx) = split_coord(x, width);
        let (y0, fy) = split_coord(y, height);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        Self {
            idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            fx,
            fy,
        }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    /// Value and spatial derivatives of channel `c`.
    #[inline]
    pub fn sample(&self, data: &[f64], channels: usize, c: usize) -> (f64, f64, f64) {
        let a = data[self.idx[0] * channels + c];
        let b = data[self.idx[1] * channels + c];
        let cc = data[self.idx[2] * channels + c];
        let d = data[self.idx[3] * channels + c];
        let (fx, fy) = (self.fx, self.fy);
        let top = a * (1.0 - fx) + b * fx;
        let bottom = cc * (1.0 - fx) + d * fx;
        let value = top * (1.0 - fy) + bottom * fy;
        let gx = (b - a) * (1.0 - fy) + (d - cc) * fy;
        let gy = bottom - top;
        (value, gx, gy)
    }
}

#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP_TOL {
        r
    } else {
        x
    }
}

/// Integer cell and fraction; the last pixel is addressed as the far edge of
/// the previous cell so derivatives stay one-sided inside the image.
#[inline]
fn split_coord(x: f64, len: usize) -> (usize, f64) {
    if len == 1 {
        return (0, 0.0);
    }
    let x = snap(x);
    let x0 = x.floor();
    let i = x0 as usize;
    if i >= len - 1 {
        (len - 2, 1.0)
    } else {
        (i, x - x0)
    }
}

/// Warped image plus the data needed to differentiate it.
#[derive(Debug, Clone)]
pub struct Warped {
    pub image: ImageBuffer,
    pub valid: BinaryMask,
    /// `d warped / d depth` per pixel and channel (0 where invalid).
    pub d_depth: Vec<f64>,
}

/// `Γ_{s2r}[u,v] = Γ_s[û, v̂]` for every reference pixel.
pub fn warp(
    src: &ImageBuffer,
    depth_ref: &DepthMap,
    k: &Intrinsics,
    pose_r2s: &Pose,
) -> Result<(ImageBuffer, BinaryMask)> {
    depth_ref.ensure_same_dims(src.dims())?;
    let grid = PixelGrid::new(depth_ref, k, k, pose_r2s);
    let w = sample_grid(src, &grid)?;
    Ok((w.image, w.valid))
}

/// Samples `src` on a precomputed grid.
pub fn sample_grid(src: &ImageBuffer, grid: &PixelGrid) -> Result<Warped> {
    let (h, w) = src.dims();
    if grid.dims() != (h, w) {
        return Err(crate::error::Error::dims(
            format!("{h}x{w}"),
            format!("{}x{}", grid.height, grid.width),
        ));
    }
    let ch = src.channels();
    let data = src.data();
    let mut out = vec![0.0; h * w * ch];
    let mut d_depth = vec![0.0; h * w * ch];
    out.par_chunks_mut(w * ch)
        .zip(d_depth.par_chunks_mut(w * ch))
        .enumerate()
        .for_each(|(y, (row, drow))| {
            for x in 0..w {
                let i = y * w + x;
                if !grid.valid[i] {
                    continue;
                }
                let (u, v) = grid.coords[i];
                let (du, dv) = grid.d_coords[i];
                let st = Stencil::new(u, v, w, h);
                for c in 0..ch {
                    let (val, gx, gy) = st.sample(data, ch, c);
                    row[x * ch + c] = val;
                    drow[x * ch + c] = gx * du + gy * dv;
                }
            }
        });
    Ok(Warped {
        image: ImageBuffer::new(h, w, ch, out, Domain::Linear)?,
        valid: grid.valid_mask(),
        d_depth,
    })
}

/// Adjoint of [`sample_grid`] with respect to the source samples: scatters
/// `upstream` (shaped like the warped image) back onto source pixels.
pub fn sample_grid_adjoint(grid: &PixelGrid, upstream: &[f64], channels: usize) -> Vec<f64> {
    let (h, w) = grid.dims();
    let mut out = vec![0.0; h * w * channels];
    for i in 0..h * w {
        if !grid.valid[i] {
            continue;
        }
        let (u, v) = grid.coords[i];
        let st = Stencil::new(u, v, w, h);
        let wts = st.weights();
        for c in 0..channels {
            let g = upstream[i * channels + c];
            if g == 0.0 {
                continue;
            }
            for k in 0..4 {
                out[st.idx[k] * channels + c] += wts[k] * g;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn k() -> Intrinsics {
        Intrinsics::new(50.0, 50.0, 7.5, 5.5).unwrap()
    }

    #[test]
    fn identity_pose_keeps_coordinates() {
        let p = project_pixel(3.0, 4.0, 2.5, &k(), &Pose::identity());
        assert!((p.u - 3.0).abs() < 1e-12 && (p.v - 4.0).abs() < 1e-12);
        assert_eq!(p.z, 2.5);
    }

    #[test]
    fn on_axis_point() {
        let k = Intrinsics::new(80.0, 80.0, 0.0, 0.0).unwrap();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let p = project_pixel(0.0, 0.0, 2.0, &k, &pose);
        assert_eq!((p.u, p.v, p.z), (0.0, 0.0, 1.0));
    }

    #[test]
    fn identity_warp_is_exact() {
        let src = ImageBuffer::from_fn(12, 16, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
        let depth = DepthMap::filled(12, 16, 1.7);
        let (out, valid) = warp(&src, &depth, &k(), &Pose::identity()).unwrap();
        assert_eq!(out, src);
        assert_eq!(valid.count_ones(), 12 * 16);
    }

    #[test]
    fn everything_behind_camera_is_invalid() {
        let src = ImageBuffer::filled(6, 8, 1, 0.5);
        let depth = DepthMap::filled(6, 8, 1.0);
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -5.0)).unwrap();
        let (out, valid) = warp(&src, &depth, &k(), &pose).unwrap();
        assert_eq!(valid.count_ones(), 0);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let src = ImageBuffer::filled(6, 8, 1, 0.5);
        let depth = DepthMap::filled(6, 7, 1.0);
        assert!(warp(&src, &depth, &k(), &Pose::identity()).is_err());
    }

    #[test]
    fn last_column_samples_exactly() {
        let data = [0.0, 1.0, 2.0, 3.0];
        let st = Stencil::new(3.0, 0.0, 4, 1);
        let (v, gx, _) = st.sample(&data, 1, 0);
        assert_eq!(v, 3.0);
        assert_eq!(gx, 1.0);
    }

    #[test]
    fn adjoint_matches_dot_product() {
        let (h, w) = (5, 6);
        let src = ImageBuffer::from_fn(h, w, 1, |y, x, _| ((y * 5 + x * 3) % 7) as f64);
        let depth = DepthMap::from_fn(h, w, |y, x| 1.0 + 0.05 * (x + y) as f64);
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.02, 0.01, 0.0)).unwrap();
        let grid = PixelGrid::new(&depth, &k(), &k(), &pose);
        let warped = sample_grid(&src, &grid).unwrap();
        let up: Vec<f64> = (0..h * w).map(|i| ((i * 13) % 5) as f64 - 2.0).collect();
        let lhs: f64 = warped.image.data().iter().zip(&up).map(|(a, b)| a * b).sum();
        let adj = sample_grid_adjoint(&grid, &up, 1);
        let rhs: f64 = src.data().iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

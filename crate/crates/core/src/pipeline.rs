//! Fixed-depth evaluation of a sequence: warps every source into the
//! reference, builds the image and pseudo-diffuse error maps, fuses them over
//! sources and derives the auto-mask and reflection mask.

use crate::error::{Error, Result};
use crate::geometry::{sample_grid, PixelGrid};
use crate::image::{BinaryMask, DepthMap, ImageBuffer};
use crate::intrinsic::pseudo_diffuse;
use crate::manifest::{Sequence, View};
use crate::photometric::{auto_mask_from_errors, min_reprojection, photometric_error, ErrorMap};
use crate::reflection::{reflection_mask_detailed, ReflectionMask};

#[derive(Debug, Clone)]
pub struct ErrorMaps {
    /// `E_I`: min over sources of the image photometric error.
    pub image: ErrorMap,
    /// `E_L`: the same for pseudo-diffuse images.
    pub diffuse: ErrorMap,
    /// Min over sources of the error against unwarped sources.
    pub identity: ErrorMap,
    pub auto_mask: BinaryMask,
}

/// Warped sources and their validity masks.
pub fn warp_sources(seq: &Sequence, depth: &DepthMap) -> Result<Vec<(ImageBuffer, BinaryMask)>> {
    depth.ensure_same_dims(seq.dims())?;
    let k_ref = seq.reference.camera.intrinsics;
    seq.sources
        .iter()
        .zip(seq.relative_poses())
        .map(|(s, pose)| {
            let grid = PixelGrid::new(depth, &k_ref, &s.camera.intrinsics, &pose);
            let w = sample_grid(&s.image, &grid)?;
            Ok((w.image, w.valid))
        })
        .collect()
}

fn diffuse_of(view: &View) -> Result<ImageBuffer> {
    let r = view
        .residual
        .as_ref()
        .ok_or_else(|| Error::InvalidManifest("every frame needs a residual".into()))?;
    pseudo_diffuse(&view.image, r)
}

/// Error maps at `depth`. Every view must carry a residual.
pub fn error_maps(seq: &Sequence, depth: &DepthMap, alpha: f64) -> Result<ErrorMaps> {
    depth.ensure_same_dims(seq.dims())?;
    let k_ref = seq.reference.camera.intrinsics;
    let (h, w) = seq.dims();
    let all = BinaryMask::filled(h, w, true);
    let ref_diffuse = diffuse_of(&seq.reference)?;
    let mut e_image = Vec::new();
    let mut e_diffuse = Vec::new();
    let mut e_identity = Vec::new();
    for (s, pose) in seq.sources.iter().zip(seq.relative_poses()) {
        let grid = PixelGrid::new(depth, &k_ref, &s.camera.intrinsics, &pose);
        let warped = sample_grid(&s.image, &grid)?;
        let warped_l = sample_grid(&diffuse_of(s)?, &grid)?;
        e_image.push(photometric_error(
            &seq.reference.image,
            &warped.image,
            &warped.valid,
            alpha,
        )?);
        e_diffuse.push(photometric_error(
            &ref_diffuse,
            &warped_l.image,
            &warped_l.valid,
            alpha,
        )?);
        e_identity.push(photometric_error(&seq.reference.image, &s.image, &all, alpha)?);
    }
    let image = min_reprojection(&e_image)?;
    let identity = min_reprojection(&e_identity)?;
    let auto_mask = auto_mask_from_errors(&image, &identity)?;
    Ok(ErrorMaps {
        image,
        diffuse: min_reprojection(&e_diffuse)?,
        identity,
        auto_mask,
    })
}

/// `M_R` at `depth` with the given margin.
pub fn sequence_reflection_mask(
    seq: &Sequence,
    depth: &DepthMap,
    alpha: f64,
    margin: f64,
) -> Result<(ErrorMaps, ReflectionMask)> {
    let maps = error_maps(seq, depth, alpha)?;
    let mask = reflection_mask_detailed(&maps.image, &maps.diffuse, margin)?;
    Ok((maps, mask))
}

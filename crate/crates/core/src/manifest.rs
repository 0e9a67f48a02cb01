//! Sequence manifests: a reference frame plus source frames with cameras.
//!
//! On disk this is a JSON document:
//!
//! ```json
//! {
//!   "reference": {"image": "ref.png", "K": [9 numbers], "pose": [16 numbers]},
//!   "sources": [{"image": "src_0.png", "K": [...], "pose": [...]}],
//!   "gt_depth": "gt_depth.pfm",
//!   "gt_mask": "gt_mask.png"
//! }
//! ```
//!
//! `K` is row-major 3x3, `pose` row-major 4x4 world-from-camera. Frames may
//! also name a `residual` PFM. Relative paths resolve against the manifest's
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, DepthMap, ImageBuffer};
use crate::io::{self, FrameFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: PathBuf,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub pose: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<PathBuf>,
}

impl FrameRecord {
    pub fn new(image: impl Into<PathBuf>, camera: &Camera) -> Self {
        Self {
            image: image.into(),
            k: camera.intrinsics.to_row_major().to_vec(),
            pose: camera.pose.to_row_major().to_vec(),
            residual: None,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        Ok(Camera::new(
            Intrinsics::from_row_major(&self.k)?,
            Pose::from_row_major(&self.pose)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub reference: FrameRecord,
    pub sources: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SequenceManifest {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut manifest: SequenceManifest = serde_json::from_str(text)?;
        manifest.base_dir = base_dir.into();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidManifest("at least one source frame required".into()));
        }
        self.reference.camera()?;
        for s in &self.sources {
            s.camera()?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads every raster the manifest names and checks shared dimensions.
    pub fn load_sequence(&self) -> Result<Sequence> {
        let reference = self.load_view(&self.reference)?;
        let sources = self
            .sources
            .iter()
            .map(|r| self.load_view(r))
            .collect::<Result<Vec<_>>>()?;
        let gt_depth = self
            .gt_depth
            .as_ref()
            .map(|p| io::read_depth_pfm(self.resolve(p)))
            .transpose()?;
        let gt_mask = self
            .gt_mask
            .as_ref()
            .map(|p| io::read_mask_png(self.resolve(p)))
            .transpose()?;
        Sequence::new(reference, sources, gt_depth, gt_mask)
    }

    fn load_view(&self, rec: &FrameRecord) -> Result<View> {
        let path = self.resolve(&rec.image);
        let format = FrameFormat::from_path(&path).unwrap_or(FrameFormat::Png8);
        let image = io::load_frame(&path, format)?.into_image();
        let residual = rec
            .residual
            .as_ref()
            .map(|p| io::read_pfm(self.resolve(p)))
            .transpose()?;
        Ok(View {
            image,
            camera: rec.camera()?,
            residual,
        })
    }
}

/// One posed frame held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: ImageBuffer,
    pub camera: Camera,
    /// Optional single-channel residual (ground truth or a previous estimate).
    pub residual: Option<ImageBuffer>,
}

/// In-memory counterpart of [`SequenceManifest`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub reference: View,
    pub sources: Vec<View>,
    pub gt_depth: Option<DepthMap>,
    pub gt_mask: Option<BinaryMask>,
}

impl Sequence {
    pub fn new(
        reference: View,
        sources: Vec<View>,
        gt_depth: Option<DepthMap>,
        gt_mask: Option<BinaryMask>,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidManifest("at least one source frame required".into()));
        }
        let dims = reference.image.dims();
        for v in sources.iter().chain(std::iter::once(&reference)) {
            reference.image.ensure_same_dims(&v.image)?;
            if let Some(r) = &v.residual {
                reference.image.ensure_same_dims(r)?;
                if r.channels() != 1 {
                    return Err(Error::Format("residual must be single-channel".into()));
                }
            }
        }
        if let Some(d) = &gt_depth {
            d.ensure_same_dims(dims)?;
        }
        if let Some(m) = &gt_mask {
            m.ensure_same_dims(dims)?;
        }
        Ok(Self {
            reference,
            sources,
            gt_depth,
            gt_mask,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.reference.image.dims()
    }

    /// Reference-to-source transforms, one per source.
    pub fn relative_poses(&self) -> Vec<Pose> {
        self.sources
            .iter()
            .map(|s| self.reference.camera.relative_to(&s.camera))
            .collect()
    }
}

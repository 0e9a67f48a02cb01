//! Deterministic renderer for small multi-view oracle scenes.
//!
//! The world holds one height-field surface `z = d₀ + tₓx + t_yy + relief(x, y)`
//! seen by pinhole cameras looking roughly along +z. Each pixel gets
//!
//! * diffuse  = albedo(x, y) · max(0, n·l)          (view independent)
//! * residual = 1 + s · max(0, r·v)^k               (Phong lobe, view dependent)
//! * image    = clamp(diffuse · residual, ε, 1)
//!
//! so non-specular pixels carry a residual of exactly 1.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, DepthMap, Domain, ImageBuffer, LOG_EPS};
use crate::manifest::{Sequence, View};

/// Specular term (`s · lobe`) above which a pixel belongs to the highlight mask.
pub const SPECULAR_MASK_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    /// Piecewise-constant cells with hashed colors.
    Checker,
    /// Smooth value noise (two octaves).
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub kind: TextureKind,
    /// Cell size in meters on the surface.
    pub cell: f64,
    /// Albedo range.
    pub min_albedo: f64,
    pub max_albedo: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Specular {
    /// Unit direction from the surface towards the specular light.
    pub light_dir: [f64; 3],
    /// Phong exponent k.
    pub sharpness: f64,
    /// Strength s in [0, 1]; 0 disables the highlight.
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub plane_depth: f64,
    /// Surface slope `(dz/dx, dz/dy)`.
    pub tilt: [f64; 2],
    pub relief_amplitude: f64,
    /// Relief wavelength in meters.
    pub relief_period: f64,
    pub texture: Texture,
    /// Unit direction from the surface towards the diffuse light.
    pub light_dir: [f64; 3],
    pub specular: Specular,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let mut scene = Self {
            plane_depth: 2.0,
            tilt: [0.15, 0.05],
            relief_amplitude: 0.0,
            relief_period: 1.0,
            texture: Texture {
                kind: TextureKind::Noise,
                cell: 0.05,
                min_albedo: 0.1,
                max_albedo: 0.5,
            },
            light_dir: normalize([0.2, -0.3, -1.0]),
            specular: Specular {
                light_dir: [0.0, 0.0, -1.0],
                sharpness: 300.0,
                strength: 0.8,
            },
            seed: 7,
        };
        // highlight a little right of and above the reference image center
        scene.aim_highlight(0.25, -0.15, Vector3::zeros());
        scene
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl SceneSpec {
    pub fn with_specular_strength(mut self, s: f64) -> Self {
        self.specular.strength = s;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Points the specular light so the lobe peaks, for an observer at
    /// `eye`, on the surface point above world `(x, y)`.
    pub fn aim_highlight(&mut self, x: f64, y: f64, eye: Vector3<f64>) {
        let p = Vector3::new(x, y, self.height(x, y));
        let n = self.normal(x, y);
        let v = (eye - p).normalize();
        let l = 2.0 * n.dot(&v) * n - v;
        self.specular.light_dir = [l.x, l.y, l.z];
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let k = std::f64::consts::TAU / self.relief_period;
        self.plane_depth + self.tilt[0] * x + self.tilt[1] * y + self.relief_amplitude * (k * x).sin() * (k * y).sin()
    }

    fn height_grad(&self, x: f64, y: f64) -> (f64, f64) {
        let k = std::f64::consts::TAU / self.relief_period;
        let a = self.relief_amplitude * k;
        (
            self.tilt[0] + a * (k * x).cos() * (k * y).sin(),
            self.tilt[1] + a * (k * x).sin() * (k * y).cos(),
        )
    }

    /// Unit normal facing the cameras (negative z).
    pub fn normal(&self, x: f64, y: f64) -> Vector3<f64> {
        let (gx, gy) = self.height_grad(x, y);
        Vector3::new(gx, gy, -1.0).normalize()
    }

    pub fn albedo(&self, x: f64, y: f64, c: usize) -> f64 {
        let t = &self.texture;
        let u = match t.kind {
            TextureKind::Checker => {
                let i = (x / t.cell).floor() as i64;
                let j = (y / t.cell).floor() as i64;
                hash_unit(self.seed, i, j, c as u64)
            }
            TextureKind::Noise => {
                let coarse = value_noise(self.seed, x / t.cell, y / t.cell, c as u64);
                let fine = value_noise(self.seed ^ 0x9e37, 2.0 * x / t.cell, 2.0 * y / t.cell, c as u64);
                (0.65 * coarse + 0.35 * fine).clamp(0.0, 1.0)
            }
        };
        t.min_albedo + (t.max_albedo - t.min_albedo) * u
    }

    /// Distance along `dir` (camera-frame z of the hit when `dir` comes from
    /// `K⁻¹[u v 1]` rotated into the world).
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let g = |t: f64| {
            let p = origin + dir * t;
            p.z - self.height(p.x, p.y)
        };
        let (tx, ty) = (self.tilt[0], self.tilt[1]);
        let denom = dir.z - tx * dir.x - ty * dir.y;
        if denom.abs() < 1e-12 {
            return None;
        }
        let mut t = (self.plane_depth + tx * origin.x + ty * origin.y - origin.z) / denom;
        if self.relief_amplitude != 0.0 {
            for _ in 0..50 {
                let p = origin + dir * t;
                let (gx, gy) = self.height_grad(p.x, p.y);
                let dg = dir.z - gx * dir.x - gy * dir.y;
                if dg.abs() < 1e-12 {
                    return None;
                }
                let step = g(t) / dg;
                t -= step;
                if step.abs() < 1e-13 {
                    break;
                }
            }
            if g(t).abs() > 1e-9 {
                return None;
            }
        }
        (t > 0.0).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: ImageBuffer,
    pub gt_depth: DepthMap,
    pub gt_diffuse: ImageBuffer,
    pub gt_residual: ImageBuffer,
    pub gt_specular_mask: BinaryMask,
}

pub fn render_view(scene: &SceneSpec, cam: &Camera, height: usize, width: usize) -> Result<RenderedView> {
    let origin = cam.center();
    let rot = cam.pose.rotation;
    let light = Vector3::from(scene.light_dir).normalize();
    let spec_light = Vector3::from(scene.specular.light_dir).normalize();
    let s = scene.specular.strength;

    let mut depth = Vec::with_capacity(height * width);
    let mut diffuse = Vec::with_capacity(height * width * 3);
    let mut residual = Vec::with_capacity(height * width);
    let mut image = Vec::with_capacity(height * width * 3);
    let mut mask = Vec::with_capacity(height * width);
    for v in 0..height {
        for u in 0..width {
            let dir = rot * cam.intrinsics.unproject(u as f64, v as f64);
            let t = scene.intersect(&origin, &dir).ok_or(Error::NoIntersection { u, v })?;
            let p = origin + dir * t;
            let n = scene.normal(p.x, p.y);
            let shading = n.dot(&light).max(0.0);
            let spec = if s > 0.0 {
                let r = 2.0 * n.dot(&spec_light) * n - spec_light;
                let view = (origin - p).normalize();
                s * r.dot(&view).max(0.0).powf(scene.specular.sharpness)
            } else {
                0.0
            };
            let res = 1.0 + spec;
            depth.push(t);
            residual.push(res);
            mask.push(spec > SPECULAR_MASK_THRESHOLD);
            for c in 0..3 {
                let d = scene.albedo(p.x, p.y, c) * shading;
                diffuse.push(d);
                image.push((d * res).clamp(LOG_EPS, 1.0));
            }
        }
    }
    Ok(RenderedView {
        image: ImageBuffer::new(height, width, 3, image, Domain::Linear)?,
        gt_depth: DepthMap::new(height, width, depth)?,
        gt_diffuse: ImageBuffer::new(height, width, 3, diffuse, Domain::Linear)?,
        gt_residual: ImageBuffer::new(height, width, 1, residual, Domain::Linear)?,
        gt_specular_mask: BinaryMask::new(height, width, mask)?,
    })
}

/// Camera layout: a reference at the world origin and sources alternating
/// right/left of it along x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub baseline: f64,
    /// Sources yaw to look at `(0, 0, converge_depth)`; `None` keeps them parallel.
    pub converge_depth: Option<f64>,
}

impl Default for Rig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            focal: 100.0,
            baseline: 0.2,
            converge_depth: Some(2.0),
        }
    }
}

impl Rig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
        .expect("positive focal")
    }

    /// `views` cameras including the reference.
    pub fn cameras(&self, views: usize) -> Vec<Camera> {
        let k = self.intrinsics();
        (0..views)
            .map(|i| {
                if i == 0 {
                    return Camera::new(k, Pose::identity());
                }
                let step = i.div_ceil(2) as f64;
                let offset = if i % 2 == 1 { step } else { -step } * self.baseline;
                let rotation = match self.converge_depth {
                    Some(d) => Rotation3::from_axis_angle(&Vector3::y_axis(), (-offset).atan2(d)).into_inner(),
                    None => nalgebra::Matrix3::identity(),
                };
                let pose = Pose::new(rotation, Vector3::new(offset, 0.0, 0.0)).expect("rotation");
                Camera::new(k, pose)
            })
            .collect()
    }
}

/// Rendered reference and sources, with ground truth for every view.
#[derive(Debug, Clone)]
pub struct OracleSequence {
    pub sequence: Sequence,
    pub views: Vec<RenderedView>,
}

impl OracleSequence {
    pub fn reference(&self) -> &RenderedView {
        &self.views[0]
    }

    /// The same sequence with the ground-truth residuals attached to each view.
    pub fn with_gt_residuals(&self) -> Sequence {
        let mut seq = self.sequence.clone();
        seq.reference.residual = Some(self.views[0].gt_residual.clone());
        for (s, v) in seq.sources.iter_mut().zip(&self.views[1..]) {
            s.residual = Some(v.gt_residual.clone());
        }
        seq
    }
}

/// Renders `views ≥ 2` cameras of `scene`.
pub fn render_sequence(scene: &SceneSpec, rig: &Rig, views: usize) -> Result<OracleSequence> {
    if views < 2 {
        return Err(Error::InvalidConfig("a sequence needs at least 2 views".into()));
    }
    let cams = rig.cameras(views);
    let rendered = cams
        .iter()
        .map(|c| render_view(scene, c, rig.height, rig.width))
        .collect::<Result<Vec<_>>>()?;
    let mk_view = |i: usize| View {
        image: rendered[i].image.clone(),
        camera: cams[i],
        residual: None,
    };
    let sequence = Sequence::new(
        mk_view(0),
        (1..views).map(mk_view).collect(),
        Some(rendered[0].gt_depth.clone()),
        Some(rendered[0].gt_specular_mask.clone()),
    )?;
    Ok(OracleSequence {
        sequence,
        views: rendered,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn hash_unit(seed: u64, i: i64, j: i64, c: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64 ^ splitmix(c))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64, c: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let (i, j) = (x0 as i64, y0 as i64);
    let v00 = hash_unit(seed, i, j, c);
    let v10 = hash_unit(seed, i + 1, j, c);
    let v01 = hash_unit(seed, i, j + 1, c);
    let v11 = hash_unit(seed, i + 1, j + 1, c);
    let top = v00 + (v10 - v00) * sx;
    let bottom = v01 + (v11 - v01) * sx;
    top + (bottom - top) * sy
}

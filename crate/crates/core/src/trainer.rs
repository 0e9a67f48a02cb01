//! Gradient-descent fit of a per-pixel inverse-depth field and per-view
//! log-residual fields against the full loss
//! `L_itr + M_R ⊙ M ⊙ E_I + λ_s · smoothness`.
//!
//! Inverse depth is `q = q_lo + (q_hi - q_lo) · sigmoid(θ)` with
//! `q ∈ [1/d_max, 1/d_min]`. Diffuse images are always the pseudo-diffuse
//! `L' = I / R`. Masks are recomputed at every step and treated as constants.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::Pose;
use crate::error::{Error, Result};
use crate::geometry::{sample_grid, sample_grid_adjoint, PixelGrid, Warped};
use crate::image::{BinaryMask, DepthMap, Domain, ImageBuffer, DEPTH_MAX, DEPTH_MIN, LOG_EPS, RESIDUAL_MAX};
use crate::intrinsic::{contrastive_loss_with_grad, log_l1_with_grad, DistanceNorm, IntrinsicLossWeights};
use crate::manifest::Sequence;
use crate::photometric::{
    auto_mask_from_errors, min_reprojection, min_reprojection_indexed, photometric_error, photometric_error_backward,
    smoothness_with_grad, DEFAULT_ALPHA, SMOOTHNESS_WEIGHT,
};
use crate::reflection::{masked_depth_weights, reflection_mask_detailed};
use crate::synthetic::hash_unit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthInit {
    /// Best constant depth over log-spaced candidates.
    Sweep,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    /// Step size for the inverse-depth field.
    pub learning_rate: f64,
    /// Step size for the residual fields; `None` uses `learning_rate`.
    pub residual_learning_rate: Option<f64>,
    pub use_reflection_mask: bool,
    pub use_auto_mask: bool,
    pub use_contrastive: bool,
    pub alpha: f64,
    pub weights: IntrinsicLossWeights,
    pub smoothness_weight: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Margin of the reflection mask during fitting.
    pub mask_margin: f64,
    pub distance_norm: DistanceNorm,
    pub depth_init: DepthInit,
    /// Uniform perturbation of the initial θ, drawn from `seed`.
    pub init_jitter: f64,
    /// Optimize the residual fields (otherwise they stay at their initial value).
    pub fit_residual: bool,
    /// Residual control-grid spacing in pixels; 1 is per-pixel.
    pub residual_grid: usize,
    /// Let intrinsic losses send gradients into depth through the warp.
    pub intrinsic_to_depth: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 1e-4,
            residual_learning_rate: None,
            use_reflection_mask: true,
            use_auto_mask: true,
            use_contrastive: true,
            alpha: DEFAULT_ALPHA,
            weights: IntrinsicLossWeights::default(),
            smoothness_weight: SMOOTHNESS_WEIGHT,
            depth_min: DEPTH_MIN,
            depth_max: DEPTH_MAX,
            mask_margin: 0.0,
            distance_norm: DistanceNorm::PerPixel,
            depth_init: DepthInit::Sweep,
            init_jitter: 0.0,
            fit_residual: true,
            residual_grid: 1,
            intrinsic_to_depth: false,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let positive = |r: f64| r > 0.0 && r.is_finite();
        if !positive(self.learning_rate) || self.residual_learning_rate.is_some_and(|r| !positive(r)) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad(format!("bad depth bounds [{}, {}]", self.depth_min, self.depth_max));
        }
        if !(self.mask_margin >= 0.0) || !(self.smoothness_weight >= 0.0) || !(self.init_jitter >= 0.0) {
            return bad("margin, smoothness weight and jitter must be >= 0".into());
        }
        if self.residual_grid == 0 {
            return bad("residual_grid must be >= 1".into());
        }
        if let DepthInit::Constant(d) = self.depth_init {
            if !(d >= self.depth_min && d <= self.depth_max) {
                return bad(format!("initial depth {d} outside bounds"));
            }
        }
        Ok(())
    }

    fn residual_lr(&self) -> f64 {
        self.residual_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// Single-channel log-residual, either per pixel or bilinearly interpolated
/// from a coarse control grid. Values stay in `[ln ε, ln RESIDUAL_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    height: usize,
    width: usize,
    stride: usize,
    grid_h: usize,
    grid_w: usize,
    values: Vec<f64>,
}

impl ResidualField {
    /// `R = 1` everywhere.
    pub fn new(height: usize, width: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        let grid_h = (height - 1).div_ceil(stride) + 1;
        let grid_w = (width - 1).div_ceil(stride) + 1;
        Self {
            height,
            width,
            stride,
            grid_h,
            grid_w,
            values: vec![0.0; grid_h * grid_w],
        }
    }

    /// Per-pixel field holding `ln R` of a linear residual image.
    pub fn from_residual(residual: &ImageBuffer) -> Result<Self> {
        if residual.channels() != 1 {
            return Err(Error::Format("residual must be single-channel".into()));
        }
        let (h, w) = residual.dims();
        let mut f = Self::new(h, w, 1);
        f.values = residual
            .data()
            .iter()
            .map(|&r| r.clamp(LOG_EPS, RESIDUAL_MAX).ln())
            .collect();
        Ok(f)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Control values (per pixel when the stride is 1).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn node_weights(&self, y: usize, x: usize) -> [(usize, f64); 4] {
        let s = self.stride as f64;
        let (gy, gx) = (y as f64 / s, x as f64 / s);
        let (y0, x0) = (
            (gy.floor() as usize).min(self.grid_h - 1),
            (gx.floor() as usize).min(self.grid_w - 1),
        );
        let (y1, x1) = ((y0 + 1).min(self.grid_h - 1), (x0 + 1).min(self.grid_w - 1));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let g = self.grid_w;
        [
            (y0 * g + x0, (1.0 - fy) * (1.0 - fx)),
            (y0 * g + x1, (1.0 - fy) * fx),
            (y1 * g + x0, fy * (1.0 - fx)),
            (y1 * g + x1, fy * fx),
        ]
    }

    /// `ln R` per pixel.
    pub fn log_residual(&self) -> Vec<f64> {
        if self.stride == 1 {
            return self.values.clone();
        }
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.node_weights(y, x).iter().map(|&(i, w)| w * self.values[i]).sum());
            }
        }
        out
    }

    /// Linear residual image.
    pub fn to_image(&self) -> ImageBuffer {
        let data = self.log_residual().into_iter().map(f64::exp).collect();
        ImageBuffer::new(self.height, self.width, 1, data, Domain::Linear).expect("finite residual")
    }

    /// Gradient on the control values from a per-pixel gradient.
    fn pullback(&self, g: &[f64]) -> Vec<f64> {
        if self.stride == 1 {
            return g.to_vec();
        }
        let mut out = vec![0.0; self.values.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let gp = g[y * self.width + x];
                for (i, w) in self.node_weights(y, x) {
                    out[i] += w * gp;
                }
            }
        }
        out
    }

    fn step(&mut self, grad: &[f64], lr: f64) {
        let (lo, hi) = (LOG_EPS.ln(), RESIDUAL_MAX.ln());
        let g = self.pullback(grad);
        for (v, g) in self.values.iter_mut().zip(g) {
            *v = (*v - lr * g).clamp(lo, hi);
        }
    }
}

/// Losses at one step, evaluated before that step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub depth: f64,
    pub recon: f64,
    pub cross: f64,
    pub cts: f64,
    pub total: f64,
    pub masked_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub depth: DepthMap,
    /// Reference first, then sources.
    pub residuals: Vec<ResidualField>,
    pub trace: Vec<TraceRow>,
    /// Reflection mask at the final parameters (all ones when disabled).
    pub reflection_mask: BinaryMask,
}

impl FitResult {
    /// Pseudo-diffuse images `I / R` of every view at the final residuals.
    pub fn diffuse(&self, seq: &Sequence) -> Vec<ImageBuffer> {
        std::iter::once(&seq.reference)
            .chain(&seq.sources)
            .zip(&self.residuals)
            .map(|(v, r)| pseudo(&v.image, &r.log_residual()).0)
            .collect()
    }
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,L_depth,L_recon,L_cross,L_cts,L_total,masked_fraction\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.depth, r.recon, r.cross, r.cts, r.total, r.masked_fraction
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Fits one sequence. Residuals start from the frames' residuals when every
/// frame carries one (per-pixel grid), else from `R = 1`.
pub fn fit_depth(seq: &Sequence, cfg: &FitConfig) -> Result<FitResult> {
    Ok(fit_batch(std::slice::from_ref(seq), cfg)?.remove(0))
}

/// Fits several sequences jointly; the contrastive loss couples them.
pub fn fit_batch(seqs: &[Sequence], cfg: &FitConfig) -> Result<Vec<FitResult>> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::EmptyList);
    }
    let n_src = seqs[0].sources.len();
    if seqs
        .iter()
        .any(|s| s.sources.len() != n_src || s.dims() != seqs[0].dims())
    {
        return Err(Error::InvalidConfig(
            "batched sequences need equal sizes and source counts".into(),
        ));
    }
    let mut states = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| SceneState::new(s, cfg, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut traces = vec![Vec::with_capacity(cfg.steps); seqs.len()];

    for step in 0..cfg.steps {
        let mut evals = states.iter().map(|s| s.evaluate(cfg)).collect::<Result<Vec<_>>>()?;
        let cts = apply_contrastive(&states, &mut evals, cfg)?;
        for ((state, ev), trace) in states.iter_mut().zip(&evals).zip(&mut traces) {
            let total = ev.depth_loss
                + cfg.weights.recon * ev.recon
                + cfg.weights.cross * ev.cross
                + cfg.weights.cts * cts
                + cfg.smoothness_weight * ev.smooth;
            if !total.is_finite() {
                return Err(Error::DivergenceDetected { step });
            }
            trace.push(TraceRow {
                step,
                depth: ev.depth_loss,
                recon: ev.recon,
                cross: ev.cross,
                cts,
                total,
                masked_fraction: ev.masked_fraction,
            });
            state.update(ev, cfg, step)?;
        }
    }

    states
        .iter()
        .zip(traces)
        .map(|(s, trace)| {
            let ev = s.evaluate(cfg)?;
            Ok(FitResult {
                depth: s.depth_map(),
                residuals: s.residuals.clone(),
                trace,
                reflection_mask: ev.reflection_mask,
            })
        })
        .collect()
}

/// Mean photometric error of `seq` warped at a constant depth.
fn constant_depth_error(seq: &Sequence, poses: &[Pose], depth: f64, alpha: f64) -> Result<f64> {
    let (h, w) = seq.dims();
    let d = DepthMap::filled(h, w, depth);
    let k_ref = seq.reference.camera.intrinsics;
    let errors = seq
        .sources
        .iter()
        .zip(poses)
        .map(|(s, pose)| {
            let grid = PixelGrid::new(&d, &k_ref, &s.camera.intrinsics, pose);
            let warped = sample_grid(&s.image, &grid)?;
            photometric_error(&seq.reference.image, &warped.image, &warped.valid, alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(min_reprojection(&errors)?.valid_mean().unwrap_or(f64::INFINITY))
}

const SWEEP_CANDIDATES: usize = 64;

fn sweep_depth(seq: &Sequence, poses: &[Pose], cfg: &FitConfig) -> Result<f64> {
    let (lo, hi) = (cfg.depth_min.ln(), cfg.depth_max.ln());
    let mut best = (f64::INFINITY, cfg.depth_min);
    for i in 0..SWEEP_CANDIDATES {
        let d = (lo + (hi - lo) * i as f64 / (SWEEP_CANDIDATES - 1) as f64).exp();
        let e = constant_depth_error(seq, poses, d, cfg.alpha)?;
        if e < best.0 {
            best = (e, d);
        }
    }
    Ok(best.1)
}

/// `(L', dL'/dρ)` for an image and per-pixel log-residual.
fn pseudo(image: &ImageBuffer, log_r: &[f64]) -> (ImageBuffer, Vec<f64>) {
    let ch = image.channels();
    let mut out = Vec::with_capacity(image.data().len());
    let mut deriv = Vec::with_capacity(image.data().len());
    for (p, px) in image.data().chunks_exact(ch).enumerate() {
        let r = log_r[p].exp();
        for &i in px {
            let raw = i.clamp(LOG_EPS, 1.0) / r;
            let l = raw.clamp(LOG_EPS, 1.0);
            out.push(l);
            deriv.push(if raw > LOG_EPS && raw < 1.0 { -l } else { 0.0 });
        }
    }
    (image.with_data(out, Domain::Linear), deriv)
}

fn log_clamped(data: &[f64]) -> Vec<f64> {
    data.iter().map(|v| v.clamp(LOG_EPS, 1.0).ln()).collect()
}

struct SceneState<'a> {
    seq: &'a Sequence,
    poses: Vec<Pose>,
    log_images: Vec<Vec<f64>>,
    identity: crate::photometric::ErrorMap,
    theta: Vec<f64>,
    residuals: Vec<ResidualField>,
    q_lo: f64,
    q_hi: f64,
}

struct Evaluation {
    depth_loss: f64,
    recon: f64,
    cross: f64,
    smooth: f64,
    masked_fraction: f64,
    reflection_mask: BinaryMask,
    auto_mask: BinaryMask,
    /// dL/d depth from everything but smoothness.
    g_depth: Vec<f64>,
    /// dL/d ln R per view.
    g_rho: Vec<Vec<f64>>,
    diffuse: Vec<(ImageBuffer, Vec<f64>)>,
    grids: Vec<PixelGrid>,
    warped_diffuse: Vec<Warped>,
}

impl<'a> SceneState<'a> {
    fn new(seq: &'a Sequence, cfg: &FitConfig, index: u64) -> Result<Self> {
        let (h, w) = seq.dims();
        let poses = seq.relative_poses();
        if poses.iter().any(|p| p.translation.norm() == 0.0) {
            return Err(Error::InvalidConfig("every source needs a nonzero baseline".into()));
        }
        let views: Vec<_> = std::iter::once(&seq.reference).chain(&seq.sources).collect();
        let log_images = views.iter().map(|v| log_clamped(v.image.data())).collect();
        let all = BinaryMask::filled(h, w, true);
        let identity = min_reprojection(
            &seq.sources
                .iter()
                .map(|s| photometric_error(&seq.reference.image, &s.image, &all, cfg.alpha))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let residuals = if views.iter().all(|v| v.residual.is_some()) {
            views
                .iter()
                .map(|v| ResidualField::from_residual(v.residual.as_ref().expect("checked")))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![ResidualField::new(h, w, cfg.residual_grid); views.len()]
        };
        let d0 = match cfg.depth_init {
            DepthInit::Constant(d) => d,
            DepthInit::Sweep => sweep_depth(seq, &poses, cfg)?,
        };
        let (q_lo, q_hi) = (1.0 / cfg.depth_max, 1.0 / cfg.depth_min);
        let s = ((1.0 / d0 - q_lo) / (q_hi - q_lo)).clamp(1e-9, 1.0 - 1e-9);
        let t0 = (s / (1.0 - s)).ln();
        let theta = (0..h * w)
            .map(|p| {
                let u = hash_unit(cfg.seed, index as i64, p as i64, 0x7e7a);
                t0 + cfg.init_jitter * (2.0 * u - 1.0)
            })
            .collect();
        Ok(Self {
            seq,
            poses,
            log_images,
            identity,
            theta,
            residuals,
            q_lo,
            q_hi,
        })
    }

    fn sigmoid(t: f64) -> f64 {
        1.0 / (1.0 + (-t).exp())
    }

    fn inverse_depth(&self) -> Vec<f64> {
        self.theta
            .iter()
            .map(|&t| self.q_lo + (self.q_hi - self.q_lo) * Self::sigmoid(t))
            .collect()
    }

    fn depth_map(&self) -> DepthMap {
        let (h, w) = self.seq.dims();
        DepthMap::new(h, w, self.inverse_depth().iter().map(|q| 1.0 / q).collect()).expect("finite depth")
    }

    fn evaluate(&self, cfg: &FitConfig) -> Result<Evaluation> {
        let seq = self.seq;
        let (h, w) = seq.dims();
        let npx = h * w;
        let ch = seq.reference.image.channels();
        let k_ref = seq.reference.camera.intrinsics;
        let depth = self.depth_map();
        let reference = &seq.reference.image;
        let views: Vec<_> = std::iter::once(&seq.reference).chain(&seq.sources).collect();
        let log_r: Vec<Vec<f64>> = self.residuals.iter().map(|r| r.log_residual()).collect();
        let diffuse: Vec<(ImageBuffer, Vec<f64>)> =
            views.iter().zip(&log_r).map(|(v, r)| pseudo(&v.image, r)).collect();
        let mut g_rho = vec![vec![0.0; npx]; views.len()];
        let mut g_depth = vec![0.0; npx];

        // reconstruction, averaged over views
        let all = vec![true; npx];
        let mut recon = 0.0;
        let nv = views.len() as f64;
        for (v, ((l, dl), lr)) in diffuse.iter().zip(&log_r).enumerate() {
            let (loss, g_l, g_r) = log_l1_with_grad(&self.log_images[v], &log_clamped(l.data()), lr, ch, &all)?;
            recon += loss / nv;
            for p in 0..npx {
                let mut g = g_r[p];
                for c in 0..ch {
                    // d ln L'/dρ = -1 where unclamped
                    if dl[p * ch + c] != 0.0 {
                        g -= g_l[p * ch + c];
                    }
                }
                g_rho[v][p] += cfg.weights.recon * g / nv;
            }
        }

        // warps
        let grids: Vec<PixelGrid> = seq
            .sources
            .iter()
            .zip(&self.poses)
            .map(|(s, pose)| PixelGrid::new(&depth, &k_ref, &s.camera.intrinsics, pose))
            .collect();
        let warped_images = seq
            .sources
            .iter()
            .zip(&grids)
            .map(|(s, g)| sample_grid(&s.image, g))
            .collect::<Result<Vec<_>>>()?;
        let warped_diffuse = diffuse[1..]
            .iter()
            .zip(&grids)
            .map(|((l, _), g)| sample_grid(l, g))
            .collect::<Result<Vec<_>>>()?;

        // cross reconstruction, averaged over sources
        let ns = seq.sources.len() as f64;
        let mut cross = 0.0;
        for (k, wd) in warped_diffuse.iter().enumerate() {
            let (loss, g_lw, g_r) = log_l1_with_grad(
                &self.log_images[0],
                &log_clamped(wd.image.data()),
                &log_r[0],
                ch,
                wd.valid.data(),
            )?;
            cross += loss / ns;
            let scale = cfg.weights.cross / ns;
            for p in 0..npx {
                g_rho[0][p] += scale * g_r[p];
            }
            // d ln(x)/dx on the warped diffuse
            let g_lin: Vec<f64> = g_lw
                .iter()
                .zip(wd.image.data())
                .map(|(g, &x)| if x > LOG_EPS && x < 1.0 { scale * g / x } else { 0.0 })
                .collect();
            self.backprop_warped_diffuse(k, &g_lin, wd, &grids[k], &diffuse, &mut g_rho, &mut g_depth, cfg);
        }

        // depth term
        let errors = warped_images
            .iter()
            .map(|wi| photometric_error(reference, &wi.image, &wi.valid, cfg.alpha))
            .collect::<Result<Vec<_>>>()?;
        let fused = min_reprojection_indexed(&errors)?;
        let m_auto = if cfg.use_auto_mask {
            auto_mask_from_errors(&fused.error, &self.identity)?
        } else {
            BinaryMask::filled(h, w, true)
        };
        let (m_r, masked_fraction) = if cfg.use_reflection_mask {
            let e_l = min_reprojection(
                &warped_diffuse
                    .iter()
                    .map(|wd| photometric_error(&diffuse[0].0, &wd.image, &wd.valid, cfg.alpha))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let rm = reflection_mask_detailed(&fused.error, &e_l, cfg.mask_margin)?;
            let frac = rm.masked_fraction();
            (rm.mask, frac)
        } else {
            (BinaryMask::filled(h, w, true), 0.0)
        };
        let (depth_loss, weights) = masked_depth_weights(&fused.error, &m_r, &m_auto)?;
        for (k, wi) in warped_images.iter().enumerate() {
            let upstream: Vec<f64> = (0..npx)
                .map(|p| if fused.source[p] == Some(k) { weights[p] } else { 0.0 })
                .collect();
            if upstream.iter().all(|&u| u == 0.0) {
                continue;
            }
            let g_w = photometric_error_backward(reference, &wi.image, &wi.valid, cfg.alpha, &upstream)?;
            for p in 0..npx {
                for c in 0..ch {
                    g_depth[p] += g_w[p * ch + c] * wi.d_depth[p * ch + c];
                }
            }
        }

        let q = self.inverse_depth();
        let (smooth, _) = smoothness_with_grad(&q, reference)?;

        Ok(Evaluation {
            depth_loss,
            recon,
            cross,
            smooth,
            masked_fraction,
            reflection_mask: m_r,
            auto_mask: m_auto,
            g_depth,
            g_rho,
            diffuse,
            grids,
            warped_diffuse,
        })
    }

    /// Routes a gradient on warped source diffuse `k` to its residual and,
    /// when enabled, to depth.
    #[allow(clippy::too_many_arguments)]
    fn backprop_warped_diffuse(
        &self,
        k: usize,
        g_lin: &[f64],
        warped: &Warped,
        grid: &PixelGrid,
        diffuse: &[(ImageBuffer, Vec<f64>)],
        g_rho: &mut [Vec<f64>],
        g_depth: &mut [f64],
        cfg: &FitConfig,
    ) {
        let ch = warped.image.channels();
        let g_src = sample_grid_adjoint(grid, g_lin, ch);
        let dl = &diffuse[k + 1].1;
        for (p, g) in g_rho[k + 1].iter_mut().enumerate() {
            for c in 0..ch {
                *g += g_src[p * ch + c] * dl[p * ch + c];
            }
        }
        if cfg.intrinsic_to_depth {
            for (p, g) in g_depth.iter_mut().enumerate() {
                for c in 0..ch {
                    *g += g_lin[p * ch + c] * warped.d_depth[p * ch + c];
                }
            }
        }
    }

    fn update(&mut self, ev: &Evaluation, cfg: &FitConfig, step: usize) -> Result<()> {
        let q = self.inverse_depth();
        let (_, g_smooth) = smoothness_with_grad(&q, &self.seq.reference.image)?;
        let span = self.q_hi - self.q_lo;
        let mut g_theta = Vec::with_capacity(q.len());
        for p in 0..q.len() {
            // depth = 1/q
            let g_q = cfg.smoothness_weight * g_smooth[p] - ev.g_depth[p] / (q[p] * q[p]);
            let s = Self::sigmoid(self.theta[p]);
            g_theta.push(g_q * span * s * (1.0 - s));
        }
        let finite = |g: &[f64]| g.iter().all(|v| v.is_finite());
        if !finite(&g_theta) || !ev.g_rho.iter().all(|g| finite(g)) {
            return Err(Error::DivergenceDetected { step });
        }
        for (t, g) in self.theta.iter_mut().zip(&g_theta) {
            *t -= cfg.learning_rate * g;
        }
        if !finite(&self.theta) {
            return Err(Error::DivergenceDetected { step });
        }
        if cfg.fit_residual {
            for (r, g) in self.residuals.iter_mut().zip(&ev.g_rho) {
                r.step(g, cfg.residual_lr());
            }
        }
        Ok(())
    }
}

/// Adds the contrastive loss (averaged over source slots) to every scene's
/// gradients and returns its value.
fn apply_contrastive(states: &[SceneState], evals: &mut [Evaluation], cfg: &FitConfig) -> Result<f64> {
    if !cfg.use_contrastive || states.len() < 2 {
        return Ok(0.0);
    }
    let n_src = states[0].seq.sources.len();
    let mut total = 0.0;
    for k in 0..n_src {
        let batch: Vec<(ImageBuffer, ImageBuffer)> = evals
            .iter()
            .map(|e| (e.warped_diffuse[k].image.clone(), e.diffuse[0].0.clone()))
            .collect();
        let (loss, g_warped, g_ref) = contrastive_loss_with_grad(&batch, cfg.weights.cts_margin, cfg.distance_norm)?;
        total += loss / n_src as f64;
        let scale = cfg.weights.cts / n_src as f64;
        for (i, (state, ev)) in states.iter().zip(evals.iter_mut()).enumerate() {
            let g_lin: Vec<f64> = g_warped[i].iter().map(|g| g * scale).collect();
            let (warped, grid) = (ev.warped_diffuse[k].clone(), ev.grids[k].clone());
            let diffuse = std::mem::take(&mut ev.diffuse);
            state.backprop_warped_diffuse(k, &g_lin, &warped, &grid, &diffuse, &mut ev.g_rho, &mut ev.g_depth, cfg);
            let ch = diffuse[0].0.channels();
            for (p, g) in ev.g_rho[0].iter_mut().enumerate() {
                for c in 0..ch {
                    *g += scale * g_ref[i][p * ch + c] * diffuse[0].1[p * ch + c];
                }
            }
            ev.diffuse = diffuse;
        }
    }
    Ok(total)
}

/// Parameters and gradient hooks shared with the gradient checker.
pub(crate) mod internals {
    use super::*;

    /// Masked depth loss as a function of θ with masks frozen at `theta0`.
    pub struct FrozenDepthObjective<'a> {
        state: SceneState<'a>,
        cfg: FitConfig,
        m_r: BinaryMask,
        m_auto: BinaryMask,
    }

    impl<'a> FrozenDepthObjective<'a> {
        pub fn new(seq: &'a Sequence, cfg: &FitConfig) -> Result<Self> {
            let state = SceneState::new(seq, cfg, 0)?;
            let ev = state.evaluate(cfg)?;
            Ok(Self {
                state,
                cfg: *cfg,
                m_r: ev.reflection_mask,
                m_auto: ev.auto_mask,
            })
        }

        pub fn theta(&self) -> Vec<f64> {
            self.state.theta.clone()
        }

        /// Depth loss plus weighted smoothness and its θ-gradient.
        pub fn eval(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            self.state.theta = theta.to_vec();
            let seq = self.state.seq;
            let cfg = &self.cfg;
            let depth = self.state.depth_map();
            let k_ref = seq.reference.camera.intrinsics;
            let reference = &seq.reference.image;
            let npx = theta.len();
            let ch = reference.channels();
            let warped = seq
                .sources
                .iter()
                .zip(&self.state.poses)
                .map(|(s, pose)| sample_grid(&s.image, &PixelGrid::new(&depth, &k_ref, &s.camera.intrinsics, pose)))
                .collect::<Result<Vec<_>>>()?;
            let errors = warped
                .iter()
                .map(|wi| photometric_error(reference, &wi.image, &wi.valid, cfg.alpha))
                .collect::<Result<Vec<_>>>()?;
            let fused = min_reprojection_indexed(&errors)?;
            let (loss, weights) = masked_depth_weights(&fused.error, &self.m_r, &self.m_auto)?;
            let mut g_depth = vec![0.0; npx];
            for (k, wi) in warped.iter().enumerate() {
                let upstream: Vec<f64> = (0..npx)
                    .map(|p| if fused.source[p] == Some(k) { weights[p] } else { 0.0 })
                    .collect();
                let g_w = photometric_error_backward(reference, &wi.image, &wi.valid, cfg.alpha, &upstream)?;
                for p in 0..npx {
                    for c in 0..ch {
                        g_depth[p] += g_w[p * ch + c] * wi.d_depth[p * ch + c];
                    }
                }
            }
            let q = self.state.inverse_depth();
            let (smooth, g_smooth) = smoothness_with_grad(&q, reference)?;
            let span = self.state.q_hi - self.state.q_lo;
            let grad = (0..npx)
                .map(|p| {
                    let g_q = cfg.smoothness_weight * g_smooth[p] - g_depth[p] / (q[p] * q[p]);
                    let s = SceneState::sigmoid(theta[p]);
                    g_q * span * s * (1.0 - s)
                })
                .collect();
            Ok((loss + cfg.smoothness_weight * smooth, grad))
        }
    }
}

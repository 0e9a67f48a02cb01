//! `reflectdepth` command line.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_all, DEFAULT_SAMPLES, DEFAULT_STEP};
use crate::image::{DEPTH_MAX, DEPTH_MIN};
use crate::io;
use crate::manifest::{FrameRecord, Sequence, SequenceManifest};
use crate::metrics::depth_metrics;
use crate::photometric::DEFAULT_ALPHA;
use crate::pipeline::{sequence_reflection_mask, warp_sources};
use crate::reflection::MahalanobisMap;
use crate::synthetic::{render_sequence, Rig, SceneSpec};
use crate::trainer::{fit_batch, write_trace_csv, FitConfig};

#[derive(Debug, Parser)]
#[command(
    name = "reflectdepth",
    version,
    about = "Reflection-aware depth losses on posed image sequences"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render an oracle sequence with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Specular strength in [0, 1].
        #[arg(long, default_value_t = 0.8)]
        specular: f64,
        /// Number of views including the reference.
        #[arg(long, default_value_t = 3)]
        views: usize,
    },
    /// Warp every source into the reference at the given depth.
    Warp {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error maps and reflection mask at the given depth and residuals.
    Mask {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// Residual PFM; once for the reference only, or once per view
        /// (reference first). Views without one use the manifest's or R = 1.
        #[arg(long, required = true)]
        residual: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit depth and residuals; several manifests are fitted as one batch.
    Fit {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_reflection_mask: bool,
        #[arg(long)]
        no_cts: bool,
    },
    /// Pseudo-depth fusion: `org` where the mask is 1, `refl` where it is 0.
    Fuse {
        #[arg(long)]
        org: PathBuf,
        #[arg(long)]
        refl: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth metrics of a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        report(&e);
        return 1;
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            1
        }
    }
}

fn report(e: &Error) {
    let msg = serde_json::json!({"error": e.kind(), "message": e.to_string()});
    eprintln!("{msg}");
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("REFLECTDEPTH_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::InvalidConfig(format!("REFLECTDEPTH_THREADS must be a positive integer, got {v:?}"))
        })?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            seed,
            specular,
            views,
        } => synth(&out, seed, specular, views),
        Command::Warp { manifest, depth, out } => {
            let seq = SequenceManifest::load(&manifest)?.load_sequence()?;
            let depth = io::read_depth_pfm(&depth)?;
            create_dir(&out)?;
            for (k, (img, valid)) in warp_sources(&seq, &depth)?.iter().enumerate() {
                io::write_png(out.join(format!("warped_{}.png", k + 1)), img)?;
                io::write_mask_png(out.join(format!("valid_{}.png", k + 1)), valid)?;
            }
            Ok(())
        }
        Command::Mask {
            manifest,
            depth,
            residual,
            margin,
            out,
        } => mask(&manifest, &depth, &residual, margin, &out),
        Command::Fit {
            manifest,
            config,
            out,
            no_reflection_mask,
            no_cts,
        } => fit(&manifest, config.as_deref(), &out, no_reflection_mask, no_cts),
        Command::Fuse { org, refl, mask, out } => {
            let fused = crate::distill::fuse_pseudo_depth(
                &io::read_depth_pfm(&org)?,
                &io::read_depth_pfm(&refl)?,
                &io::read_mask_png(&mask)?,
            )?;
            io::write_depth_pfm(&out, &fused)
        }
        Command::Eval { pred, gt, out } => {
            let m = depth_metrics(
                &io::read_depth_pfm(&pred)?,
                &io::read_depth_pfm(&gt)?,
                DEPTH_MIN,
                DEPTH_MAX,
            )?;
            write_json(&out, &m)
        }
        Command::Gradcheck { seed, samples, step } => {
            for r in grad_check_all(seed, step, samples)? {
                println!(
                    "{:<17} max_rel_error {:.3e}  checked {}  skipped {}",
                    r.loss.name(),
                    r.max_rel_error,
                    r.checked,
                    r.skipped
                );
            }
            Ok(())
        }
    }
}

fn synth(out: &Path, seed: u64, specular: f64, views: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&specular) {
        return Err(Error::InvalidConfig(format!(
            "specular must be in [0, 1], got {specular}"
        )));
    }
    let scene = SceneSpec::default().with_seed(seed).with_specular_strength(specular);
    let rig = Rig::default();
    let oracle = render_sequence(&scene, &rig, views)?;
    create_dir(out)?;
    let cams = rig.cameras(views);
    let mut records = Vec::with_capacity(views);
    for (i, (view, cam)) in oracle.views.iter().zip(&cams).enumerate() {
        let name = if i == 0 { "ref".to_string() } else { format!("src_{i}") };
        io::write_png(out.join(format!("{name}.png")), &view.image)?;
        io::write_pfm(out.join(format!("{name}_residual.pfm")), &view.gt_residual)?;
        io::write_pfm(out.join(format!("{name}_diffuse.pfm")), &view.gt_diffuse)?;
        records.push(FrameRecord::new(format!("{name}.png"), cam));
    }
    let reference = oracle.reference();
    io::write_depth_pfm(out.join("gt_depth.pfm"), &reference.gt_depth)?;
    io::write_mask_png(out.join("gt_mask.png"), &reference.gt_specular_mask)?;
    let mut records = records.into_iter();
    let manifest = SequenceManifest {
        reference: records.next().expect("reference"),
        sources: records.collect(),
        gt_depth: Some("gt_depth.pfm".into()),
        gt_mask: Some("gt_mask.png".into()),
        base_dir: out.to_path_buf(),
    };
    manifest.save(out.join("manifest.json"))?;
    write_json(
        &out.join("scene.json"),
        &serde_json::json!({"scene": scene, "rig": rig}),
    )
}

#[derive(Serialize)]
struct Histogram {
    edges: Vec<f64>,
    counts: Vec<usize>,
}

const HIST_BINS: usize = 20;

fn histogram(z: &MahalanobisMap) -> Histogram {
    let vals: Vec<f64> =
        z.z.iter()
            .zip(z.valid.data())
            .filter(|(_, &v)| v)
            .map(|(&z, _)| z)
            .collect();
    let hi = vals.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let width = hi / HIST_BINS as f64;
    let mut counts = vec![0; HIST_BINS];
    for v in vals {
        counts[((v / width) as usize).min(HIST_BINS - 1)] += 1;
    }
    Histogram {
        edges: (0..=HIST_BINS).map(|i| i as f64 * width).collect(),
        counts,
    }
}

fn mask(manifest: &Path, depth: &Path, residuals: &[PathBuf], margin: f64, out: &Path) -> Result<()> {
    let mut seq = SequenceManifest::load(manifest)?.load_sequence()?;
    let n_views = seq.sources.len() + 1;
    if residuals.len() != 1 && residuals.len() != n_views {
        return Err(Error::InvalidConfig(format!(
            "expected 1 or {n_views} residuals, got {}",
            residuals.len()
        )));
    }
    let loaded = residuals.iter().map(io::read_pfm).collect::<Result<Vec<_>>>()?;
    attach_residuals(&mut seq, loaded);
    let depth = io::read_depth_pfm(depth)?;
    let (maps, rm) = sequence_reflection_mask(&seq, &depth, DEFAULT_ALPHA, margin)?;
    create_dir(out)?;
    io::write_pfm(out.join("e_image.pfm"), &maps.image.to_image())?;
    io::write_pfm(out.join("e_diffuse.pfm"), &maps.diffuse.to_image())?;
    io::write_mask_png(out.join("mask.png"), &rm.mask)?;
    let stats = serde_json::json!({
        "margin": margin,
        "masked_fraction": rm.masked_fraction(),
        "flagged_pixels": rm.mask.not().count_ones(),
        "valid_pixels": rm.z_image.valid.and(&rm.z_diffuse.valid)?.count_ones(),
        "image": {"mean": rm.z_image.stats.mean[0], "variance": rm.z_image.stats.covariance[0],
                  "degenerate": rm.z_image.degenerate, "z_histogram": histogram(&rm.z_image)},
        "diffuse": {"mean": rm.z_diffuse.stats.mean[0], "variance": rm.z_diffuse.stats.covariance[0],
                    "degenerate": rm.z_diffuse.degenerate, "z_histogram": histogram(&rm.z_diffuse)},
    });
    write_json(&out.join("stats.json"), &stats)
}

/// Residuals given on the command line override the manifest; views left
/// without one get `R = 1`.
fn attach_residuals(seq: &mut Sequence, loaded: Vec<crate::image::ImageBuffer>) {
    let (h, w) = seq.dims();
    let one = crate::intrinsic::constant_residual(h, w, 1.0);
    let mut it = loaded.into_iter();
    let views = std::iter::once(&mut seq.reference).chain(seq.sources.iter_mut());
    for v in views {
        if let Some(r) = it.next() {
            v.residual = Some(r);
        } else if v.residual.is_none() {
            v.residual = Some(one.clone());
        }
    }
}

fn fit(manifests: &[PathBuf], config: Option<&Path>, out: &Path, no_mask: bool, no_cts: bool) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<FitConfig>(&text)?
        }
        None => FitConfig::default(),
    };
    cfg.use_reflection_mask &= !no_mask;
    cfg.use_contrastive &= !no_cts;
    let seqs = manifests
        .iter()
        .map(|m| SequenceManifest::load(m)?.load_sequence())
        .collect::<Result<Vec<_>>>()?;
    // sequences take their residual initialisation from the manifest
    let results = fit_batch(&seqs, &cfg)?;
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    for (i, r) in results.iter().enumerate() {
        let dir = if results.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("scene_{i}"))
        };
        create_dir(&dir)?;
        io::write_depth_pfm(dir.join("depth.pfm"), &r.depth)?;
        io::write_mask_png(dir.join("mask.png"), &r.reflection_mask)?;
        write_trace_csv(dir.join("trace.csv"), &r.trace)?;
        for (k, res) in r.residuals.iter().enumerate() {
            io::write_pfm(dir.join(format!("residual_{k}.pfm")), &res.to_image())?;
        }
    }
    Ok(())
}

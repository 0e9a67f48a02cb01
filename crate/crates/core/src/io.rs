//! PNG and PFM raster I/O.
//!
//! 8-bit PNG samples are mapped to `[0, 1]` by `v / 255` with no gamma
//! handling. PFM files are written little-endian (negative scale) with rows
//! stored bottom-to-top, as the format prescribes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{ColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, DepthMap, Domain, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Png8,
    Pfm,
}

impl FrameFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(FrameFormat::Png8),
            "pfm" => Some(FrameFormat::Pfm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Image(ImageBuffer),
    Depth(DepthMap),
}

impl Frame {
    pub fn into_image(self) -> ImageBuffer {
        match self {
            Frame::Image(img) => img,
            Frame::Depth(d) => ImageBuffer::new(d.height(), d.width(), 1, d.data().to_vec(), Domain::Linear)
                .expect("depth maps are finite"),
        }
    }

    pub fn into_depth(self) -> Result<DepthMap> {
        match self {
            Frame::Depth(d) => Ok(d),
            Frame::Image(img) if img.channels() == 1 => {
                let (h, w) = img.dims();
                DepthMap::new(h, w, img.into_data())
            }
            Frame::Image(img) => Err(Error::Format(format!(
                "expected a single-channel raster, got {} channels",
                img.channels()
            ))),
        }
    }
}

/// Loads a raster. Single-channel PFMs come back as depth, everything else as images.
pub fn load_frame(path: impl AsRef<Path>, format: FrameFormat) -> Result<Frame> {
    let path = path.as_ref();
    match format {
        FrameFormat::Png8 => read_png(path).map(Frame::Image),
        FrameFormat::Pfm => {
            let img = read_pfm(path)?;
            if img.channels() == 1 {
                let (h, w) = img.dims();
                Ok(Frame::Depth(DepthMap::new(h, w, img.into_data())?))
            } else {
                Ok(Frame::Image(img))
            }
        }
    }
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = match decoded {
        image::DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        image::DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported PNG color type {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    ImageBuffer::new(h, w, channels, data, Domain::Linear)
}

/// Writes an 8-bit PNG. Linear samples are clamped to `[0, 1]` and rounded.
pub fn write_png(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = if img.channels() == 1 {
        ColorType::L8
    } else {
        ColorType::Rgb8
    };
    encode_png(path.as_ref(), &bytes, img.width(), img.height(), color)
}

/// Writes a mask as a grayscale PNG with values 0 and 255.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_png(path.as_ref(), &bytes, mask.width(), mask.height(), ColorType::L8)
}

/// Reads a grayscale mask PNG; samples ≥ 128 are 1.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = read_png(path)?;
    if img.channels() != 1 {
        return Err(Error::Format("mask PNG must be single-channel".into()));
    }
    let (h, w) = img.dims();
    BinaryMask::new(h, w, img.data().iter().map(|&v| v >= 0.5).collect())
}

fn encode_png(path: &Path, bytes: &[u8], width: usize, height: usize, color: ColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = image::codecs::png::PngEncoder::new(BufWriter::new(file));
    encoder
        .write_image(bytes, width as u32, height as u32, color.into())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(BufReader::new(file)).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_pfm(mut reader: impl BufRead) -> Result<ImageBuffer> {
    let header = read_token_line(&mut reader)?;
    let channels = match header.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    };
    let dims = read_token_line(&mut reader)?;
    let mut parts = dims.split_whitespace();
    let mut next_dim = || -> Result<usize> {
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PFM dimensions {dims:?}")))
    };
    let width = next_dim()?;
    let height = next_dim()?;
    let scale_line = read_token_line(&mut reader)?;
    let scale: f32 = scale_line
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {scale_line:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format(format!("bad PFM scale {scale}")));
    }
    let little_endian = scale < 0.0;

    let row_len = width * channels;
    let mut raw = vec![0u8; row_len * height * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated PFM payload".into()))?;

    let mut data = vec![0.0f64; row_len * height];
    for (file_row, chunk) in raw.chunks_exact(row_len * 4).enumerate() {
        let y = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let bytes = [b[0], b[1], b[2], b[3]];
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            data[y * row_len + i] = v as f64;
        }
    }
    ImageBuffer::new(height, width, channels, data, Domain::Linear)
}

fn read_token_line(reader: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    let n = reader
        .read_line(&mut line)
        .map_err(|e| Error::Format(format!("unreadable PFM header: {e}")))?;
    if n == 0 {
        return Err(Error::Format("truncated PFM header".into()));
    }
    Ok(line.trim().to_string())
}

pub fn write_pfm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_pfm(&mut w, img).map_err(|e| Error::io(path, e))
}

pub fn write_depth_pfm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let img = Frame::Depth(depth.clone()).into_image();
    write_pfm(path, &img)
}

pub fn read_depth_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    Frame::Image(read_pfm(path)?).into_depth()
}

pub fn encode_pfm(w: &mut impl Write, img: &ImageBuffer) -> std::io::Result<()> {
    let magic = if img.channels() == 3 { "PF" } else { "Pf" };
    write!(w, "{magic}\n{} {}\n-1.0\n", img.width(), img.height())?;
    let row_len = img.width() * img.channels();
    for y in (0..img.height()).rev() {
        for &v in &img.data()[y * row_len..(y + 1) * row_len] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

//! Raster containers shared by every stage of the pipeline.
//!
//! All buffers are immutable once built: operations hand back new buffers.
//! Pixel data is stored row-major and channel-interleaved (`HWC`).

use crate::error::{Error, Result};

/// Lower clamp applied before taking logarithms of linear intensities.
pub const LOG_EPS: f64 = 1e-4;

/// Upper bound on a residual factor. Residuals above 1 brighten a pixel
/// (a highlight); the bound leaves room for a specular strength of 1.
pub const RESIDUAL_MAX: f64 = 2.0;

/// Depth range in meters used for clamping predictions and filtering ground truth.
pub const DEPTH_MIN: f64 = 0.1;
pub const DEPTH_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    domain: Domain,
}

/// Result of moving an image into the log domain.
#[derive(Debug, Clone)]
pub struct LogImage {
    pub image: ImageBuffer,
    /// Number of samples that fell outside `[LOG_EPS, 1]` and were clamped.
    pub clamped: usize,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, domain: Domain) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(
                format!("{height}x{width}x{channels}"),
                format!("{} samples", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            domain,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| value)
    }

    /// Builds a linear-domain image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
            domain: Domain::Linear,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn domain(&self) -> Domain {
        self.domain
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Sample `c` at pixel `(y, x)`, broadcasting single-channel images.
    #[inline]
    pub fn get_broadcast(&self, y: usize, x: usize, c: usize) -> f64 {
        if self.channels == 1 {
            self.data[y * self.width + x]
        } else {
            self.get(y, x, c)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect(), self.domain)
    }

    pub(crate) fn with_data(&self, data: Vec<f64>, domain: Domain) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
            domain,
        }
    }

    /// Mean over channels at every pixel; returns a single-channel image.
    pub fn channel_mean(&self) -> Self {
        let c = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
            domain: self.domain,
        }
    }

    pub fn ensure_same_dims(&self, other: &ImageBuffer) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        self.ensure_same_dims(other)?;
        if self.channels != other.channels {
            return Err(Error::dims(
                format!("{} channels", self.channels),
                format!("{} channels", other.channels),
            ));
        }
        Ok(())
    }

    /// `ln(clamp(v, ε, 1))` per sample.
    pub fn to_log(&self) -> Result<LogImage> {
        if self.domain != Domain::Linear {
            return Err(Error::DomainMismatch { expected: "linear" });
        }
        let mut clamped = 0;
        let data = self
            .data
            .iter()
            .map(|&v| {
                if !(LOG_EPS..=1.0).contains(&v) {
                    clamped += 1;
                }
                v.clamp(LOG_EPS, 1.0).ln()
            })
            .collect();
        Ok(LogImage {
            image: self.with_data(data, Domain::Log),
            clamped,
        })
    }

    pub fn from_log(&self) -> Result<ImageBuffer> {
        if self.domain != Domain::Log {
            return Err(Error::DomainMismatch { expected: "log" });
        }
        let data = self.data.iter().map(|&v| v.exp()).collect();
        Ok(self.with_data(data, Domain::Linear))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Binary raster: `true` is 1, `false` is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(
                format!("{height}x{width}"),
                format!("{} samples", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize) -> u8 {
        self.get(y, x) as u8
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.ensure_same_dims(other.dims())?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        Ok(self.with_bits(data))
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.ensure_same_dims(other.dims())?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        Ok(self.with_bits(data))
    }

    pub fn not(&self) -> BinaryMask {
        self.with_bits(self.data.iter().map(|b| !b).collect())
    }

    fn with_bits(&self, data: Vec<bool>) -> BinaryMask {
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub(crate) fn ensure_same_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", dims.0, dims.1),
            ));
        }
        Ok(())
    }
}

/// Per-pixel metric depth.
///
/// Construction only requires finite samples: ground-truth maps routinely carry
/// holes (zeros) that evaluation filters out. Use [`DepthMap::check_bounds`]
/// where the `[DEPTH_MIN, DEPTH_MAX]` range is a precondition.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(
                format!("{height}x{width}"),
                format!("{} samples", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("depth map"));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn check_bounds(&self) -> Result<()> {
        match self.data.iter().find(|&&d| !(DEPTH_MIN..=DEPTH_MAX).contains(&d)) {
            Some(&value) => Err(Error::OutOfRangeDepth {
                value,
                min: DEPTH_MIN,
                max: DEPTH_MAX,
            }),
            None => Ok(()),
        }
    }

    pub fn clamped(&self, min: f64, max: f64) -> DepthMap {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|d| d.clamp(min, max)).collect(),
        }
    }

    pub fn ensure_same_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", dims.0, dims.1),
            ));
        }
        Ok(())
    }
}

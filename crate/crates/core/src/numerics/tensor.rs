use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// A `(row, col)` pixel coordinate.
pub type Pixel = (usize, usize);

/// Dense `height x width x channels` map stored row-major in `(h, w, c)` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatureMap")]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawFeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TryFrom<RawFeatureMap> for FeatureMap {
    type Error = Error;

    fn try_from(raw: RawFeatureMap) -> Result<Self> {
        FeatureMap::new(raw.height, raw.width, raw.channels, raw.data)
    }
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0 && channels > 0,
            Parameter,
            "feature map dimensions must be positive, got {height}x{width}x{channels}"
        );
        ensure!(
            data.len() == height * width * channels,
            Dimension,
            "feature map {height}x{width}x{channels} needs {} values, got {}",
            height * width * channels,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Parameter,
            "feature map contains non-finite values"
        );
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub(crate) fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn dot(&self, other: &FeatureMap) -> Result<f64> {
        ensure!(
            self.same_shape(other),
            Dimension,
            "inner product of {}x{}x{} and {}x{}x{} maps",
            self.height,
            self.width,
            self.channels,
            other.height,
            other.width,
            other.channels
        );
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Extracts a single channel as a score map.
    pub fn channel(&self, ch: usize) -> ScoreMap {
        assert!(ch < self.channels, "channel {ch} out of range");
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        ScoreMap {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Spatial size and channel counts of a convolution kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelShape {
    pub k: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl KernelShape {
    pub fn new(k: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        let shape = Self {
            k,
            in_channels,
            out_channels,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.k % 2 == 1,
            Parameter,
            "kernel size must be odd, got {}",
            self.k
        );
        ensure!(
            self.in_channels > 0 && self.out_channels > 0,
            Parameter,
            "kernel channel counts must be positive"
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.k * self.k * self.in_channels * self.out_channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Convolution weights in `(ky, kx, c_in, c_out)` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel")]
pub struct ConvKernel {
    shape: KernelShape,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawKernel {
    shape: KernelShape,
    data: Vec<f64>,
}

impl TryFrom<RawKernel> for ConvKernel {
    type Error = Error;

    fn try_from(raw: RawKernel) -> Result<Self> {
        ConvKernel::new(raw.shape, raw.data)
    }
}

impl ConvKernel {
    pub fn new(shape: KernelShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        ensure!(
            data.len() == shape.len(),
            Dimension,
            "kernel {}x{}x{}x{} needs {} values, got {}",
            shape.k,
            shape.k,
            shape.in_channels,
            shape.out_channels,
            shape.len(),
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Parameter,
            "kernel contains non-finite values"
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: KernelShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// `1x1` kernel mapping each channel to itself.
    pub fn identity(channels: usize) -> Self {
        let shape = KernelShape {
            k: 1,
            in_channels: channels,
            out_channels: channels,
        };
        let mut kernel = Self::zeros(shape);
        for c in 0..channels {
            kernel.data[c * channels + c] = 1.0;
        }
        kernel
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        let s = &self.shape;
        ((ky * s.k + kx) * s.in_channels + ci) * s.out_channels + co
    }

    #[inline]
    pub fn at(&self, ky: usize, kx: usize, ci: usize, co: usize) -> f64 {
        self.data[self.index(ky, kx, ci, co)]
    }

    pub fn dot(&self, other: &ConvKernel) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, factor: f64) -> ConvKernel {
        ConvKernel {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self + factor * other`
    pub fn add_scaled(&self, other: &ConvKernel, factor: f64) -> ConvKernel {
        debug_assert_eq!(self.shape, other.shape);
        ConvKernel {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + factor * b)
                .collect(),
        }
    }

    pub(crate) fn accumulate(&mut self, other: &ConvKernel, factor: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

/// Single-channel real map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScoreMap")]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawScoreMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TryFrom<RawScoreMap> for ScoreMap {
    type Error = Error;

    fn try_from(raw: RawScoreMap) -> Result<Self> {
        ScoreMap::new(raw.height, raw.width, raw.data)
    }
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0,
            Parameter,
            "score map dimensions must be positive, got {height}x{width}"
        );
        ensure!(
            data.len() == height * width,
            Dimension,
            "score map {height}x{width} needs {} values, got {}",
            height * width,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Parameter,
            "score map contains non-finite values"
        );
        Ok(Self {
            height,
            width,
            data,
        })
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
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScoreMap {
        ScoreMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Binary foreground mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMask", into = "RawMask")]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl TryFrom<RawMask> for BinaryMask {
    type Error = Error;

    fn try_from(raw: RawMask) -> Result<Self> {
        ensure!(
            raw.data.iter().all(|&v| v <= 1),
            Parameter,
            "mask values must be 0 or 1"
        );
        BinaryMask::new(
            raw.height,
            raw.width,
            raw.data.into_iter().map(|v| v == 1).collect(),
        )
    }
}

impl From<BinaryMask> for RawMask {
    fn from(mask: BinaryMask) -> Self {
        RawMask {
            height: mask.height,
            width: mask.width,
            data: mask.data.into_iter().map(u8::from).collect(),
        }
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0,
            Parameter,
            "mask dimensions must be positive, got {height}x{width}"
        );
        ensure!(
            data.len() == height * width,
            Dimension,
            "mask {height}x{width} needs {} values, got {}",
            height * width,
            data.len()
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[Pixel]) -> Result<Self> {
        let mut mask = Self::empty(height, width);
        for &(r, c) in pixels {
            ensure!(
                r < height && c < width,
                Dimension,
                "pixel ({r}, {c}) outside {height}x{width} mask"
            );
            mask.data[r * width + c] = true;
        }
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / self.width, i % self.width))
    }

    /// Mean `(row, col)` of the foreground, `None` when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sr, mut sc) = (0usize, 0usize);
        for (r, c) in self.pixels() {
            n += 1;
            sr += r;
            sc += c;
        }
        (n > 0).then(|| (sr as f64 / n as f64, sc as f64 / n as f64))
    }

    /// The mask as a 0/1 score map.
    pub fn to_scores(&self) -> ScoreMap {
        ScoreMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Inclusive axis-aligned pixel rectangle; `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Center as `(row, col)`.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.y_min + self.y_max) as f64 / 2.0,
            (self.x_min + self.x_max) as f64 / 2.0,
        )
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        if x0 > x1 || y0 > y1 {
            return 0.0;
        }
        let inter = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }
}

/// Mean of `values`, accumulated so that a constant sequence yields exactly
/// that constant.
pub fn running_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut mean = 0.0;
    let mut n = 0usize;
    for v in values {
        n += 1;
        mean += (v - mean) / n as f64;
    }
    (n > 0).then_some(mean)
}

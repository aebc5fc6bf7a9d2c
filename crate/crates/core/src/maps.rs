//! Depth maps, guidance images and image pyramids.
//!
//! Depth is stored in meters. A value of exactly `0` marks a pixel without a
//! sensor return; the validity mask is derived from that convention when a
//! map is ingested and is carried alongside the values afterwards.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map from raw depths, marking zeros invalid.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dims(format!(
                "{} depth values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Contract(format!("depth must be finite and nonnegative, got {v}")));
        }
        let valid = values.iter().map(|&v| v > 0.0).collect();
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    /// Builds a map with an explicit mask. Invalid pixels are stored as 0.
    pub fn with_mask(height: usize, width: usize, mut values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || valid.len() != height * width {
            return Err(Error::dims(format!("values/mask length mismatch for {height}x{width}")));
        }
        for (v, ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = 0.0;
            }
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    /// Network predictions: every pixel is valid, whatever its value.
    pub fn from_prediction(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
            valid: vec![true; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Self {
        Self::new(height, width, vec![depth; height * width]).expect("constant depth")
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> DepthMap {
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { f(v) } else { 0.0 })
            .collect();
        DepthMap {
            height: self.height,
            width: self.width,
            values,
            valid: self.valid.clone(),
        }
    }

    /// Crop `[top, top+height) x [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<DepthMap> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::dims(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        let mut valid = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width;
            values.extend_from_slice(&self.values[row + left..row + left + width]);
            valid.extend_from_slice(&self.valid[row + left..row + left + width]);
        }
        Ok(DepthMap {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(1, self.height, self.width, self.values.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceImage {
    height: usize,
    width: usize,
    channels: usize,
    /// Planar, channel-major.
    data: Vec<f64>,
}

impl GuidanceImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "{} samples for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if channels == 0 {
            return Err(Error::Contract("image needs at least one channel".into()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("constant image")
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.channels, self.height, self.width, self.data.clone())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<GuidanceImage> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::dims(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in top..top + height {
                data.extend_from_slice(&p[y * self.width + left..y * self.width + left + width]);
            }
        }
        Ok(GuidanceImage {
            height,
            width,
            channels: self.channels,
            data,
        })
    }
}

/// Grayscale conversion with BT.601 weights; grayscale input is returned
/// unchanged.
pub fn to_grayscale(img: &GuidanceImage) -> Result<GuidanceImage> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            let data = r
                .iter()
                .zip(g)
                .zip(b)
                .map(|((r, g), b)| (LUMA[0] * r + LUMA[1] * g + LUMA[2] * b).clamp(0.0, 1.0))
                .collect();
            Ok(GuidanceImage {
                height: img.height,
                width: img.width,
                channels: 1,
                data,
            })
        }
        c => Err(Error::Contract(format!("grayscale needs 1 or 3 channels, got {c}"))),
    }
}

/// Guidance images at successively halved resolution, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<GuidanceImage>,
}

impl Pyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// 2x2 area averaging, repeated `n_levels - 1` times.
pub fn build_pyramid(img: &GuidanceImage, n_levels: usize) -> Result<Pyramid> {
    if n_levels == 0 {
        return Err(Error::Contract("pyramid needs at least one level".into()));
    }
    let div = 1usize << (n_levels - 1);
    if !img.height.is_multiple_of(div) || !img.width.is_multiple_of(div) {
        return Err(Error::dims(format!(
            "{}x{} image not divisible by {div} for a {n_levels}-level pyramid",
            img.height, img.width
        )));
    }
    let mut levels = vec![img.clone()];
    for _ in 1..n_levels {
        let prev = levels.last().unwrap();
        let (h, w) = (prev.height / 2, prev.width / 2);
        let mut data = Vec::with_capacity(h * w * prev.channels);
        for c in 0..prev.channels {
            data.extend(area_halve(prev.plane(c), prev.height, prev.width));
        }
        levels.push(GuidanceImage {
            height: h,
            width: w,
            channels: prev.channels,
            data,
        });
    }
    Ok(Pyramid { levels })
}

fn area_halve(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let r0 = &plane[2 * y * w..];
        let r1 = &plane[(2 * y + 1) * w..];
        for x in 0..ow {
            out.push(0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]));
        }
    }
    out
}

//! Analytic scenes with known depth, rendered with Lambertian shading, and
//! the binning artifact that turns smooth slopes into staircases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RGBDSample, SampleMeta};
use crate::error::{Error, Result};
use crate::export::Intrinsics;
use crate::maps::{DepthMap, GuidanceImage};
use crate::resample::downsample_depth_nn;

pub const DEFAULT_STEP: f64 = 0.1;
/// 32-pixel stairs for a 0.1 m bin.
pub const DEFAULT_SLOPE: f64 = DEFAULT_STEP / 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Ramp,
    BoxOnPlane,
    Curved,
}

/// Axis-aligned box footprint in pixels, raised towards the camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// How much closer than the plane the box top is, meters.
    pub lift: f64,
    pub albedo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    /// Depth at the top-left pixel (ramp, box) or the patch centre (curved).
    pub base_depth: f64,
    /// Depth change per pixel along `slope_angle`.
    pub slope: f64,
    /// Direction of the slope, radians from the +x axis.
    pub slope_angle: f64,
    pub block: BoxSpec,
    /// Curvature of the quadratic patch, meters per squared pixel.
    pub curvature: f64,
    /// Direction towards the light (need not be unit length).
    pub light: [f64; 3],
    /// Lateral size of one pixel on the surface, meters.
    pub pixel_pitch: f64,
    pub albedo: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, height: usize, width: usize) -> Self {
        let (bh, bw) = (height / 4, width / 4);
        Self {
            kind,
            height,
            width,
            base_depth: 2.0,
            slope: DEFAULT_SLOPE,
            slope_angle: 0.0,
            block: BoxSpec {
                top: align8(height / 2 - bh / 2),
                left: align8(width / 2 - bw / 2),
                height: align8(bh).max(8),
                width: align8(bw).max(8),
                lift: 0.5,
                albedo: 0.5,
            },
            curvature: 2e-6,
            light: [-0.3, -0.4, 0.866],
            pixel_pitch: 0.005,
            albedo: 0.9,
            seed: 0,
        }
    }

    pub fn in_box(&self, y: usize, x: usize) -> bool {
        let b = &self.block;
        self.kind == SceneKind::BoxOnPlane && (b.top..b.top + b.height).contains(&y) && (b.left..b.left + b.width).contains(&x)
    }

    /// Analytic depth derivative per pixel along x and y. Box sides are
    /// vertical and never visible, so box tops share the plane's normal.
    fn surface_gradient(&self, y: usize, x: usize) -> (f64, f64) {
        let (sx, sy) = (self.slope * self.slope_angle.cos(), self.slope * self.slope_angle.sin());
        match self.kind {
            SceneKind::Ramp | SceneKind::BoxOnPlane => (sx, sy),
            SceneKind::Curved => {
                let cy = (self.height as f64 - 1.0) / 2.0;
                let cx = (self.width as f64 - 1.0) / 2.0;
                (sx + 2.0 * self.curvature * (x as f64 - cx), sy + 2.0 * self.curvature * (y as f64 - cy))
            }
        }
    }

    fn depth_at(&self, y: usize, x: usize) -> f64 {
        let (yf, xf) = (y as f64, x as f64);
        let along = xf * self.slope_angle.cos() + yf * self.slope_angle.sin();
        match self.kind {
            SceneKind::Ramp => self.base_depth + self.slope * along,
            SceneKind::BoxOnPlane => {
                let plane = self.base_depth + self.slope * along;
                if self.in_box(y, x) {
                    plane - self.block.lift
                } else {
                    plane
                }
            }
            SceneKind::Curved => {
                let cy = (self.height as f64 - 1.0) / 2.0;
                let cx = (self.width as f64 - 1.0) / 2.0;
                let r2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                self.base_depth + self.slope * along + self.curvature * r2
            }
        }
    }
}

fn align8(v: usize) -> usize {
    v - v % 8
}

/// Analytic depth and its shaded grayscale rendering.
pub fn render_scene(spec: &SceneSpec) -> Result<(DepthMap, GuidanceImage)> {
    let (h, w) = (spec.height, spec.width);
    if h < 2 || w < 2 {
        return Err(Error::Contract(format!("scene of {h}x{w} pixels has no area")));
    }
    if spec.kind == SceneKind::BoxOnPlane && (spec.block.height == 0 || spec.block.width == 0) {
        return Err(Error::Contract("box with zero footprint".into()));
    }
    let mut depth = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            depth.push(spec.depth_at(y, x));
        }
    }
    if depth.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Contract("scene geometry reaches zero or negative depth".into()));
    }
    let norm = spec.light.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || spec.pixel_pitch <= 0.0 {
        return Err(Error::Contract("light direction and pixel pitch must be nonzero".into()));
    }
    let l = spec.light.map(|v| v / norm);
    let mut gray = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = spec.surface_gradient(y, x);
            let n = [-gx / spec.pixel_pitch, -gy / spec.pixel_pitch, 1.0];
            let nn = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            let lambert = ((n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / nn).max(0.0);
            let albedo = if spec.in_box(y, x) { spec.block.albedo } else { spec.albedo };
            gray.push((albedo * lambert).clamp(0.0, 1.0));
        }
    }
    Ok((DepthMap::new(h, w, depth)?, GuidanceImage::gray(h, w, gray)?))
}

/// Rounds valid depths to the nearest multiple of `step`.
pub fn quantize(d: &DepthMap, step: f64) -> Result<DepthMap> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Contract(format!("quantization step must be positive, got {step}")));
    }
    let (h, w) = d.dims();
    let values = d
        .values()
        .iter()
        .zip(d.valid())
        .map(|(&v, &ok)| if ok { (v / step).round() * step } else { 0.0 })
        .collect();
    DepthMap::with_mask(h, w, values, d.valid().to_vec())
}

/// A benchmark sample whose `depth_hr` is the unquantized truth.
pub fn make_benchmark_case(spec: &SceneSpec, step: f64, factor: usize) -> Result<RGBDSample> {
    if !spec.height.is_multiple_of(factor) || !spec.width.is_multiple_of(factor) {
        return Err(Error::dims(format!("{}x{} is not divisible by {factor}", spec.height, spec.width)));
    }
    let (truth, gray) = render_scene(spec)?;
    let lr = downsample_depth_nn(&quantize(&truth, step)?, factor)?;
    Ok(RGBDSample {
        id: format!("{:?}_{}", spec.kind, spec.seed).to_lowercase(),
        image: gray,
        depth_hr: Some(truth),
        depth_lr: Some(lr),
        meta: SampleMeta {
            intrinsics: Some(Intrinsics::generic(spec.height, spec.width)),
            ..SampleMeta::default()
        },
    })
}

/// Pixels whose 3x3 neighbourhood contains both box and plane pixels.
pub fn box_boundary(spec: &SceneSpec) -> Vec<bool> {
    let (h, w) = (spec.height, spec.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = spec.in_box(y, x);
            'n: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if spec.in_box(ny, nx) != inside {
                        out[y * w + x] = true;
                        break 'n;
                    }
                }
            }
        }
    }
    out
}

/// A seeded mix of ramps, boxes and curved patches. Box positions are not
/// aligned to the sampling grid. Stairs are 16 to 48 pixels wide at any size.
pub fn benchmark_suite(seed: u64, n_cases: usize, size: usize) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [SceneKind::Ramp, SceneKind::BoxOnPlane, SceneKind::Curved];
    (0..n_cases)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            let mut spec = SceneSpec::new(kind, size, size);
            spec.seed = seed.wrapping_mul(1000).wrapping_add(i as u64);
            spec.base_depth = rng.random_range(1.5..3.0);
            spec.slope = DEFAULT_STEP / rng.random_range(16.0..48.0);
            spec.slope_angle = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
            spec.curvature = rng.random_range(1.0..4.0) * 1e-6 * (512.0 / size as f64).powi(2);
            let bh = rng.random_range(size / 6..size / 3);
            let bw = rng.random_range(size / 6..size / 3);
            spec.block = BoxSpec {
                top: rng.random_range(2..size - bh - 2),
                left: rng.random_range(2..size - bw - 2),
                height: bh,
                width: bw,
                lift: rng.random_range(0.2..0.8),
                albedo: rng.random_range(0.3..0.6),
            };
            spec
        })
        .collect()
}

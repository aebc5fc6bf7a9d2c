//! Sobel edge magnitude, percentile-thresholded edge maps and the two-channel
//! guidance stack fed to the network.

use crate::error::{Error, Result};
use crate::maps::{to_grayscale, DepthMap, GuidanceImage};

/// Nonnegative gradient magnitude on the grid of its source.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMagnitude {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Binary edge indicator; `edges[i]` holds exactly where the magnitude was
/// strictly above `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub edges: Vec<bool>,
    pub threshold: f64,
}

impl EdgeMap {
    pub fn fraction(&self) -> f64 {
        self.edges.iter().filter(|e| **e).count() as f64 / self.edges.len() as f64
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.edges.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect()
    }
}

/// Horizontal and vertical Sobel responses with replicated borders.
pub fn sobel_xy(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        let (rm, r0, rp) = (&plane[ym * w..], &plane[y * w..], &plane[yp * w..]);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            gx[y * w + x] = (rm[xp] + 2.0 * r0[xp] + rp[xp]) - (rm[xm] + 2.0 * r0[xm] + rp[xm]);
            gy[y * w + x] = (rp[xm] + 2.0 * rp[x] + rp[xp]) - (rm[xm] + 2.0 * rm[x] + rm[xp]);
        }
    }
    (gx, gy)
}

/// Adjoint of [`sobel_xy`]: accumulates into `grad`.
pub fn sobel_xy_adjoint(ggx: &[f64], ggy: &[f64], h: usize, w: usize, grad: &mut [f64]) {
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let a = ggx[y * w + x];
            let b = ggy[y * w + x];
            if a != 0.0 {
                grad[ym * w + xp] += a;
                grad[y * w + xp] += 2.0 * a;
                grad[yp * w + xp] += a;
                grad[ym * w + xm] -= a;
                grad[y * w + xm] -= 2.0 * a;
                grad[yp * w + xm] -= a;
            }
            if b != 0.0 {
                grad[yp * w + xm] += b;
                grad[yp * w + x] += 2.0 * b;
                grad[yp * w + xp] += b;
                grad[ym * w + xm] -= b;
                grad[ym * w + x] -= 2.0 * b;
                grad[ym * w + xp] -= b;
            }
        }
    }
}

pub(crate) fn magnitude_plane(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (gx, gy) = sobel_xy(plane, h, w);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

/// Sobel magnitude of a single-channel image.
pub fn sobel_magnitude(gray: &GuidanceImage) -> Result<EdgeMagnitude> {
    if gray.channels() != 1 {
        return Err(Error::Contract(format!(
            "Sobel magnitude needs a single-channel image, got {} channels",
            gray.channels()
        )));
    }
    let (h, w) = gray.dims();
    Ok(EdgeMagnitude {
        height: h,
        width: w,
        values: magnitude_plane(gray.data(), h, w),
    })
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Thresholds a magnitude field at its `p`-th percentile.
pub fn threshold_magnitude(mag: &EdgeMagnitude, p: f64) -> Result<EdgeMap> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Contract(format!("percentile {p} outside [0, 100]")));
    }
    let threshold = percentile(&mag.values, p);
    Ok(EdgeMap {
        height: mag.height,
        width: mag.width,
        edges: mag.values.iter().map(|&m| m > threshold).collect(),
        threshold,
    })
}

/// Binary edge map of a grayscale image at the `p`-th magnitude percentile.
pub fn binary_edges(gray: &GuidanceImage, p: f64) -> Result<EdgeMap> {
    threshold_magnitude(&sobel_magnitude(gray)?, p)
}

/// Grayscale in channel 0, its binary edge map in channel 1.
pub fn guidance_stack(img: &GuidanceImage, p: f64) -> Result<GuidanceImage> {
    let gray = to_grayscale(img)?;
    let edges = binary_edges(&gray, p)?;
    let mut data = gray.data().to_vec();
    data.extend(edges.as_f64());
    GuidanceImage::new(gray.height(), gray.width(), 2, data)
}

/// Unthresholded Sobel magnitude of depth values, in meters.
pub fn soft_depth_edges(d: &DepthMap) -> EdgeMagnitude {
    let (h, w) = d.dims();
    EdgeMagnitude {
        height: h,
        width: w,
        values: magnitude_plane(d.values(), h, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gray(rng: &mut ChaCha8Rng, n: usize) -> GuidanceImage {
        GuidanceImage::gray(n, n, (0..n * n).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn constant_image_has_no_gradient() {
        let img = GuidanceImage::constant(9, 7, 1, 0.4);
        assert!(sobel_magnitude(&img).unwrap().values.iter().all(|v| *v == 0.0));
        let e = binary_edges(&img, 50.0).unwrap();
        assert_eq!(e.threshold, 0.0);
        assert!(e.edges.iter().all(|e| !e));
    }

    #[test]
    fn vertical_step_response() {
        // 5x5, columns 0..=2 are 0 and 3..=4 are 1: step between c=2 and c=3
        let mut data = vec![0.0; 25];
        for y in 0..5 {
            for x in 3..5 {
                data[y * 5 + x] = 1.0;
            }
        }
        let img = GuidanceImage::gray(5, 5, data).unwrap();
        let m = sobel_magnitude(&img).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let want = if x == 2 || x == 3 { 4.0 } else { 0.0 };
                assert_eq!(m.values[y * 5 + x], want, "({y},{x})");
            }
        }
    }

    #[test]
    fn rotation_equivariance_away_from_borders() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 16;
        let img = random_gray(&mut rng, n);
        // rotate 90 degrees counter-clockwise: r[y][x] = a[x][n-1-y]
        let mut rot = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                rot[y * n + x] = img.data()[x * n + (n - 1 - y)];
            }
        }
        let rimg = GuidanceImage::gray(n, n, rot).unwrap();
        let m = sobel_magnitude(&img).unwrap();
        let mr = sobel_magnitude(&rimg).unwrap();
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let want = m.values[x * n + (n - 1 - y)];
                assert!((mr.values[y * n + x] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multichannel_input_rejected() {
        let img = GuidanceImage::constant(4, 4, 3, 0.5);
        assert!(matches!(sobel_magnitude(&img), Err(Error::Contract(_))));
    }

    #[test]
    fn p100_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let e = binary_edges(&random_gray(&mut rng, 12), 100.0).unwrap();
        assert!(e.edges.iter().all(|e| !e));
    }

    #[test]
    fn p50_fraction_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = random_gray(&mut rng, 32);
        let e = binary_edges(&img, 50.0).unwrap();
        let m = sobel_magnitude(&img).unwrap();
        let mut sorted = m.values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        // n even: the 50th percentile interpolates the two middle order statistics
        let t = 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        assert!((e.threshold - t).abs() < 1e-15);
        let above = m.values.iter().filter(|v| **v > t).count();
        let ties = m.values.iter().filter(|v| **v == t).count();
        let frac = e.fraction();
        assert_eq!(frac, above as f64 / n as f64);
        assert!(frac <= 0.5);
        assert!(frac >= 0.5 - ties as f64 / n as f64);
    }

    #[test]
    fn guidance_stack_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 16;
        let rgb = GuidanceImage::new(n, n, 3, (0..3 * n * n).map(|_| rng.random()).collect()).unwrap();
        let g = guidance_stack(&rgb, 50.0).unwrap();
        assert_eq!((g.channels(), g.height(), g.width()), (2, n, n));
        let gray = to_grayscale(&rgb).unwrap();
        assert_eq!(g.plane(0), gray.data());
        assert_eq!(g.plane(1), binary_edges(&gray, 50.0).unwrap().as_f64().as_slice());

        let flat = guidance_stack(&GuidanceImage::constant(8, 8, 3, 0.7), 50.0).unwrap();
        assert!(flat.plane(0).iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(flat.plane(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn depth_edges_of_plane_and_ramp() {
        let flat = DepthMap::constant(8, 8, 2.0);
        assert!(soft_depth_edges(&flat).values.iter().all(|v| *v == 0.0));

        let s = 0.01;
        let ramp = DepthMap::new(8, 10, (0..80).map(|i| 1.0 + s * (i % 10) as f64).collect()).unwrap();
        let m = soft_depth_edges(&ramp);
        for y in 0..8 {
            for x in 1..9 {
                assert!((m.values[y * 10 + x] - 8.0 * s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantized_ramp_edges_sit_on_bin_boundaries() {
        // 0.1 m bins, 4 px wide: values change between x=3|4 and x=7|8
        let w = 12;
        let vals: Vec<f64> = (0..4 * w).map(|i| 1.0 + 0.1 * ((i % w) / 4) as f64).collect();
        let d = DepthMap::new(4, w, vals).unwrap();
        let m = soft_depth_edges(&d);
        for x in 0..w {
            let want = if matches!(x, 3 | 4 | 7 | 8) { 0.4 } else { 0.0 };
            assert!((m.values[x] - want).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn sobel_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (h, w) = (6, 9);
        let p: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (gx, gy) = sobel_xy(&p, h, w);
        let lhs: f64 = gx.iter().zip(&a).chain(gy.iter().zip(&b)).map(|(x, y)| x * y).sum();
        let mut g = vec![0.0; h * w];
        sobel_xy_adjoint(&a, &b, h, w, &mut g);
        let rhs: f64 = p.iter().zip(&g).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn magnitude_is_positively_homogeneous(seed in any::<u64>(), a in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_gray(&mut rng, 10);
            let scaled = GuidanceImage::gray(10, 10, img.data().iter().map(|v| a * v).collect()).unwrap();
            let m = sobel_magnitude(&img).unwrap();
            let ms = sobel_magnitude(&scaled).unwrap();
            for (x, y) in m.values.iter().zip(&ms.values) {
                prop_assert!((a * x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn binary_edges_invariant_to_affine_rescale(seed in any::<u64>(), a in 0.1f64..0.9, b in 0.0f64..0.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_gray(&mut rng, 12);
            let scaled = GuidanceImage::gray(12, 12, img.data().iter().map(|v| a * v + b).collect()).unwrap();
            let e = binary_edges(&img, 50.0).unwrap();
            let es = binary_edges(&scaled, 50.0).unwrap();
            let m = sobel_magnitude(&img).unwrap();
            // only meaningful when no magnitude sits on the threshold
            let tie = m.values.iter().any(|v| (v - e.threshold).abs() < 1e-9);
            if !tie {
                prop_assert_eq!(e.edges, es.edges);
            }
        }
    }
}

//! Depth resampling.
//!
//! Nearest-neighbour downsampling keeps the top-left sample of every block.
//! Bilinear upsampling uses half-pixel centers: output pixel `o` samples the
//! input at `(o + 0.5) / factor - 0.5`, clamped to the grid, which is the
//! geometry implied by 2x2 area averaging.

use crate::error::{Error, Result};
use crate::maps::DepthMap;

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Contract(format!("resampling factor {factor} is not a power of two")));
    }
    Ok(())
}

/// `out[i, j] = in[i * factor, j * factor]`, mask included.
pub fn downsample_depth_nn(d: &DepthMap, factor: usize) -> Result<DepthMap> {
    check_factor(factor)?;
    let (h, w) = d.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::dims(format!("{h}x{w} depth not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut values = Vec::with_capacity(oh * ow);
    let mut valid = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            values.push(d.get(i * factor, j * factor));
            valid.push(d.is_valid(i * factor, j * factor));
        }
    }
    DepthMap::with_mask(oh, ow, values, valid)
}

/// Pixel replication; the "nearest" baseline.
pub fn upsample_nearest(d: &DepthMap, factor: usize) -> Result<DepthMap> {
    check_factor(factor)?;
    let (h, w) = d.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut values = Vec::with_capacity(oh * ow);
    let mut valid = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            values.push(d.get(i / factor, j / factor));
            valid.push(d.is_valid(i / factor, j / factor));
        }
    }
    DepthMap::with_mask(oh, ow, values, valid)
}

/// One-dimensional bilinear tap: `(i0, i1, w0, w1)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub(crate) fn bilinear_taps(n_in: usize, factor: usize) -> Vec<Tap> {
    let last = (n_in - 1) as f64;
    (0..n_in * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let t = s - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - t,
                w1: t,
            }
        })
        .collect()
}

/// Mask-aware bilinear upsampling. Invalid inputs drop out of the weights;
/// an output is invalid only when every input with a nonzero weight is.
pub fn upsample_bilinear(d: &DepthMap, factor: usize) -> Result<DepthMap> {
    check_factor(factor)?;
    if factor == 1 {
        return Ok(d.clone());
    }
    let (h, w) = d.dims();
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut values = Vec::with_capacity(oh * ow);
    let mut valid = Vec::with_capacity(oh * ow);
    for a in &ty {
        for b in &tx {
            let mut num = 0.0;
            let mut den = 0.0;
            for (yy, wy) in [(a.i0, a.w0), (a.i1, a.w1)] {
                for (xx, wx) in [(b.i0, b.w0), (b.i1, b.w1)] {
                    let wgt = wy * wx;
                    if wgt > 0.0 && d.is_valid(yy, xx) {
                        num += wgt * d.get(yy, xx);
                        den += wgt;
                    }
                }
            }
            if den > 0.0 {
                values.push(num / den);
                valid.push(true);
            } else {
                values.push(0.0);
                valid.push(false);
            }
        }
    }
    DepthMap::with_mask(oh, ow, values, valid)
}

/// Plain bilinear x2 of a dense plane (no mask); used inside the network.
pub(crate) fn upsample2_plane(src: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let ty = bilinear_taps(h, 2);
    let tx = bilinear_taps(w, 2);
    let ow = 2 * w;
    let mut row = vec![0.0; ow];
    let mut r0 = vec![0.0; ow];
    let mut r1 = vec![0.0; ow];
    let mut cached = (usize::MAX, usize::MAX);
    for (o, a) in ty.iter().enumerate() {
        if cached != (a.i0, a.i1) {
            interp_row(&src[a.i0 * w..(a.i0 + 1) * w], &tx, &mut r0);
            interp_row(&src[a.i1 * w..(a.i1 + 1) * w], &tx, &mut r1);
            cached = (a.i0, a.i1);
        }
        for x in 0..ow {
            row[x] = a.w0 * r0[x] + a.w1 * r1[x];
        }
        out[o * ow..(o + 1) * ow].copy_from_slice(&row);
    }
}

fn interp_row(src: &[f64], tx: &[Tap], out: &mut [f64]) {
    for (o, b) in tx.iter().enumerate() {
        out[o] = b.w0 * src[b.i0] + b.w1 * src[b.i1];
    }
}

/// Adjoint of [`upsample2_plane`]: accumulates into `grad_in` (h x w).
pub(crate) fn upsample2_plane_adjoint(grad_out: &[f64], h: usize, w: usize, grad_in: &mut [f64]) {
    let ty = bilinear_taps(h, 2);
    let tx = bilinear_taps(w, 2);
    let ow = 2 * w;
    let mut col = vec![0.0; w];
    for (o, a) in ty.iter().enumerate() {
        col.fill(0.0);
        let g = &grad_out[o * ow..(o + 1) * ow];
        for (x, b) in tx.iter().enumerate() {
            col[b.i0] += b.w0 * g[x];
            col[b.i1] += b.w1 * g[x];
        }
        for x in 0..w {
            grad_in[a.i0 * w + x] += a.w0 * col[x];
            grad_in[a.i1 * w + x] += a.w1 * col[x];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap {
        DepthMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.5..5.0)).collect()).unwrap()
    }

    #[test]
    fn nn_constant_factor_8() {
        let d = DepthMap::constant(64, 32, 2.0);
        let lr = downsample_depth_nn(&d, 8).unwrap();
        assert_eq!(lr.dims(), (8, 4));
        assert!(lr.values().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn nn_takes_top_left() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let lr = downsample_depth_nn(&d, 2).unwrap();
        assert_eq!(lr.values(), &[1.0]);
    }

    #[test]
    fn nn_matches_strided_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = random_depth(&mut rng, 16, 16);
        let lr = downsample_depth_nn(&d, 2).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(lr.values()[i * 8 + j], d.values()[(2 * i) * 16 + 2 * j]);
            }
        }
    }

    #[test]
    fn nn_rejects_indivisible() {
        let d = DepthMap::constant(10, 16, 1.0);
        assert!(matches!(downsample_depth_nn(&d, 4), Err(Error::Dimension(_))));
        assert!(downsample_depth_nn(&d, 3).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = random_depth(&mut rng, 5, 6);
        assert_eq!(upsample_bilinear(&d, 1).unwrap(), d);
        let c = DepthMap::constant(4, 4, 3.25);
        let up = upsample_bilinear(&c, 4).unwrap();
        assert_eq!(up.dims(), (16, 16));
        assert!(up.values().iter().all(|v| (v - 3.25).abs() < 1e-14));
    }

    /// Continuous-coordinate bilinear formula written out per pixel.
    fn bilinear_oracle(d: &DepthMap, factor: usize, i: usize, j: usize) -> Option<f64> {
        let (h, w) = d.dims();
        let sy = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0).min((h - 1) as f64);
        let sx = ((j as f64 + 0.5) / factor as f64 - 0.5).max(0.0).min((w - 1) as f64);
        let mut num = 0.0;
        let mut den = 0.0;
        for yy in 0..h {
            for xx in 0..w {
                let wy = (1.0 - (sy - yy as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - xx as f64).abs()).max(0.0);
                if wy * wx > 0.0 && d.is_valid(yy, xx) {
                    num += wy * wx * d.get(yy, xx);
                    den += wy * wx;
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn bilinear_two_by_two_matches_formula() {
        // zeros are invalid, so the left column drops out of the weights
        let d = DepthMap::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&d, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                match bilinear_oracle(&d, 2, i, j) {
                    Some(v) => {
                        assert!(up.is_valid(i, j));
                        assert!((up.get(i, j) - v).abs() < 1e-14);
                    }
                    None => assert!(!up.is_valid(i, j)),
                }
            }
        }
        assert!(!up.is_valid(0, 0));
        assert_eq!(up.get(0, 1), 1.0);
    }

    #[test]
    fn bilinear_random_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut d = random_depth(&mut rng, 6, 5);
        d = d.map_values(|v| if v < 1.0 { 0.0 } else { v });
        let d = DepthMap::new(6, 5, d.values().to_vec()).unwrap();
        let up = upsample_bilinear(&d, 4).unwrap();
        for i in 0..24 {
            for j in 0..20 {
                let want = bilinear_oracle(&d, 4, i, j);
                assert_eq!(up.is_valid(i, j), want.is_some());
                if let Some(v) = want {
                    assert!((up.get(i, j) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_upsample2_matches_masked_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = random_depth(&mut rng, 7, 9);
        let mut out = vec![0.0; 14 * 18];
        upsample2_plane(d.values(), 7, 9, &mut out);
        let want = upsample_bilinear(&d, 2).unwrap();
        for (a, b) in out.iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn upsample2_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (h, w) = (5, 8);
        let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..4 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; 4 * h * w];
        upsample2_plane(&x, h, w, &mut y);
        let mut gx = vec![0.0; h * w];
        upsample2_plane_adjoint(&g, h, w, &mut gx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn constant_round_trip(depth in 0.1f64..20.0, factor_log in 0u32..4, h in 1usize..6, w in 1usize..6) {
            let f = 1usize << factor_log;
            let d = DepthMap::constant(h, w, depth);
            let input = d.clone();
            let up = upsample_bilinear(&d, f).unwrap();
            let back = downsample_depth_nn(&up, f).unwrap();
            prop_assert_eq!(&d, &input);
            for v in back.values() {
                prop_assert!((v - depth).abs() < 1e-12);
            }
        }
    }
}

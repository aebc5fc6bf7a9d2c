//! Direct 2-D convolution ("same" zero padding, optional dilation) and its
//! two adjoints.
//!
//! Weights are stored `[out][in][ky][kx]`. The kernels below are written so
//! that the innermost loops run over a fixed number of contiguous lanes and a
//! fixed block of channels, which lets the compiler keep every accumulator in
//! vector registers.

use super::tensor::Tensor;

/// Lanes per accumulator row in the forward kernel.
const LANES: usize = 8;
/// Lanes per accumulator row in the weight-gradient kernel.
const WLANES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel / 2)
    }
}

/// Forward convolution. When `relu` is set the rectifier is fused into the
/// store.
pub fn conv2d(input: &Tensor, shape: ConvShape, weight: &[f64], bias: &[f64], relu: bool) -> Tensor {
    assert_eq!(input.channels, shape.cin, "conv input channels");
    assert_eq!(weight.len(), shape.weight_len(), "conv weight length");
    assert_eq!(bias.len(), shape.cout, "conv bias length");
    let mut out = Tensor::zeros(shape.cout, input.height, input.width);
    match shape.kernel {
        3 => forward_dispatch::<3>(&input.zero_padded(shape.pad()), shape, weight, bias, relu, &mut out),
        1 => forward_dispatch::<1>(input, shape, weight, bias, relu, &mut out),
        k => panic!("unsupported kernel size {k}"),
    }
    out
}

/// Gradient of a convolution with respect to its input, given the gradient
/// with respect to its (pre-activation) output.
pub fn conv2d_input_grad(grad_out: &Tensor, shape: ConvShape, weight: &[f64]) -> Tensor {
    assert_eq!(grad_out.channels, shape.cout);
    let k = shape.kernel;
    // Adjoint of a "same" correlation is a correlation with the spatially
    // flipped, channel-transposed kernel.
    let mut flipped = vec![0.0; weight.len()];
    for co in 0..shape.cout {
        for ci in 0..shape.cin {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * shape.cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        weight[((co * shape.cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    let adjoint = ConvShape {
        cin: shape.cout,
        cout: shape.cin,
        kernel: k,
        dilation: shape.dilation,
    };
    let bias = vec![0.0; shape.cin];
    conv2d(grad_out, adjoint, &flipped, &bias, false)
}

/// Gradient with respect to weights and bias, accumulated into `gw` / `gb`.
pub fn conv2d_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    shape: ConvShape,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    assert_eq!(input.channels, shape.cin);
    assert_eq!(grad_out.channels, shape.cout);
    for co in 0..shape.cout {
        gb[co] += lane_sum(grad_out.plane(co));
    }
    match shape.kernel {
        3 => wgrad_dispatch::<3>(&input.zero_padded(shape.pad()), grad_out, shape, gw),
        1 => wgrad_dispatch::<1>(input, grad_out, shape, gw),
        k => panic!("unsupported kernel size {k}"),
    }
}

fn lane_sum(v: &[f64]) -> f64 {
    let mut acc = [0.0; WLANES];
    let chunks = v.chunks_exact(WLANES);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for l in 0..WLANES {
            acc[l] += c[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn forward_dispatch<const K: usize>(
    padded: &Tensor,
    shape: ConvShape,
    weight: &[f64],
    bias: &[f64],
    relu: bool,
    out: &mut Tensor,
) {
    let mut co = 0;
    while co < shape.cout {
        if shape.cout - co >= 8 {
            forward_block::<K, 8>(padded, shape, weight, bias, relu, out, co);
            co += 8;
        } else {
            forward_block::<K, 1>(padded, shape, weight, bias, relu, out, co);
            co += 1;
        }
    }
}

fn forward_block<const K: usize, const B: usize>(
    padded: &Tensor,
    shape: ConvShape,
    weight: &[f64],
    bias: &[f64],
    relu: bool,
    out: &mut Tensor,
    co0: usize,
) {
    let cin = shape.cin;
    let dil = shape.dilation;
    let (h, w) = (out.height, out.width);
    let (ph, pw) = (padded.height, padded.width);
    // packed[(ci, ky, kx)][b]
    let mut packed = vec![0.0; cin * K * K * B];
    for b in 0..B {
        for ci in 0..cin {
            for t in 0..K * K {
                packed[(ci * K * K + t) * B + b] = weight[((co0 + b) * cin + ci) * K * K + t];
            }
        }
    }
    let mut bias_b = [0.0; B];
    bias_b.copy_from_slice(&bias[co0..co0 + B]);
    let src = &padded.data;
    let plane = h * w;
    let out_data = &mut out.data[co0 * plane..(co0 + B) * plane];

    for y in 0..h {
        let mut x = 0;
        #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
        if B == 8 {
            while x + simd::FWD_LANES <= w {
                // SAFETY: every load stays inside the padded plane rows
                // (x + kx*dil + 16 <= w + 2*pad) and every store inside
                // `out_data` (x + 16 <= w); `packed` holds cin*K*K*8 values.
                unsafe {
                    simd::forward_chunk8::<K>(
                        src.as_ptr(),
                        (ph, pw),
                        cin,
                        dil,
                        packed.as_ptr(),
                        &bias_b[..8],
                        out_data.as_mut_ptr().add(y * w + x),
                        plane,
                        y,
                        x,
                        relu,
                    );
                }
                x += simd::FWD_LANES;
            }
        }
        while x + LANES <= w {
            let mut acc = [[0.0f64; LANES]; B];
            for (b, a) in acc.iter_mut().enumerate() {
                *a = [bias_b[b]; LANES];
            }
            let mut wi = 0;
            for ci in 0..cin {
                let cbase = ci * ph * pw;
                for ky in 0..K {
                    let rbase = cbase + (y + ky * dil) * pw + x;
                    for kx in 0..K {
                        let s: &[f64; LANES] = src[rbase + kx * dil..rbase + kx * dil + LANES]
                            .try_into()
                            .unwrap();
                        let wv: &[f64; B] = packed[wi..wi + B].try_into().unwrap();
                        wi += B;
                        for b in 0..B {
                            let wb = wv[b];
                            for l in 0..LANES {
                                acc[b][l] = wb.mul_add(s[l], acc[b][l]);
                            }
                        }
                    }
                }
            }
            for (b, a) in acc.iter().enumerate() {
                let dst = &mut out_data[b * plane + y * w + x..b * plane + y * w + x + LANES];
                if relu {
                    for l in 0..LANES {
                        dst[l] = a[l].max(0.0);
                    }
                } else {
                    dst.copy_from_slice(a);
                }
            }
            x += LANES;
        }
        while x < w {
            let mut acc = bias_b;
            let mut wi = 0;
            for ci in 0..cin {
                let cbase = ci * ph * pw;
                for ky in 0..K {
                    let rbase = cbase + (y + ky * dil) * pw + x;
                    for kx in 0..K {
                        let s = src[rbase + kx * dil];
                        for b in 0..B {
                            acc[b] = packed[wi + b].mul_add(s, acc[b]);
                        }
                        wi += B;
                    }
                }
            }
            for b in 0..B {
                let v = acc[b];
                out_data[b * plane + y * w + x] = if relu { v.max(0.0) } else { v };
            }
            x += 1;
        }
    }
}

fn wgrad_dispatch<const K: usize>(padded: &Tensor, grad_out: &Tensor, shape: ConvShape, gw: &mut [f64]) {
    let mut co = 0;
    while co < shape.cout {
        if shape.cout - co >= 4 {
            wgrad_block::<K, 4>(padded, grad_out, shape, gw, co);
            co += 4;
        } else {
            wgrad_block::<K, 1>(padded, grad_out, shape, gw, co);
            co += 1;
        }
    }
}

/// Rows are the outer loop so each gradient row is read from cache once per
/// (ci, ky) pair instead of streaming the whole plane from memory.
fn wgrad_block<const K: usize, const B: usize>(
    padded: &Tensor,
    grad_out: &Tensor,
    shape: ConvShape,
    gw: &mut [f64],
    co0: usize,
) {
    let cin = shape.cin;
    let dil = shape.dilation;
    let (h, w) = (grad_out.height, grad_out.width);
    let (ph, pw) = (padded.height, padded.width);
    let plane = h * w;
    let g = &grad_out.data[co0 * plane..(co0 + B) * plane];
    let src = &padded.data;
    // lane partials indexed [ci][ky][b][kx][lane]
    let stride = B * K * WLANES;
    let mut part = vec![0.0f64; cin * K * stride];
    let mut tail = vec![0.0f64; cin * K * B * K];

    for y in 0..h {
        let grow = y * w;
        for ci in 0..cin {
            let cbase = ci * ph * pw;
            for ky in 0..K {
                let rbase = cbase + (y + ky * dil) * pw;
                let pidx = (ci * K + ky) * stride;
                let mut x = 0;
                #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
                if B == 4 && w >= WLANES {
                    let chunks = w / WLANES;
                    // SAFETY: reads g[b*plane + grow .. + chunks*8] and
                    // src[rbase + kx*dil .. + chunks*8] which lie inside
                    // their rows; writes 4*K*8 partials at `pidx`.
                    unsafe {
                        simd::wgrad_row4::<K>(
                            g.as_ptr().add(grow),
                            plane,
                            src.as_ptr().add(rbase),
                            dil,
                            chunks,
                            part.as_mut_ptr().add(pidx),
                        );
                    }
                    x = chunks * WLANES;
                }
                if x == 0 {
                    let mut acc = [[[0.0f64; WLANES]; K]; B];
                    while x + WLANES <= w {
                        let mut gv = [[0.0f64; WLANES]; B];
                        for b in 0..B {
                            gv[b].copy_from_slice(&g[b * plane + grow + x..b * plane + grow + x + WLANES]);
                        }
                        for kx in 0..K {
                            let s: &[f64; WLANES] = src[rbase + x + kx * dil..rbase + x + kx * dil + WLANES]
                                .try_into()
                                .unwrap();
                            for b in 0..B {
                                for l in 0..WLANES {
                                    acc[b][kx][l] = gv[b][l].mul_add(s[l], acc[b][kx][l]);
                                }
                            }
                        }
                        x += WLANES;
                    }
                    for b in 0..B {
                        for kx in 0..K {
                            let o = pidx + (b * K + kx) * WLANES;
                            for l in 0..WLANES {
                                part[o + l] += acc[b][kx][l];
                            }
                        }
                    }
                }
                let tidx = (ci * K + ky) * B * K;
                while x < w {
                    for b in 0..B {
                        let gvv = g[b * plane + grow + x];
                        for kx in 0..K {
                            tail[tidx + b * K + kx] += gvv * src[rbase + x + kx * dil];
                        }
                    }
                    x += 1;
                }
            }
        }
    }
    for ci in 0..cin {
        for ky in 0..K {
            for b in 0..B {
                for kx in 0..K {
                    let o = (ci * K + ky) * stride + (b * K + kx) * WLANES;
                    let s: f64 = part[o..o + WLANES].iter().sum::<f64>() + tail[((ci * K + ky) * B + b) * K + kx];
                    gw[(((co0 + b) * cin + ci) * K + ky) * K + kx] += s;
                }
            }
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod simd {
    use std::arch::x86_64::*;

    pub const FWD_LANES: usize = 16;

    /// Sixteen output pixels for eight output channels.
    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    pub unsafe fn forward_chunk8<const K: usize>(
        src: *const f64,
        (ph, pw): (usize, usize),
        cin: usize,
        dil: usize,
        packed: *const f64,
        bias: &[f64],
        out: *mut f64,
        plane: usize,
        y: usize,
        x: usize,
        relu: bool,
    ) {
        let mut acc = [_mm512_setzero_pd(); 16];
        for b in 0..8 {
            let v = _mm512_set1_pd(bias[b]);
            acc[2 * b] = v;
            acc[2 * b + 1] = v;
        }
        let mut wp = packed;
        for ci in 0..cin {
            let cbase = ci * ph * pw;
            for ky in 0..K {
                let row = src.add(cbase + (y + ky * dil) * pw + x);
                for kx in 0..K {
                    let p = row.add(kx * dil);
                    let s0 = _mm512_loadu_pd(p);
                    let s1 = _mm512_loadu_pd(p.add(8));
                    for b in 0..8 {
                        let wb = _mm512_set1_pd(*wp.add(b));
                        acc[2 * b] = _mm512_fmadd_pd(wb, s0, acc[2 * b]);
                        acc[2 * b + 1] = _mm512_fmadd_pd(wb, s1, acc[2 * b + 1]);
                    }
                    wp = wp.add(8);
                }
            }
        }
        let zero = _mm512_setzero_pd();
        for b in 0..8 {
            let (mut a0, mut a1) = (acc[2 * b], acc[2 * b + 1]);
            if relu {
                a0 = _mm512_max_pd(a0, zero);
                a1 = _mm512_max_pd(a1, zero);
            }
            let dst = out.add(b * plane);
            _mm512_storeu_pd(dst, a0);
            _mm512_storeu_pd(dst.add(8), a1);
        }
    }

    /// One row of the weight gradient for four output channels; adds the
    /// eight-lane partials into `part` laid out `[b][kx][lane]`.
    #[inline(always)]
    pub unsafe fn wgrad_row4<const K: usize>(
        g: *const f64,
        plane: usize,
        src: *const f64,
        dil: usize,
        chunks: usize,
        part: *mut f64,
    ) {
        let mut acc = [[_mm512_setzero_pd(); K]; 4];
        for c in 0..chunks {
            let x = c * 8;
            let gv = [
                _mm512_loadu_pd(g.add(x)),
                _mm512_loadu_pd(g.add(plane + x)),
                _mm512_loadu_pd(g.add(2 * plane + x)),
                _mm512_loadu_pd(g.add(3 * plane + x)),
            ];
            for kx in 0..K {
                let s = _mm512_loadu_pd(src.add(x + kx * dil));
                for b in 0..4 {
                    acc[b][kx] = _mm512_fmadd_pd(gv[b], s, acc[b][kx]);
                }
            }
        }
        for b in 0..4 {
            for kx in 0..K {
                let p = part.add((b * K + kx) * 8);
                _mm512_storeu_pd(p, _mm512_add_pd(_mm512_loadu_pd(p), acc[b][kx]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Textbook nested-loop correlation with zero padding.
    fn naive(input: &Tensor, s: ConvShape, wt: &[f64], bias: &[f64]) -> Tensor {
        let (h, w) = (input.height, input.width);
        let k = s.kernel as isize;
        let c = k / 2;
        let d = s.dilation as isize;
        let mut out = Tensor::zeros(s.cout, h, w);
        for co in 0..s.cout {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[co];
                    for ci in 0..s.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = y + (ky - c) * d;
                                let xx = x + (kx - c) * d;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += wt[((co * s.cin + ci) * s.kernel + ky as usize) * s.kernel + kx as usize]
                                    * input.at(ci, yy as usize, xx as usize);
                            }
                        }
                    }
                    out.data[(co * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
        out
    }

    fn shapes() -> Vec<(ConvShape, usize, usize)> {
        vec![
            (ConvShape { cin: 3, cout: 8, kernel: 3, dilation: 1 }, 20, 37),
            (ConvShape { cin: 8, cout: 16, kernel: 3, dilation: 4 }, 17, 16),
            (ConvShape { cin: 16, cout: 1, kernel: 1, dilation: 1 }, 9, 33),
            (ConvShape { cin: 2, cout: 9, kernel: 3, dilation: 8 }, 12, 19),
        ]
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (s, h, w) in shapes() {
            let x = random(&mut rng, s.cin, h, w);
            let wt: Vec<f64> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..s.cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv2d(&x, s, &wt, &b, false);
            let want = naive(&x, s, &wt, &b);
            for (g, e) in got.data.iter().zip(&want.data) {
                assert!((g - e).abs() < 1e-12, "{s:?}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x), g> = <x, conv_input_grad(g)> and d<conv(x), g>/dw = conv_weight_grad
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (s, h, w) in shapes() {
            let x = random(&mut rng, s.cin, h, w);
            let g = random(&mut rng, s.cout, h, w);
            let wt: Vec<f64> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zero_b = vec![0.0; s.cout];
            let y = conv2d(&x, s, &wt, &zero_b, false);
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let gx = conv2d_input_grad(&g, s, &wt);
            let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

            let mut gw = vec![0.0; s.weight_len()];
            let mut gb = vec![0.0; s.cout];
            conv2d_weight_grad(&x, &g, s, &mut gw, &mut gb);
            let rhs_w: f64 = gw.iter().zip(&wt).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
            let bsum: Vec<f64> = (0..s.cout).map(|c| g.plane(c).iter().sum()).collect();
            for (a, b) in gb.iter().zip(&bsum) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fused_relu_clamps_negative_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ConvShape { cin: 2, cout: 8, kernel: 3, dilation: 1 };
        let x = random(&mut rng, 2, 8, 24);
        let wt: Vec<f64> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.0; 8];
        let lin = conv2d(&x, s, &wt, &b, false);
        let rel = conv2d(&x, s, &wt, &b, true);
        for (l, r) in lin.data.iter().zip(&rel.data) {
            assert_eq!(*r, l.max(0.0));
        }
    }
}

/// Dense planar `channels × height × width` array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with a zero border of `pad` pixels on every side.
    pub fn zero_padded(&self, pad: usize) -> Tensor {
        if pad == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(self.channels, ph, pw);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let start = (y + pad) * pw + pad;
                dst[start..start + w].copy_from_slice(row);
            }
        }
        out
    }

    /// Stack channels of several same-sized tensors.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].height, parts[0].width);
        let channels = parts.iter().map(|t| t.channels).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for t in parts {
            assert!(t.height == h && t.width == w, "concat spatial mismatch");
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(channels, h, w, data)
    }
}

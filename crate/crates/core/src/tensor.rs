//! Dense NCHW tensors backed by flat `f64` storage.
//!
//! Activations, images and weights all share this type; weight tensors reuse
//! the four axes as `[out, in, kh, kw]` and per-channel vectors as
//! `[c, 1, 1, 1]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a feature map: `(batch, channels, height, width)`, all >= 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorSpec {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config("tensor spec fields must all be >= 1".into()));
        }
        Ok(Self { batch, channels, height, width })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Input(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform values in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        debug_assert!(n < self.shape[0] && c < self.shape[1] && h < self.shape[2] && w < self.shape[3]);
        self.data[((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        debug_assert!(n < self.shape[0] && c < self.shape[1] && h < self.shape[2] && w < self.shape[3]);
        &mut self.data[((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w]
    }

    pub fn reshape(&self, shape: [usize; 4]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Input(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Keep the listed entries along axis 0 (e.g. conv output channels).
    pub fn select_dim0(&self, keep: &[usize]) -> Tensor {
        let [d0, d1, d2, d3] = self.shape;
        let inner = d1 * d2 * d3;
        let mut data = Vec::with_capacity(keep.len() * inner);
        for &i in keep {
            debug_assert!(i < d0);
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        Tensor { shape: [keep.len(), d1, d2, d3], data }
    }

    /// Keep the listed entries along axis 1 (e.g. conv input channels).
    pub fn select_dim1(&self, keep: &[usize]) -> Tensor {
        let [d0, d1, d2, d3] = self.shape;
        let inner = d2 * d3;
        let mut data = Vec::with_capacity(d0 * keep.len() * inner);
        for o in 0..d0 {
            for &i in keep {
                debug_assert!(i < d1);
                let base = (o * d1 + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        Tensor { shape: [d0, keep.len(), d2, d3], data }
    }

    /// Bilinear resize of every (batch, channel) plane to `oh x ow`.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        if oh == h && ow == w {
            return self.clone();
        }
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let sy = h as f64 / oh as f64;
        let sx = w as f64 / ow as f64;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    // pixel-center alignment
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let wy = fy - y0 as f64;
                    for x in 0..ow {
                        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        let x0 = fx.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let wx = fx - x0 as f64;
                        let v = self.at(b, ch, y0, x0) * (1.0 - wy) * (1.0 - wx)
                            + self.at(b, ch, y0, x1) * (1.0 - wy) * wx
                            + self.at(b, ch, y1, x0) * wy * (1.0 - wx)
                            + self.at(b, ch, y1, x1) * wy * wx;
                        *out.at_mut(b, ch, y, x) = v;
                    }
                }
            }
        }
        out
    }

    /// Crop rows `y0..y1` and columns `x0..x1` (exclusive ends, row-major slice).
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if y0 >= y1 || x0 >= x1 || y1 > h || x1 > w {
            return Err(Error::Input(format!(
                "invalid crop rows {}..{} cols {}..{} of {}x{}",
                y0, y1, x0, x1, h, w
            )));
        }
        let mut out = Tensor::zeros([n, c, y1 - y0, x1 - x0]);
        for b in 0..n {
            for ch in 0..c {
                for y in y0..y1 {
                    for x in x0..x1 {
                        *out.at_mut(b, ch, y - y0, x - x0) = self.at(b, ch, y, x);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_zero_dims() {
        assert!(TensorSpec::new(0, 3, 4, 4).is_err());
        assert!(TensorSpec::new(1, 3, 4, 4).is_ok());
    }

    #[test]
    fn indexing_round_trip() {
        let mut t = Tensor::zeros([2, 3, 4, 5]);
        *t.at_mut(1, 2, 3, 4) = 7.5;
        assert_eq!(t.at(1, 2, 3, 4), 7.5);
        assert_eq!(t.data()[t.numel() - 1], 7.5);
    }

    #[test]
    fn select_dims() {
        let t = Tensor::from_vec([2, 3, 1, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let d0 = t.select_dim0(&[1]);
        assert_eq!(d0.data(), &[3.0, 4.0, 5.0]);
        let d1 = t.select_dim1(&[0, 2]);
        assert_eq!(d1.data(), &[0.0, 2.0, 3.0, 5.0]);
    }

    #[test]
    fn resize_identity_and_mean_preserving_on_constant() {
        let t = Tensor::filled([1, 1, 5, 7], 0.3);
        let r = t.resize_bilinear(3, 4);
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let same = t.resize_bilinear(5, 7);
        assert_eq!(same, t);
    }
}

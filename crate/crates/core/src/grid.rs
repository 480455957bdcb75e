//! `ImageGrid`: the H×W×D real-valued grid used for noisy states x_t,
//! predicted denoised observations, and panoramas alike.
//!
//! Storage is row-major `(y, x, c) -> (y*W + x)*D + c` in f64. All numerical
//! modules operate on this one type; there is no separate latent type because
//! the decoder is treated as the identity.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        assert!(h > 0 && w > 0 && d > 0, "grid dims must be positive");
        ImageGrid { h, w, d, data: vec![0.0; h * w * d] }
    }

    pub fn constant(h: usize, w: usize, d: usize, v: f64) -> Self {
        let mut g = Self::zeros(h, w, d);
        g.data.fill(v);
        g
    }

    /// 1×1×1 grid holding a single value; scalar test cases use this.
    pub fn scalar(v: f64) -> Self {
        ImageGrid { h: 1, w: 1, d: 1, data: vec![v] }
    }

    pub fn from_vec(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::Shape {
                expected: format!("{}x{}x{} = {} values", h, w, d, h * w * d),
                got: format!("{} values", data.len()),
            });
        }
        assert!(h > 0 && w > 0 && d > 0, "grid dims must be positive");
        Ok(ImageGrid { h, w, d, data })
    }

    pub fn from_fn(h: usize, w: usize, d: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut g = Self::zeros(h, w, d);
        for y in 0..h {
            for x in 0..w {
                for c in 0..d {
                    g.data[(y * w + x) * d + c] = f(y, x, c);
                }
            }
        }
        g
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.h && x < self.w && c < self.d);
        (y * self.w + x) * self.d + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid { h: self.h, w: self.w, d: self.d, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(ImageGrid { h: self.h, w: self.w, d: self.d, data })
    }

    /// self += a * other, elementwise.
    pub fn add_scaled(&mut self, a: f64, other: &ImageGrid) -> Result<()> {
        self.check_same_shape(other)?;
        for (s, &o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for v in &mut self.data {
            *v *= a;
        }
    }
}

/// Bit-level equality: shapes equal and every element has the same f64 bit
/// pattern. Stricter than `==` (distinguishes -0.0 from 0.0, treats equal
/// NaN payloads as equal) and the right notion for determinism contracts.
pub fn bits_eq(a: &ImageGrid, b: &ImageGrid) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_channel_minor() {
        let g = ImageGrid::from_fn(2, 3, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        assert_eq!(g.get(0, 0, 0), 0.0);
        assert_eq!(g.get(0, 0, 1), 1.0);
        assert_eq!(g.get(0, 1, 0), 10.0);
        assert_eq!(g.get(1, 2, 1), 121.0);
        // flat layout: (y*W [+] x)*D + c
        assert_eq!(g.data()[(1 * 3 + 2) * 2 + 1], 121.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = ImageGrid::from_vec(2, 2, 1, vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn zip_map_rejects_shape_mismatch() {
        let a = ImageGrid::zeros(2, 2, 1);
        let b = ImageGrid::zeros(2, 3, 1);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
    }

    #[test]
    fn add_scaled_is_axpy() {
        let mut a = ImageGrid::constant(1, 2, 1, 1.0);
        let b = ImageGrid::from_vec(1, 2, 1, vec![2.0, -4.0]).unwrap();
        a.add_scaled(0.5, &b).unwrap();
        assert_eq!(a.data(), &[2.0, -1.0]);
    }

    #[test]
    fn bits_eq_distinguishes_signed_zero() {
        let a = ImageGrid::scalar(0.0);
        let b = ImageGrid::scalar(-0.0);
        assert_eq!(a, b); // f64 == glosses over the sign
        assert!(!bits_eq(&a, &b));
        assert!(bits_eq(&a, &a.clone()));
    }
}

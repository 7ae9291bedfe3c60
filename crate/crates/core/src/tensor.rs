//! Dense channel-major buffers.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tiling::PixelRect;

/// Channels × rows × columns.
///
/// Convolution weights reuse the same triple as `(out, in, k·k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(alloc::format!(
                "{} values for shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1),
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        let i = (c * self.shape.h + y) * self.shape.w + x;
        &mut self.data[i]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.sum_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Copies `rect` out of every channel. No interpolation.
    pub fn crop(&self, rect: PixelRect) -> Result<Tensor<T>> {
        rect.check_inside(self.shape.h, self.shape.w)?;
        let s = self.shape;
        let mut out = Vec::with_capacity(s.c * rect.height * rect.width);
        for c in 0..s.c {
            for y in rect.top..rect.top + rect.height {
                let row = (c * s.h + y) * s.w;
                out.extend_from_slice(&self.data[row + rect.left..row + rect.left + rect.width]);
            }
        }
        Ok(Tensor {
            shape: Shape::new(s.c, rect.height, rect.width),
            data: out,
        })
    }

    /// Adds `patch` into the region `rect` of `self`.
    pub fn paste_add(&mut self, patch: &Tensor<T>, rect: PixelRect) -> Result<()> {
        rect.check_inside(self.shape.h, self.shape.w)?;
        let ps = patch.shape;
        if ps.c != self.shape.c || ps.h != rect.height || ps.w != rect.width {
            return Err(Error::Shape(alloc::format!(
                "paste of {} into rect {}x{} with {} channels",
                ps,
                rect.height,
                rect.width,
                self.shape.c
            )));
        }
        let s = self.shape;
        for c in 0..s.c {
            for y in 0..rect.height {
                let dst = (c * s.h + rect.top + y) * s.w + rect.left;
                let src = (c * ps.h + y) * ps.w;
                for x in 0..rect.width {
                    self.data[dst + x] += patch.data[src + x];
                }
            }
        }
        Ok(())
    }

    /// Stacks channels of `self` followed by channels of `other`.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.h != other.shape.h || self.shape.w != other.shape.w {
            return Err(Error::Shape(alloc::format!(
                "concat of {} and {}",
                self.shape,
                other.shape
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            shape: Shape::new(self.shape.c + other.shape.c, self.shape.h, self.shape.w),
            data,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Per-pixel argmax over channels; ties resolve to the lowest index.
    pub fn argmax_channels(&self) -> Mask {
        let s = self.shape;
        let plane = s.plane();
        let mut labels = vec![0u8; plane];
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = self.data[i];
            for c in 1..s.c {
                let v = self.data[c * plane + i];
                if v > best {
                    best = v;
                    *label = c as u8;
                }
            }
        }
        Mask {
            h: s.h,
            w: s.w,
            data: labels,
        }
    }
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        Mask {
            h,
            w,
            data: vec![label; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(alloc::format!(
                "{} labels for a {}x{} mask",
                data.len(),
                h,
                w
            )));
        }
        Ok(Mask { h, w, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn crop(&self, rect: PixelRect) -> Result<Mask> {
        rect.check_inside(self.h, self.w)?;
        let mut data = Vec::with_capacity(rect.height * rect.width);
        for y in rect.top..rect.top + rect.height {
            let row = y * self.w;
            data.extend_from_slice(&self.data[row + rect.left..row + rect.left + rect.width]);
        }
        Ok(Mask {
            h: rect.height,
            w: rect.width,
            data,
        })
    }

    pub fn paste(&mut self, patch: &Mask, top: usize, left: usize) -> Result<()> {
        PixelRect::new(top, left, patch.h, patch.w).check_inside(self.h, self.w)?;
        for y in 0..patch.h {
            let dst = (top + y) * self.w + left;
            self.data[dst..dst + patch.w].copy_from_slice(&patch.data[y * patch.w..(y + 1) * patch.w]);
        }
        Ok(())
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Nearest-neighbour resampling (source pixel `floor((i + 0.5) * in / out)`).
    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        let ys: Vec<usize> = (0..h).map(|y| nearest_index(y, self.h, h)).collect();
        let xs: Vec<usize> = (0..w).map(|x| nearest_index(x, self.w, w)).collect();
        let mut data = Vec::with_capacity(h * w);
        for &sy in &ys {
            let row = sy * self.w;
            data.extend(xs.iter().map(|&sx| self.data[row + sx]));
        }
        Mask { h, w, data }
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

#[inline]
fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    // exact integer form of floor((i + 0.5) * src / dst)
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_ramp() {
        let t = Tensor::<f32>::from_fn(Shape::new(1, 4, 4), |_, y, x| (4 * y + x) as f32);
        let c = t.crop(PixelRect::new(1, 1, 2, 2)).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f32>::from_vec(Shape::new(2, 1, 2), alloc::vec![1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.argmax_channels().data, alloc::vec![0, 1]);
    }

    #[test]
    fn nearest_resize_identity() {
        let m = Mask::from_vec(2, 3, alloc::vec![0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(m.resize_nearest(2, 3), m);
        let up = m.resize_nearest(4, 6);
        assert_eq!(up.at(3, 5), 0);
        assert_eq!(up.at(0, 2), 1);
    }
}

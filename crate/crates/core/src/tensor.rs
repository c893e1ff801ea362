//! Dense rank-4 arrays in (batch, channel, height, width) layout.
//!
//! Values are stored row-major, immutable through the public operation
//! surface: every operation returns a fresh tensor. The layout is fixed so
//! that convolution indexing and the on-disk format stay unambiguous.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a [`Tensor4`]: batch, channels, height, width; all >= 1.
pub type Shape4 = (usize, usize, usize, usize);

fn checked_volume(shape: Shape4) -> Result<usize> {
    let (n, c, h, w) = shape;
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Size(format!(
            "tensor dimensions must all be >= 1, got ({n},{c},{h},{w})"
        )));
    }
    n.checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Size(format!("tensor volume overflows: ({n},{c},{h},{w})")))
}

/// Batched multi-channel 2-D map, the universal value type of the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    /// Tensor with every element equal to `value`.
    pub fn filled(shape: Shape4, value: T) -> Result<Self> {
        let volume = checked_volume(shape)?;
        Ok(Tensor4 { shape, data: vec![value; volume] })
    }

    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    /// Wraps an existing row-major buffer. The length must match the shape.
    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        let volume = checked_volume(shape)?;
        if data.len() != volume {
            return Err(Error::Size(format!(
                "data length {} does not match shape {:?} (volume {})",
                data.len(),
                shape,
                volume
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape.0
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.1
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.2
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.3
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Flat index of (n, c, y, x).
    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let (_, ch, h, w) = self.shape;
        ((n * ch + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    /// Row `y` of channel `c` in batch item `n`, as a contiguous slice.
    #[inline]
    pub fn row(&self, n: usize, c: usize, y: usize) -> &[T] {
        let start = self.index(n, c, y, 0);
        &self.data[start..start + self.shape.3]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize, c: usize, y: usize) -> &mut [T] {
        let start = self.index(n, c, y, 0);
        let w = self.shape.3;
        &mut self.data[start..start + w]
    }

    /// Elementwise sum. Shapes must match exactly; there is no broadcasting.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add requires identical shapes, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor4 { shape: self.shape, data })
    }

    /// Adds `other` into `self` in place. Shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add requires identical shapes, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Concatenates along the channel axis. `self` occupies channels
    /// `[0, c_a)` of the result, `other` channels `[c_a, c_a + c_b)`.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let (n, ca, h, w) = self.shape;
        let (nb, cb, hb, wb) = other.shape;
        if n != nb || h != hb || w != wb {
            return Err(Error::Shape(format!(
                "concat_channels requires matching batch and spatial dims, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor4::zeros((n, ca + cb, h, w))?;
        let plane = h * w;
        for i in 0..n {
            for c in 0..ca {
                let src = self.index(i, c, 0, 0);
                let dst = out.index(i, c, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
            for c in 0..cb {
                let src = other.index(i, c, 0, 0);
                let dst = out.index(i, ca + c, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&other.data[src..src + plane]);
            }
        }
        Ok(out)
    }

    /// Copy of channels `[start, end)`.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (n, c, h, w) = self.shape;
        if start >= end || end > c {
            return Err(Error::Shape(format!(
                "channel slice [{start}, {end}) out of range for {c} channels"
            )));
        }
        let mut out = Tensor4::zeros((n, end - start, h, w))?;
        let plane = h * w;
        for i in 0..n {
            for (dst_c, src_c) in (start..end).enumerate() {
                let src = self.index(i, src_c, 0, 0);
                let dst = out.index(i, dst_c, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Ok(out)
    }

    /// Concatenates along the batch axis; channel and spatial dims must
    /// match.
    pub fn concat_batch(&self, other: &Self) -> Self {
        let (n, c, h, w) = self.shape;
        let (nb, cb, hb, wb) = other.shape;
        assert_eq!((c, h, w), (cb, hb, wb), "concat_batch requires matching item shapes");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor4 { shape: (n + nb, c, h, w), data }
    }

    /// Copy of batch item `n` as a (1, c, h, w) tensor.
    pub fn slice_batch(&self, n: usize) -> Result<Self> {
        let (nn, c, h, w) = self.shape;
        if n >= nn {
            return Err(Error::Shape(format!("batch index {n} out of range for {nn}")));
        }
        let stride = c * h * w;
        let start = n * stride;
        Tensor4::from_vec((1, c, h, w), self.data[start..start + stride].to_vec())
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// Converts the element type, rounding to the destination precision.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64_lossy())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

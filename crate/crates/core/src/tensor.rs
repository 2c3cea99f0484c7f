//! Dense row-major n-dimensional arrays.

use crate::error::{shape_mismatch, Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with row-major storage.
///
/// Activations are laid out `[batch, height, width, channels]`, convolution
/// kernels `[kh, kw, c_in, c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing (channel) axis.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_mismatch("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(shape_mismatch("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Keeps the given indices of the last axis, in the given order.
    pub fn select_last_axis(&self, keep: &[usize]) -> Self {
        let c = self.channels();
        let outer = self.data.len().checked_div(c).unwrap_or(0);
        let mut data = Vec::with_capacity(outer * keep.len());
        for row in self.data.chunks_exact(c.max(1)).take(outer) {
            data.extend(keep.iter().map(|&k| row[k]));
        }
        let mut shape = self.shape.clone();
        if let Some(last) = shape.last_mut() {
            *last = keep.len();
        }
        Self { shape, data }
    }

    /// Keeps the given indices of axis `axis`.
    pub fn select_axis(&self, axis: usize, keep: &[usize]) -> Self {
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &k in keep {
                let start = base + k * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Self { shape, data }
    }

    /// Casts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Concatenates tensors of equal leading shape along the last axis.
    pub fn concat_last_axis(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(shape_mismatch("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = lead.iter().product();
        let total: usize = parts.iter().map(|p| p.channels()).sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for p in parts {
                let c = p.channels();
                data.extend_from_slice(&p.data[o * c..(o + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Self { shape, data })
    }

    /// Rows `[start, end)` of the leading (batch) axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    /// Gathers the given rows of the leading axis.
    pub fn gather_batch(&self, rows: &[usize]) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }
}

use super::real::Real;
use crate::error::{Error, Result};
use crate::volume::Dims;

/// Dense batch tensor `[batch, channels, z, y, x]` with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    batch: usize,
    channels: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(batch: usize, channels: usize, dims: Dims) -> Self {
        Tensor {
            batch,
            channels,
            dims,
            data: vec![T::ZERO; batch * channels * dims.len()],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * channels * dims.len() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match {}x{}x{:?}",
                data.len(),
                batch,
                channels,
                dims.as_array()
            )));
        }
        Ok(Tensor {
            batch,
            channels,
            dims,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn dims(&self) -> Dims {
        self.dims
    }
    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.dims.len()
    }
    pub fn shape(&self) -> [usize; 5] {
        let [nx, ny, nz] = self.dims.as_array();
        [self.batch, self.channels, nz, ny, nx]
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// One sample's `[channels, spatial]` block.
    pub fn sample(&self, b: usize) -> &[T] {
        let s = self.channels * self.spatial();
        &self.data[b * s..(b + 1) * s]
    }
    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let s = self.channels * self.spatial();
        &mut self.data[b * s..(b + 1) * s]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let n = self.spatial();
        let off = (b * self.channels + c) * n;
        &self.data[off..off + n]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.batch == other.batch && self.channels == other.channels && self.dims == other.dims
    }

    pub(crate) fn check_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    /// Concatenates along channels, per sample.
    pub fn concat(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.batch != b.batch || a.dims != b.dims {
            return Err(Error::invalid("concat: batch or spatial mismatch"));
        }
        let mut out = Tensor::zeros(a.batch, a.channels + b.channels, a.dims);
        for s in 0..a.batch {
            let dst = out.sample_mut(s);
            let na = a.sample(s).len();
            dst[..na].copy_from_slice(a.sample(s));
            dst[na..].copy_from_slice(b.sample(s));
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat`]: splits off the first `c` channels.
    pub fn split(&self, c: usize) -> (Tensor<T>, Tensor<T>) {
        let mut a = Tensor::zeros(self.batch, c, self.dims);
        let mut b = Tensor::zeros(self.batch, self.channels - c, self.dims);
        let na = c * self.spatial();
        for s in 0..self.batch {
            let src = self.sample(s);
            a.sample_mut(s).copy_from_slice(&src[..na]);
            b.sample_mut(s).copy_from_slice(&src[na..]);
        }
        (a, b)
    }

    /// Copies a batch of samples out of this tensor.
    pub fn select(&self, indices: &[usize]) -> Tensor<T> {
        let mut out = Tensor::zeros(indices.len(), self.channels, self.dims);
        for (i, &s) in indices.iter().enumerate() {
            out.sample_mut(i).copy_from_slice(self.sample(s));
        }
        out
    }

    /// Stacks single-sample tensors into one batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        let mut batch = 0;
        for t in items {
            if t.channels != first.channels || t.dims != first.dims {
                return Err(Error::invalid("stack: shape mismatch"));
            }
            batch += t.batch;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(batch, first.channels, first.dims, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
